//! Versioned on-disk formats: JSON-lines datasets, JSON reports, CSV export.
//!
//! Every writer goes through [`atomic_write`] (temp file in the target
//! directory + rename), so a crashed run never leaves a truncated file in
//! place. Readers validate format versions and shapes and report the line
//! number of the first offending record. Serialization uses fixed field
//! orders (plain structs, no maps), so identical data always produces
//! identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csd::ResponseFunction;
use crate::error::{Error, Result};
use crate::metrics::{SignedRankMethod, ACC_HISTOGRAM_BINS};
use crate::phantom::{Dataset, DatasetProvenance, LabeledVoxel, PairedVoxel, ProfileSpec};
use crate::sh::{coeff_count, ShVec};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const PREDICTION_FORMAT_VERSION: u32 = 1;
pub const RESPONSE_FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to `path` atomically: the data lands in a temporary file in
/// the same directory, which is then renamed over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Serializes a value as pretty JSON and writes it atomically.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

// ---------------------------------------------------------------------------
// Dataset files (JSON lines)
// ---------------------------------------------------------------------------

/// Scanner profiles echoed into a dataset header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfilesEcho {
    pub truth: ProfileSpec,
    pub a: ProfileSpec,
    pub b: ProfileSpec,
}

/// First line of a dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// Band limit of signal vectors (`x`, `xa`, `xb`).
    pub sh_order_in: usize,
    /// Band limit of truth vectors (`y`).
    pub sh_order_out: usize,
    pub seed: u64,
    pub profiles: ProfilesEcho,
    /// Resolved generator configuration, embedded for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// One dataset line after the header.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetRecord {
    /// Signal coefficients plus ground-truth coefficients.
    Labeled { x: Vec<f64>, y: Vec<f64> },
    /// The same voxel under two acquisition profiles.
    Paired { xa: Vec<f64>, xb: Vec<f64> },
}

/// Writes a dataset file: one JSON header line followed by one JSON record
/// per line.
pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file());
        serde_json::to_writer(&mut w, header)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads and validates a dataset file. Shape errors name the 1-based line.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::malformed(path, "file is empty (missing header line)"))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::malformed(path, format!("line 1: invalid header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::malformed(
            path,
            format!(
                "unsupported dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                header.format_version
            ),
        ));
    }
    let n_in = coeff_count(header.sh_order_in);
    let n_out = coeff_count(header.sh_order_out);
    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, format!("line {lineno}: {e}")))?;
        let check = |name: &str, v: &[f64], expect: usize| -> Result<()> {
            if v.len() != expect {
                return Err(Error::malformed(
                    path,
                    format!(
                        "line {lineno}: field `{name}` has {} coefficients, expected {expect}",
                        v.len()
                    ),
                ));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::malformed(
                    path,
                    format!("line {lineno}: field `{name}` contains a non-finite value"),
                ));
            }
            Ok(())
        };
        match &record {
            DatasetRecord::Labeled { x, y } => {
                check("x", x, n_in)?;
                check("y", y, n_out)?;
            }
            DatasetRecord::Paired { xa, xb } => {
                check("xa", xa, n_in)?;
                check("xb", xb, n_in)?;
            }
        }
        records.push(record);
    }
    Ok((header, records))
}

/// Converts an in-memory dataset into header + records.
pub fn dataset_to_file(
    dataset: &Dataset,
    order_in: usize,
    order_out: usize,
    config: Option<serde_json::Value>,
) -> (DatasetHeader, Vec<DatasetRecord>) {
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        sh_order_in: order_in,
        sh_order_out: order_out,
        seed: dataset.provenance.seed,
        profiles: ProfilesEcho {
            truth: dataset.provenance.profile_truth.clone(),
            a: dataset.provenance.profile_a.clone(),
            b: dataset.provenance.profile_b.clone(),
        },
        config,
    };
    let mut records = Vec::with_capacity(dataset.labeled.len() + dataset.paired.len());
    for v in &dataset.labeled {
        records.push(DatasetRecord::Labeled {
            x: v.signal.coeffs().to_vec(),
            y: v.truth.coeffs().to_vec(),
        });
    }
    for p in &dataset.paired {
        records.push(DatasetRecord::Paired {
            xa: p.a.coeffs().to_vec(),
            xb: p.b.coeffs().to_vec(),
        });
    }
    (header, records)
}

/// Rebuilds an in-memory dataset from a parsed file.
pub fn dataset_from_file(header: &DatasetHeader, records: &[DatasetRecord]) -> Result<Dataset> {
    let mut labeled = Vec::new();
    let mut paired = Vec::new();
    for r in records {
        match r {
            DatasetRecord::Labeled { x, y } => labeled.push(LabeledVoxel {
                signal: ShVec::new(header.sh_order_in, x.clone())?,
                truth: ShVec::new(header.sh_order_out, y.clone())?,
            }),
            DatasetRecord::Paired { xa, xb } => paired.push(PairedVoxel {
                a: ShVec::new(header.sh_order_in, xa.clone())?,
                b: ShVec::new(header.sh_order_in, xb.clone())?,
            }),
        }
    }
    Ok(Dataset {
        labeled,
        paired,
        provenance: DatasetProvenance {
            seed: header.seed,
            profile_truth: header.profiles.truth.clone(),
            profile_a: header.profiles.a.clone(),
            profile_b: header.profiles.b.clone(),
        },
    })
}

// ---------------------------------------------------------------------------
// Prediction files (JSON lines)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub format_version: u32,
    /// Band limit of every predicted coefficient vector.
    pub sh_order: usize,
}

/// One prediction per input record; paired inputs yield both sides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictionRecord {
    Labeled { y: Vec<f64> },
    Paired { ya: Vec<f64>, yb: Vec<f64> },
}

pub fn write_predictions(
    path: &Path,
    header: &PredictionHeader,
    records: &[PredictionRecord],
) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, header)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

pub fn read_predictions(path: &Path) -> Result<(PredictionHeader, Vec<PredictionRecord>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::malformed(path, "file is empty (missing header line)"))?;
    let header: PredictionHeader = serde_json::from_str(first)
        .map_err(|e| Error::malformed(path, format!("line 1: invalid header: {e}")))?;
    if header.format_version != PREDICTION_FORMAT_VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported prediction format version {}", header.format_version),
        ));
    }
    let expect = coeff_count(header.sh_order);
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?;
        let ok = match &record {
            PredictionRecord::Labeled { y } => y.len() == expect,
            PredictionRecord::Paired { ya, yb } => ya.len() == expect && yb.len() == expect,
        };
        if !ok {
            return Err(Error::malformed(
                path,
                format!("line {}: prediction width does not match header", i + 1),
            ));
        }
        records.push(record);
    }
    Ok((header, records))
}

// ---------------------------------------------------------------------------
// Response files (JSON)
// ---------------------------------------------------------------------------

/// Serialized single-fiber response: zonal coefficients at degrees 0..=8.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseFile {
    pub format_version: u32,
    pub r: [f64; 5],
    /// Generator configuration, embedded for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn write_response(
    path: &Path,
    response: &ResponseFunction,
    config: Option<serde_json::Value>,
) -> Result<()> {
    write_json_pretty(
        path,
        &ResponseFile {
            format_version: RESPONSE_FORMAT_VERSION,
            r: response.r,
            config,
        },
    )
}

pub fn read_response(path: &Path) -> Result<(ResponseFunction, Option<serde_json::Value>)> {
    let text = read_to_string(path)?;
    let file: ResponseFile = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path, format!("not a valid response file: {e}")))?;
    if file.format_version != RESPONSE_FORMAT_VERSION {
        return Err(Error::malformed(
            path,
            format!(
                "unsupported response format version {} (expected {RESPONSE_FORMAT_VERSION})",
                file.format_version
            ),
        ));
    }
    let response = ResponseFunction::new(file.r)
        .map_err(|e| Error::malformed(path, format!("invalid response values: {e}")))?;
    Ok((response, file.config))
}

// ---------------------------------------------------------------------------
// Report files (JSON)
// ---------------------------------------------------------------------------

/// Distribution summary of one method on one evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Lower median of the defined correlation values; absent if none.
    pub median: Option<f64>,
    /// [`ACC_HISTOGRAM_BINS`] counts over `[-1, 1]`.
    pub histogram: Vec<u64>,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Paired signed-rank comparison between two methods on one evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub p_value: f64,
    pub w_plus: f64,
    pub n_used: usize,
    pub degenerate: bool,
    pub method: SignedRankMethod,
}

/// All method summaries on one evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalBlock {
    /// Evaluation set name, e.g. `truth`, `pair_seen`, `pair_unseen`.
    pub name: String,
    pub methods: Vec<MethodSummary>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    /// Resolved evaluation configuration.
    pub config: serde_json::Value,
    pub blocks: Vec<EvalBlock>,
    /// Number of deconvolution runs that hit the iteration cap.
    pub csd_unconverged: usize,
}

pub fn write_report(path: &Path, report: &ReportFile) -> Result<()> {
    write_json_pretty(path, report)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let text = read_to_string(path)?;
    let report: ReportFile = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path, format!("not a valid report: {e}")))?;
    if report.format_version != REPORT_FORMAT_VERSION {
        return Err(Error::malformed(
            path,
            format!(
                "unsupported report format version {} (expected {REPORT_FORMAT_VERSION})",
                report.format_version
            ),
        ));
    }
    for block in &report.blocks {
        for m in &block.methods {
            if m.histogram.len() != ACC_HISTOGRAM_BINS {
                return Err(Error::malformed(
                    path,
                    format!(
                        "block `{}` method `{}`: histogram has {} bins, expected {ACC_HISTOGRAM_BINS}",
                        block.name,
                        m.method,
                        m.histogram.len()
                    ),
                ));
            }
        }
    }
    Ok(report)
}

/// Renders every histogram in the report as CSV with columns
/// `block,method,bin_low,bin_high,count`.
pub fn report_histograms_csv(report: &ReportFile) -> String {
    let mut out = String::from("block,method,bin_low,bin_high,count\n");
    let width = 2.0 / ACC_HISTOGRAM_BINS as f64;
    for block in &report.blocks {
        for m in &block.methods {
            for (i, c) in m.histogram.iter().enumerate() {
                let lo = -1.0 + width * i as f64;
                let hi = -1.0 + width * (i + 1) as f64;
                out.push_str(&format!("{},{},{lo},{hi},{c}\n", block.name, m.method));
            }
        }
    }
    out
}

/// Parses CSV produced by [`report_histograms_csv`] back into
/// `(block, method) -> histogram` entries, in file order.
pub fn parse_histograms_csv(text: &str) -> Result<Vec<(String, String, Vec<u64>)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "block,method,bin_low,bin_high,count" {
        return Err(Error::invalid_input(format!(
            "unexpected CSV header `{header}`"
        )));
    }
    let mut out: Vec<(String, String, Vec<u64>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::invalid_input(format!(
                "CSV line {}: expected 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let count: u64 = fields[4]
            .parse()
            .map_err(|e| Error::invalid_input(format!("CSV line {}: bad count: {e}", i + 2)))?;
        match out.last_mut() {
            Some((b, m, hist))
                if *b == fields[0] && *m == fields[1] && hist.len() < ACC_HISTOGRAM_BINS =>
            {
                hist.push(count)
            }
            _ => out.push((fields[0].to_string(), fields[1].to_string(), vec![count])),
        }
    }
    for (b, m, hist) in &out {
        if hist.len() != ACC_HISTOGRAM_BINS {
            return Err(Error::invalid_input(format!(
                "histogram `{b}`/`{m}` has {} bins, expected {ACC_HISTOGRAM_BINS}",
                hist.len()
            )));
        }
    }
    Ok(out)
}
