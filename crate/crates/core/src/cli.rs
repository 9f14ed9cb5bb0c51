//! Experiment driver behind the `nsdn` binary: resolved subcommand
//! configurations and their implementations.
//!
//! Each `cmd_*` function takes a fully resolved configuration and works only
//! through the file formats in [`crate::formats`], so the binary, tests, and
//! other front ends share one code path. Every output file embeds the
//! configuration that produced it; re-running a subcommand with that embedded
//! configuration regenerates the file byte-for-byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csd::{csd_deconvolve, estimate_response, CsdConfig, ResponseFunction};
use crate::error::{Error, Result};
use crate::formats::{
    self, dataset_to_file, DatasetRecord, MethodSummary, PairwiseTest, PredictionHeader,
    PredictionRecord, ReportFile, EvalBlock, PREDICTION_FORMAT_VERSION, REPORT_FORMAT_VERSION,
};
use crate::metrics::{acc_batch, signed_rank_test, AccReport, SignedRankMethod};
use crate::net::{train, MlpModel, TrainConfig};
use crate::phantom::{
    make_dataset, simulate_signal, Dataset, DatasetSpec, FiberMix, ProfileSpec, TensorCompartment,
    TensorShape, VoxelPhantom, DEFAULT_FOD_ORDER, DEFAULT_SIGNAL_ORDER,
};
use crate::sh::{coeff_count, ShVec};
use crate::sphere::Direction;

// File names written into the output directory.
pub const TRAIN_LABELED_FILE: &str = "train_labeled.jsonl";
pub const BLIND_LABELED_FILE: &str = "blind_labeled.jsonl";
pub const TRAIN_PAIRED_FILE: &str = "train_paired.jsonl";
pub const EVAL_PAIRED_SEEN_FILE: &str = "eval_paired_seen.jsonl";
pub const EVAL_PAIRED_UNSEEN_FILE: &str = "eval_paired_unseen.jsonl";
pub const RESPONSE_FILE: &str = "response.json";
pub const REPORT_FILE: &str = "report.json";
pub const HISTOGRAM_CSV_FILE: &str = "report_histograms.csv";

pub fn model_file(name: &str) -> String {
    format!("model_{name}.json")
}

pub fn cv_file(name: &str) -> String {
    format!("cv_{name}.json")
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

/// Optional JSON configuration file with one section per concern. Missing
/// sections and fields fall back to defaults; command-line flags override
/// individual fields on top.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub simulate: SimulateConfig,
    pub train: TrainConfig,
    pub csd: CsdConfig,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = formats::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::malformed(p, format!("not a valid configuration file: {e}")))
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Resolved configuration of the `simulate` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    /// Labeled training entries; must be a multiple of `rotations + 1`.
    /// One labeled pool of `train_labeled + blind_labeled` entries is drawn
    /// and split at an augmentation-group boundary, the tail becoming the
    /// withheld blind set.
    pub train_labeled: usize,
    /// Labeled entries withheld for blind evaluation; same multiplicity rule.
    pub blind_labeled: usize,
    /// Paired entries for training, acquired under (`profile_a`, `profile_b`).
    pub train_paired: usize,
    /// Fresh, unaugmented paired voxels per held-out pair file.
    pub eval_paired: usize,
    /// Extra random whole-voxel rotations per base voxel in the training
    /// pools (each base voxel yields `rotations + 1` entries).
    pub rotations: usize,
    /// Acquisition used for labeled voxels (the reference scanner).
    pub profile_truth: ProfileSpec,
    /// First scanner of the training pair.
    pub profile_a: ProfileSpec,
    /// Second scanner of the training pair.
    pub profile_b: ProfileSpec,
    /// Scanner never seen in training; evaluation pairs it with `profile_a`.
    pub profile_c: ProfileSpec,
    pub fiber: FiberMix,
    pub tensor: TensorShape,
    pub order_in: usize,
    pub order_out: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            seed: 42,
            train_labeled: 5000,
            blind_labeled: 1000,
            train_paired: 5000,
            eval_paired: 1000,
            rotations: 99,
            profile_truth: "dirs=96,b=2000,sigma=0.04,gain=1,rot=0".parse().unwrap(),
            profile_a: "dirs=96,b=2000,sigma=0.02,gain=1,rot=0".parse().unwrap(),
            profile_b: "dirs=96,b=2000,sigma=0.04,gain=1.1,rot=1".parse().unwrap(),
            profile_c: "dirs=90,b=2000,sigma=0.03,gain=0.9,rot=2".parse().unwrap(),
            fiber: FiberMix::default(),
            tensor: TensorShape::default(),
            order_in: DEFAULT_SIGNAL_ORDER,
            order_out: DEFAULT_FOD_ORDER,
        }
    }
}

impl SimulateConfig {
    /// Entries per augmentation group.
    fn group(&self) -> usize {
        self.rotations + 1
    }

    fn validate(&self) -> Result<()> {
        for (name, count) in [
            ("train_labeled", self.train_labeled),
            ("blind_labeled", self.blind_labeled),
        ] {
            if count == 0 || count % self.group() != 0 {
                return Err(Error::invalid_config(format!(
                    "{name} ({count}) must be a positive multiple of rotations + 1 ({})",
                    self.group()
                )));
            }
        }
        if self.eval_paired == 0 {
            return Err(Error::invalid_config("eval_paired must be positive"));
        }
        Ok(())
    }
}

/// Paths written by [`cmd_simulate`].
#[derive(Clone, Debug)]
pub struct SimulateOutputs {
    pub train_labeled: PathBuf,
    pub blind_labeled: PathBuf,
    pub train_paired: PathBuf,
    pub eval_paired_seen: PathBuf,
    pub eval_paired_unseen: PathBuf,
    pub response: PathBuf,
}

impl SimulateOutputs {
    pub fn files(&self) -> [&Path; 6] {
        [
            &self.train_labeled,
            &self.blind_labeled,
            &self.train_paired,
            &self.eval_paired_seen,
            &self.eval_paired_unseen,
            &self.response,
        ]
    }
}

fn echo(cfg: &SimulateConfig, role: &str) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "role": role, "simulate": cfg }))
}

/// Generates every input the rest of the pipeline needs:
///
/// * labeled voxels under the reference scanner, split into a training file
///   and a blind evaluation file at augmentation-group boundaries (so no
///   rotated copy of a training voxel leaks into the blind set),
/// * paired training voxels under scanners A/B,
/// * fresh unaugmented evaluation pairs for the seen pair (A, B) and the
///   unseen pair (A, C), with base voxel pools disjoint from training by
///   seed derivation,
/// * the noiseless single-fiber response of the configured tensor.
pub fn cmd_simulate(cfg: &SimulateConfig, out_dir: &Path) -> Result<SimulateOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Build every profile up front so a malformed one aborts before any
    // file is touched.
    for p in [
        &cfg.profile_truth,
        &cfg.profile_a,
        &cfg.profile_b,
        &cfg.profile_c,
    ] {
        p.build()?;
    }

    let out = SimulateOutputs {
        train_labeled: out_dir.join(TRAIN_LABELED_FILE),
        blind_labeled: out_dir.join(BLIND_LABELED_FILE),
        train_paired: out_dir.join(TRAIN_PAIRED_FILE),
        eval_paired_seen: out_dir.join(EVAL_PAIRED_SEEN_FILE),
        eval_paired_unseen: out_dir.join(EVAL_PAIRED_UNSEEN_FILE),
        response: out_dir.join(RESPONSE_FILE),
    };

    // Training pools plus the blind labeled set, all from one seed.
    let main_spec = DatasetSpec {
        n_labeled: cfg.train_labeled + cfg.blind_labeled,
        n_paired: cfg.train_paired,
        n_rotations: cfg.rotations,
        fiber: cfg.fiber.clone(),
        tensor: cfg.tensor,
        order_in: cfg.order_in,
        order_out: cfg.order_out,
    };
    let main = make_dataset(
        &main_spec,
        &cfg.profile_truth,
        &cfg.profile_a,
        &cfg.profile_b,
        cfg.seed,
    )?;
    let split_at = cfg.train_labeled;

    let mut train_ds = Dataset {
        labeled: main.labeled[..split_at].to_vec(),
        paired: Vec::new(),
        provenance: main.provenance.clone(),
    };
    let (header, records) = dataset_to_file(
        &train_ds,
        cfg.order_in,
        cfg.order_out,
        Some(echo(cfg, "train_labeled")?),
    );
    formats::write_dataset(&out.train_labeled, &header, &records)?;

    train_ds.labeled = main.labeled[split_at..].to_vec();
    let (header, records) = dataset_to_file(
        &train_ds,
        cfg.order_in,
        cfg.order_out,
        Some(echo(cfg, "blind_labeled")?),
    );
    formats::write_dataset(&out.blind_labeled, &header, &records)?;

    let paired_ds = Dataset {
        labeled: Vec::new(),
        paired: main.paired,
        provenance: main.provenance.clone(),
    };
    let (header, records) = dataset_to_file(
        &paired_ds,
        cfg.order_in,
        cfg.order_out,
        Some(echo(cfg, "train_paired")?),
    );
    formats::write_dataset(&out.train_paired, &header, &records)?;

    // Held-out pairs: fresh independent voxels (no rotation augmentation, so
    // the pair statistics are over independent draws), from derived seeds.
    let eval_spec = DatasetSpec {
        n_labeled: 0,
        n_paired: cfg.eval_paired,
        n_rotations: 0,
        ..main_spec.clone()
    };
    let seen = make_dataset(
        &eval_spec,
        &cfg.profile_truth,
        &cfg.profile_a,
        &cfg.profile_b,
        cfg.seed.wrapping_add(1),
    )?;
    let (header, records) = dataset_to_file(
        &seen,
        cfg.order_in,
        cfg.order_out,
        Some(echo(cfg, "eval_paired_seen")?),
    );
    formats::write_dataset(&out.eval_paired_seen, &header, &records)?;

    let unseen = make_dataset(
        &eval_spec,
        &cfg.profile_truth,
        &cfg.profile_a,
        &cfg.profile_c,
        cfg.seed.wrapping_add(2),
    )?;
    let (header, records) = dataset_to_file(
        &unseen,
        cfg.order_in,
        cfg.order_out,
        Some(echo(cfg, "eval_paired_unseen")?),
    );
    formats::write_dataset(&out.eval_paired_unseen, &header, &records)?;

    // Single-fiber response of the configured tensor on the reference
    // scheme, noiseless and at unit gain.
    let clean = ProfileSpec {
        sigma: 0.0,
        gain: 1.0,
        rotation_seed: 0,
        ..cfg.profile_truth
    }
    .build()?;
    let fiber_voxel = VoxelPhantom::new(
        vec![TensorCompartment::new(
            Direction::Z,
            cfg.tensor.axial,
            cfg.tensor.radial,
            1.0,
        )?],
        cfg.order_out,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let signals = simulate_signal(&fiber_voxel, &clean, &mut rng);
    let response = estimate_response(&signals, Direction::Z, &clean.effective_directions())?;
    formats::write_response(&out.response, &response, Some(echo(cfg, "response")?))?;

    Ok(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Resolved configuration of the `train` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub labeled: PathBuf,
    /// Paired dataset; omit to train from labeled data alone.
    pub paired: Option<PathBuf>,
    /// Model name; output files are `model_<name>.json` / `cv_<name>.json`.
    pub name: String,
    /// Also train the plain-network baseline: the identical configuration
    /// and seed with the consistency term disabled, saved as `dn`.
    pub with_dn: bool,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub models: Vec<(String, PathBuf)>,
    pub cv_reports: Vec<(String, PathBuf)>,
}

fn load_training_dataset(run: &TrainRun) -> Result<Dataset> {
    let (header, records) = formats::read_dataset(&run.labeled)?;
    let mut dataset = formats::dataset_from_file(&header, &records)?;
    if let Some(paired) = &run.paired {
        let (pheader, precords) = formats::read_dataset(paired)?;
        if pheader.sh_order_in != header.sh_order_in {
            return Err(Error::invalid_input(format!(
                "paired file band limit {} does not match labeled file band limit {}",
                pheader.sh_order_in, header.sh_order_in
            )));
        }
        let paired_ds = formats::dataset_from_file(&pheader, &precords)?;
        dataset.paired = paired_ds.paired;
    }
    if dataset.labeled.is_empty() {
        return Err(Error::invalid_input(format!(
            "{} contains no labeled records",
            run.labeled.display()
        )));
    }
    Ok(dataset)
}

/// Trains the harmonizer (and optionally its consistency-free twin) and
/// writes model + cross-validation report files.
pub fn cmd_train(run: &TrainRun, out_dir: &Path) -> Result<TrainOutputs> {
    if run.name.is_empty() || !run.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(Error::invalid_config(format!(
            "model name `{}` (use ASCII letters, digits, underscores)",
            run.name
        )));
    }
    if run.with_dn && run.name == "dn" {
        return Err(Error::invalid_config(
            "name `dn` collides with the baseline twin; pick another name or drop with_dn",
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = load_training_dataset(run)?;

    let mut jobs = vec![(run.name.clone(), run.config.clone())];
    if run.with_dn {
        let dn_cfg = TrainConfig {
            lambda: 0.0,
            ..run.config.clone()
        };
        jobs.push(("dn".to_string(), dn_cfg));
    }

    let mut outputs = TrainOutputs {
        models: Vec::new(),
        cv_reports: Vec::new(),
    };
    for (name, cfg) in jobs {
        let outcome = train(&dataset, &cfg)?;
        let provenance = serde_json::json!({
            "name": name,
            "train": cfg,
            "labeled": run.labeled,
            "paired": run.paired,
            "dataset_seed": dataset.provenance.seed,
        });
        let model_path = out_dir.join(model_file(&name));
        outcome.model.save(&model_path, Some(provenance.clone()))?;
        let cv_path = out_dir.join(cv_file(&name));
        formats::write_json_pretty(
            &cv_path,
            &serde_json::json!({
                "format_version": 1,
                "provenance": provenance,
                "report": outcome.report,
            }),
        )?;
        outputs.models.push((name.clone(), model_path));
        outputs.cv_reports.push((name, cv_path));
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// Resolved configuration of the `predict` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictRun {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
}

/// Runs a saved model over every record of a dataset file (both sides for
/// paired records) and writes a prediction file.
pub fn cmd_predict(run: &PredictRun) -> Result<PathBuf> {
    let (model, _) = MlpModel::load(&run.model)?;
    let (header, records) = formats::read_dataset(&run.dataset)?;
    if coeff_count(header.sh_order_in) != model.input_dim() {
        return Err(Error::invalid_input(format!(
            "dataset band limit {} feeds {} coefficients, model expects {}",
            header.sh_order_in,
            coeff_count(header.sh_order_in),
            model.input_dim()
        )));
    }
    let order_in = header.sh_order_in;
    let order_out = header.sh_order_out;
    let predict_one = |x: &[f64]| -> Result<Vec<f64>> {
        let v = ShVec::new(order_in, x.to_vec())?;
        Ok(model.predict(&v)?.into_coeffs())
    };
    let mut out_records = Vec::with_capacity(records.len());
    for r in &records {
        out_records.push(match r {
            DatasetRecord::Labeled { x, .. } => PredictionRecord::Labeled { y: predict_one(x)? },
            DatasetRecord::Paired { xa, xb } => PredictionRecord::Paired {
                ya: predict_one(xa)?,
                yb: predict_one(xb)?,
            },
        });
    }
    if coeff_count(order_out) != model.output_dim() {
        return Err(Error::invalid_input(format!(
            "dataset truth band limit {} does not match model output width {}",
            order_out,
            model.output_dim()
        )));
    }
    let out_header = PredictionHeader {
        format_version: PREDICTION_FORMAT_VERSION,
        sh_order: order_out,
    };
    formats::write_predictions(&run.out, &out_header, &out_records)?;
    Ok(run.out.clone())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Resolved configuration of the `evaluate` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub blind_labeled: PathBuf,
    pub paired_seen: PathBuf,
    pub paired_unseen: PathBuf,
    pub model_nsdn: PathBuf,
    pub model_dn: PathBuf,
    pub response: PathBuf,
    pub csd: CsdConfig,
    pub report_out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct EvaluateOutputs {
    pub report: ReportFile,
    pub path: PathBuf,
}

const METHODS: [&str; 3] = ["nsdn", "dn", "csd"];

struct MethodRunner<'a> {
    nsdn: &'a MlpModel,
    dn: &'a MlpModel,
    response: &'a ResponseFunction,
    csd: &'a CsdConfig,
    csd_unconverged: usize,
}

impl MethodRunner<'_> {
    fn apply(&mut self, method: &str, x: &ShVec) -> Result<ShVec> {
        match method {
            "nsdn" => self.nsdn.predict(x),
            "dn" => self.dn.predict(x),
            "csd" => {
                let outcome = csd_deconvolve(x, self.response, self.csd)?;
                if !outcome.converged {
                    self.csd_unconverged += 1;
                }
                Ok(outcome.fod)
            }
            other => Err(Error::invalid_config(format!("unknown method `{other}`"))),
        }
    }
}

/// Signed-rank comparisons between every pair of per-method value lists,
/// restricted to entries where both methods are defined.
fn pairwise_tests(summaries: &[(String, AccReport)]) -> Result<Vec<PairwiseTest>> {
    let mut tests = Vec::new();
    for i in 0..summaries.len() {
        for j in (i + 1)..summaries.len() {
            let (name_a, rep_a) = &summaries[i];
            let (name_b, rep_b) = &summaries[j];
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (va, vb) in rep_a.values.iter().zip(&rep_b.values) {
                if let (Some(va), Some(vb)) = (va, vb) {
                    a.push(*va);
                    b.push(*vb);
                }
            }
            let result = signed_rank_test(&a, &b)?;
            tests.push(PairwiseTest {
                method_a: name_a.clone(),
                method_b: name_b.clone(),
                p_value: result.p_value,
                w_plus: result.w_plus,
                n_used: result.n_used,
                degenerate: result.degenerate,
                method: result.method,
            });
        }
    }
    Ok(tests)
}

fn block_from(summaries: Vec<(String, AccReport)>, name: &str) -> Result<EvalBlock> {
    let pairwise = pairwise_tests(&summaries)?;
    Ok(EvalBlock {
        name: name.to_string(),
        methods: summaries
            .into_iter()
            .map(|(method, rep)| MethodSummary {
                method,
                median: rep.median,
                histogram: rep.histogram,
                evaluated: rep.evaluated,
                excluded: rep.excluded,
            })
            .collect(),
        pairwise,
    })
}

/// Scores the trained models and the deconvolution baseline on three blocks:
/// correlation against ground truth on blind labeled voxels, and
/// reproducibility across the seen and unseen scanner pairs.
pub fn cmd_evaluate(run: &EvaluateRun) -> Result<EvaluateOutputs> {
    let (nsdn, _) = MlpModel::load(&run.model_nsdn)?;
    let (dn, _) = MlpModel::load(&run.model_dn)?;
    let (response, _) = formats::read_response(&run.response)?;
    let mut runner = MethodRunner {
        nsdn: &nsdn,
        dn: &dn,
        response: &response,
        csd: &run.csd,
        csd_unconverged: 0,
    };

    // Ground-truth block.
    let (header, records) = formats::read_dataset(&run.blind_labeled)?;
    if run.csd.output_order != header.sh_order_out {
        return Err(Error::invalid_config(format!(
            "deconvolution band limit {} does not match truth band limit {}",
            run.csd.output_order, header.sh_order_out
        )));
    }
    let blind = formats::dataset_from_file(&header, &records)?;
    if blind.labeled.is_empty() {
        return Err(Error::invalid_input(format!(
            "{} contains no labeled records",
            run.blind_labeled.display()
        )));
    }
    let truths: Vec<ShVec> = blind.labeled.iter().map(|v| v.truth.clone()).collect();
    let mut truth_summaries = Vec::new();
    for method in METHODS {
        let mut preds = Vec::with_capacity(blind.labeled.len());
        for v in &blind.labeled {
            preds.push(runner.apply(method, &v.signal)?);
        }
        truth_summaries.push((method.to_string(), acc_batch(&preds, &truths)?));
    }
    let mut blocks = vec![block_from(truth_summaries, "truth")?];

    // Reproducibility blocks.
    for (path, name) in [
        (&run.paired_seen, "pair_seen"),
        (&run.paired_unseen, "pair_unseen"),
    ] {
        let (header, records) = formats::read_dataset(path)?;
        let ds = formats::dataset_from_file(&header, &records)?;
        if ds.paired.is_empty() {
            return Err(Error::invalid_input(format!(
                "{} contains no paired records",
                path.display()
            )));
        }
        let mut summaries = Vec::new();
        for method in METHODS {
            let mut lhs = Vec::with_capacity(ds.paired.len());
            let mut rhs = Vec::with_capacity(ds.paired.len());
            for p in &ds.paired {
                lhs.push(runner.apply(method, &p.a)?);
                rhs.push(runner.apply(method, &p.b)?);
            }
            summaries.push((method.to_string(), acc_batch(&lhs, &rhs)?));
        }
        blocks.push(block_from(summaries, name)?);
    }

    let report = ReportFile {
        format_version: REPORT_FORMAT_VERSION,
        config: serde_json::to_value(run)?,
        blocks,
        csd_unconverged: runner.csd_unconverged,
    };
    formats::write_report(&run.report_out, &report)?;
    Ok(EvaluateOutputs {
        report,
        path: run.report_out.clone(),
    })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Resolved configuration of the `report` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRun {
    pub report: PathBuf,
    /// Histogram CSV destination.
    pub csv_out: PathBuf,
}

/// Renders a report as text (returned) and exports its histograms as CSV.
pub fn cmd_report(run: &ReportRun) -> Result<String> {
    let report = formats::read_report(&run.report)?;
    formats::atomic_write(
        &run.csv_out,
        formats::report_histograms_csv(&report).as_bytes(),
    )?;
    Ok(render_report(&report))
}

fn fmt_median(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Human-readable summary: per-block method medians plus pairwise tests with
/// both absolute median differences and relative gains (each labeled, since
/// percentage conventions vary).
pub fn render_report(report: &ReportFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "angular correlation summary");
    for block in &report.blocks {
        let _ = writeln!(s, "\n[{}]", block.name);
        let _ = writeln!(
            s,
            "  {:<6} {:>8} {:>10} {:>9}",
            "method", "median", "evaluated", "excluded"
        );
        for m in &block.methods {
            let _ = writeln!(
                s,
                "  {:<6} {:>8} {:>10} {:>9}",
                m.method,
                fmt_median(m.median),
                m.evaluated,
                m.excluded
            );
        }
        let median_of = |name: &str| -> Option<f64> {
            block
                .methods
                .iter()
                .find(|m| m.method == name)
                .and_then(|m| m.median)
        };
        for t in &block.pairwise {
            let delta = match (median_of(&t.method_a), median_of(&t.method_b)) {
                (Some(ma), Some(mb)) => {
                    let rel = if mb.abs() > 1e-12 {
                        format!("{:+.2}% relative to {}", 100.0 * (ma - mb) / mb, t.method_b)
                    } else {
                        "relative gain undefined".to_string()
                    };
                    format!("median diff {:+.4}, {rel}", ma - mb)
                }
                _ => "median diff undefined".to_string(),
            };
            let method = match t.method {
                SignedRankMethod::Exact => "exact",
                SignedRankMethod::NormalApprox => "normal approx",
            };
            let tail = if t.degenerate {
                " (degenerate: all differences zero)".to_string()
            } else {
                format!(", W+ = {}, n = {}", t.w_plus, t.n_used)
            };
            let _ = writeln!(
                s,
                "  {} vs {}: {delta}; signed-rank p = {:.3e} [{method}]{tail}",
                t.method_a, t.method_b, t.p_value
            );
        }
    }
    let _ = writeln!(
        s,
        "\ndeconvolution runs stopped at the iteration cap: {}",
        report.csd_unconverged
    );
    s
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PipelineOutputs {
    pub simulate: SimulateOutputs,
    pub train: TrainOutputs,
    pub evaluate: EvaluateOutputs,
    pub summary: String,
}

/// Runs the whole default experiment: simulate, train the harmonizer and its
/// consistency-free twin, evaluate all three methods, and render the report.
pub fn cmd_pipeline(cfg: &FileConfig, out_dir: &Path) -> Result<PipelineOutputs> {
    let simulate = cmd_simulate(&cfg.simulate, out_dir)?;
    let train = cmd_train(
        &TrainRun {
            labeled: simulate.train_labeled.clone(),
            paired: Some(simulate.train_paired.clone()),
            name: "nsdn".to_string(),
            with_dn: true,
            config: cfg.train.clone(),
        },
        out_dir,
    )?;
    let evaluate = cmd_evaluate(&EvaluateRun {
        blind_labeled: simulate.blind_labeled.clone(),
        paired_seen: simulate.eval_paired_seen.clone(),
        paired_unseen: simulate.eval_paired_unseen.clone(),
        model_nsdn: out_dir.join(model_file("nsdn")),
        model_dn: out_dir.join(model_file("dn")),
        response: simulate.response.clone(),
        csd: cfg.csd,
        report_out: out_dir.join(REPORT_FILE),
    })?;
    let summary = cmd_report(&ReportRun {
        report: evaluate.path.clone(),
        csv_out: out_dir.join(HISTOGRAM_CSV_FILE),
    })?;
    Ok(PipelineOutputs {
        simulate,
        train,
        evaluate,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small but complete configuration for driver tests: enough voxels for
    /// the signed-rank minimum, low-noise profiles, one training epoch.
    pub(crate) fn tiny_config() -> FileConfig {
        let mut cfg = FileConfig::default();
        cfg.simulate.seed = 7;
        cfg.simulate.train_labeled = 48;
        cfg.simulate.blind_labeled = 12;
        cfg.simulate.rotations = 2;
        cfg.simulate.train_paired = 30;
        cfg.simulate.eval_paired = 12;
        cfg.simulate.profile_truth = "dirs=64,b=2000,sigma=0.04,gain=1,rot=0".parse().unwrap();
        cfg.simulate.profile_a = "dirs=64,b=2000,sigma=0.02,gain=1,rot=0".parse().unwrap();
        cfg.simulate.profile_b = "dirs=64,b=2000,sigma=0.04,gain=1.1,rot=1".parse().unwrap();
        cfg.simulate.profile_c = "dirs=60,b=2000,sigma=0.03,gain=0.9,rot=2".parse().unwrap();
        cfg.train.epochs = 1;
        cfg.train.folds = 2;
        cfg.train.batch_size = 8;
        cfg.train.seed = 3;
        cfg
    }

    #[test]
    fn simulate_config_validation_catches_bad_shapes() {
        let mut cfg = SimulateConfig::default();
        cfg.train_labeled = 5001; // not a multiple of rotations + 1
        assert!(matches!(
            cmd_simulate(&cfg, Path::new("/nonexistent")),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = SimulateConfig::default();
        cfg.blind_labeled = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimulateConfig::default();
        cfg.eval_paired = 0;
        assert!(cfg.validate().is_err());
        assert!(SimulateConfig::default().validate().is_ok());
    }

    #[test]
    fn file_config_parses_sections_and_rejects_unknown_keys() {
        let text = r#"{
            "simulate": { "seed": 9, "train_labeled": 300, "rotations": 2 },
            "train": { "lambda": 0.5, "epochs": 2 },
            "csd": { "alpha": 0.2 }
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, text).unwrap();
        let cfg = load_file_config(Some(&path)).unwrap();
        assert_eq!(cfg.simulate.seed, 9);
        assert_eq!(cfg.simulate.train_labeled, 300);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.simulate.train_paired, 5000);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 100);
        assert_eq!(cfg.csd.alpha, 0.2);
        assert_eq!(cfg.csd.constraint_dirs, 300);

        std::fs::write(&path, r#"{ "simulte": {} }"#).unwrap();
        assert!(matches!(
            load_file_config(Some(&path)),
            Err(Error::MalformedFile { .. })
        ));
        assert!(load_file_config(None).is_ok());
    }

    #[test]
    fn simulate_splits_at_group_boundaries_and_embeds_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config().simulate;
        let out = cmd_simulate(&cfg, dir.path()).unwrap();

        let (header, records) = formats::read_dataset(&out.train_labeled).unwrap();
        // 60 entries in 20 groups of 3; 16 groups (48 entries) to train.
        assert_eq!(records.len(), 48);
        let embedded: SimulateConfig =
            serde_json::from_value(header.config.unwrap()["simulate"].clone()).unwrap();
        assert_eq!(embedded.seed, cfg.seed);
        let (_, blind) = formats::read_dataset(&out.blind_labeled).unwrap();
        assert_eq!(blind.len(), 12);
        let (_, paired) = formats::read_dataset(&out.train_paired).unwrap();
        assert_eq!(paired.len(), 30);
        assert!(paired
            .iter()
            .all(|r| matches!(r, DatasetRecord::Paired { .. })));
        let (seen_header, seen) = formats::read_dataset(&out.eval_paired_seen).unwrap();
        assert_eq!(seen.len(), 12);
        assert_eq!(seen_header.seed, cfg.seed.wrapping_add(1));
        let (unseen_header, unseen) = formats::read_dataset(&out.eval_paired_unseen).unwrap();
        assert_eq!(unseen.len(), 12);
        // The unseen pair file renders its second side through profile C.
        assert_eq!(unseen_header.profiles.b, cfg.profile_c);
        let (response, _) = formats::read_response(&out.response).unwrap();
        assert!(response.r[0] > 0.0 && response.r[1] < 0.0);
    }

    #[test]
    fn simulate_is_reproducible_from_embedded_config() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_config().simulate;
        let out_a = cmd_simulate(&cfg, dir_a.path()).unwrap();

        // Round-trip the configuration through a generated file, as a user
        // reproducing a dataset from its header would.
        let (header, _) = formats::read_dataset(&out_a.train_labeled).unwrap();
        let embedded: SimulateConfig =
            serde_json::from_value(header.config.unwrap()["simulate"].clone()).unwrap();
        let out_b = cmd_simulate(&embedded, dir_b.path()).unwrap();

        for (a, b) in out_a.files().iter().zip(out_b.files().iter()) {
            let bytes_a = std::fs::read(a).unwrap();
            let bytes_b = std::fs::read(b).unwrap();
            assert_eq!(bytes_a, bytes_b, "{} differs", a.display());
        }
    }

    #[test]
    fn render_report_shows_medians_gains_and_degenerate_tests() {
        let report = ReportFile {
            format_version: REPORT_FORMAT_VERSION,
            config: serde_json::json!({}),
            blocks: vec![EvalBlock {
                name: "truth".to_string(),
                methods: vec![
                    MethodSummary {
                        method: "nsdn".to_string(),
                        median: Some(0.82),
                        histogram: vec![0; crate::metrics::ACC_HISTOGRAM_BINS],
                        evaluated: 10,
                        excluded: 0,
                    },
                    MethodSummary {
                        method: "csd".to_string(),
                        median: Some(0.67),
                        histogram: vec![0; crate::metrics::ACC_HISTOGRAM_BINS],
                        evaluated: 10,
                        excluded: 2,
                    },
                ],
                pairwise: vec![
                    PairwiseTest {
                        method_a: "nsdn".to_string(),
                        method_b: "csd".to_string(),
                        p_value: 0.004,
                        w_plus: 51.0,
                        n_used: 10,
                        degenerate: false,
                        method: SignedRankMethod::Exact,
                    },
                    PairwiseTest {
                        method_a: "nsdn".to_string(),
                        method_b: "nsdn".to_string(),
                        p_value: 1.0,
                        w_plus: 0.0,
                        n_used: 0,
                        degenerate: true,
                        method: SignedRankMethod::Exact,
                    },
                ],
            }],
            csd_unconverged: 3,
        };
        let text = render_report(&report);
        assert!(text.contains("[truth]"));
        assert!(text.contains("0.8200"));
        // Absolute and relative differences are both present and labeled.
        assert!(text.contains("median diff +0.1500"));
        assert!(text.contains("+22.39% relative to csd"));
        assert!(text.contains("p = 4.000e-3"));
        assert!(text.contains("degenerate: all differences zero"));
        assert!(text.contains("iteration cap: 3"));
    }
}
