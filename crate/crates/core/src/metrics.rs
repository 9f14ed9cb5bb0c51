//! Evaluation metrics: angular correlation of coefficient vectors and the
//! Wilcoxon signed-rank test for paired method comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::ShVec;

/// Number of histogram bins used by [`acc_batch`] over the range `[-1, 1]`.
pub const ACC_HISTOGRAM_BINS: usize = 100;

/// Sample size up to which [`signed_rank_test`] enumerates the exact null
/// distribution; larger samples use the normal approximation.
pub const SIGNED_RANK_EXACT_LIMIT: usize = 25;

/// Angular correlation between two coefficient vectors of the same band
/// limit: the cosine similarity restricted to degrees `l >= 2`.
///
/// The constant term (flat index 0) carries no orientational information and
/// is excluded from both the dot product and the norms. The value lies in
/// `[-1, 1]`; it is undefined (an error) when either vector has zero energy
/// outside the constant term.
pub fn acc(u: &ShVec, v: &ShVec) -> Result<f64> {
    if u.order() != v.order() {
        return Err(Error::invalid_input(format!(
            "band limit mismatch: {} vs {}",
            u.order(),
            v.order()
        )));
    }
    let uu = u.anisotropic_energy();
    let vv = v.anisotropic_energy();
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "input has no energy outside the constant term".to_string(),
        ));
    }
    let dot: f64 = u.coeffs()[1..]
        .iter()
        .zip(&v.coeffs()[1..])
        .map(|(a, b)| a * b)
        .sum();
    let value = dot / (uu.sqrt() * vv.sqrt());
    debug_assert!(value.abs() <= 1.0 + 1e-12);
    Ok(value.clamp(-1.0, 1.0))
}

/// Per-pair angular correlations plus distribution summaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccReport {
    /// One entry per input pair; `None` where the value was undefined.
    pub values: Vec<Option<f64>>,
    /// Median over the defined values (lower median for even counts);
    /// `None` when every pair was undefined.
    pub median: Option<f64>,
    /// Histogram of the defined values over `[-1, 1]` in
    /// [`ACC_HISTOGRAM_BINS`] equal bins.
    pub histogram: Vec<u64>,
    /// Number of defined values.
    pub evaluated: usize,
    /// Number of pairs excluded as undefined.
    pub excluded: usize,
}

/// Lower median: for `2k` sorted values returns element `k - 1`, for
/// `2k + 1` returns element `k`.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median inputs are ordered"));
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Histogram over `[-1, 1]`; the closing edge value 1.0 lands in the last bin.
pub fn acc_histogram(values: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; ACC_HISTOGRAM_BINS];
    let width = 2.0 / ACC_HISTOGRAM_BINS as f64;
    for &v in values {
        let idx = (((v + 1.0) / width) as usize).min(ACC_HISTOGRAM_BINS - 1);
        bins[idx] += 1;
    }
    bins
}

/// Evaluates [`acc`] over aligned pairs, excluding undefined pairs from the
/// summaries while keeping their positions in `values`.
pub fn acc_batch(us: &[ShVec], vs: &[ShVec]) -> Result<AccReport> {
    if us.len() != vs.len() {
        return Err(Error::invalid_input(format!(
            "batch length mismatch: {} vs {}",
            us.len(),
            vs.len()
        )));
    }
    let mut values = Vec::with_capacity(us.len());
    let mut defined = Vec::new();
    let mut excluded = 0usize;
    for (u, v) in us.iter().zip(vs) {
        match acc(u, v) {
            Ok(a) => {
                values.push(Some(a));
                defined.push(a);
            }
            Err(Error::UndefinedCorrelation(_)) => {
                values.push(None);
                excluded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AccReport {
        median: lower_median(&defined),
        histogram: acc_histogram(&defined),
        evaluated: defined.len(),
        excluded,
        values,
    })
}

/// How the signed-rank p-value was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignedRankMethod {
    /// Exact enumeration of the null distribution over sign assignments.
    Exact,
    /// Normal approximation with continuity and tie corrections.
    NormalApprox,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedRankResult {
    /// Two-sided p-value in `[0, 1]`.
    pub p_value: f64,
    /// Sum of ranks of positive differences (average ranks under ties).
    pub w_plus: f64,
    /// Number of non-zero differences actually ranked.
    pub n_used: usize,
    /// Number of zero differences dropped before ranking.
    pub zeros_dropped: usize,
    /// True when no non-zero differences remained (p fixed at 1).
    pub degenerate: bool,
    pub method: SignedRankMethod,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Differences `a[i] - b[i]` that are exactly zero are dropped; the remaining
/// absolute differences are ranked with average ranks for ties. For
/// `n <= `[`SIGNED_RANK_EXACT_LIMIT`] the p-value enumerates the exact null
/// distribution via dynamic programming over doubled ranks (which are exact
/// integers even with tied average ranks); beyond that it uses the normal
/// approximation with a continuity correction of 1/2 and the tie-adjusted
/// variance `n(n+1)(2n+1)/24 - sum(t^3 - t)/48`.
pub fn signed_rank_test(a: &[f64], b: &[f64]) -> Result<SignedRankResult> {
    if a.len() != b.len() {
        return Err(Error::invalid_input(format!(
            "paired samples must be equal length, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::invalid_input(format!(
            "need at least 5 pairs for a signed-rank test, got {}",
            a.len()
        )));
    }
    let mut diffs: Vec<f64> = Vec::with_capacity(a.len());
    let mut zeros_dropped = 0usize;
    for (x, y) in a.iter().zip(b) {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite("signed-rank inputs".to_string()));
        }
        let d = x - y;
        if d == 0.0 {
            zeros_dropped += 1;
        } else {
            diffs.push(d);
        }
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(SignedRankResult {
            p_value: 1.0,
            w_plus: 0.0,
            n_used: 0,
            zeros_dropped,
            degenerate: true,
            method: SignedRankMethod::Exact,
        });
    }

    // Rank |d| ascending with average ranks for ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut tie_correction = 0.0f64; // sum of t^3 - t over tie groups
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..j (0-based) share ranks i+1 ..= j, averaged.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        tie_correction += t * t * t - t;
        i = j;
    }
    // `+ 0.0` turns the empty sum's -0.0 (the identity element of float
    // summation) into plain zero so it serializes as `0.0`.
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum::<f64>()
        + 0.0;

    if n <= SIGNED_RANK_EXACT_LIMIT {
        // Doubled ranks are exact integers (average ranks are multiples of
        // one half), so the null distribution can be tabulated exactly.
        let r2: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total: u64 = r2.iter().sum();
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &r in &r2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let w2 = (2.0 * w_plus).round() as usize;
        let all: u64 = 1u64 << n;
        let low: u64 = counts[..=w2].iter().sum();
        let high: u64 = counts[w2..].iter().sum();
        let p = 2.0 * (low.min(high) as f64) / all as f64;
        Ok(SignedRankResult {
            p_value: p.min(1.0),
            w_plus,
            n_used: n,
            zeros_dropped,
            degenerate: false,
            method: SignedRankMethod::Exact,
        })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
        if var <= 0.0 {
            // All differences tied at one magnitude with every sign equal can
            // not happen with var <= 0 unless n tiny; treat as degenerate.
            return Ok(SignedRankResult {
                p_value: 1.0,
                w_plus,
                n_used: n,
                zeros_dropped,
                degenerate: true,
                method: SignedRankMethod::NormalApprox,
            });
        }
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        // Two-sided tail of the standard normal: 2 (1 - Phi(z)) = erfc(z / sqrt 2).
        let p = libm::erfc(z / std::f64::consts::SQRT_2);
        Ok(SignedRankResult {
            p_value: p.min(1.0),
            w_plus,
            n_used: n,
            zeros_dropped,
            degenerate: false,
            method: SignedRankMethod::NormalApprox,
        })
    }
}
