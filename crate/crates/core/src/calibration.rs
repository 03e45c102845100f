//! Turning a trained scorer into a set predictor with a bounded
//! false-negative rate.
//!
//! Two routes are provided:
//!
//! * **Post-bloating**: per-base thresholds are the minimum positive score
//!   seen on a held-out calibration set. The thresholds solve a random convex
//!   program with `M` decision variables, so with probability at least
//!   `1 - Φ(ε, M+1, N2)` the false-negative probability on fresh data is at
//!   most `ε`.
//! * **Split conformal**: a per-base residual quantile `d_i` widens the score
//!   into `[f(x) - d_i, f(x) + d_i]`; a base is possible when the interval
//!   contains 1, i.e. the threshold is `1 - d_i`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{forward, select, NetworkParams};
use crate::scene::{Dataset, Flag};

// ---------------------------------------------------------------------------
// Binomial tail
// ---------------------------------------------------------------------------

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(n!) - ln(sqrt(2πn) (n/e)^n)` for integers 1..=15.
const STIRLING_ERROR: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_258_22,
    0.041_340_695_955_409_294_09,
    0.027_677_925_684_998_339_15,
    0.020_790_672_103_765_093_11,
    0.016_644_691_189_821_192_16,
    0.013_876_128_823_070_747_99,
    0.011_896_709_945_891_770_10,
    0.010_411_265_261_972_096_50,
    0.009_255_462_182_712_732_918,
    0.008_330_563_433_362_871_256,
    0.007_573_675_487_951_840_795,
    0.006_942_840_107_209_529_866,
    0.006_408_994_188_004_207_068,
    0.005_951_370_112_758_847_736,
    0.005_554_733_551_962_801_371,
];

fn stirling_error(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        return STIRLING_ERROR[n as usize];
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x/np) + np - x` without cancellation when x ≈ np.
fn deviance(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        if s.abs() < f64::MIN_POSITIVE {
            return s;
        }
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
    }
    x * (x / np).ln() + np - x
}

/// `ln P(X = x)` for `X ~ Binomial(n, p)`, with `q = 1 - p` passed separately.
fn ln_binom_pmf(x: f64, n: f64, p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return if x == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if q == 0.0 {
        return if x == n { 0.0 } else { f64::NEG_INFINITY };
    }
    if x == 0.0 {
        return if p < 0.1 { -deviance(n, n * q) - n * p } else { n * q.ln() };
    }
    if x == n {
        return if q < 0.1 { -deviance(n, n * p) - n * q } else { n * p.ln() };
    }
    let lc = stirling_error(n) - stirling_error(x) - stirling_error(n - x) - deviance(x, n * p) - deviance(n - x, n * q);
    let lf = LN_2PI + x.ln() + (-x / n).ln_1p();
    lc - 0.5 * lf
}

/// Neumaier-compensated sum.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `Φ(ε, k, N) = Σ_{j=0..k} C(N, j) ε^j (1-ε)^(N-j)`.
///
/// Each term is evaluated in log space with the saddle-point form of the
/// binomial pmf; terms are summed smallest first with compensation.
pub fn binom_cdf(epsilon: f64, k: u64, n: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if k > n {
        return Err(Error::Contract(format!("k = {k} exceeds N = {n}")));
    }
    if k == n || epsilon == 0.0 {
        return Ok(1.0);
    }
    if epsilon == 1.0 {
        return Ok(0.0);
    }
    let (nf, q) = (n as f64, 1.0 - epsilon);
    let mut terms: Vec<f64> = (0..=k)
        .map(|j| ln_binom_pmf(j as f64, nf, epsilon, q).exp())
        .filter(|t| *t > 0.0)
        .collect();
    terms.sort_by(|a, b| a.partial_cmp(b).expect("pmf terms are finite"));
    Ok(compensated_sum(&terms).clamp(0.0, 1.0))
}

/// The (ε, confidence, N2) guarantee of post-bloating with `M` bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcpBound {
    pub epsilon: f64,
    pub confidence: f64,
    pub n2: usize,
    /// Helly dimension bound, `M + 1`.
    pub helly: usize,
}

pub const RCP_TOLERANCE: f64 = 1e-7;

/// Smallest ε (to [`RCP_TOLERANCE`]) with `Φ(ε, M+1, N2) <= 1 - confidence`.
pub fn rcp_epsilon(confidence: f64, m: usize, n2: usize) -> Result<RcpBound> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Contract(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let helly = m + 1;
    if n2 <= helly {
        return Err(Error::Infeasible(format!(
            "calibration set of {n2} samples cannot certify {m} bases (need more than {helly})"
        )));
    }
    let target = 1.0 - confidence;
    let phi = |e: f64| binom_cdf(e, helly as u64, n2 as u64);
    // invariant: phi(lo) > target >= phi(hi)
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo >= RCP_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if phi(mid)? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(RcpBound {
        epsilon: hi,
        confidence,
        n2,
        helly,
    })
}

/// Confidence `1 - Φ(ε, M+1, N2)` attached to a given ε.
pub fn rcp_confidence(epsilon: f64, m: usize, n2: usize) -> Result<f64> {
    Ok(1.0 - binom_cdf(epsilon, (m + 1) as u64, n2 as u64)?)
}

// ---------------------------------------------------------------------------
// Post-bloating
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostBloatThresholds {
    pub thresholds: Vec<f64>,
    /// Positive calibration samples per base.
    pub positive_counts: Vec<usize>,
}

/// Per-base minimum of the positive scores over `omega2`. Bases without
/// positives fall back to `default_threshold`.
pub fn post_bloat(params: &NetworkParams, omega2: &Dataset, default_threshold: f64) -> Result<PostBloatThresholds> {
    if omega2.is_empty() {
        return Err(Error::Contract("post-bloating needs a non-empty calibration set".into()));
    }
    let m = params.output_dim();
    let mut thresholds = vec![f64::INFINITY; m];
    let mut positive_counts = vec![0; m];
    for s in &omega2.samples {
        if s.flags.len() != m {
            return Err(Error::Contract(format!("sample has {} flags, model outputs {m}", s.flags.len())));
        }
        let y = forward(params, &s.affordance.to_array())?;
        let i = s.positive_index();
        positive_counts[i] += 1;
        thresholds[i] = thresholds[i].min(y[i]);
    }
    let empty: Vec<usize> = (0..m).filter(|i| positive_counts[*i] == 0).collect();
    if !empty.is_empty() {
        warn!(
            "{} base(s) without calibration positives use threshold {default_threshold}: {empty:?}",
            empty.len()
        );
        for i in empty {
            thresholds[i] = default_threshold;
        }
    }
    Ok(PostBloatThresholds {
        thresholds,
        positive_counts,
    })
}

// ---------------------------------------------------------------------------
// Split conformal
// ---------------------------------------------------------------------------

/// Which calibration samples contribute residuals for base `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScope {
    /// Only samples whose positive base is `i` (target 1); the per-class
    /// quantiles bound the miss rate of each class.
    #[default]
    Positives,
    /// Every sample, with target 1 for the positive base and 0 otherwise.
    AllSamples,
}

/// `⌈(n + 1)(1 - ε)⌉`.
pub fn conformal_rank(n: usize, epsilon: f64) -> usize {
    let raw = (n as f64 + 1.0) * (1.0 - epsilon);
    // guard against 1800.0000000002 style round-up
    (raw - 1e-9).ceil().max(1.0) as usize
}

/// The `⌈(n+1)(1-ε)⌉`-th smallest residual.
pub fn conformal_quantile(residuals: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Contract(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let rank = conformal_rank(residuals.len(), epsilon);
    if rank > residuals.len() {
        return Err(Error::Infeasible(format!(
            "miscoverage {epsilon} needs rank {rank} but only {} residuals are available",
            residuals.len()
        )));
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("residuals are finite"));
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    /// Per-base confidence range.
    pub d: Vec<f64>,
    pub epsilon: f64,
    pub calibration_size: usize,
    /// Fraction of calibration samples whose positive base is `i`.
    pub class_fractions: Vec<f64>,
    /// `Σ p_i d_i`.
    pub weighted_d: f64,
    pub scope: ResidualScope,
}

impl ConformalCalibration {
    /// Equivalent score thresholds: `1 ∈ [y - d, y + d]` iff `y >= 1 - d` for `y <= 1`.
    pub fn thresholds(&self) -> Vec<f64> {
        self.d.iter().map(|d| 1.0 - d).collect()
    }
}

pub fn conformal_calibrate(
    params: &NetworkParams,
    calibration: &Dataset,
    epsilon: f64,
    scope: ResidualScope,
) -> Result<ConformalCalibration> {
    let n = calibration.len();
    if conformal_rank(n, epsilon) > n {
        return Err(Error::Infeasible(format!(
            "miscoverage {epsilon} is unattainable with {n} calibration samples"
        )));
    }
    let m = params.output_dim();
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut class_counts = vec![0usize; m];
    for s in &calibration.samples {
        let y = forward(params, &s.affordance.to_array())?;
        let pos = s.positive_index();
        class_counts[pos] += 1;
        match scope {
            ResidualScope::Positives => residuals[pos].push((1.0 - y[pos]).abs()),
            ResidualScope::AllSamples => {
                for (i, (yi, f)) in y.iter().zip(&s.flags).enumerate() {
                    let target = if *f == Flag::Pos { 1.0 } else { 0.0 };
                    residuals[i].push((target - yi).abs());
                }
            }
        }
    }
    let mut d = Vec::with_capacity(m);
    for (i, r) in residuals.iter().enumerate() {
        match conformal_quantile(r, epsilon) {
            Ok(q) => d.push(q),
            Err(Error::Infeasible(_)) => {
                // too few residuals for this base: keep it always possible
                warn!("base {i} has {} residuals, too few for miscoverage {epsilon}", r.len());
                d.push(1.0);
            }
            Err(e) => return Err(e),
        }
    }
    let class_fractions: Vec<f64> = class_counts.iter().map(|c| *c as f64 / n as f64).collect();
    let weighted_d = class_fractions.iter().zip(&d).map(|(p, di)| p * di).sum();
    Ok(ConformalCalibration {
        d,
        epsilon,
        calibration_size: n,
        class_fractions,
        weighted_d,
        scope,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnrEstimate {
    pub samples: usize,
    pub misses: usize,
    pub rate: f64,
}

/// Fraction of samples whose positive base is excluded from the predicted set.
pub fn evaluate_fnr(params: &NetworkParams, thresholds: &[f64], heldout: &Dataset) -> Result<FnrEstimate> {
    if thresholds.len() != params.output_dim() {
        return Err(Error::Contract("threshold count does not match model outputs".into()));
    }
    let mut misses = 0;
    for s in &heldout.samples {
        let y = forward(params, &s.affordance.to_array())?;
        let pos = s.positive_index();
        if y[pos] < thresholds[pos] {
            misses += 1;
        }
    }
    let samples = heldout.len();
    Ok(FnrEstimate {
        samples,
        misses,
        rate: if samples == 0 { 0.0 } else { misses as f64 / samples as f64 },
    })
}

/// A scorer plus the thresholds that turn it into a set predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPredictor {
    pub params: NetworkParams,
    pub thresholds: Vec<f64>,
}

impl CalibratedPredictor {
    pub fn new(params: NetworkParams, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != params.output_dim() {
            return Err(Error::Contract("threshold count does not match model outputs".into()));
        }
        Ok(Self { params, thresholds })
    }

    pub fn predict_set(&self, x: &[f64]) -> Result<Vec<usize>> {
        let y = forward(&self.params, x)?;
        Ok(select(&y, &self.thresholds))
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

/// One row of the post-bloating table: calibration size, certified bound,
/// and measured held-out rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnrRow {
    pub n2: usize,
    pub epsilon_bound: f64,
    pub empirical_fnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    PostBloat,
    Conformal,
}

/// Serialised outcome of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: CalibrationMethod,
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_d: Option<f64>,
    pub epsilon: f64,
    /// Confidence of the ε bound; 1 for the conformal route, whose guarantee is marginal.
    pub confidence: f64,
    pub n1: usize,
    pub n2: usize,
    pub m: usize,
    #[serde(default)]
    pub positive_counts: Vec<usize>,
    #[serde(default)]
    pub fnr_table: Vec<FnrRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binom_cdf_edge_cases() {
        assert_eq!(binom_cdf(0.0, 0, 50).unwrap(), 1.0);
        assert_eq!(binom_cdf(0.37, 50, 50).unwrap(), 1.0);
        assert_eq!(binom_cdf(1.0, 3, 50).unwrap(), 0.0);
        // (C(3,0) + C(3,1)) / 8
        assert!((binom_cdf(0.5, 1, 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(binom_cdf(1.5, 1, 3).is_err());
        assert!(binom_cdf(0.5, 4, 3).is_err());
    }

    #[test]
    fn rcp_bracketing() {
        let b = rcp_epsilon(0.99, 17, 15946).unwrap();
        let target = 0.01;
        assert!(binom_cdf(b.epsilon, 18, 15946).unwrap() <= target);
        assert!(binom_cdf(b.epsilon - 1e-6, 18, 15946).unwrap() > target);
        assert_eq!(b.helly, 18);
    }

    #[test]
    fn rcp_infeasible_when_too_few_samples() {
        assert!(matches!(rcp_epsilon(0.99, 17, 18), Err(Error::Infeasible(_))));
        assert!(rcp_epsilon(1.0, 17, 1000).is_err());
    }

    #[test]
    fn conformal_rank_worked_example() {
        assert_eq!(conformal_rank(4, 0.25), 4);
        assert_eq!(conformal_quantile(&[0.3, 0.1, 0.4, 0.2], 0.25).unwrap(), 0.4);
        assert_eq!(conformal_rank(1999, 0.1), 1800);
    }

    #[test]
    fn conformal_tiny_epsilon_is_infeasible() {
        let err = conformal_quantile(&[0.1, 0.2, 0.3, 0.4], 1e-6).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(&v), 1.0);
    }
}
