//! User-level ε-DP release mechanisms for the sample mean.
//!
//! All three mechanisms add i.i.d. Laplace noise to an estimator, scaled to
//! that estimator's user-level sensitivity:
//!
//! - `laplace`: the unclipped sample mean.
//! - `opt-wc`: the clipped mean under the worst-case-optimal clip spec.
//! - `akmv`: a clipped-sum mean whose threshold is chosen privately with half
//!   the budget (exponential mechanism over a threshold grid); the other half
//!   pays for the release.
//!
//! An estimator with zero sensitivity does not depend on the data, so it is
//! released as-is.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipping::{clipped_mean, ClipSpec};
use crate::data::Dataset;
use crate::error::{check_epsilon, Error, Result};
use crate::error_analysis::sensitivity;
use crate::geometry::clamp;
use crate::optimizer::{optimal_clipspec, rank_for_epsilon};

/// Default number of grid intervals for the private threshold search.
pub const DEFAULT_QUANTILE_GRID_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(PrivacyBudget { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub values: Vec<f64>,
    /// Laplace scale `b` (0 when no noise was needed).
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MechanismKind {
    #[serde(rename = "laplace")]
    Laplace,
    #[serde(rename = "opt-wc")]
    OptWorstCase,
    #[serde(rename = "akmv")]
    Akmv,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 3] = [MechanismKind::Laplace, MechanismKind::OptWorstCase, MechanismKind::Akmv];

    pub fn name(&self) -> &'static str {
        match self {
            MechanismKind::Laplace => "laplace",
            MechanismKind::OptWorstCase => "opt-wc",
            MechanismKind::Akmv => "akmv",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" | "lap" => Ok(MechanismKind::Laplace),
            "opt-wc" | "opt" => Ok(MechanismKind::OptWorstCase),
            "akmv" => Ok(MechanismKind::Akmv),
            other => Err(Error::InvalidArgument(format!(
                "unknown mechanism {other:?} (expected laplace, opt-wc or akmv)"
            ))),
        }
    }
}

/// Per-release audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub mechanism: MechanismKind,
    pub epsilon_total: f64,
    pub epsilon_quantile: f64,
    pub epsilon_release: f64,
    pub sensitivity: f64,
    pub noise_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecUsed {
    Clip(ClipSpec),
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismOutput {
    /// `pre_noise + noise.values`, coordinate-wise.
    pub estimate: Vec<f64>,
    pub pre_noise: Vec<f64>,
    pub noise: NoiseDraw,
    pub spec_used: SpecUsed,
    pub audit: Audit,
}

impl MechanismOutput {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.audit.seed = Some(seed);
        self
    }
}

/// One draw from `Lap(scale)` by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.gen_range(-0.5..0.5);
        if u != -0.5 {
            break u;
        }
    };
    laplace_inverse_cdf(scale, u)
}

/// `−scale·sgn(u)·ln(1 − 2|u|)` for `u ∈ (−½, ½)`.
pub fn laplace_inverse_cdf(scale: f64, u: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `d` i.i.d. draws from `Lap(scale)`.
pub fn sample_laplace_vector<R: Rng + ?Sized>(scale: f64, dim: usize, rng: &mut R) -> Result<NoiseDraw> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("Laplace scale must be positive, got {scale}")));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("noise dimension must be at least 1".into()));
    }
    Ok(NoiseDraw {
        values: (0..dim).map(|_| sample_laplace(scale, rng)).collect(),
        scale,
    })
}

fn calibrated_noise<R: Rng + ?Sized>(sensitivity: f64, epsilon: f64, dim: usize, rng: &mut R) -> Result<NoiseDraw> {
    if sensitivity == 0.0 {
        return Ok(NoiseDraw {
            values: vec![0.0; dim],
            scale: 0.0,
        });
    }
    sample_laplace_vector(sensitivity / epsilon, dim, rng)
}

fn release(pre_noise: Vec<f64>, noise: NoiseDraw, spec_used: SpecUsed, audit: Audit) -> MechanismOutput {
    let estimate = pre_noise.iter().zip(&noise.values).map(|(x, z)| x + z).collect();
    MechanismOutput {
        estimate,
        pre_noise,
        noise,
        spec_used,
        audit,
    }
}

/// Sample mean plus Laplace noise at the full-range sensitivity.
pub fn vanilla_laplace<R: Rng + ?Sized>(ds: &Dataset, budget: PrivacyBudget, rng: &mut R) -> Result<MechanismOutput> {
    let profile = ds.profile();
    let spec = ClipSpec::full_range(profile);
    let delta = sensitivity(&spec, profile)?;
    let eps = budget.epsilon();
    let noise = calibrated_noise(delta, eps, ds.dim(), rng)?;
    let audit = Audit {
        mechanism: MechanismKind::Laplace,
        epsilon_total: eps,
        epsilon_quantile: 0.0,
        epsilon_release: eps,
        sensitivity: delta,
        noise_scale: noise.scale,
        threshold: None,
        seed: None,
    };
    Ok(release(ds.sample_mean().into_coords(), noise, SpecUsed::Clip(spec), audit))
}

/// Clipped mean under the worst-case-optimal spec plus calibrated noise.
pub fn opt_worst_case_mechanism<R: Rng + ?Sized>(
    ds: &Dataset,
    budget: PrivacyBudget,
    rng: &mut R,
) -> Result<MechanismOutput> {
    let profile = ds.profile();
    let eps = budget.epsilon();
    let plan = optimal_clipspec(profile, eps)?;
    let delta = plan.predicted_error.sensitivity;
    let estimator = clipped_mean(ds, &plan.spec)?;
    let noise = calibrated_noise(delta, eps, ds.dim(), rng)?;
    let audit = Audit {
        mechanism: MechanismKind::OptWorstCase,
        epsilon_total: eps,
        epsilon_quantile: 0.0,
        epsilon_release: eps,
        sensitivity: delta,
        noise_scale: noise.scale,
        threshold: Some(plan.t_epsilon),
        seed: None,
    };
    Ok(release(estimator.into_coords(), noise, SpecUsed::Clip(plan.spec), audit))
}

/// Candidate thresholds `range_hi·i/grid_steps` and their selection
/// probabilities under utility `−|#{v > t} − k|` and weight
/// `exp(quantile_budget·u/2)`.
pub fn kth_largest_selection_probabilities(
    values: &[f64],
    k: usize,
    quantile_budget: f64,
    range_hi: f64,
    grid_steps: usize,
) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("private k-th largest needs at least one value".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("rank k must be at least 1".into()));
    }
    check_epsilon(quantile_budget)?;
    if !(range_hi >= 0.0 && range_hi.is_finite()) || grid_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "threshold grid needs range_hi >= 0 and grid_steps >= 1, got {range_hi}, {grid_steps}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    let log_weights: Vec<(f64, f64)> = (0..=grid_steps)
        .map(|i| {
            let t = range_hi * i as f64 / grid_steps as f64;
            let above = n - sorted.partition_point(|&v| v <= t);
            let utility = -(above.abs_diff(k) as f64);
            (t, quantile_budget * utility / 2.0)
        })
        .collect();
    let max = log_weights.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|(_, w)| (w - max).exp()).collect();
    let norm: f64 = weights.iter().sum();
    Ok(log_weights
        .iter()
        .zip(weights)
        .map(|((t, _), w)| (*t, w / norm))
        .collect())
}

/// Exponential-mechanism estimate of the `k`-th largest of `values`.
pub fn private_kth_largest<R: Rng + ?Sized>(
    values: &[f64],
    k: usize,
    quantile_budget: f64,
    range_hi: f64,
    grid_steps: usize,
    rng: &mut R,
) -> Result<f64> {
    let probs = kth_largest_selection_probabilities(values, k, quantile_budget, range_hi, grid_steps)?;
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (t, p) in &probs {
        acc += p;
        if r < acc {
            return Ok(*t);
        }
    }
    // r landed in the rounding gap above the final cumulative sum
    Ok(probs.iter().rev().find(|(_, p)| *p > 0.0).map_or(range_hi, |(t, _)| *t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AkmvConfig {
    pub grid_steps: usize,
    /// Upper end of the threshold grid; `U·m⋆` when unset.
    pub range_hi: Option<f64>,
}

impl Default for AkmvConfig {
    fn default() -> Self {
        AkmvConfig {
            grid_steps: DEFAULT_QUANTILE_GRID_STEPS,
            range_hi: None,
        }
    }
}

/// Clipped user-sum mean with a privately chosen threshold (scalar data).
pub fn akmv_mechanism<R: Rng + ?Sized>(
    ds: &Dataset,
    budget: PrivacyBudget,
    config: AkmvConfig,
    rng: &mut R,
) -> Result<MechanismOutput> {
    if ds.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: ds.dim(),
            context: "the AKMV baseline is scalar-only",
        });
    }
    let profile = ds.profile();
    let eps = budget.epsilon();
    let eps_quantile = eps / 2.0;
    let eps_release = eps - eps_quantile;

    let sums: Vec<f64> = ds.user_sums().into_iter().map(|s| s[0]).collect();
    let k = rank_for_epsilon(1, eps)?.unwrap_or(usize::MAX);
    let range_hi = config
        .range_hi
        .unwrap_or(profile.upper() * profile.max_count() as f64);
    let threshold = private_kth_largest(&sums, k, eps_quantile, range_hi, config.grid_steps, rng)?;

    let total = profile.total() as f64;
    let estimator = sums.iter().map(|&s| clamp(s, 0.0, threshold)).sum::<f64>() / total;
    let delta = threshold / total;
    let noise = calibrated_noise(delta, eps_release, 1, rng)?;
    let audit = Audit {
        mechanism: MechanismKind::Akmv,
        epsilon_total: eps,
        epsilon_quantile: eps_quantile,
        epsilon_release: eps_release,
        sensitivity: delta,
        noise_scale: noise.scale,
        threshold: Some(threshold),
        seed: None,
    };
    Ok(release(vec![estimator], noise, SpecUsed::Threshold(threshold), audit))
}

pub fn run_mechanism<R: Rng + ?Sized>(
    kind: MechanismKind,
    ds: &Dataset,
    budget: PrivacyBudget,
    akmv: AkmvConfig,
    rng: &mut R,
) -> Result<MechanismOutput> {
    match kind {
        MechanismKind::Laplace => vanilla_laplace(ds, budget, rng),
        MechanismKind::OptWorstCase => opt_worst_case_mechanism(ds, budget, rng),
        MechanismKind::Akmv => akmv_mechanism(ds, budget, akmv, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_uniform, ContributionProfile};
    use crate::geometry::Point;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_ds() -> Dataset {
        let p = ContributionProfile::new(vec![1, 2, 4], 1.0, 1).unwrap();
        let users = vec![
            vec![Point::scalar(0.9).unwrap()],
            vec![Point::scalar(0.1).unwrap(), Point::scalar(0.4).unwrap()],
            (0..4).map(|j| Point::scalar(0.2 * j as f64).unwrap()).collect(),
        ];
        Dataset::new(p, users).unwrap()
    }

    #[test]
    fn laplace_inverse_cdf_median_is_zero() {
        assert_eq!(laplace_inverse_cdf(3.0, 0.0), 0.0);
        assert_abs_diff_eq!(laplace_inverse_cdf(1.0, 0.25), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(laplace_inverse_cdf(2.0, -0.25), -2.0 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn laplace_vector_rejects_bad_arguments() {
        assert!(sample_laplace_vector(0.0, 1, &mut rng(1)).is_err());
        assert!(sample_laplace_vector(1.0, 0, &mut rng(1)).is_err());
        let z = sample_laplace_vector(2.0, 3, &mut rng(1)).unwrap();
        assert_eq!(z.values.len(), 3);
        assert_eq!(z.scale, 2.0);
    }

    #[test]
    fn laplace_moments() {
        let mut r = rng(42);
        let n = 1_000_000;
        let scale = 1.7;
        let draws: Vec<f64> = (0..n).map(|_| sample_laplace(scale, &mut r)).collect();
        let mean_abs = draws.iter().map(|z| z.abs()).sum::<f64>() / n as f64;
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean_abs - scale).abs() < 0.01 * scale, "E|Z| = {mean_abs}");
        assert!((var - 2.0 * scale * scale).abs() < 0.02 * 2.0 * scale * scale, "Var = {var}");
    }

    #[test]
    fn vanilla_laplace_examples() {
        let ds = small_ds();
        let out = vanilla_laplace(&ds, PrivacyBudget::new(2.0).unwrap(), &mut rng(3)).unwrap();
        assert_abs_diff_eq!(out.noise.scale, (4.0 / 7.0) / 2.0, epsilon = 1e-15);
        assert_eq!(out.audit.noise_scale, out.audit.sensitivity / 2.0);

        let again = vanilla_laplace(&ds, PrivacyBudget::new(2.0).unwrap(), &mut rng(3)).unwrap();
        assert_eq!(out, again);

        let big = vanilla_laplace(&ds, PrivacyBudget::new(1e9).unwrap(), &mut rng(3)).unwrap();
        assert!((big.estimate[0] - ds.sample_mean().coords()[0]).abs() < 1e-6);
    }

    #[test]
    fn opt_worst_case_examples() {
        let ds = small_ds();
        let out = opt_worst_case_mechanism(&ds, PrivacyBudget::new(1.0).unwrap(), &mut rng(5)).unwrap();
        assert_abs_diff_eq!(out.noise.scale, 2.0 / 7.0, epsilon = 1e-15);
        assert_eq!(out.audit.threshold, Some(2.0));

        // ε < 2/L: constant estimator U/2 and no noise
        let out = opt_worst_case_mechanism(&ds, PrivacyBudget::new(0.5).unwrap(), &mut rng(5)).unwrap();
        assert_eq!(out.noise.scale, 0.0);
        assert_abs_diff_eq!(out.estimate[0], 0.5, epsilon = 1e-15);

        let out = opt_worst_case_mechanism(&ds, PrivacyBudget::new(1e9).unwrap(), &mut rng(5)).unwrap();
        assert!((out.estimate[0] - ds.sample_mean().coords()[0]).abs() < 1e-6);
    }

    #[test]
    fn vector_mechanisms_draw_per_coordinate_noise() {
        let p = ContributionProfile::new(vec![1, 2], 1.0, 2).unwrap();
        let users = vec![
            vec![Point::new(vec![0.2, 0.3]).unwrap()],
            vec![Point::new(vec![0.5, 0.5]).unwrap(), Point::new(vec![0.0, 0.1]).unwrap()],
        ];
        let ds = Dataset::new(p, users).unwrap();
        let out = opt_worst_case_mechanism(&ds, PrivacyBudget::new(8.0).unwrap(), &mut rng(9)).unwrap();
        assert_eq!(out.estimate.len(), 2);
        assert_ne!(out.noise.values[0], out.noise.values[1]);
        assert!(akmv_mechanism(&ds, PrivacyBudget::new(1.0).unwrap(), AkmvConfig::default(), &mut rng(1)).is_err());
    }

    #[test]
    fn estimate_is_pre_noise_plus_noise() {
        let ds = small_ds();
        for kind in MechanismKind::ALL {
            let out = run_mechanism(kind, &ds, PrivacyBudget::new(0.8).unwrap(), AkmvConfig::default(), &mut rng(11)).unwrap();
            for ((e, x), z) in out.estimate.iter().zip(&out.pre_noise).zip(&out.noise.values) {
                assert_eq!(*e, x + z);
                assert!((e - x - z).abs() <= 4.0 * f64::EPSILON * e.abs().max(1.0));
            }
            assert_eq!(out.audit.noise_scale, out.noise.scale);
            if out.noise.scale > 0.0 {
                assert_abs_diff_eq!(out.noise.scale, out.audit.sensitivity / out.audit.epsilon_release, epsilon = 0.0);
            }
        }
    }

    #[test]
    fn selection_probabilities_normalize_and_concentrate() {
        let values = [5.0, 1.0, 9.0, 3.0, 7.0];
        let probs = kth_largest_selection_probabilities(&values, 2, 1.0, 10.0, 100).unwrap();
        let total: f64 = probs.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(probs.len(), 101);

        // near-exact regime: every selected t has #{v > t} = k
        let mut r = rng(2);
        for _ in 0..50 {
            let t = private_kth_largest(&values, 2, 1e6, 10.0, 100, &mut r).unwrap();
            let above = values.iter().filter(|&&v| v > t).count();
            assert_eq!(above, 2, "t = {t}");
        }
        let a = private_kth_largest(&values, 2, 0.3, 10.0, 100, &mut rng(8)).unwrap();
        let b = private_kth_largest(&values, 2, 0.3, 10.0, 100, &mut rng(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn private_kth_largest_rejects_bad_input() {
        assert!(private_kth_largest(&[], 1, 1.0, 1.0, 10, &mut rng(0)).is_err());
        assert!(private_kth_largest(&[1.0], 0, 1.0, 1.0, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn akmv_examples() {
        let ds = small_ds();
        let budget = PrivacyBudget::new(1.0).unwrap();
        let out = akmv_mechanism(&ds, budget, AkmvConfig::default(), &mut rng(4)).unwrap();
        assert_eq!(out.audit.epsilon_quantile + out.audit.epsilon_release, 1.0);
        assert_eq!(out.audit.epsilon_quantile, 0.5);
        let again = akmv_mechanism(&ds, budget, AkmvConfig::default(), &mut rng(4)).unwrap();
        assert_eq!(out, again);

        // threshold grid capped at zero: estimator 0, no noise
        let zero = AkmvConfig { grid_steps: 10, range_hi: Some(0.0) };
        let out = akmv_mechanism(&ds, budget, zero, &mut rng(4)).unwrap();
        assert_eq!(out.audit.threshold, Some(0.0));
        assert_eq!(out.estimate, vec![0.0]);
        assert_eq!(out.noise.scale, 0.0);

        // threshold above every user sum: no clipping bias
        let p = ContributionProfile::new(vec![1; 40], 1.0, 1).unwrap();
        let ds = sample_uniform(&p, 3).unwrap();
        let max_sum = ds.user_sums().iter().map(|s| s[0]).fold(0.0, f64::max);
        let mut unclipped = 0;
        for seed in 0..200 {
            let out = akmv_mechanism(&ds, PrivacyBudget::new(0.01).unwrap(), AkmvConfig::default(), &mut rng(seed)).unwrap();
            if out.audit.threshold.unwrap() >= max_sum {
                assert_abs_diff_eq!(out.pre_noise[0], ds.sample_mean().coords()[0], epsilon = 1e-12);
                unclipped += 1;
            }
        }
        assert!(unclipped > 0);

        // k = 1 in the near-exact regime: exactly one user sum exceeds T
        let out = akmv_mechanism(&ds, PrivacyBudget::new(1e9).unwrap(), AkmvConfig::default(), &mut rng(4)).unwrap();
        let t = out.audit.threshold.unwrap();
        assert_eq!(ds.user_sums().iter().filter(|s| s[0] > t).count(), 1);
    }
}
