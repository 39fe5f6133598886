//! Randomized agreement runs between the closed forms and the brute-force
//! oracles, shared by the `verify` subcommand and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::derive_seed;
use crate::clipping::{ClipSpec, Interval};
use crate::data::ContributionProfile;
use crate::error::Result;
use crate::error_analysis::{
    brute_force_bias_oracle, brute_force_sensitivity_oracle, sensitivity, worst_case_bias, worst_case_error,
};
use crate::geometry::{
    l1_distance, l1_norm, project_onto_annulus, project_onto_simplex, AnnulusBound, Point, SimplexBound,
};
use crate::optimizer::{lp_grid_oracle, optimal_clipspec, optimal_error_closed_form};

pub const FORMULA_TOLERANCE: f64 = 1e-9;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-12;
pub const DISTANCE_LAW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub max_discrepancy: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            instances: 0,
            failures: 0,
            max_discrepancy: 0.0,
            tolerance,
        }
    }

    /// Record one instance; `discrepancy` is how far it is from passing
    /// (0 or negative when comfortably inside).
    fn record(&mut self, discrepancy: f64) {
        self.instances += 1;
        let d = discrepancy.max(0.0);
        if d.is_nan() || d > self.tolerance {
            self.failures += 1;
        }
        if d.is_nan() || d > self.max_discrepancy {
            self.max_discrepancy = d;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub instances: usize,
    pub seed: u64,
    /// Grid step for the projection brute force.
    pub projection_step: f64,
    /// Per-user grid resolution for the reduced-LP oracle.
    pub lp_grid_steps: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            instances: 200,
            seed: 0,
            projection_step: 0.01,
            lp_grid_steps: 100,
        }
    }
}

/// Shapes of random clipping specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecFamily {
    /// Any `0 <= a <= b <= U`.
    Arbitrary,
    /// `a + b = U` with per-sample widths.
    Symmetric,
    /// `a >= U − b` for every sample.
    LowerDominant,
    /// `a <= U − b` for every sample.
    UpperDominant,
}

pub fn random_profile<R: Rng>(
    rng: &mut R,
    max_users: usize,
    max_count: usize,
    max_total: usize,
    upper: f64,
    dim: usize,
) -> ContributionProfile {
    let users = rng.gen_range(1..=max_users);
    let mut counts: Vec<usize> = (0..users).map(|_| rng.gen_range(1..=max_count)).collect();
    while counts.iter().sum::<usize>() > max_total {
        let i = counts.iter().enumerate().max_by_key(|(_, &m)| m).map(|(i, _)| i).unwrap();
        if counts[i] > 1 {
            counts[i] -= 1;
        } else {
            counts.pop();
        }
    }
    ContributionProfile::new(counts, upper, dim).expect("valid random profile")
}

/// Uniform on `[lo, hi]`, but landing on either endpoint one time in ten.
fn snap<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    match rng.gen_range(0..10) {
        0 => lo,
        1 => hi,
        _ => rng.gen_range(lo..=hi),
    }
}

pub fn random_interval<R: Rng>(rng: &mut R, upper: f64, family: SpecFamily) -> Interval {
    match family {
        SpecFamily::Arbitrary => {
            let b = snap(rng, 0.0, upper);
            let a = snap(rng, 0.0, b);
            Interval::new(a, b)
        }
        SpecFamily::Symmetric => {
            let a = snap(rng, 0.0, upper / 2.0);
            Interval::new(a, upper - a)
        }
        SpecFamily::LowerDominant => {
            let b = rng.gen_range(upper / 2.0..=upper);
            let a = rng.gen_range(upper - b..=b);
            Interval::new(a, b)
        }
        SpecFamily::UpperDominant => {
            let b = rng.gen_range(0.0..=upper);
            let a = rng.gen_range(0.0..=b.min(upper - b));
            Interval::new(a, b)
        }
    }
}

pub fn random_spec<R: Rng>(rng: &mut R, profile: &ContributionProfile, family: SpecFamily) -> ClipSpec {
    let nested = profile
        .counts()
        .iter()
        .map(|&m| (0..m).map(|_| random_interval(rng, profile.upper(), family)).collect())
        .collect();
    ClipSpec::from_nested(nested)
}

/// Smallest `∥p − x∥₁` over grid points `x` of the annulus: radii stepping
/// by `h` from `inner` (plus `outer` itself), and on each `{∥x∥₁ = r}` the
/// first `d − 1` coordinates stepping by `h` with the last absorbing the rest.
pub fn grid_projection_distance(p: &Point, bound: AnnulusBound, h: f64) -> f64 {
    let dim = p.dim();
    assert!((1..=3).contains(&dim), "grid projection oracle supports d <= 3");
    let mut radii: Vec<f64> = Vec::new();
    let mut r = bound.inner();
    while r < bound.outer() {
        radii.push(r);
        r += h;
    }
    radii.push(bound.outer());

    let steps = |r: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..).map(|i| i as f64 * h).take_while(|&t| t < r).collect();
        v.push(r);
        v
    };
    let c = p.coords();
    let mut best = f64::INFINITY;
    for &r in &radii {
        match dim {
            1 => best = best.min((c[0] - r).abs()),
            2 => {
                for t in steps(r) {
                    best = best.min((c[0] - t).abs() + (c[1] - (r - t)).abs());
                }
            }
            _ => {
                for t1 in steps(r) {
                    for t2 in steps(r - t1) {
                        let t3 = (r - t1 - t2).max(0.0);
                        best = best.min((c[0] - t1).abs() + (c[1] - t2).abs() + (c[2] - t3).abs());
                    }
                }
            }
        }
    }
    best
}

/// Brute-force the bias and sensitivity formulas on small instances.
///
/// Scalar instances draw from the symmetric and same-side families, where the
/// bias formula is exact; arbitrary scalar specs go to the upper-bound check.
pub fn check_bias_and_sensitivity(instances: usize, seed: u64, max_total: usize, dims: &[usize]) -> Result<Vec<CheckResult>> {
    let mut bias_vec = CheckResult::new("bias formula = oracle (d >= 2, any spec)", FORMULA_TOLERANCE);
    let mut bias_tight = CheckResult::new("bias formula = oracle (d = 1, symmetric or same-side)", FORMULA_TOLERANCE);
    let mut bias_upper = CheckResult::new("bias formula >= oracle (d = 1, any spec)", FORMULA_TOLERANCE);
    let mut sens = CheckResult::new("sensitivity formula = oracle (any spec)", FORMULA_TOLERANCE);
    let tight = [SpecFamily::Symmetric, SpecFamily::LowerDominant, SpecFamily::UpperDominant];

    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, i as u64]));
        let dim = dims[i % dims.len()];
        let upper = rng.gen_range(0.5..2.0);
        let profile = random_profile(&mut rng, 4, 4, max_total, upper, dim);

        if dim == 1 {
            let family = tight[i / dims.len() % tight.len()];
            let spec = random_spec(&mut rng, &profile, family);
            let formula = worst_case_bias(&spec, &profile)?;
            bias_tight.record((formula - brute_force_bias_oracle(&spec, &profile)?).abs());
            sens.record((sensitivity(&spec, &profile)? - brute_force_sensitivity_oracle(&spec, &profile)?).abs());

            let spec = random_spec(&mut rng, &profile, SpecFamily::Arbitrary);
            let formula = worst_case_bias(&spec, &profile)?;
            bias_upper.record(brute_force_bias_oracle(&spec, &profile)? - formula);
            sens.record((sensitivity(&spec, &profile)? - brute_force_sensitivity_oracle(&spec, &profile)?).abs());
        } else {
            let spec = random_spec(&mut rng, &profile, SpecFamily::Arbitrary);
            let formula = worst_case_bias(&spec, &profile)?;
            bias_vec.record((formula - brute_force_bias_oracle(&spec, &profile)?).abs());
            sens.record((sensitivity(&spec, &profile)? - brute_force_sensitivity_oracle(&spec, &profile)?).abs());
        }
    }
    Ok([bias_vec, bias_tight, bias_upper, sens]
        .into_iter()
        .filter(|c| c.instances > 0)
        .collect())
}

/// Closed-form optimum against the evaluated optimal spec and the reduced-LP
/// grid oracle.
pub fn check_optimizer(instances: usize, seed: u64, grid_steps: usize) -> Result<Vec<CheckResult>> {
    let mut consistency = CheckResult::new("closed-form optimum = error of optimal spec", CLOSED_FORM_TOLERANCE);
    let mut grid = CheckResult::new("closed form <= LP grid optimum <= closed form + slack", CLOSED_FORM_TOLERANCE);
    let eps_choices = [0.5, 1.0, 2.0];

    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, i as u64]));
        let dim = 1 + i % 3;
        let epsilon = eps_choices[i / 3 % eps_choices.len()];
        let profile = random_profile(&mut rng, 5, 6, usize::MAX, 1.0, dim);

        let closed = optimal_error_closed_form(&profile, epsilon)?;
        let plan = optimal_clipspec(&profile, epsilon)?;
        let evaluated = worst_case_error(&plan.spec, &profile, epsilon)?.total;
        consistency.record((closed - evaluated).abs());

        let g = lp_grid_oracle(&profile, epsilon, grid_steps)?;
        grid.record((closed - g.error).max(g.error - closed - g.slack));
    }
    Ok(vec![consistency, grid])
}

/// Simplex and annulus projections against a grid brute force, plus the
/// distance laws.
pub fn check_projection(instances: usize, seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut optimal = CheckResult::new("projection distance <= grid minimum", FORMULA_TOLERANCE);
    let mut near = CheckResult::new("grid minimum <= projection distance + d·h", 0.0);
    let mut law = CheckResult::new("distance = max(a − ∥p∥, ∥p∥ − b, 0)", DISTANCE_LAW_TOLERANCE);
    let mut member = CheckResult::new("projection lies in the annulus", 0.0);

    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, i as u64]));
        let dim = 1 + i % 3;
        let coords: Vec<f64> = (0..dim)
            .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let p = Point::new(coords)?;
        let outer = rng.gen_range(0.0..1.0);
        let inner = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..=outer) };
        let bound = AnnulusBound::new(inner, outer)?;

        let norm = l1_norm(p.coords());
        let simplex = SimplexBound::new(outer)?;
        let ys = project_onto_simplex(&p, simplex);
        let cases = [
            (project_onto_annulus(&p, bound), bound),
            (ys.clone(), AnnulusBound::new(0.0, outer)?),
        ];
        for (y, target) in cases {
            let dist = l1_distance(p.coords(), y.coords());
            let brute = grid_projection_distance(&p, target, h);
            optimal.record(dist - brute);
            near.record(brute - dist - dim as f64 * h);
            let expected = (target.inner() - norm).max(norm - target.outer()).max(0.0);
            law.record((dist - expected).abs());
            member.record(if target.contains(&y) { 0.0 } else { f64::INFINITY });
        }
        member.record(if simplex.contains(&ys) { 0.0 } else { f64::INFINITY });
    }
    Ok(vec![optimal, near, law, member])
}

pub fn run_verification(config: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    checks.extend(check_bias_and_sensitivity(config.instances, config.seed, 12, &[1, 2, 3])?);
    checks.extend(check_optimizer(config.instances, config.seed, config.lp_grid_steps)?);
    checks.extend(check_projection(config.instances, config.seed, config.projection_step)?);
    Ok(VerifyReport {
        seed: config.seed,
        checks,
    })
}
