//! The worst-case-optimal clipping strategy in closed form, and a grid
//! search over the reduced linear program that certifies it.
//!
//! With one interval per user and `a + b = U` (d = 1) or `a = 0` (d >= 2),
//! the worst-case error only depends on per-user aggregates
//! `S_ℓ = m_ℓ·a_ℓ` (d = 1) or `S̄_ℓ = m_ℓ·(U − b_ℓ)` (d >= 2):
//!
//! ```text
//! d = 1:  (Σ S_ℓ + (1/ε)·max_ℓ (U m_ℓ − 2 S_ℓ)) / Σm,     0 <= S_ℓ <= U m_ℓ / 2
//! d >= 2: (Σ S̄_ℓ + (2d/ε)·max_ℓ (U m_ℓ − S̄_ℓ)) / Σm,    0 <= S̄_ℓ <= U m_ℓ
//! ```
//!
//! The optimum of both is governed by `T_ε`, the `⌈2d/ε⌉`-th largest of
//! `{U m_ℓ}` (zero when that rank exceeds the number of users).

use serde::{Deserialize, Serialize};

use crate::clipping::{ClipSpec, Interval};
use crate::data::ContributionProfile;
use crate::error::{check_epsilon, Error, Result};
use crate::error_analysis::{worst_case_error, ErrorReport};

/// Largest number of users the grid oracle accepts.
pub const GRID_ORACLE_MAX_USERS: usize = 6;
/// Largest per-user grid resolution the grid oracle accepts.
pub const GRID_ORACLE_MAX_STEPS: usize = 200;

const RANK_SNAP: f64 = 1e-12;

/// `⌈2d/ε⌉`, snapping to the nearest integer when within `1e-12` of it.
/// `None` if the rank does not fit in a `usize`.
pub fn rank_for_epsilon(dim: usize, epsilon: f64) -> Result<Option<usize>> {
    check_epsilon(epsilon)?;
    let x = 2.0 * dim as f64 / epsilon;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= RANK_SNAP {
        nearest
    } else {
        x.ceil()
    };
    Ok((k < usize::MAX as f64).then_some(k.max(1.0) as usize))
}

/// The `⌈2d/ε⌉`-th largest of `{U m_ℓ}`, or 0 when `ε < 2d/L`.
pub fn t_epsilon(profile: &ContributionProfile, epsilon: f64) -> Result<f64> {
    let k = match rank_for_epsilon(profile.dim(), epsilon)? {
        Some(k) if k <= profile.num_users() => k,
        _ => return Ok(0.0),
    };
    let mut values: Vec<f64> = profile
        .counts()
        .iter()
        .map(|&m| profile.upper() * m as f64)
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values[k - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPlan {
    pub t_epsilon: f64,
    pub spec: ClipSpec,
    pub predicted_error: ErrorReport,
}

/// JSON form of an [`OptimalPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPlanFile {
    pub t_epsilon: f64,
    pub per_user: Vec<Interval>,
    pub predicted: ErrorReport,
}

impl OptimalPlan {
    pub fn per_user(&self) -> Vec<Interval> {
        self.spec.per_user_constant().expect("optimal spec is per-user constant")
    }

    pub fn to_file(&self) -> OptimalPlanFile {
        OptimalPlanFile {
            t_epsilon: self.t_epsilon,
            per_user: self.per_user(),
            predicted: self.predicted_error,
        }
    }
}

fn optimal_interval(upper: f64, m: usize, t: f64, dim: usize) -> Interval {
    let m = m as f64;
    if dim == 1 {
        let a = ((upper * m - t) / (2.0 * m)).max(0.0);
        // b = min{(Um + T)/(2m), U} equals U − a on both branches
        Interval::new(a, upper - a)
    } else {
        Interval::new(0.0, (t / m).min(upper))
    }
}

/// The worst-case-optimal clip spec for `profile` at privacy level `epsilon`.
///
/// d = 1: `a = max{(Um − T)/(2m), 0}`, `b = min{(Um + T)/(2m), U}`.
/// d >= 2: `a = 0`, `b = min{T/m, U}`.
pub fn optimal_clipspec(profile: &ContributionProfile, epsilon: f64) -> Result<OptimalPlan> {
    let t = t_epsilon(profile, epsilon)?;
    let intervals: Vec<Interval> = profile
        .counts()
        .iter()
        .map(|&m| optimal_interval(profile.upper(), m, t, profile.dim()))
        .collect();
    let spec = ClipSpec::per_user(profile, &intervals)?;
    let predicted_error = worst_case_error(&spec, profile, epsilon)?;
    Ok(OptimalPlan {
        t_epsilon: t,
        spec,
        predicted_error,
    })
}

/// The optimal worst-case error, evaluated directly from `T_ε`.
pub fn optimal_error_closed_form(profile: &ContributionProfile, epsilon: f64) -> Result<f64> {
    let t = t_epsilon(profile, epsilon)?;
    let u = profile.upper();
    let d = profile.dim() as f64;
    let total = profile.total() as f64;
    let value = if profile.dim() == 1 {
        let bias: f64 = profile
            .counts()
            .iter()
            .map(|&m| ((u * m as f64 - t) / 2.0).max(0.0))
            .sum();
        bias + t / epsilon
    } else {
        let bias: f64 = profile
            .counts()
            .iter()
            .map(|&m| (u * m as f64 - t).max(0.0))
            .sum();
        bias + 2.0 * d * t / epsilon
    };
    Ok(value / total)
}

/// Apply a scalar interval independently to every coordinate of a
/// cube-valued sample `x ∈ [0, U]^d`.
pub fn clip_cube_coordinatewise(x: &[f64], interval: Interval) -> Vec<f64> {
    x.iter().map(|&v| v.max(interval.a).min(interval.b)).collect()
}

/// Reduced objective over per-user aggregates; see the module docs.
#[derive(Debug, Clone)]
pub struct ReducedObjective {
    upper_m: Vec<f64>,
    dim: usize,
    noise_coef: f64,
    total: f64,
}

impl ReducedObjective {
    pub fn new(profile: &ContributionProfile, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        let dim = profile.dim();
        Ok(ReducedObjective {
            upper_m: profile.counts().iter().map(|&m| profile.upper() * m as f64).collect(),
            dim,
            noise_coef: if dim == 1 { 1.0 / epsilon } else { 2.0 * dim as f64 / epsilon },
            total: profile.total() as f64,
        })
    }

    /// Upper end of the feasible range of user `l`'s aggregate.
    pub fn aggregate_max(&self, l: usize) -> f64 {
        if self.dim == 1 {
            self.upper_m[l] / 2.0
        } else {
            self.upper_m[l]
        }
    }

    /// Per-user term inside the max (a sensitivity contribution).
    pub fn spread(&self, l: usize, s: f64) -> f64 {
        if self.dim == 1 {
            self.upper_m[l] - 2.0 * s
        } else {
            self.upper_m[l] - s
        }
    }

    pub fn eval(&self, aggregates: &[f64]) -> f64 {
        let bias: f64 = aggregates.iter().sum();
        let spread = aggregates
            .iter()
            .enumerate()
            .map(|(l, &s)| self.spread(l, s))
            .fold(f64::NEG_INFINITY, f64::max);
        (bias + self.noise_coef * spread) / self.total
    }

    /// ℓ∞-Lipschitz constant of [`eval`](Self::eval).
    pub fn lipschitz(&self) -> f64 {
        let slope = if self.dim == 1 { 2.0 } else { 1.0 };
        (self.upper_m.len() as f64 + self.noise_coef * slope) / self.total
    }

    pub fn num_users(&self) -> usize {
        self.upper_m.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    /// Per-user aggregates `S_ℓ` (d = 1) or `S̄_ℓ` (d >= 2) at the minimizer.
    pub aggregates: Vec<f64>,
    pub spec: ClipSpec,
    pub error: f64,
    /// Lipschitz constant times the coarsest grid step.
    pub slack: f64,
}

/// Minimum of the reduced objective over the product grid with
/// `grid_steps + 1` evenly spaced aggregates per user.
///
/// Searching every grid point is `(G+1)^L`. Instead, for every value `τ` the
/// max-term can take on the grid, each user independently takes its smallest
/// aggregate with spread `<= τ`; the best of these is the exact grid minimum
/// (at the true grid minimizer the max-term equals one such `τ`, and the
/// per-user choices can only do better). Ties go to the lexicographically
/// smallest aggregate vector.
pub fn lp_grid_oracle(profile: &ContributionProfile, epsilon: f64, grid_steps: usize) -> Result<GridOptimum> {
    if profile.num_users() > GRID_ORACLE_MAX_USERS || grid_steps > GRID_ORACLE_MAX_STEPS || grid_steps == 0 {
        return Err(Error::InstanceTooLarge(format!(
            "L = {}, grid_steps = {grid_steps} (limits {GRID_ORACLE_MAX_USERS}, 1..={GRID_ORACLE_MAX_STEPS})",
            profile.num_users()
        )));
    }
    let obj = ReducedObjective::new(profile, epsilon)?;
    let n = obj.num_users();
    let grids: Vec<Vec<f64>> = (0..n)
        .map(|l| {
            let hi = obj.aggregate_max(l);
            (0..=grid_steps).map(|i| hi * i as f64 / grid_steps as f64).collect()
        })
        .collect();
    // spreads are decreasing along each grid
    let spreads: Vec<Vec<f64>> = grids
        .iter()
        .enumerate()
        .map(|(l, g)| g.iter().map(|&s| obj.spread(l, s)).collect())
        .collect();

    let mut taus: Vec<f64> = spreads.iter().flatten().copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for &tau in &taus {
        let choice: Option<Vec<usize>> = spreads
            .iter()
            .map(|sp| {
                let i = sp.partition_point(|&v| v > tau);
                (i < sp.len()).then_some(i)
            })
            .collect();
        let Some(choice) = choice else { continue };
        let aggregates: Vec<f64> = choice.iter().enumerate().map(|(l, &i)| grids[l][i]).collect();
        let value = obj.eval(&aggregates);
        let better = match &best {
            None => true,
            Some((v, c)) => value < *v || (value == *v && choice < *c),
        };
        if better {
            best = Some((value, choice));
        }
    }
    let (error, choice) = best.expect("the largest spread admits every user");
    let aggregates: Vec<f64> = choice.iter().enumerate().map(|(l, &i)| grids[l][i]).collect();

    let u = profile.upper();
    let intervals: Vec<Interval> = aggregates
        .iter()
        .zip(profile.counts())
        .map(|(&s, &m)| {
            let per_sample = s / m as f64;
            if profile.dim() == 1 {
                Interval::new(per_sample, u - per_sample)
            } else {
                Interval::new(0.0, u - per_sample)
            }
        })
        .collect();
    let step = (0..n).map(|l| obj.aggregate_max(l)).fold(0.0, f64::max) / grid_steps as f64;
    Ok(GridOptimum {
        aggregates,
        spec: ClipSpec::per_user(profile, &intervals)?,
        error,
        slack: obj.lipschitz() * step,
    })
}
