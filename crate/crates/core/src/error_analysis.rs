//! Worst-case error of a clipping strategy: bias over all datasets with the
//! profile fixed, user-level sensitivity, and the expected ℓ1 magnitude of the
//! calibrated Laplace noise.
//!
//! The closed forms live next to two brute-force certifiers. The certifiers
//! never evaluate the closed forms; they push candidate samples through the
//! actual projection code and maximize ∥Σ v∥₁ over per-sample displacement
//! choices by enumerating sign patterns `s ∈ {±1}^d`, which is exact for a
//! finite candidate set because `∥w∥₁ = max_s ⟨s, w⟩` and the inner product
//! separates over samples.

use serde::{Deserialize, Serialize};

use crate::clipping::ClipSpec;
use crate::data::ContributionProfile;
use crate::error::{check_epsilon, Error, Result};
use crate::geometry::{project_onto_annulus, AnnulusBound, Point};

/// Largest instance (total samples) the brute-force certifiers accept.
pub const ORACLE_MAX_SAMPLES: usize = 12;
/// Largest dimension the brute-force certifiers accept.
pub const ORACLE_MAX_DIM: usize = 3;
/// Default grid resolution for the certifiers' sweep of `Δ_U`.
pub const ORACLE_GRID_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub bias: f64,
    pub noise: f64,
    pub sensitivity: f64,
    pub total: f64,
}

/// `(1/Σm) Σ_ℓ Σ_j max{a, U − b}`, for every dimension.
pub fn worst_case_bias(spec: &ClipSpec, profile: &ContributionProfile) -> Result<f64> {
    spec.validate(profile)?;
    let u = profile.upper();
    let sum: f64 = spec.intervals().map(|iv| iv.a.max(u - iv.b)).sum();
    Ok(sum / profile.total() as f64)
}

/// User-level ℓ1 sensitivity of the clipped mean.
///
/// For `d = 1` a user moves each sample across its interval:
/// `max_ℓ Σ_j (b − a) / Σm`. For `d >= 2` a user swaps `b·e₁` for `b·e₂`:
/// `2 max_ℓ Σ_j b / Σm`.
pub fn sensitivity(spec: &ClipSpec, profile: &ContributionProfile) -> Result<f64> {
    spec.validate(profile)?;
    let per_user = spec.users().iter().map(|ivs| {
        if profile.dim() == 1 {
            ivs.iter().map(|iv| iv.width()).sum::<f64>()
        } else {
            2.0 * ivs.iter().map(|iv| iv.b).sum::<f64>()
        }
    });
    Ok(per_user.fold(0.0, f64::max) / profile.total() as f64)
}

/// `E∥Z∥₁ = d·Δ/ε` for i.i.d. Laplace noise at scale `Δ/ε`.
pub fn noise_error(spec: &ClipSpec, profile: &ContributionProfile, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(profile.dim() as f64 * sensitivity(spec, profile)? / epsilon)
}

pub fn worst_case_error(spec: &ClipSpec, profile: &ContributionProfile, epsilon: f64) -> Result<ErrorReport> {
    check_epsilon(epsilon)?;
    let bias = worst_case_bias(spec, profile)?;
    let sensitivity = sensitivity(spec, profile)?;
    let noise = profile.dim() as f64 * sensitivity / epsilon;
    Ok(ErrorReport {
        bias,
        noise,
        sensitivity,
        total: bias + noise,
    })
}

fn guard(spec: &ClipSpec, profile: &ContributionProfile) -> Result<()> {
    if profile.total() > ORACLE_MAX_SAMPLES || profile.dim() > ORACLE_MAX_DIM {
        return Err(Error::InstanceTooLarge(format!(
            "Σm = {}, d = {} (limits {ORACLE_MAX_SAMPLES}, {ORACLE_MAX_DIM})",
            profile.total(),
            profile.dim()
        )));
    }
    spec.validate(profile)
}

/// Corners `0`, `U·e_k` and a uniform grid over `Δ_U`.
fn candidate_samples(dim: usize, upper: f64, grid_steps: usize) -> Vec<Point> {
    let mut out = vec![Point::zeros(dim)];
    for k in 0..dim {
        out.push(Point::axis(dim, k, upper).expect("axis in range"));
    }
    let g = grid_steps.max(1);
    let step = upper / g as f64;
    let mut idx = vec![0usize; dim];
    loop {
        let used: usize = idx.iter().sum();
        if used <= g {
            let coords: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
            if coords.iter().sum::<f64>() <= upper {
                out.push(Point::new(coords).expect("grid point"));
            }
        }
        // odometer over {0..=g}^d
        let mut k = 0;
        loop {
            if k == dim {
                return out;
            }
            idx[k] += 1;
            if idx[k] <= g {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn sign_patterns(dim: usize) -> Vec<Vec<f64>> {
    (0..1usize << dim)
        .map(|bits| {
            (0..dim)
                .map(|k| if bits >> k & 1 == 1 { -1.0 } else { 1.0 })
                .collect()
        })
        .collect()
}

fn dot(s: &[f64], v: &[f64]) -> f64 {
    s.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Brute-force `max_D ∥f(D) − f̄(D)∥₁` over datasets built from corner and
/// grid samples.
///
/// The zero vector is equidistant from every point of norm `a`, so any such
/// point is a valid projection; the certifier includes the vertices `a·e_k`
/// of that face alongside the canonical uniform choice.
pub fn brute_force_bias_oracle(spec: &ClipSpec, profile: &ContributionProfile) -> Result<f64> {
    brute_force_bias_oracle_with_grid(spec, profile, ORACLE_GRID_STEPS)
}

pub fn brute_force_bias_oracle_with_grid(
    spec: &ClipSpec,
    profile: &ContributionProfile,
    grid_steps: usize,
) -> Result<f64> {
    guard(spec, profile)?;
    let dim = profile.dim();
    let candidates = candidate_samples(dim, profile.upper(), grid_steps);
    let signs = sign_patterns(dim);

    // displacement sets x − x̄, one per sample
    let displacements: Vec<Vec<Vec<f64>>> = spec
        .intervals()
        .map(|iv| {
            let bound = AnnulusBound::new(iv.a, iv.b).expect("validated interval");
            let mut set: Vec<Vec<f64>> = candidates
                .iter()
                .map(|x| {
                    let y = project_onto_annulus(x, bound);
                    x.coords().iter().zip(y.coords()).map(|(p, q)| p - q).collect()
                })
                .collect();
            if dim > 1 && iv.a > 0.0 {
                for k in 0..dim {
                    let mut v = vec![0.0; dim];
                    v[k] = -iv.a;
                    set.push(v);
                }
            }
            set
        })
        .collect();

    let best = signs
        .iter()
        .map(|s| {
            displacements
                .iter()
                .map(|set| set.iter().map(|v| dot(s, v)).fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Ok(best / profile.total() as f64)
}

/// Brute-force user-level sensitivity of the clipped mean: for each user,
/// the largest ∥f̄(D₁) − f̄(D₂)∥₁ when only that user's samples differ,
/// each sample ranging over corner and grid candidates.
pub fn brute_force_sensitivity_oracle(spec: &ClipSpec, profile: &ContributionProfile) -> Result<f64> {
    brute_force_sensitivity_oracle_with_grid(spec, profile, ORACLE_GRID_STEPS)
}

pub fn brute_force_sensitivity_oracle_with_grid(
    spec: &ClipSpec,
    profile: &ContributionProfile,
    grid_steps: usize,
) -> Result<f64> {
    guard(spec, profile)?;
    let dim = profile.dim();
    let candidates = candidate_samples(dim, profile.upper(), grid_steps);
    let signs = sign_patterns(dim);

    let mut best: f64 = 0.0;
    for intervals in spec.users() {
        let clipped: Vec<Vec<Point>> = intervals
            .iter()
            .map(|iv| {
                let bound = AnnulusBound::new(iv.a, iv.b).expect("validated interval");
                candidates.iter().map(|x| project_onto_annulus(x, bound)).collect()
            })
            .collect();
        for s in &signs {
            // Σ_j max_{u,w} ⟨s, u − w⟩ = Σ_j (max ⟨s,u⟩ − min ⟨s,u⟩)
            let total: f64 = clipped
                .iter()
                .map(|set| {
                    let (lo, hi) = set.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
                        let v = dot(s, y.coords());
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                })
                .sum();
            best = best.max(total);
        }
    }
    Ok(best / profile.total() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipping::Interval;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn profile(counts: &[usize], upper: f64, dim: usize) -> ContributionProfile {
        ContributionProfile::new(counts.to_vec(), upper, dim).unwrap()
    }

    fn user3_clipped(p: &ContributionProfile) -> ClipSpec {
        ClipSpec::per_user(
            p,
            &[Interval::new(0.0, 1.0), Interval::new(0.0, 1.0), Interval::new(0.25, 0.75)],
        )
        .unwrap()
    }

    #[test]
    fn bias_examples() {
        let p = profile(&[1, 2, 4], 1.0, 1);
        assert_eq!(worst_case_bias(&ClipSpec::full_range(&p), &p).unwrap(), 0.0);
        assert_abs_diff_eq!(worst_case_bias(&ClipSpec::uniform(&p, 0.5, 0.5), &p).unwrap(), 0.5);

        let spec = user3_clipped(&p);
        assert_abs_diff_eq!(worst_case_bias(&spec, &p).unwrap(), 1.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(brute_force_bias_oracle(&spec, &p).unwrap(), 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_examples() {
        let p1 = profile(&[1, 2, 4], 1.0, 1);
        let full = ClipSpec::full_range(&p1);
        assert_abs_diff_eq!(sensitivity(&full, &p1).unwrap(), 4.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(brute_force_sensitivity_oracle(&full, &p1).unwrap(), 4.0 / 7.0, epsilon = 1e-12);

        let p2 = profile(&[1, 2, 4], 1.0, 2);
        assert_abs_diff_eq!(sensitivity(&ClipSpec::full_range(&p2), &p2).unwrap(), 8.0 / 7.0, epsilon = 1e-15);

        let flat = ClipSpec::uniform(&p1, 0.3, 0.3);
        assert_eq!(sensitivity(&flat, &p1).unwrap(), 0.0);
        assert_eq!(brute_force_sensitivity_oracle(&flat, &p1).unwrap(), 0.0);
    }

    #[test]
    fn noise_examples() {
        let p = profile(&[1, 2, 4], 1.0, 1);
        let opt = ClipSpec::per_user(
            &p,
            &[Interval::new(0.0, 1.0), Interval::new(0.0, 1.0), Interval::new(0.25, 0.75)],
        )
        .unwrap();
        assert_abs_diff_eq!(noise_error(&opt, &p, 1.0).unwrap(), 2.0 / 7.0, epsilon = 1e-15);
        assert_eq!(noise_error(&ClipSpec::uniform(&p, 0.4, 0.4), &p, 1.0).unwrap(), 0.0);

        let p2 = profile(&[1, 2, 4], 1.0, 2);
        assert_abs_diff_eq!(
            noise_error(&ClipSpec::full_range(&p2), &p2, 1.0).unwrap(),
            16.0 / 7.0,
            epsilon = 1e-14
        );
        assert!(matches!(noise_error(&opt, &p, 0.0), Err(Error::InvalidEpsilon(_))));
        assert!(noise_error(&opt, &p, -1.0).is_err());
    }

    #[test]
    fn worst_case_error_examples() {
        let p = profile(&[1, 2, 4], 1.0, 1);
        let r = worst_case_error(&user3_clipped(&p), &p, 1.0).unwrap();
        assert_abs_diff_eq!(r.bias, 1.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.noise, 2.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.total, 3.0 / 7.0, epsilon = 1e-15);
        assert_eq!(r.total, r.bias + r.noise);

        let r = worst_case_error(&ClipSpec::full_range(&p), &p, 2.0).unwrap();
        assert_eq!(r.bias, 0.0);
        assert_abs_diff_eq!(r.noise, (4.0 / 7.0) / 2.0, epsilon = 1e-15);

        let r = worst_case_error(&user3_clipped(&p), &p, 1e12).unwrap();
        assert_abs_diff_eq!(r.total, r.bias, epsilon = 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let p = profile(&[1, 2, 3], 1.0, 1);
        assert_eq!(brute_force_bias_oracle(&ClipSpec::full_range(&p), &p).unwrap(), 0.0);
        let mid = ClipSpec::uniform(&p, 0.5, 0.5);
        assert_abs_diff_eq!(brute_force_bias_oracle(&mid, &p).unwrap(), 0.5, epsilon = 1e-12);

        let p2 = profile(&[1, 1], 1.0, 2);
        let full = ClipSpec::full_range(&p2);
        assert_abs_diff_eq!(brute_force_sensitivity_oracle(&full, &p2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_guards_instance_size() {
        let p = profile(&[13], 1.0, 1);
        assert!(matches!(
            brute_force_bias_oracle(&ClipSpec::full_range(&p), &p),
            Err(Error::InstanceTooLarge(_))
        ));
        let p = profile(&[1], 1.0, 4);
        assert!(brute_force_sensitivity_oracle(&ClipSpec::full_range(&p), &p).is_err());
    }

    #[test]
    fn scalar_bias_formula_is_an_upper_bound_for_mixed_sides() {
        // One sample clipped mostly from below, the other mostly from above:
        // their worst cases pull the mean in opposite directions.
        let p = profile(&[2], 1.0, 1);
        let spec = ClipSpec::from_nested(vec![vec![Interval::new(0.5, 1.0), Interval::new(0.0, 0.5)]]);
        assert_abs_diff_eq!(worst_case_bias(&spec, &p).unwrap(), 0.5);
        assert_abs_diff_eq!(brute_force_bias_oracle(&spec, &p).unwrap(), 0.25, epsilon = 1e-12);
    }

    fn spec_strategy(dim: usize) -> impl Strategy<Value = (ContributionProfile, ClipSpec)> {
        prop::collection::vec(1usize..=3, 1..=4).prop_flat_map(move |counts| {
            let total: usize = counts.iter().sum();
            let p = ContributionProfile::new(counts, 1.0, dim).unwrap();
            prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), total).prop_map(move |pairs| {
                let mut it = pairs.into_iter();
                let nested = p
                    .counts()
                    .iter()
                    .map(|&m| {
                        (0..m)
                            .map(|_| {
                                let (x, y) = it.next().unwrap();
                                Interval::new(x.min(y), x.max(y))
                            })
                            .collect()
                    })
                    .collect();
                (p.clone(), ClipSpec::from_nested(nested))
            })
        })
    }

    proptest! {
        #[test]
        fn sensitivity_matches_oracle_any_spec((p, spec) in (1usize..=3).prop_flat_map(spec_strategy)) {
            let f = sensitivity(&spec, &p).unwrap();
            let o = brute_force_sensitivity_oracle(&spec, &p).unwrap();
            prop_assert!((f - o).abs() <= 1e-9, "formula {f} oracle {o}");
        }

        #[test]
        fn vector_bias_matches_oracle_any_spec((p, spec) in (2usize..=3).prop_flat_map(spec_strategy)) {
            let f = worst_case_bias(&spec, &p).unwrap();
            let o = brute_force_bias_oracle(&spec, &p).unwrap();
            prop_assert!((f - o).abs() <= 1e-9, "formula {f} oracle {o}");
        }

        #[test]
        fn scalar_bias_formula_dominates_oracle((p, spec) in spec_strategy(1)) {
            let f = worst_case_bias(&spec, &p).unwrap();
            let o = brute_force_bias_oracle(&spec, &p).unwrap();
            prop_assert!(o <= f + 1e-9, "formula {f} oracle {o}");
        }

        #[test]
        fn scale_covariance((p, spec) in (1usize..=3).prop_flat_map(spec_strategy), c in 0.1f64..10.0, eps in 0.1f64..5.0) {
            let scaled_p = ContributionProfile::new(p.counts().to_vec(), c * p.upper(), p.dim()).unwrap();
            let scaled_spec = ClipSpec::from_nested(
                spec.users()
                    .iter()
                    .map(|ivs| ivs.iter().map(|iv| Interval::new(c * iv.a, (c * iv.b).min(c * p.upper()))).collect())
                    .collect(),
            );
            let r = worst_case_error(&spec, &p, eps).unwrap();
            let s = worst_case_error(&scaled_spec, &scaled_p, eps).unwrap();
            for (x, y) in [(r.bias, s.bias), (r.sensitivity, s.sensitivity), (r.noise, s.noise), (r.total, s.total)] {
                prop_assert!((c * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn scalar_monotonicity((p, spec) in spec_strategy(1), bump in 0.0f64..0.5) {
            // raising every b lowers bias and cannot lower sensitivity
            let raised = ClipSpec::from_nested(
                spec.users().iter()
                    .map(|ivs| ivs.iter().map(|iv| Interval::new(iv.a, (iv.b + bump).min(1.0))).collect())
                    .collect(),
            );
            prop_assert!(worst_case_bias(&raised, &p).unwrap() <= worst_case_bias(&spec, &p).unwrap() + 1e-15);
            prop_assert!(sensitivity(&raised, &p).unwrap() >= sensitivity(&spec, &p).unwrap() - 1e-15);
        }
    }
}
