//! User-level ε-differentially-private sample means with worst-case-optimal
//! contribution bounding.
//!
//! The crate computes, for a public contribution profile `{m_ℓ}`, the
//! per-user clipping intervals that minimize the worst-case (over all
//! datasets) sum of clipping bias and expected Laplace noise, evaluates the
//! worst-case error of arbitrary clip specs, runs the resulting release
//! mechanism alongside two baselines, and reproduces the Monte Carlo
//! comparison between them. Brute-force certifiers back every closed form.

pub mod bench;
pub mod clipping;
pub mod data;
pub mod error;
pub mod error_analysis;
pub mod geometry;
pub mod mechanisms;
pub mod optimizer;
pub mod verify;

pub use clipping::{apply_clipspec, clipped_mean, validate_clipspec, ClipSpec, Interval};
pub use data::{ContributionProfile, Dataset};
pub use error::{Error, Result};
pub use error_analysis::{worst_case_error, ErrorReport};
pub use geometry::{AnnulusBound, Point, SimplexBound};
pub use mechanisms::{MechanismKind, MechanismOutput, PrivacyBudget};
pub use optimizer::{optimal_clipspec, optimal_error_closed_form, t_epsilon, OptimalPlan};
