//! Per-sample annulus clipping and the clipped mean.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mean_of_users, ContributionProfile, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{project_onto_annulus, AnnulusBound, Point};

/// Clipping interval `[a, b]` on the ℓ1 norm of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Interval { a, b }
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }
}

/// One interval per sample, shaped like the contribution profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    per_sample: Vec<Vec<Interval>>,
}

impl ClipSpec {
    pub fn from_nested(per_sample: Vec<Vec<Interval>>) -> Self {
        ClipSpec { per_sample }
    }

    /// Same interval for every sample of a user.
    pub fn per_user(profile: &ContributionProfile, intervals: &[Interval]) -> Result<Self> {
        if intervals.len() != profile.num_users() {
            return Err(Error::InvalidArgument(format!(
                "{} per-user intervals for {} users",
                intervals.len(),
                profile.num_users()
            )));
        }
        Ok(ClipSpec {
            per_sample: profile
                .counts()
                .iter()
                .zip(intervals)
                .map(|(&m, &iv)| vec![iv; m])
                .collect(),
        })
    }

    /// Same interval for every sample of every user.
    pub fn uniform(profile: &ContributionProfile, a: f64, b: f64) -> Self {
        ClipSpec {
            per_sample: profile
                .counts()
                .iter()
                .map(|&m| vec![Interval::new(a, b); m])
                .collect(),
        }
    }

    /// `a = 0, b = U` everywhere: the identity clipping.
    pub fn full_range(profile: &ContributionProfile) -> Self {
        ClipSpec::uniform(profile, 0.0, profile.upper())
    }

    pub fn users(&self) -> &[Vec<Interval>] {
        &self.per_sample
    }

    pub fn intervals(&self) -> impl Iterator<Item = &Interval> {
        self.per_sample.iter().flatten()
    }

    /// The per-user intervals, if every user's samples share one interval.
    pub fn per_user_constant(&self) -> Option<Vec<Interval>> {
        self.per_sample
            .iter()
            .map(|s| {
                let first = *s.first()?;
                s.iter().all(|iv| *iv == first).then_some(first)
            })
            .collect()
    }

    pub fn max_b(&self) -> f64 {
        self.intervals().map(|iv| iv.b).fold(0.0, f64::max)
    }

    /// Every shape and range violation against `profile`; empty when valid.
    pub fn violations(&self, profile: &ContributionProfile) -> Vec<Violation> {
        validate_clipspec(self, profile)
    }

    pub fn validate(&self, profile: &ContributionProfile) -> Result<()> {
        let v = self.violations(profile);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidClipSpec(v))
        }
    }

    pub fn to_file(&self) -> ClipSpecFile {
        match self.per_user_constant() {
            Some(per_user) => ClipSpecFile::PerUser { per_user },
            None => ClipSpecFile::PerSample {
                per_sample: self.per_sample.clone(),
            },
        }
    }

    pub fn load_json(path: impl AsRef<Path>, profile: &ContributionProfile) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let file: ClipSpecFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        let spec = file.into_spec(profile)?;
        spec.validate(profile)?;
        Ok(spec)
    }
}

/// On-disk clip spec: either one interval per user or the full per-sample table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipSpecFile {
    PerUser { per_user: Vec<Interval> },
    PerSample { per_sample: Vec<Vec<Interval>> },
}

impl ClipSpecFile {
    pub fn into_spec(self, profile: &ContributionProfile) -> Result<ClipSpec> {
        match self {
            ClipSpecFile::PerUser { per_user } => ClipSpec::per_user(profile, &per_user),
            ClipSpecFile::PerSample { per_sample } => Ok(ClipSpec::from_nested(per_sample)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    UserCountMismatch { expected: usize, found: usize },
    SampleCountMismatch { expected: usize, found: usize },
    NegativeLower(f64),
    Inverted { a: f64, b: f64 },
    ExceedsUpper { b: f64, upper: f64 },
    NotFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub user: Option<usize>,
    pub sample: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.user, self.sample) {
            (Some(l), Some(j)) => write!(f, "({l},{j}): ")?,
            (Some(l), None) => write!(f, "user {l}: ")?,
            _ => {}
        }
        match &self.kind {
            ViolationKind::UserCountMismatch { expected, found } => {
                write!(f, "spec has {found} users, profile has {expected}")
            }
            ViolationKind::SampleCountMismatch { expected, found } => {
                write!(f, "spec has {found} samples, profile has {expected}")
            }
            ViolationKind::NegativeLower(a) => write!(f, "a={a} is negative"),
            ViolationKind::Inverted { a, b } => write!(f, "a={a} exceeds b={b}"),
            ViolationKind::ExceedsUpper { b, upper } => write!(f, "b={b} exceeds U={upper}"),
            ViolationKind::NotFinite => write!(f, "interval endpoint is not finite"),
        }
    }
}

/// Check shape and `0 <= a <= b <= U` for every entry.
pub fn validate_clipspec(spec: &ClipSpec, profile: &ContributionProfile) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.per_sample.len() != profile.num_users() {
        out.push(Violation {
            user: None,
            sample: None,
            kind: ViolationKind::UserCountMismatch {
                expected: profile.num_users(),
                found: spec.per_sample.len(),
            },
        });
    }
    let upper = profile.upper();
    for (l, (intervals, &m)) in spec.per_sample.iter().zip(profile.counts()).enumerate() {
        if intervals.len() != m {
            out.push(Violation {
                user: Some(l),
                sample: None,
                kind: ViolationKind::SampleCountMismatch {
                    expected: m,
                    found: intervals.len(),
                },
            });
        }
        for (j, iv) in intervals.iter().enumerate() {
            let at = |kind| Violation {
                user: Some(l),
                sample: Some(j),
                kind,
            };
            if !(iv.a.is_finite() && iv.b.is_finite()) {
                out.push(at(ViolationKind::NotFinite));
                continue;
            }
            if iv.a < 0.0 {
                out.push(at(ViolationKind::NegativeLower(iv.a)));
            }
            if iv.a > iv.b {
                out.push(at(ViolationKind::Inverted { a: iv.a, b: iv.b }));
            }
            if iv.b > upper {
                out.push(at(ViolationKind::ExceedsUpper { b: iv.b, upper }));
            }
        }
    }
    out
}

/// Replace every sample by its projection onto its clipping annulus.
pub fn apply_clipspec(ds: &Dataset, spec: &ClipSpec) -> Result<Dataset> {
    spec.validate(ds.profile())?;
    Ok(ds.with_users(clip_users(ds, spec)))
}

fn clip_users(ds: &Dataset, spec: &ClipSpec) -> Vec<Vec<Point>> {
    ds.users()
        .iter()
        .zip(spec.users())
        .map(|(samples, intervals)| {
            samples
                .iter()
                .zip(intervals)
                .map(|(x, iv)| {
                    let bound = AnnulusBound::new(iv.a, iv.b).expect("validated interval");
                    project_onto_annulus(x, bound)
                })
                .collect()
        })
        .collect()
}

/// Sample mean of the clipped dataset.
pub fn clipped_mean(ds: &Dataset, spec: &ClipSpec) -> Result<Point> {
    spec.validate(ds.profile())?;
    let clipped = clip_users(ds, spec);
    Ok(mean_of_users(&clipped, ds.dim(), ds.profile().total()))
}
