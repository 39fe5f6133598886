//! Seeded Monte Carlo comparison of the release mechanisms on i.i.d. scalar
//! data.
//!
//! Every trial draws a fresh dataset, replaces each user's samples by their
//! average, runs each mechanism and records `|M(D) − f(D)|`. Trial `(e, t)`
//! is seeded from `(seed, e, t)` alone, and each mechanism gets its own
//! stream, so results do not depend on the schedule or on which other
//! mechanisms are enabled.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_projected_gaussian_with, sample_uniform_with, ContributionProfile, Dataset};
use crate::error::{check_epsilon, Error, Result};
use crate::geometry::l1_distance;
use crate::mechanisms::{run_mechanism, AkmvConfig, MechanismKind, PrivacyBudget, DEFAULT_QUANTILE_GRID_STEPS};
use crate::optimizer::t_epsilon;

pub const DEFAULT_EPSILONS: [f64; 4] = [0.2, 0.5, 1.0, 2.0];
pub const RESULTS_HEADER: &str = "epsilon,mechanism,mean_abs_error,std_err,trials";

/// Where the contribution profile comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProfileSource {
    /// `geometric:M`
    Geometric { m: u32 },
    /// `extreme:L:m_star`
    Extreme { users: usize, m_star: usize },
    /// `counts:m1,m2,…`
    Counts(Vec<usize>),
    /// `file:path.json` (profile JSON; its `U` and `d` override the config's)
    File(PathBuf),
}

impl ProfileSource {
    pub fn resolve(&self, upper: f64, dim: usize) -> Result<ContributionProfile> {
        match self {
            ProfileSource::Geometric { m } => ContributionProfile::geometric(*m, upper, dim),
            ProfileSource::Extreme { users, m_star } => ContributionProfile::extreme(*users, *m_star, upper, dim),
            ProfileSource::Counts(c) => ContributionProfile::new(c.clone(), upper, dim),
            ProfileSource::File(p) => ContributionProfile::load_json(p),
        }
    }
}

impl FromStr for ProfileSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "bad profile {s:?}; expected geometric:M, extreme:L:MSTAR, counts:M1,M2,… or file:PATH"
            ))
        };
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "geometric" => Ok(ProfileSource::Geometric {
                m: rest.parse().map_err(|_| bad())?,
            }),
            "extreme" => {
                let (l, m) = rest.split_once(':').ok_or_else(bad)?;
                Ok(ProfileSource::Extreme {
                    users: l.parse().map_err(|_| bad())?,
                    m_star: m.parse().map_err(|_| bad())?,
                })
            }
            "counts" => rest
                .split(',')
                .map(|c| c.trim().parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()
                .map(ProfileSource::Counts),
            "file" => Ok(ProfileSource::File(PathBuf::from(rest))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ProfileSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileSource::Geometric { m } => write!(f, "geometric:{m}"),
            ProfileSource::Extreme { users, m_star } => write!(f, "extreme:{users}:{m_star}"),
            ProfileSource::Counts(c) => {
                let parts: Vec<String> = c.iter().map(|m| m.to_string()).collect();
                write!(f, "counts:{}", parts.join(","))
            }
            ProfileSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl TryFrom<String> for ProfileSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProfileSource> for String {
    fn from(p: ProfileSource) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleDistribution {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "projected-gaussian", alias = "gaussian")]
    ProjectedGaussian,
}

impl FromStr for SampleDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SampleDistribution::Uniform),
            "projected-gaussian" | "gaussian" => Ok(SampleDistribution::ProjectedGaussian),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution {other:?} (expected uniform or projected-gaussian)"
            ))),
        }
    }
}

impl SampleDistribution {
    pub fn sample(&self, profile: &ContributionProfile, rng: &mut ChaCha20Rng) -> Result<Dataset> {
        match self {
            SampleDistribution::Uniform => sample_uniform_with(profile, rng),
            SampleDistribution::ProjectedGaussian => sample_projected_gaussian_with(profile, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub profile: ProfileSource,
    pub distribution: SampleDistribution,
    #[serde(rename = "U")]
    pub upper: f64,
    #[serde(rename = "d", default = "one")]
    pub dim: usize,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub mechanisms: Vec<MechanismKind>,
    #[serde(default = "default_grid_steps")]
    pub quantile_grid_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_grid_steps() -> usize {
    DEFAULT_QUANTILE_GRID_STEPS
}

impl BenchConfig {
    pub fn new(profile: ProfileSource, distribution: SampleDistribution, upper: f64) -> Self {
        BenchConfig {
            profile,
            distribution,
            upper,
            dim: 1,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            trials: 10_000,
            seed: 0,
            mechanisms: MechanismKind::ALL.to_vec(),
            quantile_grid_steps: DEFAULT_QUANTILE_GRID_STEPS,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.epsilons.is_empty() {
            return Err(Error::InvalidArgument("at least one epsilon is required".into()));
        }
        for &e in &self.epsilons {
            check_epsilon(e)?;
        }
        if self.mechanisms.is_empty() {
            return Err(Error::InvalidArgument("at least one mechanism is required".into()));
        }
        if self.dim != 1 {
            return Err(Error::UnsupportedDimension {
                dim: self.dim,
                context: "the benchmark samples scalar data",
            });
        }
        Ok(())
    }

    pub fn resolve_profile(&self) -> Result<ContributionProfile> {
        self.profile.resolve(self.upper, self.dim)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    fn akmv(&self) -> AkmvConfig {
        AkmvConfig {
            grid_steps: self.quantile_grid_steps,
            range_hi: None,
        }
    }
}

/// Parse `0.2,0.5,1` or `start:stop:step` (inclusive of `stop` up to 1e-9).
pub fn parse_epsilon_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::InvalidArgument(format!("bad epsilon grid {s:?}: {why}"));
    let values: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad("not a number")))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad("expected start:stop:step"));
        };
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad("need step > 0 and stop >= start"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + i as f64 * step).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad("not a number")))
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(bad("empty"));
    }
    for &v in &values {
        check_epsilon(v)?;
    }
    Ok(values)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a node of the `(seed, ε-index, trial-index, stream)` hierarchy.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const DATA_STREAM: u64 = 0;

fn mechanism_stream(kind: MechanismKind) -> u64 {
    match kind {
        MechanismKind::Laplace => 1,
        MechanismKind::OptWorstCase => 2,
        MechanismKind::Akmv => 3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    /// `(mechanism, |M(D) − f(D)|)` in config order.
    pub errors: Vec<(MechanismKind, f64)>,
    /// `|f(raw) − f(preprocessed)|`.
    pub preprocess_shift: f64,
}

/// One Monte Carlo trial at `config.epsilons[eps_index]`.
pub fn run_trial(
    config: &BenchConfig,
    profile: &ContributionProfile,
    eps_index: usize,
    trial_index: usize,
) -> Result<TrialResult> {
    let epsilon = *config
        .epsilons
        .get(eps_index)
        .ok_or_else(|| Error::InvalidArgument(format!("epsilon index {eps_index} out of range")))?;
    let budget = PrivacyBudget::new(epsilon)?;
    let node = [eps_index as u64, trial_index as u64];

    let mut data_rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, &[node[0], node[1], DATA_STREAM]));
    let raw = config.distribution.sample(profile, &mut data_rng)?;
    let ds = raw.preprocess_user_average();
    let truth = ds.sample_mean();
    let preprocess_shift = l1_distance(raw.sample_mean().coords(), truth.coords());

    let errors = config
        .mechanisms
        .iter()
        .map(|&kind| {
            let seed = derive_seed(config.seed, &[node[0], node[1], mechanism_stream(kind)]);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let out = run_mechanism(kind, &ds, budget, config.akmv(), &mut rng)?;
            Ok((kind, l1_distance(&out.estimate, truth.coords())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialResult {
        errors,
        preprocess_shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub epsilon: f64,
    pub mechanism: MechanismKind,
    pub mean_abs_error: f64,
    pub std_err: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// `(ε, T_ε)` for each grid value.
    pub t_epsilons: Vec<(f64, f64)>,
    /// Largest per-trial `|f(raw) − f(preprocessed)|`.
    pub max_preprocess_shift: f64,
}

impl BenchResult {
    pub fn row(&self, epsilon: f64, mechanism: MechanismKind) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.epsilon == epsilon && r.mechanism == mechanism)
    }
}

/// Pairwise (cascade) summation; result is a function of the slice order only.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean (0 for a single value).
pub fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn run_benchmark(config: &BenchConfig, schedule: Schedule) -> Result<BenchResult> {
    config.validate()?;
    let profile = config.resolve_profile()?;
    if profile.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: profile.dim(),
            context: "the benchmark samples scalar data",
        });
    }

    let mut rows = Vec::new();
    let mut t_epsilons = Vec::new();
    let mut max_shift: f64 = 0.0;
    for (e, &epsilon) in config.epsilons.iter().enumerate() {
        let trial = |t: usize| run_trial(config, &profile, e, t);
        let trials: Vec<TrialResult> = match schedule {
            Schedule::Serial => (0..config.trials).map(trial).collect::<Result<_>>()?,
            Schedule::Parallel => (0..config.trials).into_par_iter().map(trial).collect::<Result<_>>()?,
        };
        for tr in &trials {
            max_shift = max_shift.max(tr.preprocess_shift);
        }
        for (m, &kind) in config.mechanisms.iter().enumerate() {
            let errs: Vec<f64> = trials.iter().map(|tr| tr.errors[m].1).collect();
            let (mean, se) = mean_and_std_err(&errs);
            rows.push(BenchRow {
                epsilon,
                mechanism: kind,
                mean_abs_error: mean,
                std_err: se,
                trials: config.trials,
            });
        }
        t_epsilons.push((epsilon, t_epsilon(&profile, epsilon)?));
    }
    Ok(BenchResult {
        rows,
        t_epsilons,
        max_preprocess_shift: max_shift,
    })
}

pub fn write_results_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epsilon, r.mechanism, r.mean_abs_error, r.std_err, r.trials
        )?;
    }
    Ok(())
}

/// Write the results CSV to `path`.
pub fn emit_results_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no benchmark rows to write".into()));
    }
    let io_err = |source| Error::Io {
        path: path.into(),
        source,
    };
    let mut buf = Vec::new();
    write_results_csv(rows, &mut buf).map_err(io_err)?;
    std::fs::write(path, buf).map_err(io_err)
}

pub fn read_results_csv<R: Read>(reader: R, path: &Path) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(parse_err(1, format!("unexpected header, expected {RESULTS_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(line, format!("field {i} is not a number")))
        };
        rows.push(BenchRow {
            epsilon: num(0)?,
            mechanism: rec.get(1).unwrap_or_default().parse()?,
            mean_abs_error: num(2)?,
            std_err: num(3)?,
            trials: rec
                .get(4)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(line, "trials is not an integer".into()))?,
        });
    }
    Ok(rows)
}
