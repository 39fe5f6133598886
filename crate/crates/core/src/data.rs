//! Contribution profiles, datasets, synthetic generators and CSV/JSON I/O.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Upper limit on the rejection loop of the projected-Gaussian sampler.
pub const MAX_REJECTION_ATTEMPTS: usize = 1_000_000;

/// Public contribution metadata: how many samples each user holds, the
/// ℓ1 bound `U` on every sample and the sample dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ContributionProfile {
    counts: Vec<usize>,
    upper: f64,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    #[serde(rename = "U")]
    upper: f64,
    #[serde(rename = "d")]
    dim: usize,
    counts: Vec<usize>,
}

impl TryFrom<RawProfile> for ContributionProfile {
    type Error = Error;

    fn try_from(raw: RawProfile) -> Result<Self> {
        ContributionProfile::new(raw.counts, raw.upper, raw.dim)
    }
}

impl From<ContributionProfile> for RawProfile {
    fn from(p: ContributionProfile) -> Self {
        RawProfile {
            upper: p.upper,
            dim: p.dim,
            counts: p.counts,
        }
    }
}

impl ContributionProfile {
    pub fn new(counts: Vec<usize>, upper: f64, dim: usize) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidProfile("at least one user is required".into()));
        }
        if let Some(i) = counts.iter().position(|&m| m == 0) {
            return Err(Error::InvalidProfile(format!("user {i} has zero contributions")));
        }
        if !(upper > 0.0 && upper.is_finite()) {
            return Err(Error::InvalidProfile(format!("U must be positive and finite, got {upper}")));
        }
        if dim == 0 {
            return Err(Error::InvalidProfile("dimension must be at least 1".into()));
        }
        Ok(ContributionProfile { counts, upper, dim })
    }

    /// `2^i` users contributing `2^(M-i)` samples each, for `i = 0..=M`.
    pub fn geometric(m: u32, upper: f64, dim: usize) -> Result<Self> {
        if m > 30 {
            return Err(Error::InvalidProfile(format!(
                "geometric exponent {m} too large (max 30)"
            )));
        }
        let mut counts = Vec::with_capacity((1usize << (m + 1)) - 1);
        for i in 0..=m {
            let per_user = 1usize << (m - i);
            counts.extend(std::iter::repeat_n(per_user, 1usize << i));
        }
        ContributionProfile::new(counts, upper, dim)
    }

    /// `users - 1` single-sample users plus one user with `m_star` samples.
    pub fn extreme(users: usize, m_star: usize, upper: f64, dim: usize) -> Result<Self> {
        if users < 2 {
            return Err(Error::InvalidProfile(format!(
                "extreme profile needs at least 2 users, got {users}"
            )));
        }
        if m_star < 2 {
            return Err(Error::InvalidProfile(format!(
                "extreme profile needs m_star > 1, got {m_star}"
            )));
        }
        let mut counts = vec![1; users - 1];
        counts.push(m_star);
        ContributionProfile::new(counts, upper, dim)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_users(&self) -> usize {
        self.counts.len()
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_count(&self) -> usize {
        *self.counts.iter().max().expect("profile is nonempty")
    }

    /// Smallest contribution count. Not used by any error formula.
    pub fn min_count(&self) -> usize {
        *self.counts.iter().min().expect("profile is nonempty")
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn with_dim(&self, dim: usize) -> Result<Self> {
        ContributionProfile::new(self.counts.clone(), self.upper, dim)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_reader(file).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("profile serializes");
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

/// Per-user sample lists. Every sample lies in `Δ_U` and has dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    profile: ContributionProfile,
    users: Vec<Vec<Point>>,
}

impl Dataset {
    pub fn new(profile: ContributionProfile, users: Vec<Vec<Point>>) -> Result<Self> {
        if users.len() != profile.num_users() {
            return Err(Error::InvalidDataset(format!(
                "profile has {} users but {} sample lists were given",
                profile.num_users(),
                users.len()
            )));
        }
        for (l, (samples, &m)) in users.iter().zip(profile.counts()).enumerate() {
            if samples.len() != m {
                return Err(Error::InvalidDataset(format!(
                    "user {l} holds {} samples, profile says {m}",
                    samples.len()
                )));
            }
            for (j, x) in samples.iter().enumerate() {
                check_sample(x, profile.dim(), profile.upper())
                    .map_err(|msg| Error::InvalidDataset(format!("user {l}, sample {j}: {msg}")))?;
            }
        }
        Ok(Dataset { profile, users })
    }

    /// Build a dataset whose profile is read off the sample lists.
    pub fn from_users(users: Vec<Vec<Point>>, upper: f64) -> Result<Self> {
        let dim = users
            .iter()
            .flatten()
            .next()
            .map(Point::dim)
            .ok_or_else(|| Error::InvalidDataset("no samples".into()))?;
        let counts = users.iter().map(Vec::len).collect();
        Dataset::new(ContributionProfile::new(counts, upper, dim)?, users)
    }

    pub fn profile(&self) -> &ContributionProfile {
        &self.profile
    }

    pub fn users(&self) -> &[Vec<Point>] {
        &self.users
    }

    pub fn dim(&self) -> usize {
        self.profile.dim()
    }

    /// Coordinate-wise sum of each user's samples.
    pub fn user_sums(&self) -> Vec<Vec<f64>> {
        self.users.iter().map(|s| sum_points(s, self.dim())).collect()
    }

    /// The sample mean over all users and samples.
    pub fn sample_mean(&self) -> Point {
        mean_of_users(&self.users, self.dim(), self.profile.total())
    }

    /// Replace every sample of a user by that user's sample average. Counts
    /// and the overall sample mean are unchanged.
    pub fn preprocess_user_average(&self) -> Dataset {
        let users = self
            .users
            .iter()
            .map(|samples| {
                let m = samples.len() as f64;
                let avg: Vec<f64> = sum_points(samples, self.dim())
                    .into_iter()
                    .map(|s| s / m)
                    .collect();
                let avg = Point::new(avg).expect("average of nonnegative points");
                vec![avg; samples.len()]
            })
            .collect();
        Dataset {
            profile: self.profile.clone(),
            users,
        }
    }

    pub(crate) fn with_users(&self, users: Vec<Vec<Point>>) -> Dataset {
        Dataset {
            profile: self.profile.clone(),
            users,
        }
    }
}

fn check_sample(x: &Point, dim: usize, upper: f64) -> std::result::Result<(), String> {
    if x.dim() != dim {
        return Err(format!("dimension {} does not match d={dim}", x.dim()));
    }
    let n = x.l1_norm();
    if n > upper {
        return Err(format!("l1 norm {n} exceeds U={upper}"));
    }
    Ok(())
}

pub(crate) fn sum_points(points: &[Point], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for p in points {
        for (a, v) in acc.iter_mut().zip(p.coords()) {
            *a += v;
        }
    }
    acc
}

pub(crate) fn mean_of_users(users: &[Vec<Point>], dim: usize, total: usize) -> Point {
    let mut acc = vec![0.0; dim];
    for samples in users {
        for (a, s) in acc.iter_mut().zip(sum_points(samples, dim)) {
            *a += s;
        }
    }
    let n = total as f64;
    Point::new(acc.into_iter().map(|s| s / n).collect()).expect("mean of nonnegative points")
}

fn require_scalar(profile: &ContributionProfile, what: &'static str) -> Result<()> {
    if profile.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: profile.dim(),
            context: what,
        });
    }
    Ok(())
}

/// One draw from `Unif((0, U])`.
pub fn draw_uniform<R: Rng + ?Sized>(upper: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    upper * (1.0 - u)
}

/// One draw from `N(U/2, U/4)` (mean, variance) conditioned on `(0, U]`.
pub fn draw_projected_gaussian<R: Rng + ?Sized>(upper: f64, rng: &mut R) -> Result<f64> {
    let mean = upper / 2.0;
    let sd = (upper / 4.0).sqrt();
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + sd * z;
        if x > 0.0 && x <= upper {
            return Ok(x);
        }
    }
    Err(Error::InvalidArgument(format!(
        "rejection sampler did not accept within {MAX_REJECTION_ATTEMPTS} attempts"
    )))
}

pub fn sample_uniform_with<R: Rng + ?Sized>(profile: &ContributionProfile, rng: &mut R) -> Result<Dataset> {
    require_scalar(profile, "uniform sampling is scalar-only")?;
    let upper = profile.upper();
    let users = profile
        .counts()
        .iter()
        .map(|&m| {
            (0..m)
                .map(|_| Point::scalar(draw_uniform(upper, rng)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(profile.clone(), users)
}

pub fn sample_projected_gaussian_with<R: Rng + ?Sized>(
    profile: &ContributionProfile,
    rng: &mut R,
) -> Result<Dataset> {
    require_scalar(profile, "projected-Gaussian sampling is scalar-only")?;
    let upper = profile.upper();
    let users = profile
        .counts()
        .iter()
        .map(|&m| {
            (0..m)
                .map(|_| Point::scalar(draw_projected_gaussian(upper, rng)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(profile.clone(), users)
}

/// I.i.d. `Unif((0, U])` samples, deterministic in `seed`.
pub fn sample_uniform(profile: &ContributionProfile, seed: u64) -> Result<Dataset> {
    sample_uniform_with(profile, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// I.i.d. projected-Gaussian samples, deterministic in `seed`.
pub fn sample_projected_gaussian(profile: &ContributionProfile, seed: u64) -> Result<Dataset> {
    sample_projected_gaussian_with(profile, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// Parse a dataset CSV (`user_id,dim_0,…,dim_{d-1}`). Users are ordered by id.
pub fn read_dataset<R: Read>(reader: R, upper: f64, path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::NoRows { path: path.into() });
    }
    if &headers[0] != "user_id" {
        return Err(parse_err(1, format!("unknown header column {:?}, expected \"user_id\"", &headers[0])));
    }
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("dim_{i}") {
            return Err(parse_err(1, format!("unknown header column {h:?}, expected \"dim_{i}\"")));
        }
    }
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "header has no dim_ columns".into()));
    }

    let mut users: BTreeMap<u64, Vec<Point>> = BTreeMap::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        let user: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("user_id {:?} is not a nonnegative integer", &record[0])))?;
        let coords = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("value {f:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let point = Point::new(coords).map_err(|e| parse_err(line, format!("user {user}: {e}")))?;
        check_sample(&point, dim, upper).map_err(|msg| parse_err(line, format!("user {user}: {msg}")))?;
        users.entry(user).or_default().push(point);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::NoRows { path: path.into() });
    }
    Dataset::from_users(users.into_values().collect(), upper)
}

pub fn load_dataset(path: impl AsRef<Path>, upper: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    read_dataset(file, upper, path)
}

/// Write a dataset CSV; user `ℓ` (0-based) gets `user_id = ℓ`.
pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    write!(out, "user_id")?;
    for i in 0..ds.dim() {
        write!(out, ",dim_{i}")?;
    }
    writeln!(out)?;
    for (l, samples) in ds.users().iter().enumerate() {
        for x in samples {
            write!(out, "{l}")?;
            for v in x.coords() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.into(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_users(users: &[&[f64]]) -> Vec<Vec<Point>> {
        users
            .iter()
            .map(|s| s.iter().map(|&v| Point::scalar(v).unwrap()).collect())
            .collect()
    }

    #[test]
    fn sample_mean_examples() {
        let ds = Dataset::from_users(scalar_users(&[&[7.0]]), 10.0).unwrap();
        assert_eq!(ds.sample_mean().coords(), &[7.0]);

        let ds = Dataset::from_users(scalar_users(&[&[0.0], &[1.0]]), 1.0).unwrap();
        assert_eq!(ds.sample_mean().coords(), &[0.5]);

        let ds = Dataset::from_users(scalar_users(&[&[0.9], &[0.3, 0.3]]), 1.0).unwrap();
        assert_abs_diff_eq!(ds.sample_mean().coords()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn user_average_examples() {
        let ds = Dataset::from_users(scalar_users(&[&[0.2, 0.8], &[0.4]]), 1.0).unwrap();
        let pre = ds.preprocess_user_average();
        assert_eq!(pre.users()[0], scalar_users(&[&[0.5, 0.5]])[0]);
        assert_eq!(pre.users()[1], ds.users()[1]);
        assert_eq!(pre.profile(), ds.profile());

        let ds = Dataset::from_users(scalar_users(&[&[0.9], &[0.3, 0.3]]), 1.0).unwrap();
        let before = ds.sample_mean().coords()[0];
        let after = ds.preprocess_user_average().sample_mean().coords()[0];
        assert!((before - after).abs() <= 1e-12);
    }

    #[test]
    fn geometric_profiles() {
        let p = ContributionProfile::geometric(0, 1.0, 1).unwrap();
        assert_eq!(p.counts(), &[1]);

        let p = ContributionProfile::geometric(2, 1.0, 1).unwrap();
        assert_eq!(p.counts(), &[4, 2, 2, 1, 1, 1, 1]);

        let p = ContributionProfile::geometric(6, 65.0, 1).unwrap();
        assert_eq!(p.num_users(), 127);
        assert_eq!(p.max_count(), 64);
        assert_eq!(p.min_count(), 1);
        assert_eq!(p.total(), 448);

        for m in 0..=12u32 {
            let p = ContributionProfile::geometric(m, 1.0, 1).unwrap();
            assert_eq!(p.num_users(), (1usize << (m + 1)) - 1);
            assert_eq!(p.total(), (m as usize + 1) << m);
        }
        assert!(ContributionProfile::geometric(31, 1.0, 1).is_err());
    }

    #[test]
    fn extreme_profiles() {
        assert_eq!(ContributionProfile::extreme(2, 2, 1.0, 1).unwrap().counts(), &[1, 2]);
        assert_eq!(ContributionProfile::extreme(3, 5, 1.0, 1).unwrap().counts(), &[1, 1, 5]);
        let p = ContributionProfile::extreme(101, 10, 65.0, 1).unwrap();
        assert_eq!(p.total(), 110);
        assert_eq!(p.max_count(), 10);
        assert!(ContributionProfile::extreme(1, 5, 1.0, 1).is_err());
        assert!(ContributionProfile::extreme(3, 1, 1.0, 1).is_err());
    }

    #[test]
    fn profile_json_shape() {
        let p = ContributionProfile::new(vec![1, 2, 4], 65.0, 1).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"U":65.0,"d":1,"counts":[1,2,4]}"#);
        let back: ContributionProfile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<ContributionProfile>(r#"{"U":65.0,"d":1,"counts":[0]}"#).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_bound_samples() {
        let err = Dataset::from_users(scalar_users(&[&[70.0]]), 65.0).unwrap_err();
        assert!(err.to_string().contains("exceeds U"), "{err}");
    }

    #[test]
    fn generators_reject_vector_profiles() {
        let p = ContributionProfile::new(vec![1, 2], 1.0, 2).unwrap();
        assert!(sample_uniform(&p, 1).is_err());
        assert!(sample_projected_gaussian(&p, 1).is_err());
    }

    #[test]
    fn uniform_sampler_range_and_mean() {
        let p = ContributionProfile::new(vec![100_000], 65.0, 1).unwrap();
        let ds = sample_uniform(&p, 7).unwrap();
        let xs: Vec<f64> = ds.users()[0].iter().map(|x| x.coords()[0]).collect();
        assert!(xs.iter().all(|&x| x > 0.0 && x <= 65.0));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 32.5).abs() < 0.01 * 32.5, "mean {mean}");
        assert_eq!(sample_uniform(&p, 7).unwrap(), ds);
        assert_ne!(sample_uniform(&p, 8).unwrap(), ds);
    }

    #[test]
    fn projected_gaussian_range_mean_and_variance() {
        let p = ContributionProfile::new(vec![100_000], 65.0, 1).unwrap();
        let ds = sample_projected_gaussian(&p, 11).unwrap();
        let xs: Vec<f64> = ds.users()[0].iter().map(|x| x.coords()[0]).collect();
        assert!(xs.iter().all(|&x| x > 0.0 && x <= 65.0));
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 32.5).abs() < 0.01 * 32.5, "mean {mean}");
        assert!((var - 16.25).abs() < 0.05 * 16.25, "variance {var}");
    }

    #[test]
    fn csv_empty_file_has_no_rows() {
        let err = read_dataset("".as_bytes(), 65.0, Path::new("empty.csv")).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
        let err = read_dataset("user_id,dim_0\n".as_bytes(), 65.0, Path::new("h.csv")).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }

    #[test]
    fn csv_single_row() {
        let ds = read_dataset("user_id,dim_0\n0,32.5\n".as_bytes(), 65.0, Path::new("x.csv")).unwrap();
        assert_eq!(ds.profile().counts(), &[1]);
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.users()[0][0].coords(), &[32.5]);
    }

    #[test]
    fn csv_errors_name_line_and_user() {
        let err = read_dataset("user_id,dim_0,dim_1\n3,35,35\n".as_bytes(), 65.0, Path::new("x.csv"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("user 3") && msg.contains("exceeds U"), "{msg}");

        let err = read_dataset("user,dim_0\n0,1\n".as_bytes(), 65.0, Path::new("x.csv")).unwrap_err();
        assert!(err.to_string().contains("unknown header"), "{err}");

        let err = read_dataset("user_id,dim_0\n0,abc\n".as_bytes(), 65.0, Path::new("x.csv")).unwrap_err();
        assert!(err.to_string().contains("not a number"), "{err}");

        let err = read_dataset("user_id,dim_0\n0,1,2\n".as_bytes(), 65.0, Path::new("x.csv")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn csv_groups_rows_by_user_id() {
        let text = "user_id,dim_0\n5,1\n2,2\n5,3\n";
        let ds = read_dataset(text.as_bytes(), 65.0, Path::new("x.csv")).unwrap();
        assert_eq!(ds.profile().counts(), &[1, 2]);
        assert_eq!(ds.users()[1][1].coords(), &[3.0]);
    }

    proptest! {
        #[test]
        fn csv_round_trip(users in prop::collection::vec(
            prop::collection::vec(prop::collection::vec(0.0f64..0.5, 2), 1..4), 1..5)) {
            let users: Vec<Vec<Point>> = users
                .into_iter()
                .map(|s| s.into_iter().map(|c| Point::new(c).unwrap()).collect())
                .collect();
            let ds = Dataset::from_users(users, 1.0).unwrap();
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice(), 1.0, Path::new("mem.csv")).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn user_average_preserves_mean(seed in any::<u64>(), m in 0u32..5) {
            let p = ContributionProfile::geometric(m, 65.0, 1).unwrap();
            let ds = sample_uniform(&p, seed).unwrap();
            let before = ds.sample_mean().coords()[0];
            let after = ds.preprocess_user_average().sample_mean().coords()[0];
            prop_assert!((before - after).abs() <= 1e-12);
        }
    }
}
