//! ℓ1 geometry on the nonnegative orthant.
//!
//! Samples live in the scaled simplex `{x : x_i >= 0, Σ x_i <= U}`. Clipping
//! maps a sample onto the annulus `{x : x_i >= 0, a <= Σ x_i <= b}` under the
//! ℓ1 metric. Both projections here return the radially scaled point, which is
//! one of (generally many) ℓ1-nearest points of the target set; every
//! nearest point sits at the same distance, so only that distance matters to
//! the error analysis.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonnegative sample vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidPoint("dimension must be at least 1".into()));
        }
        if let Some((i, v)) = coords
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidPoint(format!(
                "coordinate {i} is {v}; coordinates must be finite and nonnegative"
            )));
        }
        Ok(Point(coords))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Point::new(vec![value])
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        Point(vec![0.0; dim])
    }

    /// `scale * e_axis` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize, scale: f64) -> Result<Self> {
        if axis >= dim {
            return Err(Error::InvalidPoint(format!("axis {axis} out of range for d={dim}")));
        }
        let mut coords = vec![0.0; dim];
        coords[axis] = scale;
        Point::new(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn l1_norm(&self) -> f64 {
        l1_norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Point::new(coords)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// The scaled simplex `Δ_radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexBound {
    radius: f64,
}

impl SimplexBound {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidBound(format!(
                "simplex radius must be finite and nonnegative, got {radius}"
            )));
        }
        Ok(SimplexBound { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.l1_norm() <= self.radius
    }
}

/// The ℓ1 annulus `A_{inner,outer}`: nonnegative points with norm in `[inner, outer]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnulusBound {
    inner: f64,
    outer: f64,
}

impl AnnulusBound {
    pub fn new(inner: f64, outer: f64) -> Result<Self> {
        if !(inner >= 0.0 && inner.is_finite() && outer.is_finite()) {
            return Err(Error::InvalidBound(format!(
                "annulus radii must be finite and nonnegative, got ({inner}, {outer})"
            )));
        }
        if inner > outer {
            return Err(Error::InvalidBound(format!(
                "annulus inner radius {inner} exceeds outer radius {outer}"
            )));
        }
        Ok(AnnulusBound { inner, outer })
    }

    pub fn inner(&self) -> f64 {
        self.inner
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    pub fn contains(&self, p: &Point) -> bool {
        let n = p.l1_norm();
        self.inner <= n && n <= self.outer
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum()
}

/// Scalar clamp `min(max(x, lo), hi)`.
pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// ℓ1 projection onto `Δ_radius`.
///
/// Points already inside are returned unchanged. Otherwise the result is
/// `(radius / ‖p‖₁)·p`: it has norm exactly `radius`, is dominated by `p`
/// coordinate-wise, and sits at distance `‖p‖₁ − radius`.
pub fn project_onto_simplex(p: &Point, bound: SimplexBound) -> Point {
    let norm = p.l1_norm();
    if norm <= bound.radius {
        return p.clone();
    }
    shrink_to(p, bound.radius)
}

/// ℓ1 projection onto the annulus `A_{inner,outer}`.
///
/// Above the outer radius this is [`project_onto_simplex`]. Below the inner
/// radius the point is scaled up to norm `inner` (distance `inner − ‖p‖₁`,
/// which no point of norm `inner` can beat); the zero vector maps to the
/// uniform point `(inner/d, …, inner/d)`. In one dimension this is exactly
/// the clamp to `[inner, outer]`.
pub fn project_onto_annulus(p: &Point, bound: AnnulusBound) -> Point {
    if p.dim() == 1 {
        let x = p.0[0];
        let y = clamp(x, bound.inner, bound.outer);
        return if y == x { p.clone() } else { Point(vec![y]) };
    }
    let norm = p.l1_norm();
    if norm > bound.outer {
        shrink_to(p, bound.outer)
    } else if norm < bound.inner {
        grow_to(p, bound.inner)
    } else {
        p.clone()
    }
}

fn shrink_to(p: &Point, radius: f64) -> Point {
    if radius == 0.0 {
        return Point::zeros(p.dim());
    }
    let norm = p.l1_norm();
    let factor = radius / norm;
    let mut y: Vec<f64> = p.0.iter().map(|x| x * factor).collect();
    absorb_residue(&mut y, &p.0, radius, Direction::Down);
    Point(y)
}

fn grow_to(p: &Point, radius: f64) -> Point {
    let norm = p.l1_norm();
    let d = p.dim();
    let mut y: Vec<f64> = if norm == 0.0 {
        vec![radius / d as f64; d]
    } else {
        let factor = radius / norm;
        p.0.iter().map(|x| x * factor).collect()
    };
    // Scaling up with a rounded factor can undershoot an input coordinate.
    for (yi, pi) in y.iter_mut().zip(&p.0) {
        *yi = yi.max(*pi);
    }
    absorb_residue(&mut y, &p.0, radius, Direction::Up);
    Point(y)
}

#[derive(Clone, Copy)]
enum Direction {
    /// Result must satisfy `‖y‖₁ <= target` and `y <= p`.
    Down,
    /// Result must satisfy `‖y‖₁ >= target` and `y >= p`.
    Up,
}

/// Push the rounding residue of a scaled point into its largest coordinate so
/// that the summed norm lands on the correct side of `target` (and on it, in
/// all but pathological cases) while keeping coordinate-wise dominance.
fn absorb_residue(y: &mut [f64], p: &[f64], target: f64, dir: Direction) {
    let k = y
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > y[best] { i } else { best });

    let residue = target - l1_norm(y);
    let mut yk = y[k] + residue;
    yk = match dir {
        Direction::Down => yk.min(p[k]).max(0.0),
        Direction::Up => yk.max(p[k]),
    };
    y[k] = yk;

    let mut step = ulp(y[k]);
    for _ in 0..2048 {
        let n = l1_norm(y);
        match dir {
            Direction::Down => {
                if n <= target || y[k] == 0.0 {
                    return;
                }
                y[k] = (y[k] - step).max(0.0);
            }
            Direction::Up => {
                if n >= target {
                    return;
                }
                y[k] += step;
            }
        }
        step *= 2.0;
    }
}

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1) - x
    }
}
