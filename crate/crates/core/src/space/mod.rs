//! Finite metric measure spaces.
//!
//! A space is a finite set of points with a metric and strictly positive
//! weights. Since every point carries positive mass, a statement that holds
//! "almost everywhere" on such a space holds at every point.
//!
//! Balls are closed: `B(x, r) = { y : d(x, y) <= r }`, with a relative
//! membership slack of [`BALL_SLACK`] so that lattice points sitting exactly
//! on the sphere are not lost to rounding in generated coordinates.

mod generators;
pub mod io;

use std::sync::{Arc, OnceLock};

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;

pub use generators::{fat_cantor_intervals, landmark_generators, make_space, SpaceKind};

/// Relative slack applied to ball radii.
pub const BALL_SLACK: f64 = 1e-9;

/// Spaces up to this size get an exhaustive triangle-inequality check.
pub const EXHAUSTIVE_TRIANGLE_LIMIT: usize = 512;

/// Candidate exponents for [`FiniteMetricMeasureSpace::doubling_profile`]: 0.1, 0.2, ..., 6.0.
pub fn kappa_grid() -> Vec<f64> {
    (1..=60).map(|k| k as f64 / 10.0).collect()
}

pub type SpaceRef = Arc<FiniteMetricMeasureSpace>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub dim: usize,
    pub side: usize,
    pub spacing: f64,
}

impl GridShape {
    /// Multi-index of a point, dimension 0 varying fastest.
    pub fn multi_index(&self, point: usize) -> Vec<usize> {
        let mut rest = point;
        (0..self.dim)
            .map(|_| {
                let i = rest % self.side;
                rest /= self.side;
                i
            })
            .collect()
    }

    pub fn point(&self, multi: &[usize]) -> usize {
        multi.iter().rev().fold(0, |acc, &i| acc * self.side + i)
    }
}

#[derive(Debug, Clone)]
enum Metric {
    Matrix(Vec<f64>),
    /// Euclidean distance raised to `alpha` (`alpha = 1` is plain Euclidean).
    Coordinates {
        dim: usize,
        coords: Vec<f64>,
        alpha: f64,
        tree: KdTree<f64, usize, Vec<f64>>,
    },
}

#[derive(Debug)]
pub struct FiniteMetricMeasureSpace {
    n: usize,
    metric: Metric,
    weights: Vec<f64>,
    labels: Option<Vec<String>>,
    grid: Option<GridShape>,
    nearest: OnceLock<Vec<f64>>,
    diameter: OnceLock<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoublingProfile {
    pub c: f64,
    pub kappa: f64,
    /// Set when the space has a single point and the profile is vacuous.
    pub degenerate: bool,
    pub samples: usize,
}

fn validate_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w <= 0.0 {
            return Err(Error::InvalidSpace(format!(
                "weight {w} at point {i} is not strictly positive"
            )));
        }
    }
    Ok(())
}

fn validate_labels(labels: &Option<Vec<String>>, n: usize) -> Result<()> {
    match labels {
        Some(l) if l.len() != n => Err(Error::LengthMismatch {
            expected: n,
            got: l.len(),
        }),
        _ => Ok(()),
    }
}

impl FiniteMetricMeasureSpace {
    /// Builds a space from an explicit distance matrix.
    ///
    /// The matrix must be symmetric with a zero diagonal and satisfy the
    /// triangle inequality (checked exhaustively up to
    /// [`EXHAUSTIVE_TRIANGLE_LIMIT`] points, on `10 n` sampled triples above).
    pub fn from_matrix(
        dist: Vec<Vec<f64>>,
        weights: Vec<f64>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = dist.len();
        if n == 0 {
            return Err(Error::Empty("space"));
        }
        validate_weights(&weights, n)?;
        validate_labels(&labels, n)?;
        let mut flat = Vec::with_capacity(n * n);
        for (i, row) in dist.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidSpace(format!(
                    "distance row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidSpace(format!("d({i},{j}) = {d} is invalid")));
                }
            }
            flat.extend_from_slice(row);
        }
        for i in 0..n {
            if flat[i * n + i] != 0.0 {
                return Err(Error::InvalidSpace(format!("d({i},{i}) is not zero")));
            }
            for j in 0..i {
                if flat[i * n + j] != flat[j * n + i] {
                    return Err(Error::InvalidSpace(format!("d({i},{j}) != d({j},{i})")));
                }
            }
        }
        let space = Self {
            n,
            metric: Metric::Matrix(flat),
            weights,
            labels,
            grid: None,
            nearest: OnceLock::new(),
            diameter: OnceLock::new(),
        };
        space.check_triangle_inequality()?;
        Ok(space)
    }

    /// Builds a space from coordinates with the metric `|x - y|^alpha`,
    /// `0 < alpha <= 1`.
    pub fn from_points(
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        alpha: f64,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("space"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "metric exponent {alpha} must lie in (0, 1]"
            )));
        }
        validate_weights(&weights, n)?;
        validate_labels(&labels, n)?;
        let dim = points[0].len();
        let mut coords = Vec::with_capacity(n * dim);
        let mut tree = KdTree::with_capacity(dim.max(1), 16);
        for (i, p) in points.into_iter().enumerate() {
            if p.len() != dim {
                return Err(Error::InvalidSpace(format!(
                    "point {i} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            if let Some(&c) = p.iter().find(|c| !c.is_finite()) {
                return Err(Error::NonFinite { point: i, value: c });
            }
            coords.extend_from_slice(&p);
            let key = if dim == 0 { vec![0.0] } else { p };
            tree.add(key, i)
                .map_err(|e| Error::InvalidSpace(e.to_string()))?;
        }
        Ok(Self {
            n,
            metric: Metric::Coordinates {
                dim,
                coords,
                alpha,
                tree,
            },
            weights,
            labels,
            grid: None,
            nearest: OnceLock::new(),
            diameter: OnceLock::new(),
        })
    }

    pub(crate) fn with_grid(mut self, grid: GridShape) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn into_ref(self) -> SpaceRef {
        Arc::new(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn grid(&self) -> Option<&GridShape> {
        self.grid.as_ref()
    }

    /// Coordinate dimension, or `None` for matrix-backed spaces.
    pub fn dim(&self) -> Option<usize> {
        match &self.metric {
            Metric::Coordinates { dim, .. } => Some(*dim),
            Metric::Matrix(_) => None,
        }
    }

    pub fn coords(&self, i: usize) -> Option<&[f64]> {
        match &self.metric {
            Metric::Coordinates { dim, coords, .. } => Some(&coords[i * dim..(i + 1) * dim]),
            Metric::Matrix(_) => None,
        }
    }

    /// Exponent of the coordinate metric, `None` for matrix-backed spaces.
    pub fn metric_exponent(&self) -> Option<f64> {
        match &self.metric {
            Metric::Coordinates { alpha, .. } => Some(*alpha),
            Metric::Matrix(_) => None,
        }
    }

    pub fn check_point(&self, i: usize) -> Result<()> {
        if i < self.n {
            Ok(())
        } else {
            Err(Error::InvalidPoint {
                index: i,
                n: self.n,
            })
        }
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match &self.metric {
            Metric::Matrix(d) => d[i * self.n + j],
            Metric::Coordinates {
                dim, coords, alpha, ..
            } => {
                let a = &coords[i * dim..(i + 1) * dim];
                let b = &coords[j * dim..(j + 1) * dim];
                let e = a
                    .iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                if *alpha == 1.0 {
                    e
                } else {
                    e.powf(*alpha)
                }
            }
        }
    }

    /// Points of the closed ball `B(x, r)` with their distances to `x`, in
    /// ascending index order. The caller guarantees `x` is valid.
    pub(crate) fn ball_unchecked(&self, x: usize, r: f64) -> Vec<(usize, f64)> {
        let cutoff = r * (1.0 + BALL_SLACK);
        let mut out: Vec<(usize, f64)> = match &self.metric {
            Metric::Matrix(d) => d[x * self.n..(x + 1) * self.n]
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= cutoff)
                .map(|(j, &d)| (j, d))
                .collect(),
            Metric::Coordinates {
                dim,
                coords,
                alpha,
                tree,
            } => {
                let euclid = if *alpha == 1.0 {
                    cutoff
                } else {
                    cutoff.powf(1.0 / alpha)
                };
                let query: Vec<f64> = if *dim == 0 {
                    vec![0.0]
                } else {
                    coords[x * dim..(x + 1) * dim].to_vec()
                };
                let radius_sq = euclid * euclid * (1.0 + 1e-12);
                tree.within(&query, radius_sq, &squared_euclidean)
                    .expect("query point has the tree's dimension")
                    .into_iter()
                    .map(|(_, &j)| (j, self.dist(x, j)))
                    .filter(|&(_, d)| d <= cutoff)
                    .collect()
            }
        };
        out.sort_unstable_by_key(|&(j, _)| j);
        out
    }

    /// Closed ball `B(x, r)` as a sorted list of point indices.
    pub fn ball(&self, x: usize, r: f64) -> Result<Vec<usize>> {
        self.check_point(x)?;
        if !(r >= 0.0) {
            return Err(Error::InvalidParameter(format!("radius {r} must be >= 0")));
        }
        Ok(self
            .ball_unchecked(x, r)
            .into_iter()
            .map(|(j, _)| j)
            .collect())
    }

    pub fn ball_with_distances(&self, x: usize, r: f64) -> Result<Vec<(usize, f64)>> {
        self.check_point(x)?;
        if !(r >= 0.0) {
            return Err(Error::InvalidParameter(format!("radius {r} must be >= 0")));
        }
        Ok(self.ball_unchecked(x, r))
    }

    /// Measure of a set of points, summed in ascending index order.
    pub fn measure(&self, points: &[usize]) -> f64 {
        let mut sorted = points.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.iter().map(|&i| self.weights[i]).sum()
    }

    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted average of `g` over `B(x, r)`: the finite-radius precise
    /// representative of `g` at `x`.
    pub fn ball_average(&self, g: &ScalarField, x: usize, r: f64) -> Result<f64> {
        if g.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                got: g.len(),
            });
        }
        let ball = self.ball(x, r)?;
        let (mut num, mut den) = (0.0, 0.0);
        for &y in &ball {
            num += self.weights[y] * g.value(y);
            den += self.weights[y];
        }
        Ok(num / den)
    }

    /// `mu(B(x, r) ∩ A) / mu(B(x, r))`.
    pub fn density_ratio(&self, set: &[usize], x: usize, r: f64) -> Result<f64> {
        let mask = self.mask(set)?;
        let ball = self.ball(x, r)?;
        let (mut inside, mut total) = (0.0, 0.0);
        for &y in &ball {
            total += self.weights[y];
            if mask[y] {
                inside += self.weights[y];
            }
        }
        Ok(inside / total)
    }

    /// Whether `A` is `eps r`-dense in `B(x, r)`: every `y` in the ball lies
    /// within `eps r` of `A ∩ B(x, (1 + eps) r)`.
    pub fn local_density_check(&self, set: &[usize], x: usize, eps: f64, r: f64) -> Result<bool> {
        if !(eps > 0.0 && r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps = {eps} and r = {r} must both be positive"
            )));
        }
        let mask = self.mask(set)?;
        let anchors: Vec<usize> = self
            .ball(x, (1.0 + eps) * r)?
            .into_iter()
            .filter(|&a| mask[a])
            .collect();
        let reach = eps * r * (1.0 + BALL_SLACK);
        Ok(self
            .ball_unchecked(x, r)
            .iter()
            .all(|&(y, _)| anchors.iter().any(|&a| self.dist(y, a) <= reach)))
    }

    pub fn mask(&self, set: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.n];
        for &i in set {
            self.check_point(i)?;
            mask[i] = true;
        }
        Ok(mask)
    }

    pub fn complement(&self, set: &[usize]) -> Result<Vec<usize>> {
        let mask = self.mask(set)?;
        Ok((0..self.n).filter(|&i| !mask[i]).collect())
    }

    /// Distance from each point to its nearest other point (`inf` for a
    /// single-point space).
    pub fn nearest_neighbor_distances(&self) -> &[f64] {
        self.nearest.get_or_init(|| {
            (0..self.n)
                .into_par_iter()
                .map(|x| self.nearest_other(x))
                .collect()
        })
    }

    fn nearest_other(&self, x: usize) -> f64 {
        match &self.metric {
            Metric::Coordinates {
                dim, coords, tree, ..
            } if *dim > 0 && self.n > 1 => {
                let query = &coords[x * dim..(x + 1) * dim];
                tree.nearest(query, 2, &squared_euclidean)
                    .expect("query point has the tree's dimension")
                    .into_iter()
                    .filter(|(_, &j)| j != x)
                    .map(|(_, &j)| self.dist(x, j))
                    .fold(f64::INFINITY, f64::min)
            }
            _ => (0..self.n)
                .filter(|&j| j != x)
                .map(|j| self.dist(x, j))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn median_nearest_neighbor_distance(&self) -> f64 {
        let mut d: Vec<f64> = self
            .nearest_neighbor_distances()
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .collect();
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }

    pub fn diameter(&self) -> f64 {
        *self.diameter.get_or_init(|| {
            (0..self.n)
                .into_par_iter()
                .map(|i| (i + 1..self.n).map(|j| self.dist(i, j)).fold(0.0, f64::max))
                .reduce(|| 0.0, f64::max)
        })
    }

    /// Checks the triangle inequality, exhaustively for small spaces and on
    /// `10 n` seeded random triples otherwise. Returns the first violating
    /// triple as an error.
    pub fn check_triangle_inequality(&self) -> Result<()> {
        let n = self.n;
        let violates = |i: usize, j: usize, k: usize| {
            let lhs = self.dist(i, k);
            let rhs = self.dist(i, j) + self.dist(j, k);
            lhs > rhs + 1e-12 * lhs.max(1.0)
        };
        let report = |i, j, k| {
            Err(Error::InvalidSpace(format!(
                "triangle inequality fails on ({i}, {j}, {k})"
            )))
        };
        if n <= EXHAUSTIVE_TRIANGLE_LIMIT {
            let bad = (0..n)
                .into_par_iter()
                .find_first(|&i| (0..n).any(|j| (0..n).any(|k| violates(i, j, k))));
            if let Some(i) = bad {
                for j in 0..n {
                    for k in 0..n {
                        if violates(i, j, k) {
                            return report(i, j, k);
                        }
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7419_u64);
            for _ in 0..10 * n {
                let (i, j, k) = (
                    rng.gen_range(0..n),
                    rng.gen_range(0..n),
                    rng.gen_range(0..n),
                );
                if violates(i, j, k) {
                    return report(i, j, k);
                }
            }
        }
        Ok(())
    }

    /// Fits `mu(B(w, s)) / mu(B(x, r)) >= (1/C) (s/r)^kappa` over sampled
    /// nested ball pairs (`w` in `B(x, r)`, `s <= r`).
    ///
    /// For each candidate exponent the minimal admissible `C >= 1` is exact
    /// on the sample. `ln C(kappa)` decreases with `kappa`, so the exponent
    /// is taken where the supporting line `ln C + kappa t` of the sampled
    /// points `(t, q) = (ln(r/s), ln(mu(B(x,r)) / mu(B(w,s))))` is lowest
    /// at the mean of `t`; ties go to the smaller exponent.
    pub fn doubling_profile(&self, sample_count: usize, seed: u64) -> Result<DoublingProfile> {
        if sample_count == 0 {
            return Err(Error::InvalidParameter("sample_count must be >= 1".into()));
        }
        if self.n == 1 {
            return Ok(DoublingProfile {
                c: 1.0,
                kappa: 0.0,
                degenerate: true,
                samples: 0,
            });
        }
        let s_min = self.median_nearest_neighbor_distance();
        let r_max = self.diameter();
        if !(s_min > 0.0) || !(r_max > s_min) {
            return Ok(DoublingProfile {
                c: 1.0,
                kappa: 0.0,
                degenerate: true,
                samples: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (s_min.ln(), r_max.ln());
        let mut pairs = Vec::with_capacity(sample_count);
        for _ in 0..sample_count {
            let x = rng.gen_range(0..self.n);
            let r = rng.gen_range(lo..=hi).exp();
            let ball = self.ball_unchecked(x, r);
            let w = ball[rng.gen_range(0..ball.len())].0;
            let s = rng.gen_range(lo..=r.ln().max(lo)).exp().min(r);
            let big: f64 = ball.iter().map(|&(y, _)| self.weights[y]).sum();
            let small: f64 = self
                .ball_unchecked(w, s)
                .iter()
                .map(|&(y, _)| self.weights[y])
                .sum();
            pairs.push(((r / s).ln(), (big / small).ln()));
        }
        let mean_t = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let mut best: Option<(f64, f64, f64)> = None;
        for kappa in kappa_grid() {
            let log_c = pairs
                .iter()
                .map(|&(t, q)| q - kappa * t)
                .fold(0.0, f64::max);
            let objective = log_c + kappa * mean_t;
            if best.is_none_or(|(_, _, b)| objective < b - 1e-12) {
                best = Some((kappa, log_c.exp(), objective));
            }
        }
        let (kappa, c, _) = best.expect("kappa grid is nonempty");
        Ok(DoublingProfile {
            c,
            kappa,
            degenerate: false,
            samples: sample_count,
        })
    }
}
