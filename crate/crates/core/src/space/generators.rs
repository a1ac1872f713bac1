use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{io, FiniteMetricMeasureSpace, GridShape, SpaceRef};
use crate::error::{Error, Result};
use crate::field::ScalarField;

/// Recipe for one of the canonical example spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceKind {
    /// `side^dim` points on `[0, extent]^dim`, uniform weights summing to `extent^dim`.
    Grid {
        dim: usize,
        side: usize,
        extent: f64,
    },
    /// Left endpoints of the `2^depth` middle-thirds intervals, weights `2^-depth`.
    StandardCantor { depth: u32 },
    /// Left endpoints of a positive-measure Cantor construction; weights are
    /// the lengths of the surviving intervals.
    FatCantor { depth: u32, gap_ratio: f64 },
    /// The base space with its metric replaced by `d^alpha`.
    Snowflake { base: Box<SpaceKind>, alpha: f64 },
    /// A space JSON file.
    File { path: PathBuf },
}

pub fn make_space(kind: &SpaceKind) -> Result<FiniteMetricMeasureSpace> {
    match kind {
        SpaceKind::Grid { dim, side, extent } => grid(*dim, *side, *extent),
        SpaceKind::StandardCantor { depth } => {
            if *depth < 1 {
                return Err(Error::InvalidParameter("cantor depth must be >= 1".into()));
            }
            cantor_space(cantor_intervals(*depth, |_| 1.0 / 3.0), |_| {
                0.5f64.powi(*depth as i32)
            })
        }
        SpaceKind::FatCantor { depth, gap_ratio } => {
            let intervals = fat_cantor_intervals(*depth, *gap_ratio)?;
            cantor_space(intervals, |(a, b)| b - a)
        }
        SpaceKind::Snowflake { base, alpha } => snowflake(make_space(base)?, *alpha),
        SpaceKind::File { path } => io::read_space_json(path),
    }
}

fn grid(dim: usize, side: usize, extent: f64) -> Result<FiniteMetricMeasureSpace> {
    if dim == 0 || side == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid needs dim >= 1 and side >= 1 (got {dim}, {side})"
        )));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "grid extent {extent} must be positive"
        )));
    }
    let n = side
        .checked_pow(dim as u32)
        .ok_or_else(|| Error::InvalidParameter("grid too large".into()))?;
    let spacing = if side > 1 {
        extent / (side - 1) as f64
    } else {
        0.0
    };
    let shape = GridShape { dim, side, spacing };
    let points = (0..n)
        .map(|p| {
            shape
                .multi_index(p)
                .into_iter()
                .map(|i| i as f64 * spacing)
                .collect()
        })
        .collect();
    let weights = vec![extent.powi(dim as i32) / n as f64; n];
    Ok(FiniteMetricMeasureSpace::from_points(points, weights, 1.0, None)?.with_grid(shape))
}

fn cantor_intervals(depth: u32, gap: impl Fn(u32) -> f64) -> Vec<(f64, f64)> {
    let mut intervals = vec![(0.0, 1.0)];
    for level in 1..=depth {
        let g = gap(level);
        intervals = intervals
            .into_iter()
            .flat_map(|(a, b)| {
                let keep = (b - a) * (1.0 - g) / 2.0;
                [(a, a + keep), (b - keep, b)]
            })
            .collect();
    }
    intervals
}

/// Surviving intervals of the depth-`depth` stage of a fat Cantor set: at
/// level `k` every interval loses its open middle part of relative length
/// `gap_ratio^k`, so the limit set has measure `prod (1 - gap_ratio^k) > 0`.
pub fn fat_cantor_intervals(depth: u32, gap_ratio: f64) -> Result<Vec<(f64, f64)>> {
    if depth < 1 {
        return Err(Error::InvalidParameter("cantor depth must be >= 1".into()));
    }
    if !(gap_ratio > 0.0 && gap_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gap ratio {gap_ratio} must lie in (0, 1)"
        )));
    }
    Ok(cantor_intervals(depth, |k| gap_ratio.powi(k as i32)))
}

fn cantor_space(
    intervals: Vec<(f64, f64)>,
    weight: impl Fn((f64, f64)) -> f64,
) -> Result<FiniteMetricMeasureSpace> {
    let weights = intervals.iter().map(|&iv| weight(iv)).collect();
    let points = intervals.iter().map(|&(a, _)| vec![a]).collect();
    FiniteMetricMeasureSpace::from_points(points, weights, 1.0, None)
}

fn snowflake(base: FiniteMetricMeasureSpace, alpha: f64) -> Result<FiniteMetricMeasureSpace> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "snowflake exponent {alpha} must lie in (0, 1)"
        )));
    }
    let n = base.len();
    let labels = base.labels().map(<[String]>::to_vec);
    let weights = base.weights().to_vec();
    match base.metric_exponent() {
        Some(a) => {
            let points = (0..n).map(|i| base.coords(i).unwrap().to_vec()).collect();
            FiniteMetricMeasureSpace::from_points(points, weights, a * alpha, labels)
        }
        None => {
            let dist = (0..n)
                .map(|i| (0..n).map(|j| base.dist(i, j).powf(alpha)).collect())
                .collect();
            FiniteMetricMeasureSpace::from_matrix(dist, weights, labels)
        }
    }
}

/// Distance functions `y -> d(p, y)` from each landmark `p`.
pub fn landmark_generators(space: &SpaceRef, landmarks: &[usize]) -> Result<Vec<ScalarField>> {
    if landmarks.is_empty() {
        return Err(Error::Empty("landmark set"));
    }
    landmarks
        .iter()
        .map(|&p| {
            space.check_point(p)?;
            ScalarField::from_fn(space, |y| space.dist(p, y))
        })
        .collect()
}
