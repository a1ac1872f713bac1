//! Pointwise Lipschitz calculus on a finite space.
//!
//! The infinitesimal constants `Lip f(x)` and `lip f(x)` are limits as the
//! radius shrinks to zero, which has no content on a finite space. Here they
//! are evaluated over a [`ScaleLadder`]: a ladder scale `s` is admissible at
//! `x` when `B(x, s) != {x}`, the smallest admissible scale is the point's
//! floor, and the resolved constants are read off at the floor. A point
//! with no admissible scale is isolated at this resolution and reports 0.

mod independence;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::space::{FiniteMetricMeasureSpace, SpaceRef, BALL_SLACK};

pub use independence::{
    sphere_points, IndependenceTest, DEFAULT_RELATIVE_TAU, DESCENT_SWEEPS, SAMPLES_PER_FIELD,
};

/// Strictly decreasing radii `r_0 > r_1 > ... > r_K > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    radii: Vec<f64>,
}

impl ScaleLadder {
    pub fn new(radii: Vec<f64>) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::Empty("scale ladder"));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "ladder radii must be positive and finite: {radii:?}"
            )));
        }
        if radii.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "ladder radii must be strictly decreasing: {radii:?}"
            )));
        }
        Ok(Self { radii })
    }

    /// `r0, r0 q, r0 q^2, ...` down to `floor`, which is always the last
    /// rung. A top radius at or below the floor gives the one-rung ladder
    /// `{floor}`.
    pub fn geometric(r0: f64, ratio: f64, floor: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ladder ratio {ratio} must lie in (0, 1)"
            )));
        }
        if !(floor > 0.0 && floor.is_finite() && r0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ladder floor {floor} must be positive"
            )));
        }
        let mut radii = Vec::new();
        let mut r = r0;
        while r > floor * (1.0 + 1e-9) {
            radii.push(r);
            r *= ratio;
        }
        radii.push(floor);
        Self::new(radii)
    }

    /// Parses `r0:ratio:floor`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Error::InvalidParameter(format!("ladder spec `{spec}` is not r0:ratio:floor"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Self::geometric(nums[0], nums[1], nums[2])
    }

    /// Ratio 1/2 from a quarter of the diameter down to the median
    /// nearest-neighbour distance.
    pub fn default_for(space: &FiniteMetricMeasureSpace) -> Result<Self> {
        let floor = space.median_nearest_neighbor_distance();
        if !(floor > 0.0) {
            return Err(Error::InvalidSpace(
                "no positive nearest-neighbour distance to anchor a ladder".into(),
            ));
        }
        Self::geometric(space.diameter() / 4.0, 0.5, floor)
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn top(&self) -> f64 {
        self.radii[0]
    }

    pub fn floor(&self) -> f64 {
        *self.radii.last().unwrap()
    }
}

/// How the variation of `f` on a ball is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationRule {
    /// `sup_{y in B(x,r), y != x} |f(x) - f(y)| / d(x, y)`.
    #[default]
    DifferenceQuotient,
    /// `(1/r) sup_{y in B(x,r)} |f(x) - f(y)|`.
    Radius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipKind {
    Upper,
    Lower,
}

/// `(1/r) sup_{y in B(x, r)} |f(x) - f(y)|`.
pub fn varlip(f: &ScalarField, x: usize, r: f64) -> Result<f64> {
    variation(f, x, r, VariationRule::Radius)
}

/// The variation of `f` on `B(x, r)` under the given rule; 0 when the ball
/// is `{x}`.
pub fn variation(f: &ScalarField, x: usize, r: f64, rule: VariationRule) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("radius {r} must be > 0")));
    }
    let ball = f.space().ball_with_distances(x, r)?;
    let fx = f.value(x);
    Ok(ball
        .iter()
        .filter(|&&(y, d)| y != x && d > 0.0)
        .map(|&(y, d)| quotient(rule, (f.value(y) - fx).abs(), d, r))
        .fold(0.0, f64::max))
}

#[inline]
fn quotient(rule: VariationRule, jump: f64, d: f64, r: f64) -> f64 {
    match rule {
        VariationRule::DifferenceQuotient => jump / d,
        VariationRule::Radius => jump / r,
    }
}

/// Global Lipschitz constant `max_{x != y} |f(x) - f(y)| / d(x, y)`.
pub fn glip(f: &ScalarField) -> f64 {
    let space = f.space();
    let n = space.len();
    let v = f.values();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let d = space.dist(i, j);
                    if d > 0.0 {
                        (v[i] - v[j]).abs() / d
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// `max(sup |f|, glip f)`.
pub fn lip_norm(f: &ScalarField) -> f64 {
    f.sup_norm().max(glip(f))
}

/// McShane extension `g(y) = min_{a in A} f(a) + L d(a, y)` of data given on
/// `set` (values in the same order). `g` equals the data on `set` exactly.
pub fn mcshane_extend(
    space: &SpaceRef,
    set: &[usize],
    values: &[f64],
    bound: f64,
) -> Result<ScalarField> {
    if set.is_empty() {
        return Err(Error::Empty("extension domain"));
    }
    if set.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: set.len(),
            got: values.len(),
        });
    }
    let mask = space.mask(set)?;
    let mut worst: Option<(f64, usize, usize)> = None;
    for (ia, &a) in set.iter().enumerate() {
        for (ib, &b) in set.iter().enumerate().skip(ia + 1) {
            let d = space.dist(a, b);
            if d > 0.0 {
                let q = (values[ia] - values[ib]).abs() / d;
                if worst.is_none_or(|(w, _, _)| q > w) {
                    worst = Some((q, a, b));
                }
            }
        }
    }
    if let Some((constant, a, b)) = worst {
        if bound < constant * (1.0 - 1e-12) {
            return Err(Error::LipschitzBound {
                bound,
                constant,
                a,
                b,
            });
        }
    }
    let mut given = vec![None; space.len()];
    for (&a, &v) in set.iter().zip(values) {
        given[a] = Some(v);
    }
    let out = (0..space.len())
        .map(|y| {
            if mask[y] {
                given[y].unwrap()
            } else {
                set.iter()
                    .zip(values)
                    .map(|(&a, &v)| v + bound * space.dist(a, y))
                    .fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    ScalarField::new(space, out)
}

/// Per-scale record of one point's Lipschitz profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub r: f64,
    pub varlip: f64,
    pub upper: f64,
    pub lower: f64,
}

/// `Lip f(x, r)` and `lip f(x, r)` over every admissible ladder scale, plus
/// the resolved values at each point's floor.
#[derive(Debug, Clone)]
pub struct LipProfile {
    /// Admissible scales per point, largest first.
    pub entries: Vec<Vec<ScaleEntry>>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub isolated: Vec<bool>,
}

impl LipProfile {
    /// CSV `point,r,varlip,upper,lower`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,r,varlip,upper,lower\n");
        for (x, entries) in self.entries.iter().enumerate() {
            for e in entries {
                out.push_str(&format!(
                    "{x},{:?},{:?},{:?},{:?}\n",
                    e.r, e.varlip, e.upper, e.lower
                ));
            }
        }
        out
    }
}

/// Lipschitz calculus on one space at a fixed ladder and variation rule.
#[derive(Debug, Clone)]
pub struct LipCalculus {
    space: SpaceRef,
    ladder: ScaleLadder,
    rule: VariationRule,
    /// Index of the smallest admissible rung per point.
    floors: Vec<Option<usize>>,
}

impl LipCalculus {
    pub fn new(space: &SpaceRef, ladder: ScaleLadder, rule: VariationRule) -> Self {
        let radii = ladder.radii();
        let floors = space
            .nearest_neighbor_distances()
            .iter()
            .map(|&nn| radii.iter().rposition(|&s| nn <= s * (1.0 + BALL_SLACK)))
            .collect();
        Self {
            space: space.clone(),
            ladder,
            rule,
            floors,
        }
    }

    pub fn with_default_ladder(space: &SpaceRef) -> Result<Self> {
        Ok(Self::new(
            space,
            ScaleLadder::default_for(space)?,
            VariationRule::default(),
        ))
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn ladder(&self) -> &ScaleLadder {
        &self.ladder
    }

    pub fn rule(&self) -> VariationRule {
        self.rule
    }

    /// Smallest admissible ladder scale at `x`, `None` if `x` is isolated.
    pub fn floor(&self, x: usize) -> Option<f64> {
        self.floors[x].map(|k| self.ladder.radii()[k])
    }

    pub fn is_isolated(&self, x: usize) -> bool {
        self.floors[x].is_none()
    }

    fn check_field(&self, f: &ScalarField) -> Result<()> {
        f.ensure_space(&self.space)
    }

    pub fn variation(&self, f: &ScalarField, x: usize, r: f64) -> Result<f64> {
        self.check_field(f)?;
        variation(f, x, r, self.rule)
    }

    /// Variations at the given admissible scales (descending), sharing one
    /// ball query at the largest.
    fn variations(&self, values: &[f64], x: usize, scales: &[f64]) -> Vec<f64> {
        let mut ball = self.space.ball_unchecked(x, scales[0]);
        ball.retain(|&(y, d)| y != x && d > 0.0);
        ball.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let fx = values[x];
        let mut out = vec![0.0; scales.len()];
        let mut running = 0.0f64;
        let mut next = 0;
        for (k, &s) in scales.iter().enumerate().rev() {
            let cutoff = s * (1.0 + BALL_SLACK);
            match self.rule {
                VariationRule::DifferenceQuotient => {
                    while next < ball.len() && ball[next].1 <= cutoff {
                        let (y, d) = ball[next];
                        running = running.max((values[y] - fx).abs() / d);
                        next += 1;
                    }
                    out[k] = running;
                }
                VariationRule::Radius => {
                    while next < ball.len() && ball[next].1 <= cutoff {
                        running = running.max((values[ball[next].0] - fx).abs());
                        next += 1;
                    }
                    out[k] = running / s;
                }
            }
        }
        out
    }

    /// `sup` (upper) or `inf` (lower) of the variation over ladder scales
    /// `s <= r` that are admissible at `x`.
    pub fn local_lipschitz(&self, f: &ScalarField, x: usize, r: f64, kind: LipKind) -> Result<f64> {
        self.check_field(f)?;
        self.space.check_point(x)?;
        let kmax = self.floors[x].ok_or(Error::Isolated { point: x })?;
        let radii = &self.ladder.radii()[..=kmax];
        let floor = radii[kmax];
        if r < floor * (1.0 - BALL_SLACK) {
            return Err(Error::BelowFloor {
                point: x,
                radius: r,
                floor,
            });
        }
        let first = radii
            .iter()
            .position(|&s| s <= r * (1.0 + BALL_SLACK))
            .expect("floor is at most r");
        let vars = self.variations(f.values(), x, &radii[first..]);
        Ok(match kind {
            LipKind::Upper => vars.iter().copied().fold(0.0, f64::max),
            LipKind::Lower => vars.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    /// Resolved `Lip f(x)` for raw values; `None` at isolated points.
    pub(crate) fn lip_values_at(&self, values: &[f64], x: usize) -> Option<f64> {
        let k = self.floors[x]?;
        Some(self.variations(values, x, &self.ladder.radii()[k..=k])[0])
    }

    /// Resolved `Lip f(x)` (0 at isolated points).
    pub fn lip_at(&self, f: &ScalarField, x: usize) -> Result<f64> {
        self.check_field(f)?;
        self.space.check_point(x)?;
        Ok(self.lip_values_at(f.values(), x).unwrap_or(0.0))
    }

    /// The resolved upper constant at every point, without the profile.
    pub fn lip_values(&self, f: &ScalarField) -> Result<Vec<f64>> {
        self.check_field(f)?;
        Ok((0..self.space.len())
            .into_par_iter()
            .map(|x| self.lip_values_at(f.values(), x).unwrap_or(0.0))
            .collect())
    }

    pub fn profile(&self, f: &ScalarField) -> Result<LipProfile> {
        self.check_field(f)?;
        let radii = self.ladder.radii();
        let per_point: Vec<(Vec<ScaleEntry>, bool)> = (0..self.space.len())
            .into_par_iter()
            .map(|x| match self.floors[x] {
                None => (Vec::new(), true),
                Some(kmax) => {
                    let scales = &radii[..=kmax];
                    let vars = self.variations(f.values(), x, scales);
                    let mut entries = vec![
                        ScaleEntry {
                            r: 0.0,
                            varlip: 0.0,
                            upper: 0.0,
                            lower: 0.0
                        };
                        scales.len()
                    ];
                    let (mut up, mut lo) = (0.0f64, f64::INFINITY);
                    for k in (0..scales.len()).rev() {
                        up = up.max(vars[k]);
                        lo = lo.min(vars[k]);
                        entries[k] = ScaleEntry {
                            r: scales[k],
                            varlip: vars[k],
                            upper: up,
                            lower: lo,
                        };
                    }
                    (entries, false)
                }
            })
            .collect();
        let mut profile = LipProfile {
            entries: Vec::with_capacity(per_point.len()),
            upper: Vec::with_capacity(per_point.len()),
            lower: Vec::with_capacity(per_point.len()),
            isolated: Vec::with_capacity(per_point.len()),
        };
        for (entries, isolated) in per_point {
            let last = entries.last().copied();
            profile.upper.push(last.map_or(0.0, |e| e.upper));
            profile.lower.push(last.map_or(0.0, |e| e.lower));
            profile.isolated.push(isolated);
            profile.entries.push(entries);
        }
        Ok(profile)
    }

    /// Per-point `Lip f(x)` or `lip f(x)` with the full profile.
    pub fn lip_field(&self, f: &ScalarField, kind: LipKind) -> Result<(ScalarField, LipProfile)> {
        let profile = self.profile(f)?;
        let values = match kind {
            LipKind::Upper => profile.upper.clone(),
            LipKind::Lower => profile.lower.clone(),
        };
        Ok((ScalarField::new(&self.space, values)?, profile))
    }

    /// Difference quotients at the floor scale of `x`, one row per
    /// neighbour and one column per field: `Lip(sum l_i f_i)(x)` is the sup
    /// norm of `rows * l`.
    pub(crate) fn floor_quotients(&self, fields: &[&[f64]], x: usize) -> Vec<Vec<f64>> {
        let Some(k) = self.floors[x] else {
            return Vec::new();
        };
        let s = self.ladder.radii()[k];
        self.space
            .ball_unchecked(x, s)
            .into_iter()
            .filter(|&(y, d)| y != x && d > 0.0)
            .map(|(y, d)| {
                let denom = match self.rule {
                    VariationRule::DifferenceQuotient => d,
                    VariationRule::Radius => s,
                };
                fields.iter().map(|f| (f[y] - f[x]) / denom).collect()
            })
            .collect()
    }

    /// `Phi_x(lambda) = Lip(sum_i lambda_i f_i)(x)`.
    pub fn independence_seminorm(
        &self,
        fields: &[&ScalarField],
        lambda: &[f64],
        x: usize,
    ) -> Result<f64> {
        if fields.is_empty() {
            return Err(Error::Empty("field list"));
        }
        if fields.len() != lambda.len() {
            return Err(Error::LengthMismatch {
                expected: fields.len(),
                got: lambda.len(),
            });
        }
        for f in fields {
            self.check_field(f)?;
        }
        self.space.check_point(x)?;
        let combo = ScalarField::combination(fields, lambda)?;
        Ok(self.lip_values_at(combo.values(), x).unwrap_or(0.0))
    }
}
