//! Derivations realised as weighted difference-quotient stencils:
//!
//! ```text
//! Df(x) = sum_j w_j (f(y_j) - f(x)) / d(x, y_j)
//! ```
//!
//! Such an operator is linear and kills constants. It satisfies the Leibniz
//! rule up to a residual of order `reach`, which is what remains of the rule
//! at a finite scale. Continuity under weak* convergence is automatic in
//! finite dimensions and is not modelled.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::lipcalc::{glip, LipCalculus};
use crate::space::SpaceRef;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilEntry {
    pub neighbor: usize,
    pub weight: f64,
    pub distance: f64,
}

/// Construction recipe for [`Derivation::difference_quotient`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Forward difference along coordinate `dim` with the given step,
    /// switching to a sign-flipped backward difference where the forward
    /// neighbour does not exist.
    Axis { dim: usize, step: f64 },
    /// Average of the difference quotients to the `k` nearest neighbours
    /// within `radius`.
    Knn { k: usize, radius: f64 },
    /// Explicit `(neighbour, weight)` lists, one per point.
    Custom(Vec<Vec<(usize, f64)>>),
}

#[derive(Debug, Clone)]
pub struct Derivation {
    space: SpaceRef,
    stencils: Vec<Vec<StencilEntry>>,
    /// Points where an axis stencil fell back to a backward difference.
    flipped: Vec<usize>,
}

impl Derivation {
    pub fn from_stencils(space: &SpaceRef, stencils: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if stencils.len() != space.len() {
            return Err(Error::LengthMismatch {
                expected: space.len(),
                got: stencils.len(),
            });
        }
        let stencils = stencils
            .into_iter()
            .enumerate()
            .map(|(x, entries)| {
                entries
                    .into_iter()
                    .map(|(y, w)| {
                        space.check_point(y)?;
                        if !w.is_finite() {
                            return Err(Error::NonFinite { point: x, value: w });
                        }
                        let d = space.dist(x, y);
                        if y == x || d <= 0.0 {
                            return Err(Error::InvalidParameter(format!(
                                "stencil at {x} references {y} at zero distance"
                            )));
                        }
                        Ok(StencilEntry {
                            neighbor: y,
                            weight: w,
                            distance: d,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            space: space.clone(),
            stencils,
            flipped: Vec::new(),
        })
    }

    /// The zero derivation.
    pub fn zero(space: &SpaceRef) -> Self {
        Self {
            space: space.clone(),
            stencils: vec![Vec::new(); space.len()],
            flipped: Vec::new(),
        }
    }

    pub fn difference_quotient(space: &SpaceRef, scheme: &Scheme) -> Result<Self> {
        match scheme {
            Scheme::Axis { dim, step } => axis(space, *dim, *step),
            Scheme::Knn { k, radius } => knn(space, *k, *radius),
            Scheme::Custom(stencils) => Self::from_stencils(space, stencils.clone()),
        }
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn stencil(&self, x: usize) -> &[StencilEntry] {
        &self.stencils[x]
    }

    pub fn flipped_points(&self) -> &[usize] {
        &self.flipped
    }

    /// `sum_j |w_j|` at `x`.
    pub fn weight_mass(&self, x: usize) -> f64 {
        self.stencils[x].iter().map(|e| e.weight.abs()).sum()
    }

    /// Largest stencil distance at `x` (0 for an empty stencil).
    pub fn reach_at(&self, x: usize) -> f64 {
        self.stencils[x]
            .iter()
            .map(|e| e.distance)
            .fold(0.0, f64::max)
    }

    pub fn reach(&self) -> f64 {
        (0..self.stencils.len())
            .map(|x| self.reach_at(x))
            .fold(0.0, f64::max)
    }

    pub(crate) fn apply_values(&self, f: &[f64], x: usize) -> f64 {
        let fx = f[x];
        self.stencils[x]
            .iter()
            .map(|e| e.weight * (f[e.neighbor] - fx) / e.distance)
            .sum()
    }

    pub fn apply(&self, f: &ScalarField) -> Result<ScalarField> {
        f.ensure_space(&self.space)?;
        let values = (0..self.space.len())
            .into_par_iter()
            .map(|x| self.apply_values(f.values(), x))
            .collect();
        ScalarField::new(&self.space, values)
    }

    /// `R = D(fg) - f Dg - g Df`, checked against its closed form
    /// `sum_j w_j (f(y_j) - f(x)) (g(y_j) - g(x)) / d(x, y_j)` and against
    /// the bound `weight_mass(x) glip(f) glip(g) reach`.
    pub fn leibniz_residual(&self, f: &ScalarField, g: &ScalarField) -> Result<LeibnizReport> {
        f.ensure_space(&self.space)?;
        g.ensure_space(&self.space)?;
        let fg = f.mul(g)?;
        let (dfg, df, dg) = (self.apply(&fg)?, self.apply(f)?, self.apply(g)?);
        let direct: Vec<f64> = (0..self.space.len())
            .map(|x| dfg.value(x) - f.value(x) * dg.value(x) - g.value(x) * df.value(x))
            .collect();
        let closed: Vec<f64> = (0..self.space.len())
            .map(|x| {
                let (fx, gx) = (f.value(x), g.value(x));
                self.stencils[x]
                    .iter()
                    .map(|e| {
                        e.weight * (f.value(e.neighbor) - fx) * (g.value(e.neighbor) - gx)
                            / e.distance
                    })
                    .sum()
            })
            .collect();
        let lip_product = glip(f) * glip(g);
        let reach = self.reach();
        let mut violations = Vec::new();
        for (x, &r) in closed.iter().enumerate() {
            let bound = self.weight_mass(x) * lip_product * reach;
            if r.abs() > bound * (1.0 + 1e-12) + 1e-300 {
                violations.push(x);
            }
        }
        Ok(LeibnizReport {
            residual: ScalarField::new(&self.space, closed)?,
            direct: ScalarField::new(&self.space, direct)?,
            bound_ok: violations.is_empty(),
            violations,
        })
    }

    /// `Df - Dg` on `set`, for `f = g` on `set`. The difference vanishes
    /// exactly wherever the whole stencil stays inside `set`.
    pub fn locality_residual(
        &self,
        f: &ScalarField,
        g: &ScalarField,
        set: &[usize],
    ) -> Result<LocalityReport> {
        f.ensure_space(&self.space)?;
        g.ensure_space(&self.space)?;
        let mask = self.space.mask(set)?;
        let mut points: Vec<usize> = set.to_vec();
        points.sort_unstable();
        points.dedup();
        for &x in &points {
            if f.value(x) != g.value(x) {
                return Err(Error::Disagreement {
                    point: x,
                    left: f.value(x),
                    right: g.value(x),
                });
            }
        }
        let mut values = Vec::with_capacity(points.len());
        let mut interior = Vec::with_capacity(points.len());
        for &x in &points {
            values.push(self.apply_values(f.values(), x) - self.apply_values(g.values(), x));
            interior.push(self.stencils[x].iter().all(|e| mask[e.neighbor]));
        }
        let interior_ok = values
            .iter()
            .zip(&interior)
            .all(|(&v, &inside)| !inside || v == 0.0);
        Ok(LocalityReport {
            points,
            values,
            interior,
            interior_ok,
        })
    }

    /// Exact bound `max_x weight_mass(x)`, and optionally the empirical ratio
    /// `max |Df(x)| / Lip f(x)` over probe fields.
    pub fn operator_norm(
        &self,
        calc: Option<&LipCalculus>,
        probes: &[&ScalarField],
    ) -> Result<OperatorNorm> {
        let exact_bound = (0..self.space.len())
            .map(|x| self.weight_mass(x))
            .fold(0.0, f64::max);
        let mut empirical = None;
        let mut witnesses = Vec::new();
        if let Some(calc) = calc {
            if probes.is_empty() {
                return Err(Error::Empty("probe fields"));
            }
            let mut best = 0.0f64;
            for (k, f) in probes.iter().enumerate() {
                let df = self.apply(f)?;
                let lip = calc.lip_values(f)?;
                for x in 0..self.space.len() {
                    let d = df.value(x).abs();
                    if lip[x] > 0.0 {
                        best = best.max(d / lip[x]);
                    } else if d > 0.0 {
                        witnesses.push(NormWitness {
                            probe: k,
                            point: x,
                            value: d,
                        });
                    }
                }
            }
            empirical = Some(best);
        }
        Ok(OperatorNorm {
            exact_bound,
            empirical,
            witnesses,
        })
    }

    /// Serialisable stencil description.
    pub fn to_stencil_file(&self) -> StencilFile {
        StencilFile {
            points: self
                .stencils
                .iter()
                .enumerate()
                .map(|(x, s)| StencilPoint {
                    center: x,
                    stencil: s.iter().map(|e| (e.neighbor, e.weight)).collect(),
                })
                .collect(),
        }
    }

    pub fn from_stencil_file(space: &SpaceRef, file: &StencilFile) -> Result<Self> {
        let mut stencils = vec![Vec::new(); space.len()];
        for p in &file.points {
            space.check_point(p.center)?;
            stencils[p.center].extend(p.stencil.iter().copied());
        }
        Self::from_stencils(space, stencils)
    }

    pub fn read_json(space: &SpaceRef, path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_stencil_file(space, &serde_json::from_str(&text)?)
    }
}

fn axis(space: &SpaceRef, dim: usize, step: f64) -> Result<Derivation> {
    let space_dim = space
        .dim()
        .ok_or_else(|| Error::InvalidParameter("axis derivations need coordinates".into()))?;
    if dim >= space_dim {
        return Err(Error::InvalidParameter(format!(
            "axis {dim} out of range for dimension {space_dim}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "axis step {step} must be > 0"
        )));
    }
    let tol = 1e-6 * step;
    let offset_neighbor = |x: usize, sign: f64| -> Option<usize> {
        let target: Vec<f64> = space
            .coords(x)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, &c)| if k == dim { c + sign * step } else { c })
            .collect();
        if let Some(g) = space.grid() {
            if (g.spacing - step).abs() <= tol {
                let mut idx = g.multi_index(x);
                let i = idx[dim] as i64 + sign as i64;
                if i < 0 || i >= g.side as i64 {
                    return None;
                }
                idx[dim] = i as usize;
                return Some(g.point(&idx));
            }
        }
        // The ball is taken in the space's own metric, the match in coordinates.
        let reach = space.metric_exponent().map_or(step, |a| step.powf(a)) * 1.01;
        space
            .ball_unchecked(x, reach)
            .into_iter()
            .map(|(y, _)| y)
            .find(|&y| {
                y != x
                    && space
                        .coords(y)
                        .unwrap()
                        .iter()
                        .zip(&target)
                        .all(|(a, b)| (a - b).abs() <= tol)
            })
    };
    let mut stencils = Vec::with_capacity(space.len());
    let mut flipped = Vec::new();
    for x in 0..space.len() {
        if let Some(y) = offset_neighbor(x, 1.0) {
            stencils.push(vec![(y, 1.0)]);
        } else if let Some(y) = offset_neighbor(x, -1.0) {
            stencils.push(vec![(y, -1.0)]);
            flipped.push(x);
        } else {
            return Err(Error::InvalidParameter(format!(
                "point {x} has no neighbour at step {step} along axis {dim}"
            )));
        }
    }
    let mut d = Derivation::from_stencils(space, stencils)?;
    d.flipped = flipped;
    Ok(d)
}

fn knn(space: &SpaceRef, k: usize, radius: f64) -> Result<Derivation> {
    if k == 0 || !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "knn scheme needs k >= 1 and radius > 0 (got {k}, {radius})"
        )));
    }
    let stencils = (0..space.len())
        .map(|x| {
            let mut ball = space.ball_unchecked(x, radius);
            ball.retain(|&(y, d)| y != x && d > 0.0);
            ball.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            ball.truncate(k);
            let w = 1.0 / ball.len().max(1) as f64;
            ball.into_iter().map(|(y, _)| (y, w)).collect()
        })
        .collect();
    Derivation::from_stencils(space, stencils)
}

/// `D' = sum_i lambda_i D_i`, with per-point scaled stencils merged by
/// neighbour (first-appearance order) and zero weights dropped.
pub fn combine(lambdas: &[&ScalarField], derivations: &[&Derivation]) -> Result<Derivation> {
    if lambdas.len() != derivations.len() {
        return Err(Error::LengthMismatch {
            expected: derivations.len(),
            got: lambdas.len(),
        });
    }
    let first = derivations.first().ok_or(Error::Empty("derivation list"))?;
    let space = first.space.clone();
    for (l, d) in lambdas.iter().zip(derivations) {
        l.ensure_space(&space)?;
        if !std::sync::Arc::ptr_eq(&d.space, &space) {
            return Err(Error::SpaceMismatch);
        }
    }
    let stencils = (0..space.len())
        .map(|x| {
            let mut merged: Vec<StencilEntry> = Vec::new();
            for (l, d) in lambdas.iter().zip(derivations) {
                let c = l.value(x);
                if c == 0.0 {
                    continue;
                }
                for e in &d.stencils[x] {
                    match merged.iter_mut().find(|m| m.neighbor == e.neighbor) {
                        Some(m) => m.weight += c * e.weight,
                        None => merged.push(StencilEntry {
                            weight: c * e.weight,
                            ..*e
                        }),
                    }
                }
            }
            merged.retain(|e| e.weight != 0.0);
            merged
        })
        .collect();
    Ok(Derivation {
        space,
        stencils,
        flipped: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct LeibnizReport {
    pub residual: ScalarField,
    pub direct: ScalarField,
    pub bound_ok: bool,
    pub violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityReport {
    pub points: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether the stencil at each point stays inside the set.
    pub interior: Vec<bool>,
    pub interior_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormWitness {
    pub probe: usize,
    pub point: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorNorm {
    pub exact_bound: f64,
    pub empirical: Option<f64>,
    /// Points where `Lip f(x) = 0` but `Df(x) != 0`.
    pub witnesses: Vec<NormWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilPoint {
    pub center: usize,
    pub stencil: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilFile {
    pub points: Vec<StencilPoint>,
}

/// The tensor `D_i g_k(x)` of derivations applied to generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTable {
    n_derivations: usize,
    n_generators: usize,
    n_points: usize,
    /// Point-major: the `n_derivations x n_generators` matrix of each point
    /// is contiguous and row-major.
    data: Vec<f64>,
}

impl ComponentTable {
    pub fn build(derivations: &[&Derivation], generators: &[&ScalarField]) -> Result<Self> {
        let first = derivations.first().ok_or(Error::Empty("derivation list"))?;
        if generators.is_empty() {
            return Err(Error::Empty("generator list"));
        }
        let space = &first.space;
        for d in derivations {
            if !std::sync::Arc::ptr_eq(&d.space, space) {
                return Err(Error::SpaceMismatch);
            }
        }
        for g in generators {
            g.ensure_space(space)?;
        }
        let (m, k, n) = (derivations.len(), generators.len(), space.len());
        let data = (0..n)
            .into_par_iter()
            .flat_map_iter(|x| {
                derivations.iter().flat_map(move |d| {
                    generators
                        .iter()
                        .map(move |g| d.apply_values(g.values(), x))
                })
            })
            .collect();
        Ok(Self {
            n_derivations: m,
            n_generators: k,
            n_points: n,
            data,
        })
    }

    /// Builds a table from per-point row-major matrices.
    pub fn from_matrices(
        n_derivations: usize,
        n_generators: usize,
        matrices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(matrices.len() * n_derivations * n_generators);
        for (x, m) in matrices.iter().enumerate() {
            if m.len() != n_derivations * n_generators {
                return Err(Error::LengthMismatch {
                    expected: n_derivations * n_generators,
                    got: m.len(),
                });
            }
            if let Some(&v) = m.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { point: x, value: v });
            }
            data.extend_from_slice(m);
        }
        Ok(Self {
            n_derivations,
            n_generators,
            n_points: matrices.len(),
            data,
        })
    }

    pub fn n_derivations(&self) -> usize {
        self.n_derivations
    }

    pub fn n_generators(&self) -> usize {
        self.n_generators
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn get(&self, derivation: usize, generator: usize, point: usize) -> f64 {
        self.data[(point * self.n_derivations + derivation) * self.n_generators + generator]
    }

    /// Row-major `n_derivations x n_generators` matrix at `point`.
    pub fn matrix_at(&self, point: usize) -> &[f64] {
        let size = self.n_derivations * self.n_generators;
        &self.data[point * size..(point + 1) * size]
    }

    pub fn row(&self, derivation: usize, point: usize) -> &[f64] {
        let start = (point * self.n_derivations + derivation) * self.n_generators;
        &self.data[start..start + self.n_generators]
    }

    /// Table restricted to the given derivations (rows) and generators
    /// (columns), in the given orders.
    pub fn select(&self, derivations: &[usize], generators: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.n_points * derivations.len() * generators.len());
        for x in 0..self.n_points {
            for &i in derivations {
                for &k in generators {
                    data.push(self.get(i, k, x));
                }
            }
        }
        Self {
            n_derivations: derivations.len(),
            n_generators: generators.len(),
            n_points: self.n_points,
            data,
        }
    }

    /// Swaps the roles of derivations and generators.
    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.n_points {
            for k in 0..self.n_generators {
                for i in 0..self.n_derivations {
                    data.push(self.get(i, k, x));
                }
            }
        }
        Self {
            n_derivations: self.n_generators,
            n_generators: self.n_derivations,
            n_points: self.n_points,
            data,
        }
    }

    /// CSV `derivation,generator,point,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("derivation,generator,point,value\n");
        for i in 0..self.n_derivations {
            for k in 0..self.n_generators {
                for x in 0..self.n_points {
                    out.push_str(&format!("{i},{k},{x},{:?}\n", self.get(i, k, x)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipcalc::ScaleLadder;
    use crate::space::{make_space, SpaceKind};
    use proptest::prelude::*;

    fn grid(dim: usize, side: usize) -> SpaceRef {
        make_space(&SpaceKind::Grid {
            dim,
            side,
            extent: 1.0,
        })
        .unwrap()
        .into_ref()
    }

    fn axis(space: &SpaceRef, dim: usize) -> Derivation {
        let h = space.grid().unwrap().spacing;
        Derivation::difference_quotient(space, &Scheme::Axis { dim, step: h }).unwrap()
    }

    /// Reference stencil evaluation straight from the definition.
    fn reference_apply(d: &Derivation, f: &ScalarField, x: usize) -> f64 {
        let s = d.space();
        d.stencil(x)
            .iter()
            .map(|e| e.weight * (f.value(e.neighbor) - f.value(x)) / s.dist(x, e.neighbor))
            .sum()
    }

    #[test]
    fn axis_examples() {
        let line = grid(1, 17);
        let d = axis(&line, 0);
        let x = ScalarField::coordinate(&line, 0).unwrap();
        assert!(d
            .apply(&x)
            .unwrap()
            .values()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(d.flipped_points(), &[16]);
        let c = ScalarField::constant(&line, 7.0).unwrap();
        assert!(d.apply(&c).unwrap().values().iter().all(|&v| v == 0.0));
        let sq = grid(2, 6);
        let dy = axis(&sq, 1);
        let x = ScalarField::coordinate(&sq, 0).unwrap();
        assert!(dy.apply(&x).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(Derivation::difference_quotient(&sq, &Scheme::Axis { dim: 2, step: 0.2 }).is_err());
    }

    #[test]
    fn axis_search_without_grid_shortcut() {
        // a snowflaked line has no grid shape; neighbours are matched by coordinates
        let s = make_space(&SpaceKind::Snowflake {
            base: Box::new(SpaceKind::Grid {
                dim: 1,
                side: 9,
                extent: 1.0,
            }),
            alpha: 0.5,
        })
        .unwrap()
        .into_ref();
        let d = Derivation::difference_quotient(
            &s,
            &Scheme::Axis {
                dim: 0,
                step: 0.125,
            },
        )
        .unwrap();
        assert_eq!(d.stencil(3)[0].neighbor, 4);
        assert_eq!(d.flipped_points(), &[8]);
        assert!((d.reach() - 0.125f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stencil_validation() {
        let s = grid(1, 3);
        assert!(Derivation::from_stencils(&s, vec![vec![(0, 1.0)], vec![], vec![]]).is_err());
        assert!(Derivation::from_stencils(&s, vec![vec![(5, 1.0)], vec![], vec![]]).is_err());
        assert!(Derivation::from_stencils(&s, vec![vec![]; 2]).is_err());
        let z = Derivation::zero(&s);
        let f = ScalarField::coordinate(&s, 0).unwrap();
        assert_eq!(z.apply(&f).unwrap().sup_norm(), 0.0);
        assert_eq!(z.operator_norm(None, &[]).unwrap().exact_bound, 0.0);
    }

    #[test]
    fn knn_is_normalised() {
        let s = grid(2, 7);
        let d = Derivation::difference_quotient(&s, &Scheme::Knn { k: 4, radius: 0.2 }).unwrap();
        for x in 0..s.len() {
            assert!((d.weight_mass(x) - 1.0).abs() < 1e-15);
            assert!(d.reach_at(x) <= 0.2);
        }
    }

    #[test]
    fn leibniz_on_the_line() {
        let s = grid(1, 33);
        let h = 1.0 / 32.0;
        let d = axis(&s, 0);
        let x = ScalarField::coordinate(&s, 0).unwrap();
        let rep = d.leibniz_residual(&x, &x).unwrap();
        for i in 1..32 {
            assert!((rep.residual.value(i) - h).abs() < 1e-14);
        }
        assert!(rep.bound_ok);
        let c = ScalarField::constant(&s, 2.5).unwrap();
        let rep = d.leibniz_residual(&x, &c).unwrap();
        assert!(rep.residual.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn locality_on_half_line() {
        let s = grid(1, 10);
        let d = axis(&s, 0);
        let f = ScalarField::coordinate(&s, 0).unwrap();
        let g = ScalarField::from_fn(&s, |i| if i < 5 { f.value(i) } else { 3.0 }).unwrap();
        let rep = d.locality_residual(&f, &g, &[0, 1, 2, 3, 4]).unwrap();
        assert!(rep.interior_ok);
        assert_eq!(rep.interior, vec![true, true, true, true, false]);
        assert!(rep.values[..4].iter().all(|&v| v == 0.0));
        assert!(rep.values[4] != 0.0);
        let all: Vec<usize> = (0..10).collect();
        assert!(d
            .locality_residual(&f, &f, &all)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            d.locality_residual(&f, &g, &[6]),
            Err(Error::Disagreement { point: 6, .. })
        ));
    }

    #[test]
    fn operator_norms() {
        let s = grid(1, 33);
        let d = axis(&s, 0);
        let calc = LipCalculus::with_default_ladder(&s).unwrap();
        let x = ScalarField::coordinate(&s, 0).unwrap();
        let n = d.operator_norm(Some(&calc), &[&x]).unwrap();
        assert_eq!(n.exact_bound, 1.0);
        assert!((n.empirical.unwrap() - 1.0).abs() < 1e-12);
        assert!(n.witnesses.is_empty());
        assert!(d.operator_norm(Some(&calc), &[]).is_err());
    }

    #[test]
    fn combine_examples() {
        let s = grid(2, 5);
        let dx = axis(&s, 0);
        let one = ScalarField::constant(&s, 1.0).unwrap();
        let minus = ScalarField::constant(&s, -1.0).unwrap();
        let z = combine(&[&one, &minus], &[&dx, &dx]).unwrap();
        assert!((0..s.len()).all(|x| z.stencil(x).is_empty()));
        let ind = ScalarField::from_fn(&s, |i| if i < 10 { 1.0 } else { 0.0 }).unwrap();
        let supported = combine(&[&ind], &[&dx]).unwrap();
        assert!((10..s.len()).all(|x| supported.stencil(x).is_empty()));
        assert!((0..10).all(|x| !supported.stencil(x).is_empty()));
        assert!(combine(&[&one], &[&dx, &dx]).is_err());
    }

    #[test]
    fn component_tables() {
        let s = grid(2, 6);
        let (dx, dy) = (axis(&s, 0), axis(&s, 1));
        let x = ScalarField::coordinate(&s, 0).unwrap();
        let y = ScalarField::coordinate(&s, 1).unwrap();
        let t = ComponentTable::build(&[&dx, &dy], &[&x, &y]).unwrap();
        for p in 0..s.len() {
            let m = t.matrix_at(p);
            for (v, e) in m.iter().zip([1.0, 0.0, 0.0, 1.0]) {
                assert!((v - e).abs() < 1e-12);
            }
        }
        let c = ScalarField::constant(&s, 1.0).unwrap();
        let zero = ComponentTable::build(&[&dx], &[&c]).unwrap();
        assert!((0..s.len()).all(|p| zero.get(0, 0, p) == 0.0));
        let x2 = x.scale(2.0).unwrap();
        let t2 = ComponentTable::build(&[&dx, &dy], &[&x, &x2]).unwrap();
        for p in 0..s.len() {
            for i in 0..2 {
                assert_eq!(t2.get(i, 1, p), 2.0 * t2.get(i, 0, p));
            }
        }
        assert_eq!(t, ComponentTable::build(&[&dx, &dy], &[&x, &y]).unwrap());
        let tt = t.transposed();
        assert_eq!(tt.get(1, 0, 3), t.get(0, 1, 3));
        assert_eq!(tt.transposed(), t);
        let sel = t.select(&[1], &[1, 0]);
        assert_eq!(sel.row(0, 4), &[t.get(1, 1, 4), t.get(1, 0, 4)]);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 * s.len());
        assert!(ComponentTable::build(&[], &[&x]).is_err());
    }

    #[test]
    fn stencil_file_round_trip() {
        let s = grid(2, 4);
        let d = Derivation::difference_quotient(&s, &Scheme::Knn { k: 3, radius: 0.5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        std::fs::write(&path, serde_json::to_string(&d.to_stencil_file()).unwrap()).unwrap();
        let back = Derivation::read_json(&s, &path).unwrap();
        for x in 0..s.len() {
            assert_eq!(back.stencil(x), d.stencil(x));
        }
    }

    fn smooth(space: &SpaceRef, a: f64, b: f64, c: f64) -> ScalarField {
        ScalarField::from_fn(space, |i| {
            let p = space.coords(i).unwrap();
            a * (2.0 * p[0]).sin() + b * p[1] * p[0] + c * (p[1] - 0.3).abs()
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn linear_leibniz_and_module_laws(
            c in prop::collection::vec(-2.0f64..2.0, 8),
            k in 1usize..6,
        ) {
            let s = grid(2, 9);
            let d = Derivation::difference_quotient(&s, &Scheme::Knn { k, radius: 0.3 }).unwrap();
            let dx = axis(&s, 0);
            let f = smooth(&s, c[0], c[1], c[2]);
            let g = smooth(&s, c[3], c[4], c[5]);
            let combo = ScalarField::combination(&[&f, &g], &[c[6], c[7]]).unwrap();
            let (df, dg, dc) = (d.apply(&f).unwrap(), d.apply(&g).unwrap(), d.apply(&combo).unwrap());
            let rep = d.leibniz_residual(&f, &g).unwrap();
            prop_assert!(rep.bound_ok);
            for x in 0..s.len() {
                prop_assert!((dc.value(x) - c[6] * df.value(x) - c[7] * dg.value(x)).abs() < 1e-12);
                prop_assert!((df.value(x) - reference_apply(&d, &f, x)).abs() < 1e-12);
                prop_assert!((rep.residual.value(x) - rep.direct.value(x)).abs() < 1e-12);
                prop_assert!(df.value(x).abs() <= d.weight_mass(x) * glip(&f) * (1.0 + 1e-12));
            }
            // (l + m) D = l D + m D and l (D + D') = l D + l D'
            let l = ScalarField::from_fn(&s, |i| c[0] + i as f64 * 0.01).unwrap();
            let m = ScalarField::from_fn(&s, |i| c[1] - (i % 3) as f64).unwrap();
            let lm = l.add(&m).unwrap();
            let one = ScalarField::constant(&s, 1.0).unwrap();
            let lhs = combine(&[&lm], &[&d]).unwrap().apply(&f).unwrap();
            let rhs = combine(&[&l, &m], &[&d, &d]).unwrap().apply(&f).unwrap();
            let sum = combine(&[&one, &one], &[&d, &dx]).unwrap();
            let lhs2 = combine(&[&l], &[&sum]).unwrap().apply(&g).unwrap();
            let rhs2 = combine(&[&l, &l], &[&d, &dx]).unwrap().apply(&g).unwrap();
            for x in 0..s.len() {
                prop_assert!((lhs.value(x) - rhs.value(x)).abs() < 1e-12);
                prop_assert!((lhs2.value(x) - rhs2.value(x)).abs() < 1e-12);
                let direct = l.value(x) * d.apply_values(f.values(), x) + m.value(x) * d.apply_values(f.values(), x);
                prop_assert!((rhs.value(x) - direct).abs() < 1e-12);
            }
        }

        #[test]
        fn locality_matches_stencil_membership(
            mask in prop::collection::vec(any::<bool>(), 81),
            c in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let s = grid(2, 9);
            let d = Derivation::difference_quotient(&s, &Scheme::Knn { k: 4, radius: 0.3 }).unwrap();
            let set: Vec<usize> = (0..81).filter(|&i| mask[i]).collect();
            let f = smooth(&s, c[0], c[1], c[2]);
            let g = ScalarField::from_fn(&s, |i| if mask[i] { f.value(i) } else { f.value(i) + 1.0 + i as f64 }).unwrap();
            let rep = d.locality_residual(&f, &g, &set).unwrap();
            prop_assert!(rep.interior_ok);
            for (k, &x) in rep.points.iter().enumerate() {
                let inside = d.stencil(x).iter().all(|e| mask[e.neighbor]);
                prop_assert_eq!(inside, rep.interior[k]);
                if inside {
                    prop_assert_eq!(rep.values[k], 0.0);
                } else {
                    prop_assert!(rep.values[k] != 0.0);
                }
            }
        }

        #[test]
        fn normalised_derivations_obey_the_localized_inequality(
            c in prop::collection::vec(-2.0f64..2.0, 3),
            k in 1usize..5,
        ) {
            let s = grid(2, 12);
            let h = 1.0 / 11.0;
            let calc = LipCalculus::new(&s, ScaleLadder::geometric(0.4, 0.5, 1.5 * h).unwrap(), Default::default());
            let d = Derivation::difference_quotient(&s, &Scheme::Knn { k, radius: 1.5 * h }).unwrap();
            let f = smooth(&s, c[0], c[1], c[2]);
            let df = d.apply(&f).unwrap();
            let lip = calc.lip_values(&f).unwrap();
            for x in 0..s.len() {
                prop_assert!(df.value(x).abs() <= lip[x] * (1.0 + 1e-12));
            }
            let n = d.operator_norm(Some(&calc), &[&f]).unwrap();
            prop_assert!(n.empirical.unwrap() <= n.exact_bound * (1.0 + 1e-12));
        }
    }
}
