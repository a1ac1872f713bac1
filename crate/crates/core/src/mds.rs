//! Measurable differentiable structures: charts built from a generating
//! set, partial derivatives, differentials and the norms and inequalities
//! that tie them to the Lipschitz calculus.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivation::{ComponentTable, Derivation};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::lipcalc::LipCalculus;
use crate::modalg::{self, DualBasisRecord};
use crate::space::{SpaceRef, BALL_SLACK};

/// Relative ridge added to the least-squares normal equations.
pub const LSQ_RIDGE: f64 = 1e-12;

/// Default Hadamard-ratio floor for chart minors.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-3;

/// How a chart's partial derivatives are computed by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChartMethod {
    /// Zero-dimensional chart: no chart functions.
    Point,
    Lsq {
        radius: f64,
    },
    /// Index into [`Atlas::records`].
    Dual {
        record: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub domain: Vec<usize>,
    /// Indices into the atlas registry.
    pub functions: Vec<usize>,
    pub method: ChartMethod,
}

impl Chart {
    pub fn dimension(&self) -> usize {
        self.functions.len()
    }
}

/// Which partial-derivative computation to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PdMethod {
    Lsq { radius: f64 },
    Dual,
}

/// Charts over a registry of candidate chart functions.
#[derive(Debug, Clone)]
pub struct Atlas {
    space: SpaceRef,
    registry: Vec<ScalarField>,
    records: Vec<DualBasisRecord>,
    /// Derivation indices behind each dual record.
    record_derivations: Vec<Vec<usize>>,
    charts: Vec<Chart>,
    owner: Vec<Option<usize>>,
}

impl Atlas {
    pub fn new(space: &SpaceRef, registry: Vec<ScalarField>) -> Result<Self> {
        for f in &registry {
            f.ensure_space(space)?;
        }
        Ok(Self {
            space: space.clone(),
            registry,
            records: Vec::new(),
            record_derivations: Vec::new(),
            charts: Vec::new(),
            owner: vec![None; space.len()],
        })
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn registry(&self) -> &[ScalarField] {
        &self.registry
    }

    pub fn charts(&self) -> &[Chart] {
        &self.charts
    }

    pub fn chart(&self, id: usize) -> &Chart {
        &self.charts[id]
    }

    pub fn records(&self) -> &[DualBasisRecord] {
        &self.records
    }

    /// Chart containing `x`.
    pub fn chart_of(&self, x: usize) -> Option<usize> {
        self.owner.get(x).copied().flatten()
    }

    /// Points in no chart.
    pub fn leftover(&self) -> Vec<usize> {
        (0..self.space.len())
            .filter(|&x| self.owner[x].is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.owner.iter().all(Option::is_some)
    }

    pub fn dimension(&self) -> usize {
        self.charts.iter().map(Chart::dimension).max().unwrap_or(0)
    }

    fn claim(&mut self, domain: &[usize]) -> Result<usize> {
        let id = self.charts.len();
        for &x in domain {
            self.space.check_point(x)?;
            if self.owner[x].is_some() {
                return Err(Error::InvalidParameter(format!(
                    "point {x} already belongs to a chart"
                )));
            }
        }
        for &x in domain {
            self.owner[x] = Some(id);
        }
        Ok(id)
    }

    fn check_functions(&self, functions: &[usize]) -> Result<()> {
        match functions.iter().find(|&&j| j >= self.registry.len()) {
            Some(&j) => Err(Error::InvalidParameter(format!(
                "chart function {j} is not in the registry of {}",
                self.registry.len()
            ))),
            None => Ok(()),
        }
    }

    /// Adds a chart whose partial derivatives default to least squares.
    pub fn add_lsq_chart(
        &mut self,
        domain: Vec<usize>,
        functions: Vec<usize>,
        radius: f64,
    ) -> Result<usize> {
        self.check_functions(&functions)?;
        let method = if functions.is_empty() {
            ChartMethod::Point
        } else {
            ChartMethod::Lsq { radius }
        };
        let id = self.claim(&domain)?;
        self.charts.push(Chart {
            domain,
            functions,
            method,
        });
        Ok(id)
    }

    /// Adds a zero-dimensional chart.
    pub fn add_point_chart(&mut self, domain: Vec<usize>) -> Result<usize> {
        let id = self.claim(&domain)?;
        self.charts.push(Chart {
            domain,
            functions: Vec::new(),
            method: ChartMethod::Point,
        });
        Ok(id)
    }

    /// Adds a chart backed by a dual basis built from `derivations` and the
    /// registry functions `functions` over `domain`.
    pub fn add_dual_chart(
        &mut self,
        domain: Vec<usize>,
        functions: Vec<usize>,
        derivations: &[&Derivation],
        eps_floor: f64,
    ) -> Result<usize> {
        self.check_functions(&functions)?;
        let gens: Vec<&ScalarField> = functions.iter().map(|&j| &self.registry[j]).collect();
        let table = ComponentTable::build(derivations, &gens)?;
        let minor = modalg::Minor {
            generators: (0..functions.len()).collect(),
            domain: domain.clone(),
            det_floor: eps_floor,
        };
        let mut record = modalg::dual_basis(derivations, &table, &minor)?;
        record.generators = functions.clone();
        self.push_dual(domain, functions, record, (0..derivations.len()).collect())
    }

    fn push_dual(
        &mut self,
        domain: Vec<usize>,
        functions: Vec<usize>,
        record: DualBasisRecord,
        derivations: Vec<usize>,
    ) -> Result<usize> {
        let id = self.claim(&domain)?;
        self.records.push(record);
        self.record_derivations.push(derivations);
        self.charts.push(Chart {
            domain,
            functions,
            method: ChartMethod::Dual {
                record: self.records.len() - 1,
            },
        });
        Ok(id)
    }

    fn functions_of(&self, chart: usize) -> Vec<&ScalarField> {
        self.charts[chart]
            .functions
            .iter()
            .map(|&j| &self.registry[j])
            .collect()
    }

    /// Points of chart domains where the chart functions fail
    /// [`LipCalculus::independence_test`].
    pub fn dependent_points(&self, calc: &LipCalculus, tau: Option<f64>) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (id, chart) in self.charts.iter().enumerate() {
            if chart.functions.is_empty() {
                continue;
            }
            let fields = self.functions_of(id);
            for &x in &chart.domain {
                if !calc.independence_test(&fields, x, tau, None)?.independent {
                    out.push(x);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Largest freeness-witness error: every derivation in `derivations`
    /// rebuilt from each chart's dual basis, tested on the registry.
    pub fn freeness_residual(&self, derivations: &[&Derivation]) -> f64 {
        let registry: Vec<&ScalarField> = self.registry.iter().collect();
        self.records
            .iter()
            .flat_map(|r| {
                derivations
                    .iter()
                    .map(|d| r.reconstruction_error(d, &registry))
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let charts: Vec<serde_json::Value> = self
            .charts
            .iter()
            .map(|c| {
                let method = match c.method {
                    ChartMethod::Point => serde_json::json!({ "kind": "point" }),
                    ChartMethod::Lsq { radius } => {
                        serde_json::json!({ "kind": "lsq", "radius": radius })
                    }
                    ChartMethod::Dual { record } => serde_json::json!({
                        "kind": "dual",
                        "derivations": self.record_derivations[record],
                        "det_floor": self.records[record].det_floor,
                        "min_abs_det": self.records[record]
                            .dets
                            .iter()
                            .fold(f64::INFINITY, |m, d| m.min(d.abs())),
                    }),
                };
                serde_json::json!({
                    "domain": c.domain,
                    "functions": c.functions,
                    "method": method,
                })
            })
            .collect();
        serde_json::json!({
            "charts": charts,
            "dimension": self.dimension(),
            "leftover": self.leftover(),
        })
    }
}

/// Per-point partial derivatives on one chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDerivativeTable {
    pub chart: usize,
    pub domain: Vec<usize>,
    /// `values[k][j] = df/dx^j` at `domain[k]`.
    pub values: Vec<Vec<f64>>,
    /// `Lip(f - sum_j c_j x^j)(x)` at the floor scale.
    pub residual: Vec<f64>,
}

impl PartialDerivativeTable {
    pub fn at(&self, x: usize) -> Option<&[f64]> {
        self.domain
            .iter()
            .position(|&p| p == x)
            .map(|k| self.values[k].as_slice())
    }

    pub fn max_residual(&self) -> f64 {
        self.residual.iter().copied().fold(0.0, f64::max)
    }

    /// CSV with header `point,j,value,residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,j,value,residual\n");
        for ((x, row), res) in self.domain.iter().zip(&self.values).zip(&self.residual) {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{x},{j},{v:?},{res:?}\n"));
            }
        }
        out
    }
}

/// Coefficients of a cotangent vector in the frame `dx^1, ..., dx^N` of a
/// chart, at each domain point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotangentField {
    pub chart: usize,
    pub domain: Vec<usize>,
    pub coefficients: Vec<Vec<f64>>,
}

fn lsq_solve(
    space: &SpaceRef,
    f: &[f64],
    frame: &[&[f64]],
    x: usize,
    radius: f64,
) -> Result<Vec<f64>> {
    let n = frame.len();
    let ball = space.ball_unchecked(x, radius);
    if ball.len() < n + 1 {
        return Err(Error::Underdetermined {
            point: x,
            count: ball.len(),
        });
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut a = vec![0.0; n];
    for &(y, _) in &ball {
        if y == x {
            continue;
        }
        let w = space.weight(y);
        for (aj, g) in a.iter_mut().zip(frame) {
            *aj = g[y] - g[x];
        }
        let df = f[y] - f[x];
        for i in 0..n {
            rhs[i] += w * a[i] * df;
            for j in 0..n {
                gram[(i, j)] += w * a[i] * a[j];
            }
        }
    }
    let ridge = LSQ_RIDGE * gram.trace() / n as f64;
    for i in 0..n {
        gram[(i, i)] += ridge;
    }
    let solved = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or(Error::Underdetermined {
            point: x,
            count: ball.len(),
        })?;
    Ok(solved.iter().copied().collect())
}

/// Residual `Lip(f - sum_j c_j x^j)(x)` at the floor scale.
fn first_order_residual(
    calc: &LipCalculus,
    f: &[f64],
    frame: &[&[f64]],
    c: &[f64],
    x: usize,
) -> f64 {
    let mut fields = Vec::with_capacity(frame.len() + 1);
    fields.push(f);
    fields.extend_from_slice(frame);
    calc.floor_quotients(&fields, x)
        .iter()
        .map(|row| (row[0] - row[1..].iter().zip(c).map(|(a, b)| a * b).sum::<f64>()).abs())
        .fold(0.0, f64::max)
}

fn check_chart(atlas: &Atlas, chart: usize) -> Result<&Chart> {
    atlas.charts.get(chart).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "chart {chart} out of range ({} charts)",
            atlas.charts.len()
        ))
    })
}

fn default_method(chart: &Chart) -> Option<PdMethod> {
    match chart.method {
        ChartMethod::Point => None,
        ChartMethod::Lsq { radius } => Some(PdMethod::Lsq { radius }),
        ChartMethod::Dual { .. } => Some(PdMethod::Dual),
    }
}

/// Partial derivatives of `f` against the chart functions, by weighted
/// least squares on balls or through the chart's dual basis (`c_j = D'_j
/// f`). `method = None` uses the chart's own method.
pub fn partial_derivatives(
    calc: &LipCalculus,
    atlas: &Atlas,
    chart: usize,
    f: &ScalarField,
    method: Option<PdMethod>,
) -> Result<PartialDerivativeTable> {
    let c = check_chart(atlas, chart)?;
    f.ensure_space(&atlas.space)?;
    f.ensure_space(calc.space())?;
    let frame: Vec<&[f64]> = atlas
        .functions_of(chart)
        .iter()
        .map(|g| g.values())
        .collect();
    let values: Vec<Vec<f64>> = match (method.or(default_method(c)), frame.is_empty()) {
        (_, true) | (None, _) => vec![Vec::new(); c.domain.len()],
        (Some(PdMethod::Lsq { radius }), false) => {
            let floor = calc.ladder().floor();
            if !(radius >= floor * (1.0 - BALL_SLACK)) {
                return Err(Error::BelowFloor {
                    point: c.domain.first().copied().unwrap_or(0),
                    radius,
                    floor,
                });
            }
            c.domain
                .par_iter()
                .map(|&x| lsq_solve(&atlas.space, f.values(), &frame, x, radius))
                .collect::<Result<_>>()?
        }
        (Some(PdMethod::Dual), false) => {
            let ChartMethod::Dual { record } = c.method else {
                return Err(Error::InvalidParameter(format!(
                    "chart {chart} has no dual basis"
                )));
            };
            let record = &atlas.records[record];
            let covered = atlas.space.mask(&record.domain)?;
            if let Some(&x) = c.domain.iter().find(|&&x| !covered[x]) {
                return Err(Error::NotCovered { point: x });
            }
            c.domain
                .iter()
                .map(|&x| {
                    record
                        .dual
                        .iter()
                        .map(|d| d.apply_values(f.values(), x))
                        .collect()
                })
                .collect()
        }
    };
    let residual = c
        .domain
        .par_iter()
        .zip(&values)
        .map(|(&x, cx)| first_order_residual(calc, f.values(), &frame, cx, x))
        .collect();
    Ok(PartialDerivativeTable {
        chart,
        domain: c.domain.clone(),
        values,
        residual,
    })
}

/// `df = sum_j (df/dx^j) dx^j` on one chart.
pub fn differential(
    calc: &LipCalculus,
    atlas: &Atlas,
    chart: usize,
    f: &ScalarField,
    method: Option<PdMethod>,
) -> Result<CotangentField> {
    let table = partial_derivatives(calc, atlas, chart, f, method)?;
    Ok(CotangentField {
        chart,
        domain: table.domain,
        coefficients: table.values,
    })
}

/// Fibrewise norm `|v|(x) = Lip(sum_j v_j x^j)(x)`.
pub fn cot_norm(
    calc: &LipCalculus,
    atlas: &Atlas,
    chart: usize,
    v: &[f64],
    x: usize,
) -> Result<f64> {
    let c = check_chart(atlas, chart)?;
    if v.len() != c.functions.len() {
        return Err(Error::LengthMismatch {
            expected: c.functions.len(),
            got: v.len(),
        });
    }
    atlas.space.check_point(x)?;
    if v.is_empty() {
        return Ok(0.0);
    }
    let frame: Vec<&[f64]> = atlas
        .functions_of(chart)
        .iter()
        .map(|g| g.values())
        .collect();
    Ok(calc
        .floor_quotients(&frame, x)
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max))
}

/// `(sum w |f|^p)^(1/p) + (sum w |df|^p)^(1/p)` over a complete atlas.
pub fn sobolev_norm(calc: &LipCalculus, atlas: &Atlas, f: &ScalarField, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "exponent p = {p} must be >= 1"
        )));
    }
    if let Some(&x) = atlas.leftover().first() {
        return Err(Error::NotCovered { point: x });
    }
    f.ensure_space(&atlas.space)?;
    let w = atlas.space.weights();
    let lp: f64 = f
        .values()
        .iter()
        .zip(w)
        .map(|(v, w)| w * v.abs().powf(p))
        .sum::<f64>()
        .powf(1.0 / p);
    let mut dp = 0.0;
    for chart in 0..atlas.charts.len() {
        let df = differential(calc, atlas, chart, f, None)?;
        for (&x, v) in df.domain.iter().zip(&df.coefficients) {
            dp += w[x] * cot_norm(calc, atlas, chart, v, x)?.powf(p);
        }
    }
    Ok(lp + dp.powf(1.0 / p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub domain: Vec<usize>,
    pub residual: Vec<f64>,
    pub max: f64,
    pub weighted_mean: f64,
}

/// `Df(x) - sum_j (df/dx^j)(x) Dx^j(x)` on the chart domain.
pub fn representation_residual(
    calc: &LipCalculus,
    atlas: &Atlas,
    chart: usize,
    derivation: &Derivation,
    f: &ScalarField,
    method: Option<PdMethod>,
) -> Result<RepresentationReport> {
    f.ensure_space(derivation.space())?;
    let table = partial_derivatives(calc, atlas, chart, f, method)?;
    let frame = atlas.functions_of(chart);
    let residual: Vec<f64> = table
        .domain
        .iter()
        .zip(&table.values)
        .map(|(&x, c)| {
            derivation.apply_values(f.values(), x)
                - frame
                    .iter()
                    .zip(c)
                    .map(|(g, cj)| cj * derivation.apply_values(g.values(), x))
                    .sum::<f64>()
        })
        .collect();
    let w = atlas.space.weights();
    let mass: f64 = table.domain.iter().map(|&x| w[x]).sum();
    let weighted_mean = if mass > 0.0 {
        table
            .domain
            .iter()
            .zip(&residual)
            .map(|(&x, r)| w[x] * r.abs())
            .sum::<f64>()
            / mass
    } else {
        0.0
    };
    Ok(RepresentationReport {
        max: residual.iter().fold(0.0, |m, r| m.max(r.abs())),
        domain: table.domain,
        residual,
        weighted_mean,
    })
}

/// How the reverse-inequality constant is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum LambdaMode {
    /// Per-point infimum of `max_j |D_j f(x)| / Lip f(x)` over the corpus.
    Fit,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityWitness {
    pub kind: String,
    pub field: usize,
    pub derivation: Option<usize>,
    pub point: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    /// Points where every stencil reaches no further than the floor scale;
    /// the upper inequality is asserted there.
    pub checked_points: usize,
    pub upper_violations: Vec<InequalityWitness>,
    /// Largest `|D_j f(x)| - |D_j| Lip f(x)` at points whose stencil reaches
    /// past the floor scale (reported only).
    pub scale_mismatch_slack: f64,
    /// Fitted or given `lambda(x)`; `None` where no corpus field has
    /// `Lip f(x) > tol`.
    pub lambda: Vec<Option<f64>>,
    pub min_lambda: Option<f64>,
    pub reverse_violations: Vec<InequalityWitness>,
    pub degenerate_corpus: bool,
}

impl InequalityReport {
    pub fn violation_count(&self) -> usize {
        self.upper_violations.len() + self.reverse_violations.len()
    }
}

/// Checks `|D_j f(x)| <= |D_j|_x Lip f(x)` (with `|D_j|_x` the stencil
/// weight mass) and `max_j |D_j f(x)| >= lambda(x) Lip f(x)` over a corpus.
/// `tol` decides when `Lip f(x)` counts as zero.
pub fn inequality_report(
    calc: &LipCalculus,
    derivations: &[&Derivation],
    corpus: &[&ScalarField],
    mode: &LambdaMode,
    tol: f64,
) -> Result<InequalityReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if derivations.is_empty() {
        return Err(Error::Empty("derivation list"));
    }
    let space = calc.space();
    let n = space.len();
    for d in derivations {
        if !std::sync::Arc::ptr_eq(d.space(), space) {
            return Err(Error::SpaceMismatch);
        }
    }
    if let LambdaMode::Given(l) = mode {
        if l.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: l.len(),
            });
        }
    }
    let checked: Vec<bool> = (0..n)
        .map(|x| {
            calc.floor(x).is_some_and(|s| {
                derivations
                    .iter()
                    .all(|d| d.reach_at(x) <= s * (1.0 + BALL_SLACK))
            })
        })
        .collect();
    let mut upper_violations = Vec::new();
    let mut reverse_violations = Vec::new();
    let mut slack = 0.0f64;
    let mut fitted: Vec<Option<f64>> = vec![None; n];
    for (k, f) in corpus.iter().enumerate() {
        let lip = calc.lip_values(f)?;
        let applied: Vec<ScalarField> = derivations
            .iter()
            .map(|d| d.apply(f))
            .collect::<Result<_>>()?;
        for x in 0..n {
            let mut best = 0.0f64;
            for (j, (d, df)) in derivations.iter().zip(&applied).enumerate() {
                let lhs = df.value(x).abs();
                let rhs = d.weight_mass(x) * lip[x];
                best = best.max(lhs);
                if checked[x] {
                    if lhs > rhs * (1.0 + 1e-12) + 1e-14 {
                        upper_violations.push(InequalityWitness {
                            kind: "upper".into(),
                            field: k,
                            derivation: Some(j),
                            point: x,
                            lhs,
                            rhs,
                        });
                    }
                } else {
                    slack = slack.max(lhs - rhs);
                }
            }
            if lip[x] > tol {
                let ratio = best / lip[x];
                match mode {
                    LambdaMode::Fit => {
                        fitted[x] = Some(fitted[x].map_or(ratio, |r: f64| r.min(ratio)));
                    }
                    LambdaMode::Given(l) => {
                        if best < l[x] * lip[x] - tol {
                            reverse_violations.push(InequalityWitness {
                                kind: "reverse".into(),
                                field: k,
                                derivation: None,
                                point: x,
                                lhs: best,
                                rhs: l[x] * lip[x],
                            });
                        }
                    }
                }
            } else if best > tol {
                reverse_violations.push(InequalityWitness {
                    kind: "flat".into(),
                    field: k,
                    derivation: None,
                    point: x,
                    lhs: best,
                    rhs: lip[x],
                });
            }
        }
    }
    let lambda = match mode {
        LambdaMode::Fit => fitted,
        LambdaMode::Given(l) => l.iter().map(|&v| Some(v)).collect(),
    };
    let min_lambda = lambda.iter().flatten().copied().reduce(f64::min);
    let degenerate_corpus = matches!(mode, LambdaMode::Fit) && min_lambda.is_none();
    Ok(InequalityReport {
        checked_points: checked.iter().filter(|&&c| c).count(),
        upper_violations,
        scale_mismatch_slack: slack,
        lambda,
        min_lambda,
        reverse_violations,
        degenerate_corpus,
    })
}

/// Builds an atlas from a generating set: on the uncovered remainder, take
/// the rank `n` of the first point, pick a local basis of derivations on
/// its stratum piece, search a nonsingular `n x n` minor among the
/// generators and emit a dual-basis chart on the points it covers. Rank-0
/// points become zero-dimensional charts.
pub fn build_atlas(
    space: &SpaceRef,
    generators: Vec<ScalarField>,
    derivations: &[&Derivation],
    tau: f64,
    eps_floor: f64,
) -> Result<Atlas> {
    let mut atlas = Atlas::new(space, generators)?;
    if derivations.is_empty() || atlas.registry.is_empty() {
        atlas.add_point_chart((0..space.len()).collect())?;
        return Ok(atlas);
    }
    let gens: Vec<&ScalarField> = atlas.registry.iter().collect();
    let table = ComponentTable::build(derivations, &gens)?;
    let strat = modalg::stratify_table(&table, tau)?;
    if !strat.strata[0].is_empty() {
        atlas.add_point_chart(strat.strata[0].clone())?;
    }
    for (rank, pieces) in &strat.bases {
        for piece in pieces {
            let sub = table.select(
                &piece.derivations,
                &(0..table.n_generators()).collect::<Vec<_>>(),
            );
            let basis: Vec<&Derivation> =
                piece.derivations.iter().map(|&i| derivations[i]).collect();
            let mut remaining = piece.points.clone();
            while !remaining.is_empty() {
                let minor = modalg::find_nonsingular_minor(&sub, &remaining, *rank, eps_floor)?
                    .ok_or(Error::MinorNotFound {
                        size: *rank,
                        point: remaining[0],
                    })?;
                let record = modalg::dual_basis(&basis, &sub, &minor)?;
                let covered = space.mask(&minor.domain)?;
                remaining.retain(|&x| !covered[x]);
                atlas.push_dual(
                    minor.domain,
                    minor.generators,
                    record,
                    piece.derivations.clone(),
                )?;
            }
        }
    }
    Ok(atlas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVerdict {
    /// Some point shows dependence, as more candidates than derivations
    /// must.
    Consistent,
    /// More candidates than derivations, yet independent everywhere probed.
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub points: Vec<usize>,
    /// Points (subset of `points`) where the independence test fails.
    pub dependent: Vec<usize>,
    pub dependent_fraction: f64,
    pub min_values: Vec<f64>,
    /// `(x, l)` with `sum_i l_i V_i(x) = 0` for the candidate rows `V_i` of
    /// the component table, where that table has corank exactly one.
    pub witnesses: Vec<(usize, Vec<f64>)>,
    /// `None` when there are no more candidates than derivations.
    pub verdict: Option<ProbeVerdict>,
}

/// Runs the independence test on `candidates` at each point of `points`
/// (all points when `None`).
pub fn dimension_probe(
    calc: &LipCalculus,
    derivations: &[&Derivation],
    candidates: &[&ScalarField],
    tau: Option<f64>,
    points: Option<&[usize]>,
) -> Result<ProbeReport> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate fields"));
    }
    let points: Vec<usize> = match points {
        Some(p) => p.to_vec(),
        None => (0..calc.space().len()).collect(),
    };
    let tests = points
        .par_iter()
        .map(|&x| calc.independence_test(candidates, x, tau, None))
        .collect::<Result<Vec<_>>>()?;
    let dependent: Vec<usize> = points
        .iter()
        .zip(&tests)
        .filter(|(_, t)| !t.independent)
        .map(|(&x, _)| x)
        .collect();
    let mut witnesses = Vec::new();
    if !derivations.is_empty() {
        let rows = ComponentTable::build(derivations, candidates)?.transposed();
        for &x in &dependent {
            if let Ok(sel) = modalg::kernel_select(&rows, &[x], modalg::DEFAULT_RANK_TAU) {
                witnesses.push((x, sel.coefficients[0].clone()));
            }
        }
    }
    let verdict = (candidates.len() > derivations.len()).then_some(if dependent.is_empty() {
        ProbeVerdict::Violated
    } else {
        ProbeVerdict::Consistent
    });
    Ok(ProbeReport {
        dependent_fraction: if points.is_empty() {
            0.0
        } else {
            dependent.len() as f64 / points.len() as f64
        },
        min_values: tests.iter().map(|t| t.min_value).collect(),
        points,
        dependent,
        witnesses,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivation::Scheme;
    use crate::lipcalc::{ScaleLadder, VariationRule};
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

    fn axis(s: &SpaceRef, dim: usize, h: f64) -> Derivation {
        Derivation::difference_quotient(s, &Scheme::Axis { dim, step: h }).unwrap()
    }

    fn coords(s: &SpaceRef) -> Vec<ScalarField> {
        (0..s.dim().unwrap())
            .map(|a| ScalarField::coordinate(s, a).unwrap())
            .collect()
    }

    /// 2-D grid with a one-rung ladder just above the diagonal spacing.
    fn plane(side: usize) -> (SpaceRef, LipCalculus, f64) {
        let s = grid(2, side);
        let h = 1.0 / (side - 1) as f64;
        let ladder = ScaleLadder::new(vec![h * 2f64.sqrt() * (1.0 + 1e-7)]).unwrap();
        let calc = LipCalculus::new(&s, ladder, VariationRule::DifferenceQuotient);
        (s, calc, h)
    }

    fn dual_plane_atlas(s: &SpaceRef, h: f64) -> Atlas {
        let (dx, dy) = (axis(s, 0, h), axis(s, 1, h));
        build_atlas(
            s,
            coords(s),
            &[&dx, &dy],
            modalg::DEFAULT_RANK_TAU,
            DEFAULT_EPS_FLOOR,
        )
        .unwrap()
    }

    #[test]
    fn chart_functions_have_kronecker_partials() {
        let (s, calc, h) = plane(7);
        let atlas = dual_plane_atlas(&s, h);
        let mut lsq = Atlas::new(&s, coords(&s)).unwrap();
        lsq.add_lsq_chart((0..s.len()).collect(), vec![0, 1], 2.0 * h)
            .unwrap();
        for a in [&atlas, &lsq] {
            for (j, g) in a.registry().iter().enumerate() {
                let t = partial_derivatives(&calc, a, 0, g, None).unwrap();
                for row in &t.values {
                    for (k, v) in row.iter().enumerate() {
                        let e = if j == k { 1.0 } else { 0.0 };
                        assert!((v - e).abs() < 1e-8, "{v} vs {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_field_partials_both_methods() {
        let (s, calc, h) = plane(9);
        let atlas = dual_plane_atlas(&s, h);
        let f = ScalarField::from_fn(&s, |i| {
            let c = s.coords(i).unwrap();
            3.0 * c[0] - 2.0 * c[1] + 0.5
        })
        .unwrap();
        for m in [PdMethod::Dual, PdMethod::Lsq { radius: 2.0 * h }] {
            let t = partial_derivatives(&calc, &atlas, 0, &f, Some(m)).unwrap();
            for row in &t.values {
                assert!((row[0] - 3.0).abs() < 1e-8 && (row[1] + 2.0).abs() < 1e-8);
            }
            assert!(t.max_residual() < 1e-8);
        }
        let err = partial_derivatives(
            &calc,
            &atlas,
            0,
            &f,
            Some(PdMethod::Lsq { radius: 0.5 * h }),
        );
        assert!(matches!(err, Err(Error::BelowFloor { .. })));
        let csv = partial_derivatives(&calc, &atlas, 0, &f, None)
            .unwrap()
            .to_csv();
        assert!(csv.starts_with("point,j,value,residual\n0,0,"));
        assert_eq!(csv.lines().count(), 1 + 2 * s.len());
    }

    #[test]
    fn dual_partials_are_difference_quotients_on_the_line() {
        let s = grid(1, 11);
        let h = 0.1;
        let calc = LipCalculus::with_default_ladder(&s).unwrap();
        let d = axis(&s, 0, h);
        let atlas = build_atlas(&s, coords(&s), &[&d], 1e-6, DEFAULT_EPS_FLOOR).unwrap();
        assert_eq!(atlas.charts().len(), 1);
        assert_eq!(atlas.chart(0).functions, vec![0]);
        assert!(atlas.is_complete());
        let f = ScalarField::from_fn(&s, |i| (i as f64 * h).powi(2)).unwrap();
        let t = partial_derivatives(&calc, &atlas, 0, &f, None).unwrap();
        for (&x, row) in t.domain.iter().zip(&t.values) {
            let xv = x as f64 * h;
            let expect = if x == 10 { 2.0 * xv - h } else { 2.0 * xv + h };
            assert!((row[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cotangent_norm_examples() {
        let (s, calc, h) = plane(7);
        let atlas = dual_plane_atlas(&s, h);
        let mid = s.grid().unwrap().point(&[3, 3]);
        assert_eq!(cot_norm(&calc, &atlas, 0, &[0.0, 0.0], mid).unwrap(), 0.0);
        assert!(
            (cot_norm(&calc, &atlas, 0, &[1.0, 1.0], mid).unwrap() - 2f64.sqrt()).abs() < 1e-12
        );
        assert!((cot_norm(&calc, &atlas, 0, &[1.0, 0.0], mid).unwrap() - 1.0).abs() < 1e-12);
        assert!(cot_norm(&calc, &atlas, 0, &[1.0], mid).is_err());
        // never above the Euclidean norm, never below its 8-direction lower bound
        for v in [[0.3f64, -1.7], [2.0, 0.5], [-1.0, 1.0]] {
            let e = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let n = cot_norm(&calc, &atlas, 0, &v, mid).unwrap();
            assert!(n <= e * (1.0 + 1e-12) && n >= e * (std::f64::consts::PI / 8.0).cos() - 1e-12);
        }
    }

    #[test]
    fn sobolev_norm_examples() {
        let (s, calc, h) = plane(7);
        let atlas = dual_plane_atlas(&s, h);
        let zero = ScalarField::constant(&s, 0.0).unwrap();
        assert_eq!(sobolev_norm(&calc, &atlas, &zero, 2.0).unwrap(), 0.0);
        let c = ScalarField::constant(&s, -2.5).unwrap();
        let total = s.total_measure();
        assert!((sobolev_norm(&calc, &atlas, &c, 2.0).unwrap() - 2.5 * total.sqrt()).abs() < 1e-12);
        assert!(sobolev_norm(&calc, &atlas, &c, 0.5).is_err());
        let partial = Atlas::new(&s, coords(&s)).unwrap();
        assert!(matches!(
            sobolev_norm(&calc, &partial, &c, 2.0),
            Err(Error::NotCovered { point: 0 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sobolev_is_a_norm(
            a in prop::collection::vec(-2.0f64..2.0, 25),
            b in prop::collection::vec(-2.0f64..2.0, 25),
            t in -3.0f64..3.0,
            p in 1.0f64..4.0,
        ) {
            let (s, calc, h) = plane(5);
            let atlas = dual_plane_atlas(&s, h);
            let f = ScalarField::new(&s, a).unwrap();
            let g = ScalarField::new(&s, b).unwrap();
            let nf = sobolev_norm(&calc, &atlas, &f, p).unwrap();
            let ng = sobolev_norm(&calc, &atlas, &g, p).unwrap();
            let sum = sobolev_norm(&calc, &atlas, &f.add(&g).unwrap(), p).unwrap();
            prop_assert!(sum <= (nf + ng) * (1.0 + 1e-12) + 1e-12);
            let scaled = sobolev_norm(&calc, &atlas, &f.scale(t).unwrap(), p).unwrap();
            prop_assert!((scaled - t.abs() * nf).abs() <= 1e-10 * (1.0 + nf));
        }
    }

    #[test]
    fn representation_residual_examples() {
        let (s, calc, h) = plane(9);
        let atlas = dual_plane_atlas(&s, h);
        let dx = axis(&s, 0, h);
        let wild = ScalarField::from_fn(&s, |i| ((i * 7919) % 13) as f64).unwrap();
        // the dual basis reproduces any derivation it was built from
        let r = representation_residual(&calc, &atlas, 0, &dx, &wild, None).unwrap();
        assert!(r.max < 1e-12);
        let lin = ScalarField::from_fn(&s, |i| {
            s.coords(i).unwrap()[0] - 4.0 * s.coords(i).unwrap()[1]
        })
        .unwrap();
        let r = representation_residual(
            &calc,
            &atlas,
            0,
            &dx,
            &lin,
            Some(PdMethod::Lsq { radius: 2.0 * h }),
        )
        .unwrap();
        assert!(r.max < 1e-8 && r.weighted_mean <= r.max);
        assert_eq!(r.domain.len(), s.len());
    }

    #[test]
    fn inequality_report_examples() {
        let s = grid(1, 11);
        let calc = LipCalculus::with_default_ladder(&s).unwrap();
        let d = axis(&s, 0, 0.1);
        let x = ScalarField::coordinate(&s, 0).unwrap();
        let r = inequality_report(&calc, &[&d], &[&x], &LambdaMode::Fit, 1e-9).unwrap();
        assert_eq!(r.checked_points, 11);
        assert!(r.upper_violations.is_empty() && r.reverse_violations.is_empty());
        assert!(r.lambda.iter().all(|l| (l.unwrap() - 1.0).abs() < 1e-12));
        assert!(!r.degenerate_corpus);

        let r = inequality_report(&calc, &[&d], &[&x], &LambdaMode::Given(vec![2.0; 11]), 1e-9)
            .unwrap();
        assert_eq!(r.reverse_violations.len(), 11);
        assert_eq!(r.violation_count(), 11);

        // a derivation reaching past the floor is only reported, not asserted
        let long =
            Derivation::difference_quotient(&s, &Scheme::Axis { dim: 0, step: 0.2 }).unwrap();
        let r = inequality_report(&calc, &[&long], &[&x], &LambdaMode::Fit, 1e-9).unwrap();
        assert_eq!(r.checked_points, 0);

        let zero = ScalarField::constant(&s, 3.0).unwrap();
        let r = inequality_report(&calc, &[&d], &[&zero], &LambdaMode::Fit, 1e-9).unwrap();
        assert!(r.degenerate_corpus && r.min_lambda.is_none());
        assert!(inequality_report(&calc, &[&d], &[], &LambdaMode::Fit, 1e-9).is_err());
        assert!(
            inequality_report(&calc, &[&d], &[&x], &LambdaMode::Given(vec![1.0]), 1e-9).is_err()
        );
    }

    #[test]
    fn atlas_construction_edge_cases() {
        let s = grid(1, 6);
        let atlas = build_atlas(&s, coords(&s), &[], 1e-6, DEFAULT_EPS_FLOOR).unwrap();
        assert_eq!(atlas.charts().len(), 1);
        assert_eq!(atlas.chart(0).method, ChartMethod::Point);
        assert_eq!(atlas.dimension(), 0);
        assert!(atlas.is_complete());

        let zero = Derivation::zero(&s);
        let atlas = build_atlas(&s, coords(&s), &[&zero], 1e-6, DEFAULT_EPS_FLOOR).unwrap();
        assert_eq!(atlas.dimension(), 0);
        assert_eq!(atlas.chart(0).domain.len(), 6);

        let mut a = Atlas::new(&s, coords(&s)).unwrap();
        a.add_point_chart(vec![0, 1]).unwrap();
        assert!(a.add_point_chart(vec![1, 2]).is_err());
        assert!(a.add_lsq_chart(vec![3], vec![4], 0.2).is_err());
        assert_eq!(a.leftover(), vec![2, 3, 4, 5]);
        assert_eq!(a.chart_of(1), Some(0));
        let json = a.to_json();
        assert_eq!(json["leftover"], serde_json::json!([2, 3, 4, 5]));
        assert_eq!(json["charts"][0]["method"]["kind"], "point");
    }

    #[test]
    fn plane_atlas_is_one_free_chart() {
        let (s, calc, h) = plane(7);
        let (dx, dy) = (axis(&s, 0, h), axis(&s, 1, h));
        let atlas = dual_plane_atlas(&s, h);
        assert_eq!(atlas.charts().len(), 1);
        assert_eq!(atlas.dimension(), 2);
        assert!(atlas.freeness_residual(&[&dx, &dy]) < 1e-12);
        assert!(atlas.dependent_points(&calc, None).unwrap().is_empty());
        let json = atlas.to_json();
        assert_eq!(json["charts"][0]["functions"], serde_json::json!([0, 1]));
        assert_eq!(json["charts"][0]["method"]["kind"], "dual");
    }

    #[test]
    fn probe_verdicts() {
        let (s, calc, h) = plane(7);
        let (dx, dy) = (axis(&s, 0, h), axis(&s, 1, h));
        let c = coords(&s);
        let sum = c[0].add(&c[1]).unwrap();
        let mid = [s.grid().unwrap().point(&[3, 3])];
        let r =
            dimension_probe(&calc, &[&dx, &dy], &[&c[0], &c[1], &sum], None, Some(&mid)).unwrap();
        assert_eq!(r.verdict, Some(ProbeVerdict::Consistent));
        assert_eq!(r.dependent, mid.to_vec());
        let l = &r.witnesses[0].1;
        assert!(
            (l[0] - 1.0).abs() < 1e-12 && (l[1] - 1.0).abs() < 1e-12 && (l[2] + 1.0).abs() < 1e-12
        );

        let r = dimension_probe(&calc, &[&dx, &dy], &[&c[0], &c[1]], None, Some(&mid)).unwrap();
        assert_eq!(r.verdict, None);
        assert!(r.dependent.is_empty() && r.dependent_fraction == 0.0);

        let r = dimension_probe(&calc, &[&dx], &[&c[0], &c[1]], None, Some(&mid)).unwrap();
        assert_eq!(r.verdict, Some(ProbeVerdict::Violated));
    }
}
