//! Linear algebra of the derivation module over bounded functions.
//!
//! On a finite space with positive weights the measurable statements of
//! the module theory become pointwise ones: a measurable choice is any
//! deterministic per-point rule, and an exhaustion by positive-measure sets
//! is a classification of points. The derivation module splits into strata
//! `X_i` on which it is free of rank `i`. Each stratum carries a local basis
//! chosen greedily, split into pieces where one index set does not serve
//! the whole stratum.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::derivation::{combine, ComponentTable, Derivation};
use crate::error::{Error, Result};
use crate::field::ScalarField;

/// Relative singular-value cutoff used when none is given.
pub const DEFAULT_RANK_TAU: f64 = 1e-6;

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect()
}

fn rank_with_threshold(m: &DMatrix<f64>, threshold: f64) -> usize {
    singular_values(m)
        .iter()
        .filter(|&&s| s > threshold)
        .count()
}

fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Number of singular values of the row-vector matrix at `x` above
/// `tau * sigma_max`; 0 for the zero matrix.
pub fn pointwise_rank(table: &ComponentTable, x: usize, tau: f64) -> usize {
    let m = matrix(
        table.n_derivations(),
        table.n_generators(),
        table.matrix_at(x),
    );
    let top = largest_singular_value(&m);
    if top == 0.0 {
        return 0;
    }
    rank_with_threshold(&m, tau * top)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "tau {tau} must lie in (0, 1)"
        )))
    }
}

/// Per-point coefficients `l(x)` with `sum_i l_i(x) V_i(x) = 0`, where
/// `V_i(x)` is row `i` of the table at `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSelection {
    pub domain: Vec<usize>,
    pub coefficients: Vec<Vec<f64>>,
    /// Index of the entry fixed to `+1` before rescaling, per point.
    pub pivots: Vec<usize>,
    /// Whether the last coefficient was checked to be nonzero at each point
    /// (done where the first `M - 1` rows already span all rows).
    pub last_checked: Vec<bool>,
}

impl KernelSelection {
    pub fn at(&self, x: usize) -> Option<&[f64]> {
        self.domain
            .iter()
            .position(|&p| p == x)
            .map(|k| self.coefficients[k].as_slice())
    }
}

/// Selects the kernel direction on a domain where the `M` rows have rank
/// exactly `M - 1`: the one-dimensional null space is normalised so that its
/// largest entry (lowest index on ties) is `+1`, the remaining entries are
/// re-solved from the rows directly, and the vector is rescaled to sup-norm
/// at most 1.
pub fn kernel_select(
    table: &ComponentTable,
    domain: &[usize],
    tau: f64,
) -> Result<KernelSelection> {
    check_tau(tau)?;
    let (m, k) = (table.n_derivations(), table.n_generators());
    let mut out = KernelSelection {
        domain: domain.to_vec(),
        coefficients: Vec::with_capacity(domain.len()),
        pivots: Vec::with_capacity(domain.len()),
        last_checked: Vec::with_capacity(domain.len()),
    };
    for &x in domain {
        if x >= table.n_points() {
            return Err(Error::InvalidPoint {
                index: x,
                n: table.n_points(),
            });
        }
        let rank = pointwise_rank(table, x, tau);
        if rank + 1 != m {
            return Err(Error::RankMismatch {
                point: x,
                found: rank,
                expected: m - 1,
            });
        }
        let v = matrix(m, k, table.matrix_at(x));
        let (lambda, pivot) = kernel_vector(&v);
        let spans = m >= 2 && {
            let head = v.rows(0, m - 1).into_owned();
            let top = largest_singular_value(&v);
            top > 0.0 && rank_with_threshold(&head, tau * top) == m - 1
        };
        if spans && lambda[m - 1] == 0.0 {
            return Err(Error::RankMismatch {
                point: x,
                found: m - 1,
                expected: m,
            });
        }
        out.coefficients.push(lambda);
        out.pivots.push(pivot);
        out.last_checked.push(spans);
    }
    Ok(out)
}

fn kernel_vector(v: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let (m, k) = (v.nrows(), v.ncols());
    if m == 1 {
        return (vec![1.0], 0);
    }
    // Null space of V^T, padded so the SVD returns a full right basis.
    let rows = k.max(m);
    let mut vt = DMatrix::zeros(rows, m);
    for i in 0..m {
        for j in 0..k {
            vt[(j, i)] = v[(i, j)];
        }
    }
    let svd = vt.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let raw: Vec<f64> = v_t.row(smallest).iter().copied().collect();
    let top = raw.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let pivot = raw
        .iter()
        .position(|c| c.abs() >= top * (1.0 - 1e-9))
        .unwrap();

    // Fix the pivot to 1 and solve sum_{i != p} l_i V_i = -V_p.
    let others: Vec<usize> = (0..m).filter(|&i| i != pivot).collect();
    let basis = DMatrix::from_fn(k, others.len(), |r, c| v[(others[c], r)]);
    let rhs = -v.row(pivot).transpose();
    let gram = basis.transpose() * &basis;
    let solved = gram
        .lu()
        .solve(&(basis.transpose() * rhs))
        .map(|s| s.iter().copied().collect::<Vec<_>>());
    let mut lambda = vec![0.0; m];
    lambda[pivot] = 1.0;
    match solved {
        Some(s) if s.iter().all(|c| c.is_finite()) => {
            for (c, &i) in s.iter().zip(&others) {
                lambda[i] = *c;
            }
        }
        _ => {
            for &i in &others {
                lambda[i] = raw[i] / raw[pivot];
            }
        }
    }
    let sup = lambda.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if sup > 1.0 {
        lambda.iter_mut().for_each(|c| *c /= sup);
    }
    (lambda, pivot)
}

/// Local basis of one piece of a stratum, with every other derivation
/// expressed in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisPiece {
    pub derivations: Vec<usize>,
    pub points: Vec<usize>,
    /// `(j, c)` with `D_j = sum_l c[x][l] D_{derivations[l]}` on the
    /// generators, one coefficient vector per point of the piece.
    pub expansions: Vec<(usize, Vec<Vec<f64>>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub rank: Vec<usize>,
    /// `strata[i]` = points of rank `i`, for `i = 0..=n_derivations`.
    pub strata: Vec<Vec<usize>>,
    pub bases: BTreeMap<usize, Vec<BasisPiece>>,
}

impl Stratification {
    /// Sizes of the nonempty strata.
    pub fn sizes(&self) -> BTreeMap<usize, usize> {
        self.strata
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| (i, s.len()))
            .collect()
    }

    /// The JSON document `{rank, strata, bases}`.
    pub fn to_json(&self) -> serde_json::Value {
        let strata: serde_json::Map<String, serde_json::Value> = self
            .strata
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| (i.to_string(), serde_json::json!(s)))
            .collect();
        let bases: serde_json::Map<String, serde_json::Value> = self
            .bases
            .iter()
            .map(|(i, pieces)| {
                (
                    i.to_string(),
                    serde_json::json!({
                        "derivations": pieces.first().map(|p| p.derivations.clone()).unwrap_or_default(),
                        "pieces": pieces
                            .iter()
                            .map(|p| serde_json::json!({
                                "derivations": p.derivations,
                                "points": p.points,
                            }))
                            .collect::<Vec<_>>(),
                    }),
                )
            })
            .collect();
        let sizes: serde_json::Map<String, serde_json::Value> = self
            .sizes()
            .into_iter()
            .map(|(i, n)| (i.to_string(), serde_json::json!(n)))
            .collect();
        serde_json::json!({
            "rank": self.rank,
            "sizes": sizes,
            "strata": strata,
            "bases": bases,
        })
    }
}

pub fn stratify(
    derivations: &[&Derivation],
    generators: &[&ScalarField],
    tau: f64,
) -> Result<Stratification> {
    stratify_table(&ComponentTable::build(derivations, generators)?, tau)
}

/// Classifies points by rank and picks a local basis on every stratum.
pub fn stratify_table(table: &ComponentTable, tau: f64) -> Result<Stratification> {
    check_tau(tau)?;
    let (m, k) = (table.n_derivations(), table.n_generators());
    let n = table.n_points();
    let mats: Vec<DMatrix<f64>> = (0..n).map(|x| matrix(m, k, table.matrix_at(x))).collect();
    let thresholds: Vec<f64> = mats
        .iter()
        .map(|a| tau * largest_singular_value(a))
        .collect();
    let rank: Vec<usize> = mats
        .iter()
        .zip(&thresholds)
        .map(|(a, &t)| {
            if t == 0.0 {
                0
            } else {
                rank_with_threshold(a, t)
            }
        })
        .collect();
    let mut strata = vec![Vec::new(); m + 1];
    for (x, &r) in rank.iter().enumerate() {
        strata[r].push(x);
    }
    let sub_rank = |x: usize, rows: &[usize]| {
        let sub = DMatrix::from_fn(rows.len(), k, |r, c| mats[x][(rows[r], c)]);
        if thresholds[x] == 0.0 {
            0
        } else {
            rank_with_threshold(&sub, thresholds[x])
        }
    };
    let mut bases = BTreeMap::new();
    for (i, stratum) in strata.iter().enumerate().skip(1) {
        if stratum.is_empty() {
            continue;
        }
        let mut remaining = stratum.clone();
        let mut pieces = Vec::new();
        while let Some(&seed) = remaining.first() {
            let mut chosen = Vec::with_capacity(i);
            for d in 0..m {
                if chosen.len() == i {
                    break;
                }
                chosen.push(d);
                if sub_rank(seed, &chosen) < chosen.len() {
                    chosen.pop();
                }
            }
            let (points, rest): (Vec<usize>, Vec<usize>) =
                remaining.iter().partition(|&&x| sub_rank(x, &chosen) == i);
            let expansions = (0..m)
                .filter(|d| !chosen.contains(d))
                .map(|j| {
                    let coeffs = points
                        .iter()
                        .map(|&x| express(&mats[x], &chosen, j))
                        .collect();
                    (j, coeffs)
                })
                .collect();
            pieces.push(BasisPiece {
                derivations: chosen,
                points,
                expansions,
            });
            remaining = rest;
        }
        bases.insert(i, pieces);
    }
    Ok(Stratification {
        rank,
        strata,
        bases,
    })
}

/// Least-squares coefficients of row `target` in the rows `basis`.
fn express(a: &DMatrix<f64>, basis: &[usize], target: usize) -> Vec<f64> {
    let k = a.ncols();
    let b = DMatrix::from_fn(k, basis.len(), |r, c| a[(basis[c], r)]);
    let rhs = a.row(target).transpose();
    let svd = b.svd(true, true);
    svd.solve(&rhs, 1e-14)
        .map(|s| s.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; basis.len()])
}

/// Determinant via LU.
pub(crate) fn det(n: usize, data: &[f64]) -> f64 {
    if n == 0 {
        return 1.0;
    }
    matrix(n, n, data).lu().determinant()
}

/// `|det B| / prod_i |row_i(B)|`, the Hadamard ratio in `[0, 1]`.
fn hadamard_ratio(n: usize, b: &[f64]) -> (f64, f64) {
    let d = det(n, b);
    let norms: f64 = (0..n)
        .map(|i| {
            b[i * n..(i + 1) * n]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .product();
    if norms == 0.0 {
        (d, 0.0)
    } else {
        (d, d.abs() / norms)
    }
}

fn minor_block(table: &ComponentTable, n: usize, subset: &[usize], x: usize) -> Vec<f64> {
    let mut b = Vec::with_capacity(n * n);
    for i in 0..n {
        for &g in subset {
            b.push(table.get(i, g, x));
        }
    }
    b
}

/// A generator subset and the points where the minor on the first `n`
/// derivations of the table is nonsingular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minor {
    pub generators: Vec<usize>,
    pub domain: Vec<usize>,
    pub det_floor: f64,
}

/// Lexicographic `n`-subsets of `0..b` that use at least one index `>= lo`.
fn subsets(n: usize, b: usize, lo: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    if n > b {
        return out;
    }
    loop {
        if cur.last().is_some_and(|&l| l >= lo) || n == 0 {
            out.push(cur.clone());
        }
        if n == 0 {
            return out;
        }
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < b - n + i {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        cur[i] += 1;
        for j in i + 1..n {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Searches generator subsets of size `n` for a minor `B(x) = [D_i g_j(x)]`
/// (derivations `0..n` of the table) with `|det B| >= eps_floor *
/// prod |rows|` on a subset `V` of `domain`.
///
/// Generators are scanned in index order in blocks of doubling size
/// (`n, 2n, 4n, ...`); the first subset whose `V` is all of `domain` wins.
/// Otherwise the subset with the largest nonempty `V` (earliest on ties) is
/// returned, and `None` means no subset works anywhere.
pub fn find_nonsingular_minor(
    table: &ComponentTable,
    domain: &[usize],
    n: usize,
    eps_floor: f64,
) -> Result<Option<Minor>> {
    if n == 0 || n > table.n_derivations() {
        return Err(Error::InvalidParameter(format!(
            "minor size {n} must lie in 1..={}",
            table.n_derivations()
        )));
    }
    if !(eps_floor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eps_floor {eps_floor} must be > 0"
        )));
    }
    let k = table.n_generators();
    let mut best: Option<Minor> = None;
    let mut lo = 0;
    let mut block = n;
    while lo < k {
        let b = block.min(k);
        for subset in subsets(n, b, lo) {
            let good: Vec<usize> = domain
                .iter()
                .copied()
                .filter(|&x| hadamard_ratio(n, &minor_block(table, n, &subset, x)).1 >= eps_floor)
                .collect();
            if good.is_empty() {
                continue;
            }
            let full = good.len() == domain.len();
            if best.as_ref().is_none_or(|m| good.len() > m.domain.len()) {
                best = Some(Minor {
                    generators: subset,
                    domain: good,
                    det_floor: eps_floor,
                });
            }
            if full {
                return Ok(best);
            }
        }
        lo = b;
        block *= 2;
    }
    Ok(best)
}

/// Dual basis `D' = A D` with `A = B^{-1} = adj(B) / det B`, so that
/// `D'_i g'_j = delta_ij` on the minor's domain.
#[derive(Debug, Clone)]
pub struct DualBasisRecord {
    pub generators: Vec<usize>,
    pub domain: Vec<usize>,
    /// Row-major `A(x)` per domain point.
    pub matrices: Vec<Vec<f64>>,
    pub dets: Vec<f64>,
    pub det_floor: f64,
    pub dual: Vec<Derivation>,
}

fn adjugate(n: usize, b: &[f64]) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut adj = vec![0.0; n * n];
    let mut minor = Vec::with_capacity((n - 1) * (n - 1));
    for i in 0..n {
        for j in 0..n {
            minor.clear();
            for r in (0..n).filter(|&r| r != i) {
                for c in (0..n).filter(|&c| c != j) {
                    minor.push(b[r * n + c]);
                }
            }
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = cofactor^T
            adj[j * n + i] = sign * det(n - 1, &minor);
        }
    }
    adj
}

/// Builds the dual basis for the derivations behind the first `n` rows of
/// `table` and the generator subset of `minor`.
pub fn dual_basis(
    derivations: &[&Derivation],
    table: &ComponentTable,
    minor: &Minor,
) -> Result<DualBasisRecord> {
    let n = minor.generators.len();
    if derivations.len() != n || table.n_derivations() < n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: derivations.len(),
        });
    }
    let space = derivations[0].space().clone();
    let mut matrices = Vec::with_capacity(minor.domain.len());
    let mut dets = Vec::with_capacity(minor.domain.len());
    let mut lambdas = vec![vec![0.0; space.len()]; n * n];
    for &x in &minor.domain {
        let b = minor_block(table, n, &minor.generators, x);
        let (d, ratio) = hadamard_ratio(n, &b);
        if !(ratio >= minor.det_floor) {
            return Err(Error::SingularMinor {
                point: x,
                det: d,
                floor: minor.det_floor,
            });
        }
        let a: Vec<f64> = adjugate(n, &b).into_iter().map(|c| c / d).collect();
        for (slot, &value) in a.iter().enumerate() {
            lambdas[slot][x] = value;
        }
        matrices.push(a);
        dets.push(d);
    }
    let lambda_fields = lambdas
        .into_iter()
        .map(|v| ScalarField::new(&space, v))
        .collect::<Result<Vec<_>>>()?;
    let dual = (0..n)
        .map(|i| {
            let row: Vec<&ScalarField> = (0..n).map(|k| &lambda_fields[i * n + k]).collect();
            combine(&row, derivations)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DualBasisRecord {
        generators: minor.generators.clone(),
        domain: minor.domain.clone(),
        matrices,
        dets,
        det_floor: minor.det_floor,
        dual,
    })
}

impl DualBasisRecord {
    pub fn dimension(&self) -> usize {
        self.generators.len()
    }

    /// `max |A(x) B(x) - I|` over the domain.
    pub fn inverse_error(&self, table: &ComponentTable) -> f64 {
        let n = self.dimension();
        let mut worst = 0.0f64;
        for (a, &x) in self.matrices.iter().zip(&self.domain) {
            let b = minor_block(table, n, &self.generators, x);
            let prod = matrix(n, n, a) * matrix(n, n, &b);
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((prod[(i, j)] - target).abs());
                }
            }
        }
        worst
    }

    /// `max |D'_i g'_j(x) - delta_ij|` over the domain.
    pub fn duality_error(&self, generators: &[&ScalarField]) -> f64 {
        let mut worst = 0.0f64;
        for (i, d) in self.dual.iter().enumerate() {
            for (j, &g) in self.generators.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                for &x in &self.domain {
                    let v = d.apply_values(generators[g].values(), x);
                    worst = worst.max((v - target).abs());
                }
            }
        }
        worst
    }

    /// Relative error of `D = sum_j (D g'_j) D'_j` tested on every
    /// generator over the domain.
    pub fn reconstruction_error(
        &self,
        derivation: &Derivation,
        generators: &[&ScalarField],
    ) -> f64 {
        let mut worst = 0.0f64;
        for &x in &self.domain {
            let coeffs: Vec<f64> = self
                .generators
                .iter()
                .map(|&g| derivation.apply_values(generators[g].values(), x))
                .collect();
            let mut scale = 0.0f64;
            let mut err = 0.0f64;
            for g in generators {
                let direct = derivation.apply_values(g.values(), x);
                let rebuilt: f64 = self
                    .dual
                    .iter()
                    .zip(&coeffs)
                    .map(|(d, c)| c * d.apply_values(g.values(), x))
                    .sum();
                scale = scale.max(direct.abs());
                err = err.max((direct - rebuilt).abs());
            }
            worst = worst.max(err / scale.max(1.0));
        }
        worst
    }
}
