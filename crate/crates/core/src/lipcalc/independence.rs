//! Local independence of Lipschitz functions: `f_1, ..., f_n` are
//! independent at `x` when `Phi_x(l) = Lip(sum l_i f_i)(x)` is a norm, i.e.
//! bounded away from zero on the unit sphere of coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::LipCalculus;
use crate::error::{Error, Result};
use crate::field::ScalarField;

/// Default number of sphere samples per field.
pub const SAMPLES_PER_FIELD: usize = 64;

/// Coordinate-descent sweeps after sampling.
pub const DESCENT_SWEEPS: usize = 20;

/// Relative threshold used when no explicit `tau` is given.
pub const DEFAULT_RELATIVE_TAU: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceTest {
    pub independent: bool,
    pub min_value: f64,
    pub argmin: Vec<f64>,
    pub tau: f64,
}

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut out) = (inv, 0.0);
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

/// Deterministic, well spread points on the unit sphere of `R^n`.
///
/// Circles use equally spaced angles; higher dimensions push a Halton
/// sequence through Box-Muller and normalise.
pub fn sphere_points(n: usize, count: usize) -> Vec<Vec<f64>> {
    match n {
        0 => Vec::new(),
        1 => (0..count)
            .map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }])
            .collect(),
        2 => (0..count)
            .map(|k| {
                let t = std::f64::consts::TAU * (k as f64 + 0.5) / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let pairs = n.div_ceil(2);
            assert!(
                2 * pairs <= PRIMES.len(),
                "sphere sampling supports up to 24 dimensions"
            );
            (0..count as u64)
                .map(|k| {
                    let mut v = Vec::with_capacity(2 * pairs);
                    for p in 0..pairs {
                        let u1 = radical_inverse(k + 1, PRIMES[2 * p] as u64).max(1e-12);
                        let u2 = radical_inverse(k + 1, PRIMES[2 * p + 1] as u64);
                        let rad = (-2.0 * u1.ln()).sqrt();
                        let t = std::f64::consts::TAU * u2;
                        v.push(rad * t.cos());
                        v.push(rad * t.sin());
                    }
                    v.truncate(n);
                    normalize(&mut v);
                    v
                })
                .filter(|v| v.iter().all(|c| c.is_finite()))
                .collect()
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|c| *c /= norm);
    }
}

/// Right singular vector of the smallest singular value of `rows`: it
/// minimises the Euclidean version of `Phi_x`, which is within a factor
/// `sqrt(rows)` of the sup version, and catches exact dependence that a
/// finite sample of the sphere only approaches.
fn smallest_singular_direction(rows: &[Vec<f64>], n: usize) -> Option<Vec<f64>> {
    if rows.is_empty() {
        return None;
    }
    let m = rows.len().max(n);
    let mut a = DMatrix::zeros(m, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))?
        .0;
    let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
    normalize(&mut v);
    v.iter().all(|c| c.is_finite()).then_some(v)
}

fn sup_apply(rows: &[Vec<f64>], lambda: &[f64]) -> f64 {
    rows.iter()
        .map(|row| {
            row.iter()
                .zip(lambda)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

impl LipCalculus {
    /// Minimises `Phi_x` over the unit sphere: `samples` low-discrepancy
    /// points (default `64 n`) plus the least singular direction of the
    /// difference-quotient matrix, followed by [`DESCENT_SWEEPS`] sweeps of
    /// coordinate descent with a halving step. The fields are independent at
    /// `x` iff the minimum exceeds `tau`, which defaults to
    /// `1e-3 * max_i Lip f_i(x)`.
    pub fn independence_test(
        &self,
        fields: &[&ScalarField],
        x: usize,
        tau: Option<f64>,
        samples: Option<usize>,
    ) -> Result<IndependenceTest> {
        let n = fields.len();
        if n == 0 {
            return Err(Error::Empty("field list"));
        }
        for f in fields {
            f.ensure_space(self.space())?;
        }
        self.space().check_point(x)?;
        let samples = samples.unwrap_or(SAMPLES_PER_FIELD * n);
        if samples < 2 * n {
            return Err(Error::InvalidParameter(format!(
                "need at least {} sphere samples, got {samples}",
                2 * n
            )));
        }
        if let Some(t) = tau {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter(format!("tau {t} must be > 0")));
            }
        }
        let values: Vec<&[f64]> = fields.iter().map(|f| f.values()).collect();
        let rows = self.floor_quotients(&values, x);
        let tau = tau.unwrap_or_else(|| {
            let max_lip = (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    sup_apply(&rows, &e)
                })
                .fold(0.0, f64::max);
            DEFAULT_RELATIVE_TAU * max_lip
        });

        let mut best = Vec::new();
        let mut best_val = f64::INFINITY;
        for p in sphere_points(n, samples)
            .into_iter()
            .chain(smallest_singular_direction(&rows, n))
        {
            let v = sup_apply(&rows, &p);
            if v < best_val {
                best_val = v;
                best = p;
            }
        }
        let mut step = (samples as f64).powf(-1.0 / n as f64).clamp(1e-3, 0.5);
        for _ in 0..DESCENT_SWEEPS {
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    for _ in 0..16 {
                        let mut cand = best.clone();
                        cand[i] += sign * step;
                        normalize(&mut cand);
                        let v = sup_apply(&rows, &cand);
                        if v < best_val {
                            best_val = v;
                            best = cand;
                        } else {
                            break;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        Ok(IndependenceTest {
            independent: best_val > tau,
            min_value: best_val,
            argmin: best,
            tau,
        })
    }
}
