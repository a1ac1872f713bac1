use crate::error::{Error, Result};
use crate::space::SpaceRef;

/// A finite real value at every point of a space.
#[derive(Debug, Clone)]
pub struct ScalarField {
    space: SpaceRef,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(space: &SpaceRef, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::LengthMismatch {
                expected: space.len(),
                got: values.len(),
            });
        }
        if let Some((point, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { point, value });
        }
        Ok(Self {
            space: space.clone(),
            values,
        })
    }

    pub fn from_fn(space: &SpaceRef, f: impl Fn(usize) -> f64) -> Result<Self> {
        Self::new(space, (0..space.len()).map(f).collect())
    }

    pub fn constant(space: &SpaceRef, c: f64) -> Result<Self> {
        Self::new(space, vec![c; space.len()])
    }

    /// The `axis`-th coordinate function of a coordinate-backed space.
    pub fn coordinate(space: &SpaceRef, axis: usize) -> Result<Self> {
        match space.dim() {
            Some(d) if axis < d => Self::from_fn(space, |i| space.coords(i).unwrap()[axis]),
            _ => Err(Error::InvalidParameter(format!(
                "space has no coordinate {axis}"
            ))),
        }
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_space(&self, other: &ScalarField) -> bool {
        std::sync::Arc::ptr_eq(&self.space, &other.space)
    }

    pub(crate) fn ensure_space(&self, space: &SpaceRef) -> Result<()> {
        if std::sync::Arc::ptr_eq(&self.space, space) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(&self.space, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: f64) -> Result<Self> {
        self.map(|v| a * v)
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.ensure_space(&self.space)?;
        Self::new(
            &self.space,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `sum_i coeffs[i] * fields[i]`, accumulated in list order.
    pub fn combination(fields: &[&ScalarField], coeffs: &[f64]) -> Result<Self> {
        if fields.len() != coeffs.len() {
            return Err(Error::LengthMismatch {
                expected: fields.len(),
                got: coeffs.len(),
            });
        }
        let first = fields.first().ok_or(Error::Empty("field list"))?;
        let mut values = vec![0.0; first.len()];
        for (f, &c) in fields.iter().zip(coeffs) {
            f.ensure_space(&first.space)?;
            for (v, &fv) in values.iter_mut().zip(&f.values) {
                *v += c * fv;
            }
        }
        Self::new(&first.space, values)
    }

    /// Sup norm.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
