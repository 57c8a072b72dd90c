use std::fmt;

use crate::error::{DgError, Result};

/// Scalar element of a tensor: 32-bit for training, 64-bit for gradient
/// checks (central finite differences are unreliable in 32-bit).
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Largest representable value strictly below one. Sigmoid outputs are
    /// clamped into the open interval (0, 1) with this.
    fn below_one() -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn below_one() -> Self {
        1.0 - f32::EPSILON / 2.0
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn below_one() -> Self {
        1.0 - f64::EPSILON / 2.0
    }
}

/// Dense row-major N-dimensional array. Plain data, no differentiation;
/// tensors on the tape wrap one of these.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Array<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DgError::ShapeMismatch {
                op: "Array::new",
                dim: "element count",
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Scalar accessor for 1-element arrays.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Reinterprets the data with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(DgError::ShapeMismatch {
                op: "reshape",
                dim: "element count",
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `b` of the leading axis as a standalone array.
    pub fn slice_first(&self, b: usize) -> Self {
        let row: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[b * row..(b + 1) * row].to_vec(),
        }
    }

    /// Stacks same-shape arrays along a new leading axis.
    pub fn stack(rows: &[Self]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| DgError::InvalidArgument {
            op: "stack",
            msg: "empty row list".into(),
        })?;
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(rows.len() * first.numel());
        for r in rows {
            if r.shape != first.shape {
                return Err(DgError::ShapeMismatch {
                    op: "stack",
                    dim: "row shape",
                    expected: first.numel(),
                    got: r.numel(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Array::new(shape, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.as_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Converts element precision (used to move data into a 64-bit
    /// gradient-check context).
    pub fn cast<T: Element>(&self) -> Array<T> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        }
    }

    /// Fills with zero-mean Gaussian draws of the given standard deviation.
    pub fn fill_normal(&mut self, std: f64, rng: &mut impl rand::Rng) {
        for x in &mut self.data {
            *x = E::from_f64(crate::rng::normal(rng) * std);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        let err = Array::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, DgError::ShapeMismatch { .. }));
    }

    #[test]
    fn stack_and_slice_round_trip() {
        let a = Array::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let b = Array::new(vec![2], vec![3.0f32, 4.0]).unwrap();
        let s = Array::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_first(0), a);
    }

    #[test]
    fn below_one_is_strictly_below() {
        assert!(f32::below_one() < 1.0);
        assert!(f64::below_one() < 1.0);
        assert!(f32::below_one() > 0.9999);
    }
}
