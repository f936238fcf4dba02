//! Dense row-major arrays (last index varies fastest).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Scalar type the engine computes in. Training runs in `f32`; gradient
/// checking always runs in `f64`.
pub trait Real: Float + NumAssign + Debug + Display + Default + Send + Sync + Sum + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Scalars have the empty shape.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }

    /// Elementwise `self += other * k`; shapes must hold the same number of elements.
    pub fn add_scaled(&mut self, other: &Tensor<F>, k: F) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * k;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc.max(v.abs()))
    }
}

pub(crate) fn ensure_same_shape<F>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 6, actual: 5, .. }));
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::<f64>::from_f64_slice(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        // element (1, 2) sits at 1 * 3 + 2
        assert_eq!(t.data()[5], 5.0);
        assert_eq!(t.sum(), 15.0);
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::<f32>::from_f64_slice(&[3], &[0.5, -2.0, 1e-3]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
