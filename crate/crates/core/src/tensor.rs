//! Dense row-major tensors.
//!
//! Storage is generic over [`Element`] so that the same kernels run in single
//! precision for training and in double precision for finite-difference checks.
//! Kernels always accumulate in `f64`.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar storage type of a [`Tensor`].
pub trait Element: Copy + Default + PartialEq + PartialOrd + Send + Sync + fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` values, rounding to the storage type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::from_f64(value); n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![T::from_f64(value)],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing axis.
    #[inline]
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn item(&self) -> f64 {
        self.data[0].to_f64()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }

    #[test]
    fn finiteness_is_checked() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(!t.all_finite());
        assert!(matches!(t.ensure_finite("x"), Err(Error::NonFinite("x"))));
    }
}
