//! Dense rank-4 `f64` tensor in `(batch, channels, height, width)` layout.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

/// Shape of a [`Tensor`]: `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

#[inline]
pub(crate) fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Contiguous row-major `(b, c, h, w)` array of `f64` values.
///
/// Tensors are plain values; gradient tracking lives on the [`crate::Tape`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(dim_err!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    /// A `(1, 1, 1, 1)` tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// A `(1, n, 1, 1)` tensor, the layout used for per-channel vectors.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values.to_vec(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Self { shape, data }
    }

    /// Normal samples with mean 0 and the given standard deviation.
    pub fn rand_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(dim_err!("expected a scalar, got shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// One image plane `(c, h, w)` of batch entry `b` as a slice.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Batch entry `b` as a contiguous `(c, h, w)` slice.
    pub fn item_slice(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[b * n..(b + 1) * n]
    }

    /// Selects batch entry `b` as a batch-1 tensor.
    pub fn select_batch(&self, b: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.item_slice(b).to_vec(),
        }
    }

    /// Repeats a batch-1 tensor `n` times along the batch axis.
    pub fn repeat_batch(&self, n: usize) -> Result<Tensor> {
        if self.shape[0] != 1 {
            return Err(dim_err!("repeat_batch needs batch 1, got {}", self.shape[0]));
        }
        let mut data = Vec::with_capacity(self.data.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        let [_, c, h, w] = self.shape;
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(dim_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(dim_err!("expected shape {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(alloc::string::String::from(what)))
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let list = f
            .debug_list()
            .entries(self.data.iter().take(SHOWN))
            .finish();
        if self.data.len() > SHOWN {
            write!(f, "..")?;
        }
        list
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(matches!(
            Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([2, 2, 2, 3], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 2), 2.0);
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(1, 0, 0, 0), 12.0);
        assert_eq!(t.plane(1, 1), &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::zeros([1, 1, 1, 2]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(t.check_finite("t"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn stack_and_select() {
        let a = Tensor::full([1, 1, 2, 2], 1.0);
        let b = Tensor::full([1, 1, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 1, 2, 2]);
        assert_eq!(s.select_batch(1), b);
        assert_eq!(a.repeat_batch(3).unwrap().shape(), [3, 1, 2, 2]);
    }
}
