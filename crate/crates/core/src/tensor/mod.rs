//! Dense row-major tensors of rank 1 to 4 and the kernels that operate on them.

mod grad;
mod ops;

pub use grad::finite_difference_grad;
pub use ops::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, linear, matmul,
    row_softmax, Conv2dGrads,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Dense row-major array with shape metadata.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
/// Matrices are rank 2 (`rows x cols`), feature maps are rank 3 (`H x W x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Parameter(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Parameter(format!(
            "tensor extents must be positive, got shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Shape must already be valid; finiteness is left to the caller.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// # Panics
    /// On an invalid shape (zero extent or rank outside 1..=4).
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// On an invalid shape.
    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// # Panics
    /// On an invalid shape.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Independent draws from `U(-bound, bound)`.
    ///
    /// # Panics
    /// On an invalid shape.
    pub fn uniform<R: rand::Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0, 0])),
        }
    }

    /// Row-major element of a matrix. Panics if out of range.
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::dim("slice_cols", &self.shape, &[start, width]));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Tensor {
            shape: vec![r, width],
            data: out,
        })
    }

    /// Adds `src` into columns `start..` of this matrix.
    pub fn add_cols(&mut self, start: usize, src: &Tensor<T>) -> Result<()> {
        let (r, c) = self.dims2("add_cols")?;
        let (sr, sc) = src.dims2("add_cols")?;
        if sr != r || start + sc > c {
            return Err(Error::dim("add_cols", &self.shape, &src.shape));
        }
        for i in 0..r {
            for j in 0..sc {
                self.data[i * c + start + j] += src.data[i * sc + j];
            }
        }
        Ok(())
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", &first.shape, &p.shape));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![r, total],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Element-wise conversion into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}
