//! Dense tensors and the kernel containers used by the recurrent cells.
//!
//! Layout is channel-major and contiguous: a rank-3 tensor is
//! `(channels, height, width)` and a rank-4 tensor prepends a batch extent,
//! `(batch, channels, height, width)`. Checkpoints serialize payloads in this
//! order, so files are portable between builds.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// 64-bit values, used by gradient checks and oracle tests.
    Check64,
    /// 32-bit values, used for training.
    Train32,
}

/// Scalar type a tensor can carry. The precision is a property of the tensor's
/// element type, so f32 and f64 models can coexist in one process.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Train32;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Check64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if !(3..=4).contains(&shape.len()) {
            return Err(Error::Invalid(format!(
                "tensor rank must be 3 or 4, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Invalid(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[self.rank() - 3]
    }

    pub fn height(&self) -> usize {
        self.shape[self.rank() - 2]
    }

    pub fn width(&self) -> usize {
        self.shape[self.rank() - 1]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.height(), self.width());
        self.data[(c * h + y) * w + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Copy of one item of a rank-4 batch.
    pub fn batch_item(&self, b: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || b >= self.shape[0] {
            return Err(Error::OutOfRange(format!(
                "batch item {b} of tensor with shape {:?}",
                self.shape
            )));
        }
        let n = self.shape[1..].iter().product::<usize>();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[b * n..(b + 1) * n].to_vec(),
        })
    }

    /// Stacks equally shaped rank-3 tensors into a rank-4 batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape || t.rank() != 3 {
                return shape_err("Tensor::stack", &first.shape, &t.shape);
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(other, op)?;
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

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// A bank of `out_channels` convolution filters over `in_channels` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(out, in, row, col)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "kernel extents must be odd, got {rows}x{cols}"
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            rows,
            cols,
            weight: vec![T::zero(); out_channels * in_channels * rows * cols],
            bias: vec![T::zero(); out_channels],
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.rows, self.cols]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, r: usize, c: usize) -> usize {
        ((o * self.in_channels + i) * self.rows + r) * self.cols + c
    }

    /// Identity filter: each output channel copies the same input channel.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 3, 3).expect("3x3 is odd");
        for c in 0..channels {
            let idx = k.index(c, c, 1, 1);
            k.weight[idx] = T::one();
        }
        k
    }
}

/// Per-location filter bank of the lattice superposition. Bound to one spatial
/// resolution `(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeFilterBank<T> {
    pub in_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub out_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    /// `(in, row, col, out, kernel_row, kernel_col)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LatticeFilterBank<T> {
    pub fn zeros(
        in_channels: usize,
        rows: usize,
        cols: usize,
        out_channels: usize,
        kernel_rows: usize,
        kernel_cols: usize,
    ) -> Result<Self> {
        if kernel_rows.is_multiple_of(2) || kernel_cols.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "kernel extents must be odd, got {kernel_rows}x{kernel_cols}"
            )));
        }
        Ok(Self {
            in_channels,
            rows,
            cols,
            out_channels,
            kernel_rows,
            kernel_cols,
            weight: vec![
                T::zero();
                in_channels * rows * cols * out_channels * kernel_rows * kernel_cols
            ],
            bias: vec![T::zero(); out_channels],
        })
    }

    /// Bank whose every location holds the filters of `kernel`.
    pub fn tied(kernel: &ConvKernel<T>, rows: usize, cols: usize) -> Self {
        let mut bank = Self::zeros(
            kernel.in_channels,
            rows,
            cols,
            kernel.out_channels,
            kernel.rows,
            kernel.cols,
        )
        .expect("conv kernels have odd extents");
        for l in 0..kernel.in_channels {
            for i in 0..rows {
                for j in 0..cols {
                    for k in 0..kernel.out_channels {
                        for m in 0..kernel.rows {
                            for n in 0..kernel.cols {
                                let dst = bank.index(l, i, j, k, m, n);
                                bank.weight[dst] = kernel.weight[kernel.index(k, l, m, n)];
                            }
                        }
                    }
                }
            }
        }
        bank.bias.copy_from_slice(&kernel.bias);
        bank
    }

    pub fn shape(&self) -> [usize; 6] {
        [
            self.in_channels,
            self.rows,
            self.cols,
            self.out_channels,
            self.kernel_rows,
            self.kernel_cols,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_rows * self.kernel_cols
    }

    #[inline]
    pub fn index(&self, l: usize, i: usize, j: usize, k: usize, m: usize, n: usize) -> usize {
        ((((l * self.rows + i) * self.cols + j) * self.out_channels + k) * self.kernel_rows + m)
            * self.kernel_cols
            + n
    }

    /// The filter applied at location `(i, j)`, as a standalone kernel.
    pub fn location_kernel(&self, i: usize, j: usize) -> Result<ConvKernel<T>> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::OutOfRange(format!(
                "location ({i}, {j}) outside bank extent {}x{}",
                self.rows, self.cols
            )));
        }
        let mut k = ConvKernel::zeros(
            self.out_channels,
            self.in_channels,
            self.kernel_rows,
            self.kernel_cols,
        )?;
        for l in 0..self.in_channels {
            for o in 0..self.out_channels {
                for m in 0..self.kernel_rows {
                    for n in 0..self.kernel_cols {
                        let dst = k.index(o, l, m, n);
                        k.weight[dst] = self.weight[self.index(l, i, j, o, m, n)];
                    }
                }
            }
        }
        k.bias.copy_from_slice(&self.bias);
        Ok(k)
    }
}
