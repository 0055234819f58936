//! Dense tensors and the matrix-multiply kernel the layers are built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the engine (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the corresponding slice; [`gemm`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    /// Rows and columns of the stored (untransposed) matrix.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m x n, row-major) = a * b + beta * out`.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(out.len(), m * n, "output has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the stored extents were checked above and the strides
    // address exactly rows x cols elements of each slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A 4-D activation tensor with logical shape (batch, channels, height,
/// width).
///
/// Storage is channel-major, `[channel][batch][row][col]`, so that each
/// channel's values over the whole batch are contiguous: convolutions
/// become a single matrix product per layer, batch normalisation reduces
/// over contiguous runs and channel concatenation is an append.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    /// Wraps channel-major data.
    pub fn from_channel_major(batch: usize, channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for shape ({batch}, {channels}, {height}, {width})",
                data.len()
            )));
        }
        Ok(Tensor {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a tensor from NCHW-ordered data.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, data: &[T]) -> Result<Self> {
        let mut t = Tensor::zeros(batch, channels, height, width);
        if data.len() != t.data.len() {
            return Err(Error::Shape(format!(
                "{} values for shape ({batch}, {channels}, {height}, {width})",
                data.len()
            )));
        }
        let plane = height * width;
        for b in 0..batch {
            for c in 0..channels {
                let src = &data[(b * channels + c) * plane..][..plane];
                t.data[(c * batch + b) * plane..][..plane].copy_from_slice(src);
            }
        }
        Ok(t)
    }

    /// Returns the values in NCHW order.
    pub fn to_nchw(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); self.data.len()];
        for b in 0..self.batch {
            for c in 0..self.channels {
                out[(b * self.channels + c) * plane..][..plane].copy_from_slice(self.plane(b, c));
            }
        }
        out
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-major storage.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The `height x width` plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[(c * self.batch + b) * plane..][..plane]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let plane = self.height * self.width;
        &mut self.data[(c * self.batch + b) * plane..][..plane]
    }

    /// Values of one channel across the whole batch.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.batch * self.height * self.width;
        &self.data[c * n..][..n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if (self.batch, self.height, self.width) != (other.batch, other.height, other.width) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            channels: self.channels + other.channels,
            data,
            ..*self
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = c * self.batch * self.height * self.width;
        (
            Tensor {
                channels: c,
                data: self.data[..cut].to_vec(),
                ..*self
            },
            Tensor {
                channels: self.channels - c,
                data: self.data[cut..].to_vec(),
                ..*self
            },
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }
}
