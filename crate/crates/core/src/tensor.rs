//! Dense channel tensors and the circular-shift operator.
//!
//! Every image plane is flattened row-major: pixel `(row, col)` lives at
//! index `row * width + col`. A [`ChannelTensor`] has logical shape
//! `(channels, pixels, batch)`; physically the batch index is outermost so a
//! batch column (all channels of one sample, stacked channel-major) is one
//! contiguous slice. That slice is the stacked vector the multi-channel
//! probes act on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use nalgebra::DMatrix;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// accepted by the convolution kernels for benchmarking.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + AddAssign + Sum + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Height and width of one image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    height: usize,
    width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image shape {height}x{width} has no pixels"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels `N`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A 2-D circular shift `(dy, dx)`; composes additively modulo the image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ShiftOffset {
    pub dy: isize,
    pub dx: isize,
}

impl ShiftOffset {
    pub const ZERO: ShiftOffset = ShiftOffset { dy: 0, dx: 0 };

    pub const fn new(dy: isize, dx: isize) -> Self {
        Self { dy, dx }
    }

    /// The offset whose shift undoes this one (`T_{-k} = T_k^T`).
    pub const fn adjoint(self) -> Self {
        Self { dy: -self.dy, dx: -self.dx }
    }

    pub const fn compose(self, other: ShiftOffset) -> Self {
        Self { dy: self.dy + other.dy, dx: self.dx + other.dx }
    }
}

/// Free-function form of [`ShiftOffset::adjoint`].
pub fn adjoint_offset(off: ShiftOffset) -> ShiftOffset {
    off.adjoint()
}

/// Calls `f(src_start, dst_start, len)` for every contiguous run of the
/// permutation `src pixel (r, c) -> dst pixel (r + dy, c + dx)` (mod H, W).
#[inline]
pub(crate) fn for_each_run(shape: ImageShape, off: ShiftOffset, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w) = (shape.height, shape.width);
    let dy = off.dy.rem_euclid(h as isize) as usize;
    let dx = off.dx.rem_euclid(w as isize) as usize;
    for row in 0..h {
        let src = row * w;
        let dst = ((row + dy) % h) * w;
        f(src, dst + dx, w - dx);
        if dx > 0 {
            f(src + w - dx, dst, dx);
        }
    }
}

/// `dst[T_k p] += alpha * src[p]` for every pixel `p`.
#[inline]
pub(crate) fn shifted_axpy<T: Scalar>(alpha: T, src: &[T], dst: &mut [T], shape: ImageShape, off: ShiftOffset) {
    for_each_run(shape, off, |s, d, len| {
        for (o, &v) in dst[d..d + len].iter_mut().zip(&src[s..s + len]) {
            *o += alpha * v;
        }
    });
}

/// `<T_k src, other>`.
#[inline]
pub(crate) fn shifted_dot<T: Scalar>(src: &[T], other: &[T], shape: ImageShape, off: ShiftOffset) -> T {
    let mut acc = T::zero();
    for_each_run(shape, off, |s, d, len| {
        acc += dot(&src[s..s + len], &other[d..d + len]);
    });
    acc
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators; the summation order is fixed, so results are reproducible.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Applies `T_k` to a flattened image: `out[(r+dy mod H)·W + (c+dx mod W)] = x[r·W + c]`.
pub fn circular_shift<T: Copy>(x: &[T], shape: ImageShape, off: ShiftOffset) -> Result<Vec<T>> {
    if x.len() != shape.pixels() {
        return Err(dim_err(format!(
            "vector of length {} does not match a {}x{} image",
            x.len(),
            shape.height,
            shape.width
        )));
    }
    let mut out = x.to_vec();
    for_each_run(shape, off, |s, d, len| out[d..d + len].copy_from_slice(&x[s..s + len]));
    Ok(out)
}

/// Largest image for which [`dense_shift_matrix`] will allocate.
pub const DENSE_SHIFT_MAX_PIXELS: usize = 4096;

/// The explicit `N x N` permutation matrix `P` with `P x = circular_shift(x, off)`.
pub fn dense_shift_matrix(shape: ImageShape, off: ShiftOffset) -> Result<DMatrix<f64>> {
    let n = shape.pixels();
    if n > DENSE_SHIFT_MAX_PIXELS {
        return Err(Error::Capacity(format!(
            "dense shift matrix for {n} pixels exceeds the {DENSE_SHIFT_MAX_PIXELS}-pixel limit"
        )));
    }
    let mut p = DMatrix::zeros(n, n);
    for_each_run(shape, off, |s, d, len| {
        for t in 0..len {
            p[(d + t, s + t)] = 1.0;
        }
    });
    Ok(p)
}

/// A batch of multi-channel images, logical shape `(channels, pixels, batch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTensor<T = f64> {
    shape: ImageShape,
    channels: usize,
    batch: usize,
    data: Vec<T>,
}

impl<T: Scalar> ChannelTensor<T> {
    pub fn zeros(shape: ImageShape, channels: usize, batch: usize) -> Result<Self> {
        check_counts(channels, batch)?;
        Ok(Self { shape, channels, batch, data: vec![T::zero(); shape.pixels() * channels * batch] })
    }

    /// Builds a tensor from `f(channel, pixel, batch)`.
    pub fn from_fn(
        shape: ImageShape,
        channels: usize,
        batch: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut t = Self::zeros(shape, channels, batch)?;
        for b in 0..batch {
            for c in 0..channels {
                for (p, v) in t.image_mut(c, b).iter_mut().enumerate() {
                    *v = f(c, p, b);
                }
            }
        }
        t.check_finite()?;
        Ok(t)
    }

    /// Wraps a buffer laid out batch-major: `data[(b * channels + c) * N + p]`.
    pub fn from_vec(shape: ImageShape, channels: usize, batch: usize, data: Vec<T>) -> Result<Self> {
        check_counts(channels, batch)?;
        let expected = shape.pixels() * channels * batch;
        if data.len() != expected {
            return Err(dim_err(format!("buffer has {} values, expected {expected}", data.len())));
        }
        let t = Self { shape, channels, batch, data };
        t.check_finite()?;
        Ok(t)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("tensor contains non-finite values".into()))
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn pixels(&self) -> usize {
        self.shape.pixels()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, channel: usize, pixel: usize, batch: usize) -> T {
        self.data[(batch * self.channels + channel) * self.pixels() + pixel]
    }

    pub fn set(&mut self, channel: usize, pixel: usize, batch: usize, value: T) {
        let n = self.pixels();
        self.data[(batch * self.channels + channel) * n + pixel] = value;
    }

    /// One image plane.
    pub fn image(&self, channel: usize, batch: usize) -> &[T] {
        let n = self.pixels();
        let start = (batch * self.channels + channel) * n;
        &self.data[start..start + n]
    }

    pub fn image_mut(&mut self, channel: usize, batch: usize) -> &mut [T] {
        let n = self.pixels();
        let start = (batch * self.channels + channel) * n;
        &mut self.data[start..start + n]
    }

    /// All channels of one sample stacked into a length `N * channels` vector.
    pub fn column(&self, batch: usize) -> &[T] {
        let len = self.pixels() * self.channels;
        &self.data[batch * len..(batch + 1) * len]
    }

    pub fn column_mut(&mut self, batch: usize) -> &mut [T] {
        let len = self.pixels() * self.channels;
        &mut self.data[batch * len..(batch + 1) * len]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Frobenius inner product with a tensor of identical dimensions.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_dims(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape || self.channels != other.channels || self.batch != other.batch {
            return Err(dim_err(format!(
                "tensor dims ({:?}, C={}, B={}) vs ({:?}, C={}, B={})",
                self.shape, self.channels, self.batch, other.shape, other.channels, other.batch
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// `self = a * self + b * other`.
    pub fn lin_comb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> ChannelTensor<U> {
        ChannelTensor {
            shape: self.shape,
            channels: self.channels,
            batch: self.batch,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }
}

fn check_counts(channels: usize, batch: usize) -> Result<()> {
    if channels == 0 || batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "channel count {channels} and batch {batch} must be positive"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shift_two_by_two_down_one_row() {
        let shape = ImageShape::new(2, 2).unwrap();
        let y = circular_shift(&[1.0, 2.0, 3.0, 4.0], shape, ShiftOffset::new(1, 0)).unwrap();
        assert_eq!(y, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_shift_is_identity_and_inverse_composes() {
        let shape = ImageShape::new(3, 5).unwrap();
        let x: Vec<f64> = (0..15).map(f64::from).collect();
        assert_eq!(circular_shift(&x, shape, ShiftOffset::ZERO).unwrap(), x);
        let right = circular_shift(&x, shape, ShiftOffset::new(0, 1)).unwrap();
        assert_eq!(circular_shift(&right, shape, ShiftOffset::new(0, -1)).unwrap(), x);
    }

    #[test]
    fn shift_length_mismatch() {
        let shape = ImageShape::new(2, 2).unwrap();
        assert!(matches!(circular_shift(&[1.0; 3], shape, ShiftOffset::ZERO), Err(Error::Dimension(_))));
    }

    #[test]
    fn adjoint_negates() {
        assert_eq!(adjoint_offset(ShiftOffset::ZERO), ShiftOffset::ZERO);
        assert_eq!(adjoint_offset(ShiftOffset::new(1, 2)), ShiftOffset::new(-1, -2));
    }

    #[test]
    fn dense_matrix_is_permutation() {
        let shape = ImageShape::new(3, 4).unwrap();
        let id = dense_shift_matrix(shape, ShiftOffset::ZERO).unwrap();
        assert_eq!(id, DMatrix::identity(12, 12));
        let p = dense_shift_matrix(shape, ShiftOffset::new(2, -1)).unwrap();
        for i in 0..12 {
            assert_eq!(p.row(i).sum(), 1.0);
            assert_eq!(p.column(i).sum(), 1.0);
        }
    }

    #[test]
    fn dense_matrix_capacity_guard() {
        let shape = ImageShape::new(65, 64).unwrap();
        assert!(matches!(dense_shift_matrix(shape, ShiftOffset::ZERO), Err(Error::Capacity(_))));
    }

    #[test]
    fn tensor_rejects_non_finite() {
        let shape = ImageShape::new(1, 2).unwrap();
        assert!(ChannelTensor::from_vec(shape, 1, 1, vec![1.0, f64::NAN]).is_err());
        assert!(ChannelTensor::<f64>::zeros(shape, 0, 1).is_err());
    }

    fn shape_and_offset() -> impl Strategy<Value = (ImageShape, ShiftOffset)> {
        (1usize..7, 1usize..7, -4isize..5, -4isize..5)
            .prop_map(|(h, w, dy, dx)| (ImageShape::new(h, w).unwrap(), ShiftOffset::new(dy, dx)))
    }

    proptest! {
        #[test]
        fn shift_then_adjoint_is_bit_exact((shape, off) in shape_and_offset(), seed in any::<u64>()) {
            let x: Vec<f64> = (0..shape.pixels()).map(|i| ((seed ^ i as u64) % 1000) as f64 * 0.37 - 11.0).collect();
            let back = circular_shift(&circular_shift(&x, shape, off).unwrap(), shape, adjoint_offset(off)).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn dense_matrix_matches_shift((shape, off) in shape_and_offset()) {
            let x: Vec<f64> = (0..shape.pixels()).map(|i| (i as f64).sin()).collect();
            let p = dense_shift_matrix(shape, off).unwrap();
            let dense = &p * nalgebra::DVector::from_vec(x.clone());
            let fast = circular_shift(&x, shape, off).unwrap();
            prop_assert_eq!(dense.as_slice(), &fast[..]);
            let pt = dense_shift_matrix(shape, adjoint_offset(off)).unwrap();
            prop_assert_eq!(p.transpose(), pt);
        }

        #[test]
        fn trace_is_cyclic_under_shift((shape, off) in shape_and_offset()) {
            let n = shape.pixels();
            let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
            let p = dense_shift_matrix(shape, adjoint_offset(off)).unwrap();
            prop_assert!(((&a * &p).trace() - (&p * &a).trace()).abs() < 1e-12);
        }

        #[test]
        fn shifted_kernels_agree_with_explicit_shift((shape, off) in shape_and_offset()) {
            let n = shape.pixels();
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
            let y: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
            let sx = circular_shift(&x, shape, off).unwrap();
            let explicit: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
            prop_assert!((shifted_dot(&x, &y, shape, off) - explicit).abs() < 1e-12);
            let mut acc = vec![0.0; n];
            shifted_axpy(2.0, &x, &mut acc, shape, off);
            for (a, s) in acc.iter().zip(&sx) {
                prop_assert_eq!(*a, 2.0 * s);
            }
        }
    }
}
