//! Convolution as a weighted sum of circular shifts, and its exact gradients.
//!
//! For input channel `n` and output channel `m` the layer applies
//! `W^{n,m} = Σ_i w_i^{n,m} T_{k(i)}`; the output is `Y^m = Σ_n W^{n,m} X^n`
//! (plus an optional per-channel bias). The weight gradient is the trace
//! `δw_i^{n,m} = Σ_b <T_{k(i)} X^n_b, δY^m_b> = tr(δY^m X^{nT} T_{-k(i)})`,
//! evaluated here by shift-and-dot without forming any `N x N` product.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{shifted_axpy, shifted_dot, ChannelTensor, ImageShape, Scalar, ShiftOffset};

/// The bijection `i ↦ k(i)` between weight index and kernel offset.
///
/// Offsets are enumerated `dy`-major: `dy` from `-K/2` to `K/2` in the outer
/// loop, `dx` ascending in the inner loop. For `K = 3` index 4 is the centre.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelOffsetMap {
    size: usize,
    offsets: Vec<ShiftOffset>,
}

impl KernelOffsetMap {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size {size} must be odd and positive")));
        }
        let h = (size / 2) as isize;
        let offsets = (-h..=h).flat_map(|dy| (-h..=h).map(move |dx| ShiftOffset::new(dy, dx))).collect();
        Ok(Self { size, offsets })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of weights per channel pair, `n_w = K²`.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, i: usize) -> ShiftOffset {
        self.offsets[i]
    }

    pub fn offsets(&self) -> &[ShiftOffset] {
        &self.offsets
    }

    pub fn index_of(&self, off: ShiftOffset) -> Option<usize> {
        let h = (self.size / 2) as isize;
        if off.dy.abs() > h || off.dx.abs() > h {
            return None;
        }
        Some(((off.dy + h) as usize) * self.size + (off.dx + h) as usize)
    }
}

/// Convolution weights, logical shape `(c_out, c_in, n_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f64> {
    c_in: usize,
    c_out: usize,
    map: KernelOffsetMap,
    w: Vec<T>,
    bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(c_in: usize, c_out: usize, map: KernelOffsetMap) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument("conv channel counts must be positive".into()));
        }
        let len = c_in * c_out * map.len();
        Ok(Self { c_in, c_out, map, w: vec![T::zero(); len], bias: None })
    }

    /// Wraps weights laid out as `w[(m * c_in + n) * n_w + i]`.
    pub fn from_vec(c_in: usize, c_out: usize, map: KernelOffsetMap, w: Vec<T>) -> Result<Self> {
        let mut out = Self::zeros(c_in, c_out, map)?;
        if w.len() != out.w.len() {
            return Err(dim_err(format!("{} weights given, expected {}", w.len(), out.w.len())));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite conv weight".into()));
        }
        out.w = w;
        Ok(out)
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Result<Self> {
        if bias.len() != self.c_out {
            return Err(dim_err(format!("bias has {} entries, expected {}", bias.len(), self.c_out)));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn offset_map(&self) -> &KernelOffsetMap {
        &self.map
    }

    pub fn get(&self, m: usize, n: usize, i: usize) -> T {
        self.w[(m * self.c_in + n) * self.map.len() + i]
    }

    pub fn set(&mut self, m: usize, n: usize, i: usize, v: T) {
        let nw = self.map.len();
        self.w[(m * self.c_in + n) * nw + i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.w
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    /// Weights and bias borrowed mutably at the same time.
    pub fn split_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.w, self.bias.as_deref_mut())
    }

    pub fn cast<U: Scalar>(&self) -> ConvWeights<U> {
        let conv = |v: &T| U::from_f64_lossy(v.to_f64().unwrap_or(0.0));
        ConvWeights {
            c_in: self.c_in,
            c_out: self.c_out,
            map: self.map.clone(),
            w: self.w.iter().map(conv).collect(),
            bias: self.bias.as_ref().map(|b| b.iter().map(conv).collect()),
        }
    }
}

/// Gradient with respect to the conv weights; same layout as [`ConvWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGradient<T = f64> {
    pub c_in: usize,
    pub c_out: usize,
    pub n_w: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> WeightGradient<T> {
    pub fn zeros(c_in: usize, c_out: usize, n_w: usize) -> Self {
        Self { c_in, c_out, n_w, values: vec![T::zero(); c_in * c_out * n_w] }
    }

    pub fn get(&self, m: usize, n: usize, i: usize) -> T {
        self.values[(m * self.c_in + n) * self.n_w + i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_input<T: Scalar>(x: &ChannelTensor<T>, w: &ConvWeights<T>) -> Result<()> {
    if x.channels() != w.c_in {
        return Err(dim_err(format!("input has {} channels, weights expect {}", x.channels(), w.c_in)));
    }
    Ok(())
}

/// `Y^m = Σ_n Σ_i w_i^{n,m} T_{k(i)} X^n (+ bias_m)` for every batch column.
pub fn conv_forward<T: Scalar>(x: &ChannelTensor<T>, w: &ConvWeights<T>) -> Result<ChannelTensor<T>> {
    check_input(x, w)?;
    let shape = x.shape();
    let mut y = ChannelTensor::zeros(shape, w.c_out, x.batch())?;
    let col = shape.pixels() * w.c_out;
    y.as_mut_slice().par_chunks_mut(col).enumerate().for_each(|(b, out)| {
        forward_column(x, w, b, shape, out);
    });
    Ok(y)
}

fn forward_column<T: Scalar>(x: &ChannelTensor<T>, w: &ConvWeights<T>, b: usize, shape: ImageShape, out: &mut [T]) {
    let n_pix = shape.pixels();
    for m in 0..w.c_out {
        let dst = &mut out[m * n_pix..(m + 1) * n_pix];
        for n in 0..w.c_in {
            let src = x.image(n, b);
            for (i, &off) in w.map.offsets().iter().enumerate() {
                let wi = w.get(m, n, i);
                if wi != T::zero() {
                    shifted_axpy(wi, src, dst, shape, off);
                }
            }
        }
        if let Some(bias) = &w.bias {
            for v in dst.iter_mut() {
                *v += bias[m];
            }
        }
    }
}

/// Exact weight gradient `δw_i^{n,m} = Σ_b <T_{k(i)} X^n_b, δY^m_b>`.
///
/// Per-sample partials are computed in parallel and summed in batch order,
/// so the result does not depend on the thread count.
pub fn grad_weights_exact<T: Scalar>(
    x: &ChannelTensor<T>,
    dy: &ChannelTensor<T>,
    map: &KernelOffsetMap,
) -> Result<WeightGradient<T>> {
    if x.shape() != dy.shape() || x.batch() != dy.batch() {
        return Err(dim_err("input and output gradient differ in image shape or batch"));
    }
    let (c_in, c_out, n_w) = (x.channels(), dy.channels(), map.len());
    let shape = x.shape();
    let partials: Vec<Vec<T>> = (0..x.batch())
        .into_par_iter()
        .map(|b| {
            let mut g = vec![T::zero(); c_in * c_out * n_w];
            for m in 0..c_out {
                let d = dy.image(m, b);
                for n in 0..c_in {
                    let src = x.image(n, b);
                    for (i, &off) in map.offsets().iter().enumerate() {
                        g[(m * c_in + n) * n_w + i] = shifted_dot(src, d, shape, off);
                    }
                }
            }
            g
        })
        .collect();
    let mut grad = WeightGradient::zeros(c_in, c_out, n_w);
    for p in &partials {
        for (acc, v) in grad.values.iter_mut().zip(p) {
            *acc += *v;
        }
    }
    Ok(grad)
}

/// Bias gradient: `δY` summed over pixels and batch, per output channel.
pub fn grad_bias<T: Scalar>(dy: &ChannelTensor<T>) -> Vec<T> {
    let mut g = vec![T::zero(); dy.channels()];
    for b in 0..dy.batch() {
        for (m, acc) in g.iter_mut().enumerate() {
            *acc += dy.image(m, b).iter().copied().sum::<T>();
        }
    }
    g
}

/// Input gradient, the adjoint of [`conv_forward`]'s linear part:
/// `δX^n = Σ_m Σ_i w_i^{n,m} T_{-k(i)} δY^m`.
pub fn grad_input_exact<T: Scalar>(dy: &ChannelTensor<T>, w: &ConvWeights<T>) -> Result<ChannelTensor<T>> {
    if dy.channels() != w.c_out {
        return Err(dim_err(format!("output gradient has {} channels, weights expect {}", dy.channels(), w.c_out)));
    }
    let shape = dy.shape();
    let n_pix = shape.pixels();
    let mut dx = ChannelTensor::zeros(shape, w.c_in, dy.batch())?;
    dx.as_mut_slice().par_chunks_mut(n_pix * w.c_in).enumerate().for_each(|(b, out)| {
        for n in 0..w.c_in {
            let dst = &mut out[n * n_pix..(n + 1) * n_pix];
            for m in 0..w.c_out {
                let src = dy.image(m, b);
                for (i, &off) in w.map.offsets().iter().enumerate() {
                    let wi = w.get(m, n, i);
                    if wi != T::zero() {
                        shifted_axpy(wi, src, dst, shape, off.adjoint());
                    }
                }
            }
        }
    });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, SeqRng};
    use crate::tensor::circular_shift;

    fn random_tensor(shape: ImageShape, c: usize, b: usize, seed: u64) -> ChannelTensor {
        let mut rng = SeqRng::from_u64(seed, Domain::Instance);
        ChannelTensor::from_fn(shape, c, b, |_, _, _| rng.normal()).unwrap()
    }

    #[test]
    fn offset_enumeration_is_dy_major() {
        let map = KernelOffsetMap::new(3).unwrap();
        assert_eq!(map.offset(0), ShiftOffset::new(-1, -1));
        assert_eq!(map.offset(1), ShiftOffset::new(-1, 0));
        assert_eq!(map.offset(4), ShiftOffset::ZERO);
        assert_eq!(map.offset(8), ShiftOffset::new(1, 1));
        for i in 0..9 {
            assert_eq!(map.index_of(map.offset(i)), Some(i));
        }
        assert!(KernelOffsetMap::new(4).is_err());
        assert!(KernelOffsetMap::new(0).is_err());
    }

    #[test]
    fn delta_and_shift_kernels() {
        let shape = ImageShape::new(4, 5).unwrap();
        let x = random_tensor(shape, 1, 2, 1);
        let map = KernelOffsetMap::new(3).unwrap();
        let mut w = ConvWeights::zeros(1, 1, map.clone()).unwrap();
        w.set(0, 0, 4, 1.0);
        assert_eq!(conv_forward(&x, &w).unwrap(), x);

        let mut w = ConvWeights::zeros(1, 1, map.clone()).unwrap();
        w.set(0, 0, map.index_of(ShiftOffset::new(0, 1)).unwrap(), 1.0);
        let y = conv_forward(&x, &w).unwrap();
        for b in 0..2 {
            assert_eq!(y.image(0, b), &circular_shift(x.image(0, b), shape, ShiftOffset::new(0, 1)).unwrap()[..]);
        }
        let dx = grad_input_exact(&x, &w).unwrap();
        for b in 0..2 {
            assert_eq!(dx.image(0, b), &circular_shift(x.image(0, b), shape, ShiftOffset::new(0, -1)).unwrap()[..]);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let shape = ImageShape::new(3, 3).unwrap();
        let x = random_tensor(shape, 2, 2, 2);
        let dy = ChannelTensor::zeros(shape, 3, 2).unwrap();
        let g = grad_weights_exact(&x, &dy, &KernelOffsetMap::new(3).unwrap()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_gradient_marks_the_connecting_shift() {
        let shape = ImageShape::new(4, 4).unwrap();
        let map = KernelOffsetMap::new(3).unwrap();
        let (p, q) = (5usize, 10usize); // (1,1) and (2,2)
        let x = ChannelTensor::from_fn(shape, 1, 1, |_, i, _| if i == p { 1.0 } else { 0.0 }).unwrap();
        let dy = ChannelTensor::from_fn(shape, 1, 1, |_, i, _| if i == q { 1.0 } else { 0.0 }).unwrap();
        let g = grad_weights_exact(&x, &dy, &map).unwrap();
        for i in 0..map.len() {
            let mut e_q = vec![0.0; 16];
            e_q[q] = 1.0;
            let moved = circular_shift(&e_q, shape, map.offset(i).adjoint()).unwrap();
            let expected = if moved[p] == 1.0 { 1.0 } else { 0.0 };
            assert_eq!(g.get(0, 0, i), expected, "offset {i}");
        }
        assert_eq!(g.get(0, 0, map.index_of(ShiftOffset::new(1, 1)).unwrap()), 1.0);
    }

    #[test]
    fn dimension_errors() {
        let shape = ImageShape::new(3, 3).unwrap();
        let x = random_tensor(shape, 2, 1, 3);
        let w = ConvWeights::<f64>::zeros(3, 1, KernelOffsetMap::new(3).unwrap()).unwrap();
        assert!(matches!(conv_forward(&x, &w), Err(Error::Dimension(_))));
        assert!(matches!(grad_input_exact(&x, &w), Err(Error::Dimension(_))));
        let other = random_tensor(ImageShape::new(2, 3).unwrap(), 1, 1, 4);
        assert!(grad_weights_exact(&x, &other, w.offset_map()).is_err());
    }

    #[test]
    fn bias_is_added_and_its_gradient_sums() {
        let shape = ImageShape::new(2, 2).unwrap();
        let x = ChannelTensor::zeros(shape, 1, 3).unwrap();
        let w = ConvWeights::zeros(1, 2, KernelOffsetMap::new(1).unwrap()).unwrap().with_bias(vec![0.5, -1.0]).unwrap();
        let y = conv_forward(&x, &w).unwrap();
        assert!(y.image(1, 2).iter().all(|&v| v == -1.0));
        assert_eq!(grad_bias(&y), vec![0.5 * 12.0, -12.0]);
    }
}
