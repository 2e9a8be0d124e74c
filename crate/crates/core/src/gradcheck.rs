//! Checks of the conv weight gradient: finite differences, the dense trace
//! form, and Monte Carlo unbiasedness of the probed estimate.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::conv::{conv_forward, grad_weights_exact, ConvWeights, KernelOffsetMap};
use crate::error::{Error, Result};
use crate::lowmem::{backward_weights, forward_compressed, LowMemConvConfig, ProbeMode};
use crate::rng::{Domain, ProbeSeed, SeqRng};
use crate::tensor::{adjoint_offset, dense_shift_matrix, ChannelTensor, ImageShape, DENSE_SHIFT_MAX_PIXELS};

/// A random conv layer with an input batch and an output gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvInstance {
    pub x: ChannelTensor,
    pub dy: ChannelTensor,
    pub weights: ConvWeights,
}

impl ConvInstance {
    pub fn random(side: usize, c_in: usize, c_out: usize, kernel: usize, batch: usize, seed: u64) -> Result<Self> {
        let shape = ImageShape::square(side)?;
        let mut rng = SeqRng::from_u64(seed, Domain::Instance);
        let x = ChannelTensor::from_fn(shape, c_in, batch, |_, _, _| rng.normal())?;
        let dy = ChannelTensor::from_fn(shape, c_out, batch, |_, _, _| rng.normal())?;
        let map = KernelOffsetMap::new(kernel)?;
        let w = (0..c_in * c_out * map.len()).map(|_| rng.normal()).collect();
        Ok(Self { x, dy, weights: ConvWeights::from_vec(c_in, c_out, map, w)? })
    }

    pub fn exact(&self) -> Result<Vec<f64>> {
        Ok(grad_weights_exact(&self.x, &self.dy, self.weights.offset_map())?.values)
    }

    /// `<conv(x, w), dy>`, whose gradient in `w` is the weight gradient.
    fn pairing(&self, w: &ConvWeights) -> Result<f64> {
        conv_forward(&self.x, w)?.dot(&self.dy)
    }
}

/// Largest `|fd − g| / max(|g|, 1e-8·‖g‖∞)` over all coefficients, with
/// central differences of step `h`.
pub fn finite_difference_error(inst: &ConvInstance, h: f64) -> Result<f64> {
    let g = inst.exact()?;
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst = 0.0f64;
    let mut w = inst.weights.clone();
    for k in 0..g.len() {
        let w0 = w.as_slice()[k];
        w.as_mut_slice()[k] = w0 + h;
        let lp = inst.pairing(&w)?;
        w.as_mut_slice()[k] = w0 - h;
        let lm = inst.pairing(&w)?;
        w.as_mut_slice()[k] = w0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / g[k].abs().max(1e-8 * scale));
    }
    Ok(worst)
}

/// Largest deviation from `Σ_b tr(δY_b^m (X_b^n)ᵀ P(−k_i))`, relative to `max(1, ‖g‖∞)`.
pub fn dense_oracle_error(inst: &ConvInstance) -> Result<f64> {
    let shape = inst.x.shape();
    if shape.pixels() > DENSE_SHIFT_MAX_PIXELS {
        return Err(Error::Capacity(format!("{} pixels is too many for the dense oracle", shape.pixels())));
    }
    let g = inst.exact()?;
    let (c_in, c_out) = (inst.weights.c_in(), inst.weights.c_out());
    let offsets = inst.weights.offset_map().offsets();
    let shifts: Vec<_> = offsets.iter().map(|&o| dense_shift_matrix(shape, adjoint_offset(o))).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for m in 0..c_out {
        for n in 0..c_in {
            for (i, p) in shifts.iter().enumerate() {
                let mut tr = 0.0;
                for b in 0..inst.x.batch() {
                    let d = DVector::from_column_slice(inst.dy.image(m, b));
                    let x = DVector::from_column_slice(inst.x.image(n, b));
                    tr += (d * x.transpose() * p).trace();
                }
                let k = (m * c_in + n) * offsets.len() + i;
                worst = worst.max((tr - g[k]).abs());
            }
        }
    }
    let scale = g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    Ok(worst / scale)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientZ {
    pub m: usize,
    pub n: usize,
    pub i: usize,
    pub exact: f64,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloReport {
    pub mode: ProbeMode,
    pub samples: usize,
    pub coeffs: Vec<CoefficientZ>,
}

impl MonteCarloReport {
    pub fn max_abs_z(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |a, c| a.max(c.z.abs()))
    }
}

const CHUNK: usize = 256;

/// Mean of `samples` probed gradients (seeds `(seed, s)`) against the exact
/// gradient, as per-coefficient z-scores.
pub fn monte_carlo_unbiasedness(
    inst: &ConvInstance,
    r: usize,
    mode: &ProbeMode,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let exact = inst.exact()?;
    let cfg = LowMemConvConfig::new(r, mode.clone(), inst.weights.clone())?;
    let draw = |s: usize| -> Result<Vec<f64>> {
        let (_, ctx) = forward_compressed(&inst.x, &cfg, ProbeSeed::new(seed, s as u64))?;
        Ok(backward_weights(&ctx, &inst.dy, &cfg)?.values)
    };
    let len = exact.len();
    let (mut mean, mut m2) = (vec![0.0; len], vec![0.0; len]);
    let mut count = 0.0;
    for start in (0..samples).step_by(CHUNK) {
        let end = (start + CHUNK).min(samples);
        let draws: Vec<Vec<f64>> = (start..end).into_par_iter().map(draw).collect::<Result<_>>()?;
        for g in draws {
            count += 1.0;
            for ((mu, s), v) in mean.iter_mut().zip(m2.iter_mut()).zip(g) {
                let d = v - *mu;
                *mu += d / count;
                *s += d * (v - *mu);
            }
        }
    }
    let (c_in, n_w) = (inst.weights.c_in(), inst.weights.offset_map().len());
    let coeffs = (0..len)
        .map(|k| {
            let se = (m2[k] / (count - 1.0)).sqrt() / count.sqrt();
            let diff = mean[k] - exact[k];
            let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            CoefficientZ { m: k / (c_in * n_w), n: (k / n_w) % c_in, i: k % n_w, exact: exact[k], mean: mean[k], se, z }
        })
        .collect();
    Ok(MonteCarloReport { mode: mode.clone(), samples, coeffs })
}
