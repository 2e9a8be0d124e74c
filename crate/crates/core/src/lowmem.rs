//! Convolution layer that keeps only a probed sketch of its input.
//!
//! Forward: `Y` is computed exactly, then `X̄ = Zᵀ X` (an `r x B` matrix over
//! the stacked `N·C_in` rows) is stored together with the seed of `Z`.
//! Backward: `Z` is regenerated from the seed, `L_{j,m} = Σ_b X̄[j,b] δY^m_b`,
//! and
//!
//! ```text
//! δw_i^{n,m} = 1/nnz(n) Σ_j <T_{k(i)} z_{n,j}, L_{j,m}>
//! ```
//!
//! which is unbiased for `Σ_b <T_{k(i)} X^n_b, δY^m_b>`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_forward, grad_input_exact, ConvWeights, WeightGradient};
use crate::error::{dim_err, Error, Result};
use crate::probing::{gen_block_sparse, gen_gaussian, BlockSparsity, ProbeMatrix};
use crate::rng::ProbeSeed;
use crate::tensor::{dot, shifted_dot, ChannelTensor, ImageShape, Scalar};

/// How the weight gradient is probed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbeMode {
    /// A separate Gaussian probe set of size `r` for every `(n, m)` pair.
    Independent,
    /// Dense Gaussian probes of the stacked input, scaled by `1/r`.
    Multi,
    /// Block-sparse probes, block `n` scaled by `1/nnz(n)`.
    MultiOrtho(BlockSparsity),
}

impl ProbeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeMode::Independent => "indep",
            ProbeMode::Multi => "multi",
            ProbeMode::MultiOrtho(_) => "multi-ortho",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowMemConvConfig<T = f64> {
    pub r: usize,
    pub mode: ProbeMode,
    pub weights: ConvWeights<T>,
}

impl<T: Scalar> LowMemConvConfig<T> {
    pub fn new(r: usize, mode: ProbeMode, weights: ConvWeights<T>) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("probe count r must be at least 1".into()));
        }
        if let ProbeMode::MultiOrtho(sp) = &mode {
            if sp.len() != weights.c_in() {
                return Err(dim_err(format!("{} keep probabilities for {} input channels", sp.len(), weights.c_in())));
            }
        }
        Ok(Self { r, mode, weights })
    }
}

/// Everything a compressed layer needs to replay its probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionMeta {
    pub shape: ImageShape,
    pub c_in: usize,
    pub c_out: usize,
    pub batch: usize,
    pub r: usize,
    pub mode: ProbeMode,
}

/// The stored pair `(X̄, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedActivation<T = f64> {
    /// `X̄[j, b]` at `j·B + b`; for [`ProbeMode::Independent`] pair `(m, n)`
    /// occupies the `r·B` slab starting at `(m·C_in + n)·r·B`.
    pub xbar: Vec<T>,
    pub seed: ProbeSeed,
    pub meta: CompressionMeta,
}

impl<T: Scalar> CompressedActivation<T> {
    pub fn stored_scalars(&self) -> usize {
        self.xbar.len()
    }

    pub fn footprint(&self) -> Footprint {
        let m = &self.meta;
        memory_footprint(
            &LayerDims { pixels: m.shape.pixels(), c_in: m.c_in, c_out: m.c_out, batch: m.batch },
            &Storage::Probed { r: m.r, mode: m.mode.clone() },
        )
    }
}

/// Regenerates the probes of a multi-channel mode.
pub fn draw_probes(shape: ImageShape, c_in: usize, r: usize, mode: &ProbeMode, seed: ProbeSeed) -> Result<ProbeMatrix> {
    match mode {
        ProbeMode::Multi => gen_gaussian(shape.pixels(), c_in, r, seed),
        ProbeMode::MultiOrtho(sp) => gen_block_sparse(shape.pixels(), c_in, r, sp, seed),
        ProbeMode::Independent => Err(Error::InvalidArgument("independent probing has one probe set per channel pair".into())),
    }
}

fn pair_probes(shape: ImageShape, r: usize, seed: ProbeSeed, pair: usize) -> Result<ProbeMatrix> {
    gen_gaussian(shape.pixels(), 1, r, seed.child(pair as u64))
}

fn cast_blocks<T: Scalar>(z: &ProbeMatrix) -> Vec<T> {
    z.blocks().iter().map(|&v| T::from_f64_lossy(v)).collect()
}

/// `X̄ = Zᵀ X` for the given probes, `X̄[j, b]` at `j·B + b`.
pub fn compress_with<T: Scalar>(z: &ProbeMatrix, x: &ChannelTensor<T>) -> Result<Vec<T>> {
    if z.block_size() != x.pixels() || z.c_in() != x.channels() {
        return Err(dim_err(format!(
            "probes of {} blocks of {} for an input of {} channels of {} pixels",
            z.c_in(),
            z.block_size(),
            x.channels(),
            x.pixels()
        )));
    }
    let zb = cast_blocks::<T>(z);
    let (n, r, batch) = (x.pixels(), z.r(), x.batch());
    let mut xbar = vec![T::zero(); r * batch];
    xbar.par_chunks_mut(batch).enumerate().for_each(|(j, row)| {
        for (b, out) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for ch in 0..z.c_in() {
                if z.is_active(ch, j) {
                    let blk = &zb[(ch * r + j) * n..(ch * r + j + 1) * n];
                    acc += dot(blk, x.image(ch, b));
                }
            }
            *out = acc;
        }
    });
    Ok(xbar)
}

/// Exact forward output plus the compressed activation. `x` is not retained.
pub fn forward_compressed<T: Scalar>(
    x: &ChannelTensor<T>,
    cfg: &LowMemConvConfig<T>,
    seed: ProbeSeed,
) -> Result<(ChannelTensor<T>, CompressedActivation<T>)> {
    let y = conv_forward(x, &cfg.weights)?;
    let (shape, c_in, c_out, batch) = (x.shape(), x.channels(), cfg.weights.c_out(), x.batch());
    let xbar = match &cfg.mode {
        ProbeMode::Independent => {
            let mut out = Vec::with_capacity(c_in * c_out * cfg.r * batch);
            for m in 0..c_out {
                for n in 0..c_in {
                    let z = pair_probes(shape, cfg.r, seed, m * c_in + n)?;
                    let xn = ChannelTensor::from_fn(shape, 1, batch, |_, p, b| x.get(n, p, b))?;
                    out.extend(compress_with(&z, &xn)?);
                }
            }
            out
        }
        mode => compress_with(&draw_probes(shape, c_in, cfg.r, mode, seed)?, x)?,
    };
    let meta = CompressionMeta { shape, c_in, c_out, batch, r: cfg.r, mode: cfg.mode.clone() };
    Ok((y, CompressedActivation { xbar, seed, meta }))
}

fn check_replay<T: Scalar>(ctx: &CompressedActivation<T>, dy: &ChannelTensor<T>, cfg: &LowMemConvConfig<T>) -> Result<()> {
    let m = &ctx.meta;
    if m.r != cfg.r || m.mode != cfg.mode || m.c_in != cfg.weights.c_in() || m.c_out != cfg.weights.c_out() {
        return Err(Error::Context(format!(
            "stored activation was compressed with r={} mode={} ({}->{} channels), layer now has r={} mode={} ({}->{})",
            m.r,
            m.mode.name(),
            m.c_in,
            m.c_out,
            cfg.r,
            cfg.mode.name(),
            cfg.weights.c_in(),
            cfg.weights.c_out()
        )));
    }
    let expected = match m.mode {
        ProbeMode::Independent => m.c_in * m.c_out * m.r * m.batch,
        _ => m.r * m.batch,
    };
    if ctx.xbar.len() != expected {
        return Err(Error::Context(format!("stored sketch has {} entries, expected {expected}", ctx.xbar.len())));
    }
    if dy.shape() != m.shape || dy.batch() != m.batch || dy.channels() != m.c_out {
        return Err(dim_err("output gradient does not match the stored activation"));
    }
    Ok(())
}

/// `Σ_b X̄[j, b] δY^m_b`.
fn residual_sketch<T: Scalar>(xbar_row: &[T], dy: &ChannelTensor<T>, m: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for (b, &c) in xbar_row.iter().enumerate() {
        if c != T::zero() {
            for (o, &d) in out.iter_mut().zip(dy.image(m, b)) {
                *o += c * d;
            }
        }
    }
}

/// Probed weight gradient, regenerating the probes from `ctx.seed`.
pub fn backward_weights<T: Scalar>(
    ctx: &CompressedActivation<T>,
    dy: &ChannelTensor<T>,
    cfg: &LowMemConvConfig<T>,
) -> Result<WeightGradient<T>> {
    check_replay(ctx, dy, cfg)?;
    let meta = &ctx.meta;
    let (shape, c_in, c_out, batch, r) = (meta.shape, meta.c_in, meta.c_out, meta.batch, meta.r);
    let n = shape.pixels();
    let offsets = cfg.weights.offset_map().offsets();
    let n_w = offsets.len();
    let rows: Vec<Vec<T>> = match &meta.mode {
        ProbeMode::Independent => (0..c_out * c_in)
            .into_par_iter()
            .map(|pair| {
                let z = pair_probes(shape, r, ctx.seed, pair)?;
                let zb = cast_blocks::<T>(&z);
                let slab = &ctx.xbar[pair * r * batch..(pair + 1) * r * batch];
                let mut g = vec![T::zero(); n_w];
                let mut l = vec![T::zero(); n];
                for j in 0..r {
                    residual_sketch(&slab[j * batch..(j + 1) * batch], dy, pair / c_in, &mut l);
                    let zj = &zb[j * n..(j + 1) * n];
                    for (gi, &off) in g.iter_mut().zip(offsets) {
                        *gi += shifted_dot(zj, &l, shape, off);
                    }
                }
                let scale = T::from_f64_lossy(r as f64);
                Ok(g.into_iter().map(|v| v / scale).collect())
            })
            .collect::<Result<_>>()?,
        mode => {
            let z = draw_probes(shape, c_in, r, mode, ctx.seed)?;
            let zb = cast_blocks::<T>(&z);
            (0..c_out)
                .into_par_iter()
                .map(|m| {
                    let mut g = vec![T::zero(); c_in * n_w];
                    let mut l = vec![T::zero(); n];
                    for j in 0..r {
                        residual_sketch(&ctx.xbar[j * batch..(j + 1) * batch], dy, m, &mut l);
                        for ch in 0..c_in {
                            if !z.is_active(ch, j) {
                                continue;
                            }
                            let blk = &zb[(ch * r + j) * n..(ch * r + j + 1) * n];
                            for (i, &off) in offsets.iter().enumerate() {
                                g[ch * n_w + i] += shifted_dot(blk, &l, shape, off);
                            }
                        }
                    }
                    for ch in 0..c_in {
                        let scale = T::from_f64_lossy(z.nnz(ch) as f64);
                        g[ch * n_w..(ch + 1) * n_w].iter_mut().for_each(|v| *v = *v / scale);
                    }
                    Ok(g)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(WeightGradient { c_in, c_out, n_w, values: rows.concat() })
}

/// Input gradient; needs only the weights, so it is exact.
pub fn backward_input<T: Scalar>(dy: &ChannelTensor<T>, cfg: &LowMemConvConfig<T>) -> Result<ChannelTensor<T>> {
    grad_input_exact(dy, &cfg.weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub pixels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Exact,
    Probed { r: usize, mode: ProbeMode },
}

/// Activation scalars kept for the weight gradient of one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub stored: u64,
    pub conventional: u64,
}

impl Footprint {
    /// `conventional / stored`; `N·C_in/r` for the multi-channel modes.
    pub fn factor(&self) -> f64 {
        self.conventional as f64 / self.stored as f64
    }
}

pub fn memory_footprint(dims: &LayerDims, storage: &Storage) -> Footprint {
    let conventional = (dims.pixels * dims.c_in * dims.batch) as u64;
    let stored = match storage {
        Storage::Exact => conventional,
        Storage::Probed { r, mode: ProbeMode::Independent } => (dims.c_in * dims.c_out * r * dims.batch) as u64,
        Storage::Probed { r, .. } => (r * dims.batch) as u64,
    };
    Footprint { stored, conventional }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{grad_weights_exact, KernelOffsetMap};
    use crate::rng::{Domain, SeqRng};

    fn instance(c_in: usize, c_out: usize, side: usize, batch: usize, seed: u64) -> (ChannelTensor, ChannelTensor, ConvWeights) {
        let mut rng = SeqRng::from_u64(seed, Domain::Instance);
        let shape = ImageShape::square(side).unwrap();
        let x = ChannelTensor::from_fn(shape, c_in, batch, |_, _, _| rng.normal()).unwrap();
        let dy = ChannelTensor::from_fn(shape, c_out, batch, |_, _, _| rng.normal()).unwrap();
        let map = KernelOffsetMap::new(3).unwrap();
        let w: Vec<f64> = (0..c_in * c_out * 9).map(|_| rng.normal()).collect();
        (x, dy, ConvWeights::from_vec(c_in, c_out, map, w).unwrap())
    }

    fn modes(c_in: usize) -> Vec<ProbeMode> {
        vec![ProbeMode::Independent, ProbeMode::Multi, ProbeMode::MultiOrtho(BlockSparsity::default_for(c_in))]
    }

    #[test]
    fn forward_is_exact_and_storage_is_r_b() {
        let (x, _, w) = instance(3, 2, 5, 4, 1);
        let y_ref = conv_forward(&x, &w).unwrap();
        for mode in modes(3) {
            let cfg = LowMemConvConfig::new(7, mode.clone(), w.clone()).unwrap();
            let (y, ctx) = forward_compressed(&x, &cfg, ProbeSeed::new(1, 1)).unwrap();
            assert_eq!(y, y_ref);
            let want = if mode == ProbeMode::Independent { 3 * 2 * 7 * 4 } else { 7 * 4 };
            assert_eq!(ctx.stored_scalars(), want);
            assert_eq!(ctx.footprint().stored, want as u64);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (x, dy, w) = instance(2, 2, 4, 3, 2);
        let dy = dy.map(|_| 0.0);
        for mode in modes(2) {
            let cfg = LowMemConvConfig::new(5, mode, w.clone()).unwrap();
            let (_, ctx) = forward_compressed(&x, &cfg, ProbeSeed::new(2, 0)).unwrap();
            assert!(backward_weights(&ctx, &dy, &cfg).unwrap().values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let (x, dy, w) = instance(2, 3, 6, 2, 3);
        for mode in modes(2) {
            let cfg = LowMemConvConfig::new(9, mode, w.clone()).unwrap();
            let (_, ctx) = forward_compressed(&x, &cfg, ProbeSeed::new(3, 3)).unwrap();
            assert_eq!(backward_weights(&ctx, &dy, &cfg).unwrap(), backward_weights(&ctx, &dy, &cfg).unwrap());
        }
    }

    #[test]
    fn config_drift_is_a_context_error() {
        let (x, dy, w) = instance(2, 2, 4, 2, 4);
        let cfg = LowMemConvConfig::new(4, ProbeMode::Multi, w.clone()).unwrap();
        let (_, ctx) = forward_compressed(&x, &cfg, ProbeSeed::new(4, 4)).unwrap();
        let other = LowMemConvConfig::new(5, ProbeMode::Multi, w).unwrap();
        assert!(matches!(backward_weights(&ctx, &dy, &other), Err(Error::Context(_))));
    }

    #[test]
    fn identity_probe_is_lossless() {
        let (x, dy, w) = instance(2, 2, 3, 2, 5);
        let z = ProbeMatrix::identity(9, 2).unwrap();
        let xbar = compress_with(&z, &x).unwrap();
        for b in 0..2 {
            for (j, &v) in x.column(b).iter().enumerate() {
                assert_eq!(xbar[j * 2 + b], v);
            }
        }
        // A full basis turns the probed gradient into the exact one.
        let exact = grad_weights_exact(&x, &dy, w.offset_map()).unwrap();
        let n = 9;
        for m in 0..2 {
            for ch in 0..2 {
                for (i, &off) in w.offset_map().offsets().iter().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..z.r() {
                        if !z.is_active(ch, j) {
                            continue;
                        }
                        let mut l = vec![0.0; n];
                        residual_sketch(&xbar[j * 2..j * 2 + 2], &dy, m, &mut l);
                        acc += shifted_dot(z.block(ch, j), &l, x.shape(), off);
                    }
                    assert!((acc - exact.get(m, ch, i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn footprint_factors() {
        let f = memory_footprint(
            &LayerDims { pixels: 1024, c_in: 16, c_out: 16, batch: 8 },
            &Storage::Probed { r: 128, mode: ProbeMode::Multi },
        );
        assert_eq!((f.stored, f.conventional, f.factor()), (128 * 8, 16384 * 8, 128.0));
        let f = memory_footprint(
            &LayerDims { pixels: 784, c_in: 1, c_out: 16, batch: 4 },
            &Storage::Probed { r: 16, mode: ProbeMode::Multi },
        );
        assert_eq!(f.factor(), 49.0);
        let f = memory_footprint(
            &LayerDims { pixels: 64, c_in: 2, c_out: 2, batch: 1 },
            &Storage::Probed { r: 128, mode: ProbeMode::Multi },
        );
        assert_eq!(f.factor(), 1.0);
    }
}
