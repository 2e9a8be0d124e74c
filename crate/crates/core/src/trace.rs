//! Trace estimators: exact, Hutchinson, and the two multi-channel variants.
//!
//! Block `(m, n)` of a [`BlockLinearMap`] maps input block `n` to output
//! block `m`; estimates are returned row-major over `(m, n)`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probing::{gen_block_sparse, gen_gaussian, BlockSparsity, ProbeMatrix};
use crate::rng::{Domain, ProbeSeed, SeqRng};
use crate::tensor::dot;

/// Matrix-free square operator.
pub trait LinearMap: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, v: &[f64], out: &mut [f64]);

    /// Applies the operator to `k` columns stored one after another.
    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        let d = self.dim();
        for j in 0..k {
            self.apply(&vs[j * d..(j + 1) * d], &mut out[j * d..(j + 1) * d]);
        }
    }
}

/// Operator on stacked vectors `[block][pixel]`, `n·c_in` in and `n·c_out` out.
pub trait BlockLinearMap: Sync {
    fn c_out(&self) -> usize;
    fn c_in(&self) -> usize;
    fn block_size(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);

    /// Applies the operator to `k` stacked columns stored one after another.
    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        let (din, dout) = (self.block_size() * self.c_in(), self.block_size() * self.c_out());
        for j in 0..k {
            self.apply(&vs[j * din..(j + 1) * din], &mut out[j * dout..(j + 1) * dout]);
        }
    }
}

fn gemm_columns(a: &DMatrix<f64>, vs: &[f64], k: usize, out: &mut [f64]) {
    let v = nalgebra::DMatrixView::from_slice(vs, a.ncols(), k);
    let mut o = nalgebra::DMatrixViewMut::from_slice(out, a.nrows(), k);
    o.gemm(1.0, a, &v, 0.0);
}

/// Dense square matrix.
#[derive(Clone, Debug)]
pub struct DenseMap(pub DMatrix<f64>);

impl DenseMap {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!("{}x{} operator is not square", a.nrows(), a.ncols())));
        }
        Ok(Self(a))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }
}

fn gemv(a: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (col, &x) in a.column_iter().zip(v) {
        if x != 0.0 {
            for (o, &aij) in out.iter_mut().zip(col.iter()) {
                *o += aij * x;
            }
        }
    }
}

impl LinearMap for DenseMap {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.0, v, out);
    }

    fn apply_adjoint(&self, v: &[f64], out: &mut [f64]) {
        for (o, col) in out.iter_mut().zip(self.0.column_iter()) {
            *o = dot(col.as_slice(), v);
        }
    }

    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        gemm_columns(&self.0, vs, k, out);
    }
}

impl BlockLinearMap for DenseMap {
    fn c_out(&self) -> usize {
        1
    }

    fn c_in(&self) -> usize {
        1
    }

    fn block_size(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.0, v, out);
    }

    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        gemm_columns(&self.0, vs, k, out);
    }
}

/// Dense stacked matrix of `c_out x c_in` square blocks of size `n`.
#[derive(Clone, Debug)]
pub struct DenseBlockMap {
    a: DMatrix<f64>,
    c_out: usize,
    c_in: usize,
    n: usize,
}

impl DenseBlockMap {
    pub fn new(a: DMatrix<f64>, c_out: usize, c_in: usize) -> Result<Self> {
        if c_out == 0 || c_in == 0 || !a.nrows().is_multiple_of(c_out) {
            return Err(Error::Dimension(format!("{} rows do not split into {c_out} blocks", a.nrows())));
        }
        let n = a.nrows() / c_out;
        if n == 0 || a.ncols() != n * c_in {
            return Err(Error::Dimension(format!(
                "{}x{} matrix is not {c_out}x{c_in} square blocks",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(Self { a, c_out, c_in, n })
    }

    pub fn from_blocks(c_out: usize, c_in: usize, blocks: &[DMatrix<f64>]) -> Result<Self> {
        if blocks.len() != c_out * c_in || blocks.is_empty() {
            return Err(Error::Dimension(format!("{} blocks for a {c_out}x{c_in} grid", blocks.len())));
        }
        let n = blocks[0].nrows();
        let mut a = DMatrix::zeros(n * c_out, n * c_in);
        for m in 0..c_out {
            for k in 0..c_in {
                let b = &blocks[m * c_in + k];
                if b.shape() != (n, n) {
                    return Err(Error::Dimension("blocks must share one square size".into()));
                }
                a.view_mut((m * n, k * n), (n, n)).copy_from(b);
            }
        }
        Self::new(a, c_out, c_in)
    }

    pub fn block(&self, m: usize, k: usize) -> DMatrix<f64> {
        self.a.view((m * self.n, k * self.n), (self.n, self.n)).into_owned()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `tr(A^{m,n})`, row-major.
    pub fn exact_traces(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.c_out * self.c_in);
        for m in 0..self.c_out {
            for k in 0..self.c_in {
                out.push((0..self.n).map(|p| self.a[(m * self.n + p, k * self.n + p)]).sum());
            }
        }
        out
    }
}

impl BlockLinearMap for DenseBlockMap {
    fn c_out(&self) -> usize {
        self.c_out
    }

    fn c_in(&self) -> usize {
        self.c_in
    }

    fn block_size(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        gemv(&self.a, v, out);
    }

    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        gemm_columns(&self.a, vs, k, out);
    }
}

/// Stacked matrix with small diagonal blocks `ε·I` and, in each block row
/// `m`, `couplings` large off-diagonal blocks `s·T` at columns
/// `m+1, …, m+couplings (mod C)`, where `T` cyclically rotates the block by
/// its coupling distance. Off-diagonal blocks are traceless.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockCrosstalk {
    pub channels: usize,
    pub block_size: usize,
    pub eps: f64,
    pub scale: f64,
    pub couplings: usize,
}

impl BlockCrosstalk {
    pub fn new(channels: usize, block_size: usize) -> Self {
        Self { channels, block_size, eps: 0.01, scale: 1.0, couplings: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.block_size < 2 {
            return Err(Error::InvalidArgument("crosstalk matrix needs at least 2 channels and block size 2".into()));
        }
        if self.couplings >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "{} couplings need more than {} channels",
                self.couplings, self.channels
            )));
        }
        Ok(())
    }

    pub fn exact_traces(&self) -> Vec<f64> {
        let c = self.channels;
        (0..c * c).map(|e| if e / c == e % c { self.eps * self.block_size as f64 } else { 0.0 }).collect()
    }

    pub fn to_dense(&self) -> DenseBlockMap {
        let (c, n) = (self.channels, self.block_size);
        let mut a = DMatrix::zeros(c * n, c * n);
        for m in 0..c {
            for p in 0..n {
                a[(m * n + p, m * n + p)] = self.eps;
            }
            for s in 1..=self.couplings {
                let k = (m + s) % c;
                for p in 0..n {
                    a[(m * n + (p + s) % n, k * n + p)] += self.scale;
                }
            }
        }
        DenseBlockMap::new(a, c, c).expect("square block grid")
    }
}

impl BlockLinearMap for BlockCrosstalk {
    fn c_out(&self) -> usize {
        self.channels
    }

    fn c_in(&self) -> usize {
        self.channels
    }

    fn block_size(&self) -> usize {
        self.block_size
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (c, n) = (self.channels, self.block_size);
        for m in 0..c {
            let o = &mut out[m * n..(m + 1) * n];
            for (o, x) in o.iter_mut().zip(&v[m * n..(m + 1) * n]) {
                *o = self.eps * x;
            }
            for s in 1..=self.couplings {
                let src = &v[((m + s) % c) * n..((m + s) % c + 1) * n];
                for p in 0..n {
                    o[(p + s) % n] += self.scale * src[p];
                }
            }
        }
    }
}

/// One trace estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    pub r_used: usize,
    pub nnz_used: usize,
    pub seed: ProbeSeed,
}

/// Grid of block estimates, row-major over `(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockEstimates {
    pub c_out: usize,
    pub c_in: usize,
    pub entries: Vec<TraceEstimate>,
}

impl BlockEstimates {
    pub fn get(&self, m: usize, n: usize) -> &TraceEstimate {
        &self.entries[m * self.c_in + n]
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }
}

pub fn exact_trace(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("trace of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    Ok((0..a.nrows()).map(|i| a[(i, i)]).sum())
}

fn check_r(r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    Ok(())
}

struct AsBlock<'a>(&'a dyn LinearMap);

impl BlockLinearMap for AsBlock<'_> {
    fn c_out(&self) -> usize {
        1
    }

    fn c_in(&self) -> usize {
        1
    }

    fn block_size(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.0.apply(v, out);
    }

    fn apply_columns(&self, vs: &[f64], k: usize, out: &mut [f64]) {
        self.0.apply_columns(vs, k, out);
    }
}

/// `(1/r) Σ_j z_jᵀ A z_j` with Gaussian probes.
pub fn hutchinson(a: &dyn LinearMap, r: usize, seed: ProbeSeed) -> Result<TraceEstimate> {
    check_r(r)?;
    let z = gen_gaussian(a.dim(), 1, r, seed)?;
    Ok(probe_blocks(&AsBlock(a), &z)?.entries[0])
}

/// Shared core of the multi-channel estimators: block sums
/// `Σ_j z_{n,j}ᵀ (A z_j)_m`, divided by `nnz(n)`.
fn probe_blocks(a: &dyn BlockLinearMap, z: &ProbeMatrix) -> Result<BlockEstimates> {
    let (c_out, c_in, n) = (a.c_out(), a.c_in(), a.block_size());
    if z.block_size() != n || z.c_in() != c_in {
        return Err(Error::Dimension(format!(
            "probes of {}x{} blocks for an operator with {c_in} blocks of {n}",
            z.c_in(),
            z.block_size()
        )));
    }
    let r = z.r();
    let (din, dout) = (n * c_in, n * c_out);
    let mut zs = vec![0.0; din * r];
    for j in 0..r {
        for k in 0..c_in {
            zs[j * din + k * n..j * din + (k + 1) * n].copy_from_slice(z.block(k, j));
        }
    }
    let mut az = vec![0.0; dout * r];
    a.apply_columns(&zs, r, &mut az);
    let mut sums = vec![0.0; c_out * c_in];
    for j in 0..r {
        let col = &az[j * dout..(j + 1) * dout];
        for k in 0..c_in {
            if !z.is_active(k, j) {
                continue;
            }
            for m in 0..c_out {
                sums[m * c_in + k] += dot(z.block(k, j), &col[m * n..(m + 1) * n]);
            }
        }
    }
    let entries = sums
        .iter()
        .enumerate()
        .map(|(e, s)| {
            let nnz = z.nnz(e % c_in);
            TraceEstimate { value: s / nnz as f64, r_used: z.r(), nnz_used: nnz, seed: z.seed() }
        })
        .collect();
    Ok(BlockEstimates { c_out, c_in, entries })
}

/// Dense Gaussian probes of the whole stacked operator, every block divided by `r`.
pub fn multichannel_naive(a: &dyn BlockLinearMap, r: usize, seed: ProbeSeed) -> Result<BlockEstimates> {
    check_r(r)?;
    let z = gen_gaussian(a.block_size(), a.c_in(), r, seed)?;
    probe_blocks(a, &z)
}

/// Block-sparse probes; block `(m, n)` is divided by `nnz(n)`.
pub fn multichannel_ortho(a: &dyn BlockLinearMap, z: &ProbeMatrix) -> Result<BlockEstimates> {
    probe_blocks(a, z)
}

/// Multi-channel estimator choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Naive,
    Ortho(BlockSparsity),
}

impl Estimator {
    pub fn estimate(&self, a: &dyn BlockLinearMap, r: usize, seed: ProbeSeed) -> Result<BlockEstimates> {
        match self {
            Estimator::Naive => multichannel_naive(a, r, seed),
            Estimator::Ortho(sp) => {
                check_r(r)?;
                let z = gen_block_sparse(a.block_size(), a.c_in(), r, sp, seed)?;
                multichannel_ortho(a, &z)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::Ortho(_) => "ortho",
        }
    }
}

/// Error statistics at one probe count. The per-trial error is the mean
/// absolute block error (the plain absolute error for a single block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub r: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub quantile: f64,
}

/// Seed of trial `t` at grid point `r`.
pub fn trial_seed(seed: u64, r: usize, t: usize) -> ProbeSeed {
    ProbeSeed::new(seed, ((r as u64) << 32) | t as u64)
}

/// Empirical `q`-quantile of sorted data, linear interpolation.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Per-trial errors at one probe count.
pub fn trial_errors(
    a: &dyn BlockLinearMap,
    exact: &[f64],
    estimator: &Estimator,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if exact.len() != a.c_out() * a.c_in() {
        return Err(Error::Dimension(format!("{} exact traces for {} blocks", exact.len(), a.c_out() * a.c_in())));
    }
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let est = estimator.estimate(a, r, trial_seed(seed, r, t))?;
            let err: f64 = est.entries.iter().zip(exact).map(|(e, x)| (e.value - x).abs()).sum();
            Ok(err / exact.len() as f64)
        })
        .collect()
}

/// Error-versus-`r` table; `quantile` is the level reported in [`ErrorRow::quantile`].
pub fn estimator_error_stats(
    a: &dyn BlockLinearMap,
    exact: &[f64],
    estimator: &Estimator,
    r_grid: &[usize],
    trials: usize,
    seed: u64,
    quantile: f64,
) -> Result<Vec<ErrorRow>> {
    if trials < 30 {
        return Err(Error::InvalidArgument(format!("{trials} trials; at least 30 required")));
    }
    r_grid
        .iter()
        .map(|&r| {
            check_r(r)?;
            let mut errs = trial_errors(a, exact, estimator, r, trials, seed)?;
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
            errs.sort_by(f64::total_cmp);
            Ok(ErrorRow {
                r,
                mean,
                std: var.sqrt(),
                median: quantile_sorted(&errs, 0.5),
                quantile: quantile_sorted(&errs, quantile),
            })
        })
        .collect()
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Undefined("log-log fit of non-positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Undefined("slope fit with a single distinct x".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Two-segment fit of a log-log error curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub r_break: f64,
    pub slope_small: f64,
    pub slope_large: f64,
    pub sse: f64,
}

/// Slopes closer than this are treated as one regime.
pub const SINGLE_REGIME_TOL: f64 = 0.05;

/// Continuous two-segment least squares in log-log coordinates, with the
/// breakpoint restricted to interior grid points. A curve whose two slopes
/// differ by less than [`SINGLE_REGIME_TOL`] has no visible transition and
/// reports its first grid point.
pub fn locate_phase_transition(rs: &[f64], errs: &[f64]) -> Result<PhaseTransition> {
    if rs.len() != errs.len() || rs.len() < 4 {
        return Err(Error::InvalidArgument("phase transition fit needs at least four points".into()));
    }
    if rs.iter().chain(errs).any(|v| !(*v > 0.0)) {
        return Err(Error::Undefined("log-log fit of non-positive values".into()));
    }
    let lx: Vec<f64> = rs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|y| y.ln()).collect();
    let mut best: Option<PhaseTransition> = None;
    for b in 1..lx.len() - 1 {
        let xb = lx[b];
        let mut ata = Matrix3::<f64>::zeros();
        let mut aty = Vector3::<f64>::zeros();
        for (x, y) in lx.iter().zip(&ly) {
            let row = Vector3::new(1.0, (x - xb).min(0.0), (x - xb).max(0.0));
            ata += row * row.transpose();
            aty += row * *y;
        }
        let Some(coef) = ata.lu().solve(&aty) else { continue };
        let sse: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| {
                let f = coef[0] + coef[1] * (x - xb).min(0.0) + coef[2] * (x - xb).max(0.0);
                (y - f) * (y - f)
            })
            .sum();
        if best.as_ref().is_none_or(|p| sse < p.sse) {
            best = Some(PhaseTransition { r_break: rs[b], slope_small: coef[1], slope_large: coef[2], sse });
        }
    }
    let mut fit = best.ok_or_else(|| Error::Undefined("singular phase transition fit".into()))?;
    if (fit.slope_small - fit.slope_large).abs() < SINGLE_REGIME_TOL {
        fit.r_break = rs[0];
    }
    Ok(fit)
}

/// Test-matrix families, all scaled to `‖A‖_F = √dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixFamily {
    Identity,
    Diagonal,
    Rank1,
    Gaussian,
    Symmetric,
}

impl MatrixFamily {
    pub const ALL: [MatrixFamily; 5] =
        [Self::Identity, Self::Diagonal, Self::Rank1, Self::Symmetric, Self::Gaussian];

    pub fn build(self, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be positive".into()));
        }
        let mut rng = SeqRng::new(ProbeSeed::new(seed, self as u64), Domain::Instance);
        let a = match self {
            Self::Identity => DMatrix::identity(dim, dim),
            Self::Diagonal => DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| 1.0 + rng.uniform())),
            Self::Rank1 => {
                let u = nalgebra::DVector::from_fn(dim, |_, _| rng.normal());
                let v = nalgebra::DVector::from_fn(dim, |_, _| rng.normal());
                u * v.transpose()
            }
            Self::Gaussian => DMatrix::from_fn(dim, dim, |_, _| rng.normal()),
            Self::Symmetric => {
                let g = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
                (&g + g.transpose()) * 0.5
            }
        };
        let f = a.norm();
        Ok(a * ((dim as f64).sqrt() / f))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Diagonal => "diagonal",
            Self::Rank1 => "rank1",
            Self::Gaussian => "gaussian",
            Self::Symmetric => "symmetric",
        }
    }
}
