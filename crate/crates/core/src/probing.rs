//! Probing matrices `Z ∈ R^{N·C_in x r}`.
//!
//! A probe column `z_j` is split into `C_in` blocks of `N` entries. Dense
//! probes fill every block with standard normals. Block-sparse probes keep
//! block `(n, j)` with probability `p_n` and zero it otherwise, so that
//! `E[z zᵀ] = I` still holds once block `n` is normalised by the number of
//! columns in which it is active.
//!
//! Entry `p` of block `(n, j)` is normal number `(j·C_in + n)·N + p` of the
//! Gaussian domain of the seed; the keep/drop decision for the block is
//! uniform number `j·C_in + n` of the mask domain. Both depend on the redraw
//! attempt through the substream byte. With all `p_n = 1` no redraw happens
//! and a block-sparse draw is bit-identical to the dense one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterStream, Domain, ProbeSeed};

/// Number of full redraws before [`gen_block_sparse`] gives up.
pub const DEFAULT_REDRAWS: u32 = 16;

/// Per-input-channel keep probabilities `p_n ∈ (0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSparsity {
    probs: Vec<f64>,
}

impl BlockSparsity {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("block sparsity needs at least one channel".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidArgument(format!("block keep probability {p} outside (0, 1]")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(c_in: usize, p: f64) -> Result<Self> {
        Self::new(vec![p; c_in])
    }

    /// `p_n = 1 / C_in`: one active block per probe column on average.
    pub fn default_for(c_in: usize) -> Self {
        Self { probs: vec![1.0 / c_in.max(1) as f64; c_in.max(1)] }
    }

    /// `p_n = max(1 / C_in, 8 / r)`, capped at 1: about eight active probes
    /// per channel block, so no block is left empty at training-sized `C_in`.
    pub fn for_training(c_in: usize, r: usize) -> Self {
        let p = (1.0 / c_in.max(1) as f64).max(8.0 / r.max(1) as f64).min(1.0);
        Self { probs: vec![p; c_in.max(1)] }
    }

    pub fn dense(c_in: usize) -> Self {
        Self { probs: vec![1.0; c_in.max(1)] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `r` probe columns of `c_in` blocks of `n` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMatrix {
    n: usize,
    c_in: usize,
    r: usize,
    /// Block `(ch, j)` occupies `blocks[(ch * r + j) * n ..][..n]`.
    blocks: Vec<f64>,
    /// `mask[ch * r + j]`: whether block `(ch, j)` is active.
    mask: Vec<bool>,
    nnz: Vec<usize>,
    seed: ProbeSeed,
}

fn check_sizes(n: usize, c_in: usize, r: usize) -> Result<()> {
    if n == 0 || c_in == 0 || r == 0 {
        return Err(Error::InvalidArgument(format!(
            "probe sizes must be positive (n={n}, c_in={c_in}, r={r})"
        )));
    }
    if (n as u128) * (c_in as u128) * (r as u128) >= 1u128 << 48 {
        return Err(Error::Capacity("probe matrix exceeds the counter range".into()));
    }
    Ok(())
}

impl ProbeMatrix {
    fn fill(n: usize, c_in: usize, r: usize, mask: Vec<bool>, seed: ProbeSeed, sub: u8) -> Self {
        let gauss = CounterStream::new(seed, Domain::Gaussian, sub);
        let mut blocks = vec![0.0; n * c_in * r];
        for ch in 0..c_in {
            for j in 0..r {
                if mask[ch * r + j] {
                    let start = ((j * c_in + ch) * n) as u64;
                    gauss.fill_normals(start, &mut blocks[(ch * r + j) * n..(ch * r + j + 1) * n]);
                }
            }
        }
        let nnz = (0..c_in).map(|ch| mask[ch * r..(ch + 1) * r].iter().filter(|&&m| m).count()).collect();
        Self { n, c_in, r, blocks, mask, nnz, seed }
    }

    /// The lossless probe `Z = I` with `r = n·c_in` (column `j` is `e_j`).
    /// Not random; used to check that compression with a full basis is exact.
    pub fn identity(n: usize, c_in: usize) -> Result<Self> {
        check_sizes(n, c_in, 1)?;
        let r = n * c_in;
        let mut blocks = vec![0.0; n * c_in * r];
        let mut mask = vec![false; c_in * r];
        for j in 0..r {
            let (ch, p) = (j / n, j % n);
            blocks[(ch * r + j) * n + p] = 1.0;
            mask[ch * r + j] = true;
        }
        Ok(Self { n, c_in, r, blocks, mask, nnz: vec![n; c_in], seed: ProbeSeed::new(0, 0) })
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn seed(&self) -> ProbeSeed {
        self.seed
    }

    /// Block `n` of probe column `j` (all zeros when inactive).
    pub fn block(&self, ch: usize, j: usize) -> &[f64] {
        let start = (ch * self.r + j) * self.n;
        &self.blocks[start..start + self.n]
    }

    pub fn is_active(&self, ch: usize, j: usize) -> bool {
        self.mask[ch * self.r + j]
    }

    /// Number of columns in which block `ch` is active.
    pub fn nnz(&self, ch: usize) -> usize {
        self.nnz[ch]
    }

    /// Column `j` as a stacked vector of length `n·c_in`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.c_in);
        for ch in 0..self.c_in {
            out.extend_from_slice(self.block(ch, j));
        }
        out
    }

    /// Raw block storage, `(c_in, r, n)` row-major.
    pub fn blocks(&self) -> &[f64] {
        &self.blocks
    }
}

/// Dense Gaussian probes.
pub fn gen_gaussian(n: usize, c_in: usize, r: usize, seed: ProbeSeed) -> Result<ProbeMatrix> {
    check_sizes(n, c_in, r)?;
    Ok(ProbeMatrix::fill(n, c_in, r, vec![true; c_in * r], seed, 0))
}

/// Block-sparse probes with [`DEFAULT_REDRAWS`] redraw attempts.
pub fn gen_block_sparse(n: usize, c_in: usize, r: usize, sp: &BlockSparsity, seed: ProbeSeed) -> Result<ProbeMatrix> {
    gen_block_sparse_with_redraws(n, c_in, r, sp, seed, DEFAULT_REDRAWS)
}

/// Block-sparse probes. If some block row ends up with no active column the
/// whole matrix is redrawn on the next substream, up to `redraws` attempts.
pub fn gen_block_sparse_with_redraws(
    n: usize,
    c_in: usize,
    r: usize,
    sp: &BlockSparsity,
    seed: ProbeSeed,
    redraws: u32,
) -> Result<ProbeMatrix> {
    check_sizes(n, c_in, r)?;
    if sp.len() != c_in {
        return Err(Error::Dimension(format!("{} keep probabilities for {c_in} channels", sp.len())));
    }
    for attempt in 0..redraws.min(256) {
        let sub = attempt as u8;
        let coin = CounterStream::new(seed, Domain::Mask, sub);
        let mut mask = vec![false; c_in * r];
        for ch in 0..c_in {
            for j in 0..r {
                mask[ch * r + j] = coin.uniform((j * c_in + ch) as u64) < sp.probs()[ch];
            }
        }
        if (0..c_in).all(|ch| mask[ch * r..(ch + 1) * r].iter().any(|&m| m)) {
            return Ok(ProbeMatrix::fill(n, c_in, r, mask, seed, sub));
        }
    }
    Err(Error::DegenerateSparsity { retries: redraws })
}

/// Block Frobenius errors of the normalised Gram estimate of the identity:
/// entry `(a, b)` is `‖(1/nnz(a)) Σ_j z_{a,j} z_{b,j}ᵀ − [a = b] I‖_F`,
/// returned row-major as a `c_in x c_in` table.
pub fn block_gram(z: &ProbeMatrix) -> Vec<f64> {
    let (c, r, n) = (z.c_in, z.r, z.n);
    // Column Gram matrices per block: g[a][j][l] = <z_{a,j}, z_{a,l}>.
    let grams: Vec<Vec<f64>> = (0..c)
        .map(|a| {
            let mut g = vec![0.0; r * r];
            for j in 0..r {
                if !z.is_active(a, j) {
                    continue;
                }
                for l in j..r {
                    if z.is_active(a, l) {
                        let v = crate::tensor::dot(z.block(a, j), z.block(a, l));
                        g[j * r + l] = v;
                        g[l * r + j] = v;
                    }
                }
            }
            g
        })
        .collect();
    let mut out = vec![0.0; c * c];
    for a in 0..c {
        let s = z.nnz(a) as f64;
        for b in 0..c {
            // ‖Σ_j u_j v_jᵀ‖² = Σ_{j,l} <u_j,u_l><v_j,v_l>
            let mut sq = 0.0;
            for (ga, gb) in grams[a].iter().zip(&grams[b]) {
                sq += ga * gb;
            }
            let mut val = sq / (s * s);
            if a == b {
                let trace: f64 = (0..r).map(|j| grams[a][j * r + j]).sum();
                val += n as f64 - 2.0 * trace / s;
            }
            out[a * c + b] = val.max(0.0).sqrt();
        }
    }
    out
}

/// Sum of the off-diagonal entries of a [`block_gram`] table.
pub fn off_diagonal_mass(gram: &[f64], c_in: usize) -> f64 {
    (0..c_in)
        .flat_map(|a| (0..c_in).map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
        .map(|(a, b)| gram[a * c_in + b])
        .sum()
}
