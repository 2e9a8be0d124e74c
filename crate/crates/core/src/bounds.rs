//! Deviation bounds for the trace estimators and Monte Carlo coverage checks.
//!
//! Only the single-matrix bound has explicit constants. The multi-channel
//! bound and the bilinear-form bounds carry an unspecified absolute
//! constant `c`, which is a parameter here and can be fitted from data.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probing::{gen_block_sparse, BlockSparsity};
use crate::rng::ProbeSeed;
use crate::tensor::DENSE_SHIFT_MAX_PIXELS;
use crate::trace::{hutchinson, multichannel_ortho, DenseBlockMap, DenseMap};

/// Largest dimension [`norms`] will decompose.
pub const MAX_NORM_DIM: usize = DENSE_SHIFT_MAX_PIXELS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixNorms {
    pub spectral: f64,
    pub frobenius: f64,
    pub dim: usize,
}

impl MatrixNorms {
    pub fn new(spectral: f64, frobenius: f64, dim: usize) -> Result<Self> {
        if !(spectral >= 0.0 && frobenius >= 0.0 && spectral.is_finite() && frobenius.is_finite()) {
            return Err(Error::InvalidArgument(format!("norms must be finite and non-negative ({spectral}, {frobenius})")));
        }
        Ok(Self { spectral, frobenius, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self { spectral: 0.0, frobenius: 0.0, dim }
    }
}

pub fn norms(a: &DMatrix<f64>) -> Result<MatrixNorms> {
    let dim = a.nrows().max(a.ncols());
    if dim > MAX_NORM_DIM {
        return Err(Error::Capacity(format!("{dim}-dimensional matrix exceeds the dense norm limit {MAX_NORM_DIM}")));
    }
    let frobenius = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let spectral = if dim == 0 || frobenius == 0.0 {
        0.0
    } else {
        a.clone().svd(false, false).singular_values.max()
    };
    Ok(MatrixNorms { spectral, frobenius, dim })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("failure probability {delta} outside (0, 1)")));
    }
    Ok(())
}

fn check_r(r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    Ok(())
}

/// `4‖A‖₂/r · log(2/δ) + 2‖A‖_F/√r · log^{1/2}(2/δ)`.
pub fn single_bound(n: &MatrixNorms, r: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    check_r(r)?;
    let l = (2.0 / delta).ln();
    let r = r as f64;
    Ok(4.0 * n.spectral / r * l + 2.0 * n.frobenius / r.sqrt() * l.sqrt())
}

/// `ρ = ‖A‖_F² / ‖A‖₂²` and the crossover `r* = (4/ρ) · log(2/δ)`.
pub fn effective_rank(n: &MatrixNorms, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if n.spectral <= 0.0 {
        return Err(Error::Undefined("effective rank of the zero matrix".into()));
    }
    let rho = (n.frobenius / n.spectral).powi(2);
    Ok((rho, 4.0 / rho * (2.0 / delta).ln()))
}

/// Bound on `|(1/r) Σ_j z_jᵀ A x_j|` for independent Gaussian `z_j, x_j`:
/// `c (‖A‖₂/r · log(2/δ) + ‖A‖_F/√r · log^{1/2}(2/δ))`.
pub fn bilinear_bound(n: &MatrixNorms, r: usize, delta: f64, c: f64) -> Result<f64> {
    sparse_bilinear_bound(n, r, 1.0, delta, c).map(|(b, _)| b)
}

/// As [`bilinear_bound`] with `x_j` kept with probability `p`:
/// `c (‖A‖₂/r · log(2/δ) + √p ‖A‖_F/√r · log^{1/2}(2/δ))`, holding with
/// probability `1 − δ − 2e^{−rp²/2}`. Returns the bound and that extra
/// failure probability.
pub fn sparse_bilinear_bound(n: &MatrixNorms, r: usize, p: f64, delta: f64, c: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    check_r(r)?;
    check_prob(p)?;
    check_c(c)?;
    let l = (2.0 / delta).ln();
    let rf = r as f64;
    let extra = if p == 1.0 { 0.0 } else { 2.0 * (-rf * p * p / 2.0).exp() };
    Ok((c * (n.spectral / rf * l + p.sqrt() * n.frobenius / rf.sqrt() * l.sqrt()), extra))
}

fn check_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("probability {p} outside (0, 1]")));
    }
    Ok(())
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("bound constant {c} must be positive")));
    }
    Ok(())
}

/// Which term of a two-term bound dominates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SmallR,
    LargeR,
}

/// `c_out x c_in` grid of block norms, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub c_out: usize,
    pub c_in: usize,
    pub norms: Vec<MatrixNorms>,
}

impl BlockNorms {
    pub fn of(a: &DenseBlockMap) -> Result<Self> {
        use crate::trace::BlockLinearMap;
        let (c_out, c_in) = (a.c_out(), a.c_in());
        let norms = (0..c_out * c_in).map(|e| norms(&a.block(e / c_in, e % c_in))).collect::<Result<_>>()?;
        Ok(Self { c_out, c_in, norms })
    }

    pub fn get(&self, m: usize, n: usize) -> &MatrixNorms {
        &self.norms[m * self.c_in + n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_value: f64,
    /// Second term alone: the form valid once `r` is past the crossover.
    pub large_r_value: f64,
    pub delta: f64,
    pub r: usize,
    pub regime: Regime,
    /// Effective rank of the estimated block.
    pub effective_rank: f64,
    /// `r` at which the two terms are equal.
    pub phase_transition_r: f64,
    /// `2·C_in·e^{−rp²/2}` with `p = min_n p_n`.
    pub failure_prob_extra: f64,
}

/// Bound for block `(m, n)` of the orthogonalised estimator:
///
/// ```text
/// c ( Σ_k ‖A^{m,k}‖₂ / (p_n r) · log(C_out C_in/δ)
///   + [ ‖A^{m,n}‖_F/√p_n + Σ_{k≠n} √(p_k/p_n) ‖A^{m,k}‖_F ] / √r · log^{1/2}(C_out C_in/δ) )
/// ```
pub fn block_bound(
    block_norms: &BlockNorms,
    sp: &BlockSparsity,
    m: usize,
    n: usize,
    r: usize,
    delta: f64,
    c: f64,
) -> Result<BoundReport> {
    check_delta(delta)?;
    check_r(r)?;
    check_c(c)?;
    let (c_out, c_in) = (block_norms.c_out, block_norms.c_in);
    if sp.len() != c_in || block_norms.norms.len() != c_out * c_in {
        return Err(Error::Dimension(format!("{} keep probabilities for a {c_out}x{c_in} grid", sp.len())));
    }
    if m >= c_out || n >= c_in {
        return Err(Error::InvalidArgument(format!("block ({m}, {n}) outside a {c_out}x{c_in} grid")));
    }
    let p = sp.probs();
    let l = ((c_out * c_in) as f64 / delta).ln();
    let rf = r as f64;
    let spectral_sum: f64 = (0..c_in).map(|k| block_norms.get(m, k).spectral).sum();
    let a = c * spectral_sum / p[n] * l;
    let frob: f64 = block_norms.get(m, n).frobenius / p[n].sqrt()
        + (0..c_in).filter(|&k| k != n).map(|k| (p[k] / p[n]).sqrt() * block_norms.get(m, k).frobenius).sum::<f64>();
    let b = c * frob * l.sqrt();
    let first = a / rf;
    let second = b / rf.sqrt();
    let crossover = if b > 0.0 { (a / b).powi(2) } else { f64::INFINITY };
    let own = block_norms.get(m, n);
    let effective_rank = if own.spectral > 0.0 { (own.frobenius / own.spectral).powi(2) } else { 0.0 };
    let pmin = sp.min();
    Ok(BoundReport {
        bound_value: first + second,
        large_r_value: second,
        delta,
        r,
        regime: if first > second { Regime::SmallR } else { Regime::LargeR },
        effective_rank,
        phase_transition_r: crossover,
        failure_prob_extra: 2.0 * c_in as f64 * (-rf * pmin * pmin / 2.0).exp(),
    })
}

/// Single-matrix report built from [`single_bound`].
pub fn single_report(n: &MatrixNorms, r: usize, delta: f64) -> Result<BoundReport> {
    let value = single_bound(n, r, delta)?;
    let l = (2.0 / delta).ln();
    let rf = r as f64;
    let first = 4.0 * n.spectral / rf * l;
    let second = value - first;
    let (rho, r_star) = if n.spectral > 0.0 { effective_rank(n, delta)? } else { (0.0, f64::INFINITY) };
    Ok(BoundReport {
        bound_value: value,
        large_r_value: second,
        delta,
        r,
        regime: if first > second { Regime::SmallR } else { Regime::LargeR },
        effective_rank: rho,
        phase_transition_r: r_star,
        failure_prob_extra: 0.0,
    })
}

/// Outcome of a coverage run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub failures: usize,
    pub trials: usize,
    pub bound: f64,
}

impl Coverage {
    pub fn rate(&self) -> f64 {
        self.failures as f64 / self.trials as f64
    }

    /// `δ + 3·sqrt(δ(1−δ)/trials)`.
    pub fn tolerance(delta: f64, trials: usize) -> f64 {
        delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
    }
}

pub const MIN_COVERAGE_TRIALS: usize = 1000;

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_COVERAGE_TRIALS {
        return Err(Error::InvalidArgument(format!("{trials} trials; coverage needs at least {MIN_COVERAGE_TRIALS}")));
    }
    Ok(())
}

/// Fraction of `r`-probe Hutchinson estimates of `tr(A)` whose error
/// exceeds [`single_bound`].
pub fn coverage_single(a: &DMatrix<f64>, delta: f64, r: usize, trials: usize, seed: u64) -> Result<Coverage> {
    check_trials(trials)?;
    let bound = single_bound(&norms(a)?, r, delta)?;
    let exact = crate::trace::exact_trace(a)?;
    let map = DenseMap::new(a.clone())?;
    let errs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| hutchinson(&map, r, ProbeSeed::new(seed, t as u64)).map(|e| (e.value - exact).abs()))
        .collect::<Result<_>>()?;
    Ok(Coverage { failures: errs.iter().filter(|&&e| e > bound).count(), trials, bound })
}

/// Ratios `|error| / bound(c = 1)` of every block in every trial of the
/// orthogonalised estimator.
pub fn block_ratios(
    a: &DenseBlockMap,
    sp: &BlockSparsity,
    delta: f64,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use crate::trace::BlockLinearMap;
    let bn = BlockNorms::of(a)?;
    let (c_out, c_in) = (a.c_out(), a.c_in());
    let unit: Vec<f64> = (0..c_out * c_in)
        .map(|e| block_bound(&bn, sp, e / c_in, e % c_in, r, delta, 1.0).map(|b| b.bound_value))
        .collect::<Result<_>>()?;
    let exact = a.exact_traces();
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let z = gen_block_sparse(a.block_size(), c_in, r, sp, ProbeSeed::new(seed, t as u64))?;
            let est = multichannel_ortho(a, &z)?;
            Ok(est
                .values()
                .iter()
                .zip(&exact)
                .zip(&unit)
                .map(|((v, x), u)| if *u > 0.0 { (v - x).abs() / u } else if v == x { 0.0 } else { f64::INFINITY })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_trial.concat())
}

/// Coverage of the multi-channel bound with constant `c`, over all blocks
/// and trials.
pub fn coverage_block(
    a: &DenseBlockMap,
    sp: &BlockSparsity,
    delta: f64,
    r: usize,
    c: f64,
    trials: usize,
    seed: u64,
) -> Result<Coverage> {
    check_trials(trials)?;
    check_c(c)?;
    let ratios = block_ratios(a, sp, delta, r, trials, seed)?;
    Ok(Coverage { failures: ratios.iter().filter(|&&q| q > c).count(), trials: ratios.len(), bound: c })
}

/// Smallest `c` whose failure rate on these trials is at most `δ`. Check it
/// with [`coverage_block`] on other seeds.
pub fn fit_block_constant(
    a: &DenseBlockMap,
    sp: &BlockSparsity,
    delta: f64,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    check_trials(trials)?;
    let mut ratios = block_ratios(a, sp, delta, r, trials, seed)?;
    ratios.sort_by(f64::total_cmp);
    let allowed = (delta * ratios.len() as f64).floor() as usize;
    let idx = ratios.len().saturating_sub(allowed + 1);
    Ok(ratios[idx].max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, SeqRng};

    fn power_iteration(a: &DMatrix<f64>) -> f64 {
        let ata = a.transpose() * a;
        let mut v = nalgebra::DVector::from_element(a.ncols(), 1.0);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = &ata * &v;
            lambda = w.norm();
            v = w / lambda;
        }
        lambda.sqrt()
    }

    #[test]
    fn norms_of_simple_matrices() {
        let n = norms(&DMatrix::identity(5, 5)).unwrap();
        assert!((n.spectral - 1.0).abs() < 1e-12 && (n.frobenius - 5f64.sqrt()).abs() < 1e-12);
        let u = nalgebra::DVector::from_vec(vec![0.6, 0.8]);
        let v = nalgebra::DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let n = norms(&(u * v.transpose())).unwrap();
        assert!((n.spectral - 1.0).abs() < 1e-12 && (n.frobenius - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        let mut rng = SeqRng::from_u64(3, Domain::Instance);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.normal());
        let s = norms(&a).unwrap().spectral;
        assert!((s - power_iteration(&a)).abs() <= 1e-8 * s);
    }

    #[test]
    fn plug_in_value() {
        let n = MatrixNorms::new(1.0, 1.0, 1).unwrap();
        let delta = 2.0 / std::f64::consts::E;
        assert!((single_bound(&n, 1, delta).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(single_bound(&MatrixNorms::zero(3), 4, 0.1).unwrap(), 0.0);
        assert!(single_bound(&n, 1, 0.0).is_err() && single_bound(&n, 1, 1.0).is_err());
    }

    #[test]
    fn monotone_in_r_and_delta() {
        let n = MatrixNorms::new(2.0, 5.0, 10).unwrap();
        let mut last = f64::INFINITY;
        for r in [1, 2, 4, 8, 64] {
            let b = single_bound(&n, r, 0.1).unwrap();
            assert!(b < last);
            last = b;
        }
        assert!(single_bound(&n, 8, 0.01).unwrap() > single_bound(&n, 8, 0.1).unwrap());
    }

    #[test]
    fn effective_rank_cases() {
        let (rho, _) = effective_rank(&norms(&DMatrix::identity(7, 7)).unwrap(), 0.1).unwrap();
        assert!((rho - 7.0).abs() < 1e-12);
        let (rho, r_star) = effective_rank(&MatrixNorms::new(2.0, 2.0, 4).unwrap(), 0.1).unwrap();
        assert!((rho - 1.0).abs() < 1e-12 && (r_star - 4.0 * 20f64.ln()).abs() < 1e-12);
        assert!(matches!(effective_rank(&MatrixNorms::zero(3), 0.1), Err(Error::Undefined(_))));
    }

    #[test]
    fn single_block_block_by_hand() {
        let bn = BlockNorms { c_out: 1, c_in: 1, norms: vec![MatrixNorms::new(2.0, 3.0, 4).unwrap()] };
        let rep = block_bound(&bn, &BlockSparsity::dense(1), 0, 0, 16, 0.1, 1.5).unwrap();
        let l = 10f64.ln();
        let want = 1.5 * (2.0 / 16.0 * l + 3.0 / 4.0 * l.sqrt());
        assert!((rep.bound_value - want).abs() < 1e-12);
        assert!((rep.phase_transition_r - (2.0 * l / (3.0 * l.sqrt())).powi(2)).abs() < 1e-12);
        assert_eq!(rep.failure_prob_extra, 2.0 * (-8.0f64).exp());
    }

    #[test]
    fn zero_blocks_give_zero_bound() {
        let bn = BlockNorms { c_out: 2, c_in: 2, norms: vec![MatrixNorms::zero(3); 4] };
        let rep = block_bound(&bn, &BlockSparsity::default_for(2), 1, 0, 8, 0.05, 2.0).unwrap();
        assert_eq!(rep.bound_value, 0.0);
    }

    #[test]
    fn bilinear_bounds_shrink_with_sparsity() {
        let n = MatrixNorms::new(1.0, 4.0, 16).unwrap();
        let full = bilinear_bound(&n, 32, 0.1, 1.0).unwrap();
        let (sparse, extra) = sparse_bilinear_bound(&n, 32, 0.25, 0.1, 1.0).unwrap();
        assert!(sparse < full);
        assert!((extra - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn oversize_matrix_rejected() {
        let a = DMatrix::zeros(MAX_NORM_DIM + 1, 1);
        assert!(matches!(norms(&a), Err(Error::Capacity(_))));
    }
}
