use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::bounds::{
    coverage_single, coverage_block, fit_block_constant, norms, single_report, block_bound, BlockNorms, Coverage,
    MIN_COVERAGE_TRIALS,
};
use tracegrad::trace::{BlockCrosstalk, DenseBlockMap, MatrixFamily};
use tracegrad::BlockSparsity;

use crate::common::{csv_bytes, parse_grid, usage, Run};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Single,
    Block,
    All,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub bound: Which,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value = "16,64,256")]
    pub r: String,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    /// Size of the single-matrix suite.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Channels of the block matrices.
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    /// Keep probability of every channel block; defaults to 1/C.
    #[arg(long)]
    pub p: Option<f64>,
    /// Largest acceptable fitted constant for the multi-channel bound.
    #[arg(long, default_value_t = 10.0)]
    pub c_max: f64,
}

#[derive(Serialize)]
struct Row {
    bound: &'static str,
    matrix: String,
    r: usize,
    delta: f64,
    c: Option<f64>,
    bound_value: f64,
    trials: usize,
    failures: usize,
    rate: f64,
    tolerance: f64,
    effective_rank: f64,
    phase_transition_r: f64,
    pass: bool,
}

pub fn run(a: &mut BoundCheckArgs, seed: u64) -> anyhow::Result<Run> {
    let grid = parse_grid(&a.r)?;
    if a.trials < MIN_COVERAGE_TRIALS {
        return usage(format!("--trials must be at least {MIN_COVERAGE_TRIALS}"));
    }
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return usage("--delta must lie in (0, 1)");
    }
    let mut rows = Vec::new();
    let mut run = Run::new();
    if matches!(a.bound, Which::Single | Which::All) {
        for fam in MatrixFamily::ALL {
            let m = fam.build(a.dim, seed)?;
            let nm = norms(&m)?;
            for &r in &grid {
                let cov = coverage_single(&m, a.delta, r, a.trials, seed)?;
                let rep = single_report(&nm, r, a.delta)?;
                let tol = Coverage::tolerance(a.delta, cov.trials);
                rows.push(Row {
                    bound: "single",
                    matrix: fam.name().into(),
                    r,
                    delta: a.delta,
                    c: None,
                    bound_value: rep.bound_value,
                    trials: cov.trials,
                    failures: cov.failures,
                    rate: cov.rate(),
                    tolerance: tol,
                    effective_rank: rep.effective_rank,
                    phase_transition_r: rep.phase_transition_r,
                    pass: cov.rate() <= tol,
                });
            }
        }
    }
    if matches!(a.bound, Which::Block | Which::All) {
        let c = a.channels;
        let sp = match a.p {
            Some(p) => BlockSparsity::uniform(c, p)?,
            None => BlockSparsity::default_for(c),
        };
        let instances = [
            ("gaussian", DenseBlockMap::new(MatrixFamily::Gaussian.build(c * a.block_size, seed)?, c, c)?),
            ("block-crosstalk", BlockCrosstalk::new(c, a.block_size).to_dense()),
        ];
        for (name, map) in &instances {
            let bn = BlockNorms::of(map)?;
            for &r in &grid {
                let fitted = fit_block_constant(map, &sp, a.delta, r, a.trials, seed)?;
                // held-out seeds, so coverage is not the fit re-measured
                let cov = coverage_block(map, &sp, a.delta, r, fitted, a.trials, seed.wrapping_add(1))?;
                let rep = block_bound(&bn, &sp, 0, 0, r, a.delta, fitted)?;
                let tol = Coverage::tolerance(a.delta, cov.trials);
                rows.push(Row {
                    bound: "block",
                    matrix: (*name).into(),
                    r,
                    delta: a.delta,
                    c: Some(fitted),
                    bound_value: rep.bound_value,
                    trials: cov.trials,
                    failures: cov.failures,
                    rate: cov.rate(),
                    tolerance: tol,
                    effective_rank: rep.effective_rank,
                    phase_transition_r: rep.phase_transition_r,
                    pass: fitted <= a.c_max && cov.rate() <= tol,
                });
                run.say(format!("block {name} r={r}: fitted c = {fitted:.4}"));
            }
        }
    }
    let failed: Vec<String> =
        rows.iter().filter(|r| !r.pass).map(|r| format!("{} {} r={}", r.bound, r.matrix, r.r)).collect();
    run.say(format!("{} settings, {} failed {:?}", rows.len(), failed.len(), failed));
    run.pass = failed.is_empty();
    run.file("bound_check.csv", csv_bytes(rows)?);
    Ok(run)
}
