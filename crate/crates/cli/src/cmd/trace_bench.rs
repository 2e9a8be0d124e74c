use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::trace::{
    estimator_error_stats, exact_trace, fit_loglog_slope, locate_phase_transition, BlockCrosstalk, BlockLinearMap,
    DenseMap, Estimator, MatrixFamily,
};
use tracegrad::BlockSparsity;

use crate::common::{csv_bytes, parse_grid, usage, Run};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    Identity,
    Diagonal,
    Rank1,
    Gaussian,
    Symmetric,
    BlockCrosstalk,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Naive,
    Ortho,
    Both,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TraceBenchArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub matrix: MatrixKind,
    /// Matrix size; the block size for block-crosstalk.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Channels of the block-crosstalk matrix.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Probe counts: `a..b` doubles from a to b, or a comma list.
    #[arg(long, default_value = "4..4096")]
    pub r: String,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, value_enum, default_value = "naive")]
    pub estimator: EstimatorKind,
    /// Keep probability of every channel block (ortho); defaults to 1/C.
    #[arg(long)]
    pub p: Option<f64>,
    /// The phase-transition fit uses the 1 − delta quantile of the error.
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
}

#[derive(Serialize)]
struct Row<'a> {
    matrix: &'a str,
    estimator: &'a str,
    r: usize,
    mean: f64,
    std: f64,
    median: f64,
    quantile: f64,
}

#[derive(Serialize)]
struct Fit<'a> {
    matrix: &'a str,
    estimator: &'a str,
    slope: f64,
    intercept: f64,
    r_break: Option<f64>,
    slope_small: Option<f64>,
    slope_large: Option<f64>,
}

fn matrix_name(k: MatrixKind) -> &'static str {
    match k {
        MatrixKind::Identity => "identity",
        MatrixKind::Diagonal => "diagonal",
        MatrixKind::Rank1 => "rank1",
        MatrixKind::Gaussian => "gaussian",
        MatrixKind::Symmetric => "symmetric",
        MatrixKind::BlockCrosstalk => "block-crosstalk",
    }
}

pub fn run(a: &mut TraceBenchArgs, seed: u64) -> anyhow::Result<Run> {
    let grid = parse_grid(&a.r)?;
    if a.trials < 30 {
        return usage(format!("--trials {} is too small; at least 30", a.trials));
    }
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return usage("--delta must lie in (0, 1)");
    }
    if a.dim == 0 || a.channels == 0 {
        return usage("--dim and --channels must be positive");
    }
    let (map, exact, c): (Box<dyn BlockLinearMap>, Vec<f64>, usize) = match a.matrix {
        MatrixKind::BlockCrosstalk => {
            let op = BlockCrosstalk::new(a.channels, a.dim);
            op.validate()?;
            let ex = op.exact_traces();
            (Box::new(op), ex, a.channels)
        }
        k => {
            let fam = match k {
                MatrixKind::Identity => MatrixFamily::Identity,
                MatrixKind::Diagonal => MatrixFamily::Diagonal,
                MatrixKind::Rank1 => MatrixFamily::Rank1,
                MatrixKind::Symmetric => MatrixFamily::Symmetric,
                _ => MatrixFamily::Gaussian,
            };
            let m = fam.build(a.dim, seed)?;
            let ex = vec![exact_trace(&m)?];
            (Box::new(DenseMap::new(m)?), ex, 1)
        }
    };
    let sp = match a.p {
        Some(p) => BlockSparsity::uniform(c, p)?,
        None => BlockSparsity::default_for(c),
    };
    let estimators = match a.estimator {
        EstimatorKind::Naive => vec![Estimator::Naive],
        EstimatorKind::Ortho => vec![Estimator::Ortho(sp)],
        EstimatorKind::Both => vec![Estimator::Naive, Estimator::Ortho(sp)],
    };
    let name = matrix_name(a.matrix);
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut run = Run::new();
    for est in &estimators {
        let stats = estimator_error_stats(&*map, &exact, est, &grid, a.trials, seed, 1.0 - a.delta)?;
        let xs: Vec<f64> = stats.iter().map(|s| s.r as f64).collect();
        let med: Vec<f64> = stats.iter().map(|s| s.median).collect();
        let q: Vec<f64> = stats.iter().map(|s| s.quantile).collect();
        let (slope, intercept) = if xs.len() >= 2 { fit_loglog_slope(&xs, &med)? } else { (f64::NAN, f64::NAN) };
        let pt = if xs.len() >= 4 { Some(locate_phase_transition(&xs, &q)?) } else { None };
        run.say(format!("{name} {}: slope {slope:.4}", est.name()));
        fits.push(Fit {
            matrix: name,
            estimator: est.name(),
            slope,
            intercept,
            r_break: pt.as_ref().map(|p| p.r_break),
            slope_small: pt.as_ref().map(|p| p.slope_small),
            slope_large: pt.as_ref().map(|p| p.slope_large),
        });
        rows.extend(stats.into_iter().map(|s| Row {
            matrix: name,
            estimator: est.name(),
            r: s.r,
            mean: s.mean,
            std: s.std,
            median: s.median,
            quantile: s.quantile,
        }));
    }
    run.file("trace_bench.csv", csv_bytes(rows)?);
    run.file("trace_bench_fit.csv", csv_bytes(fits)?);
    Ok(run)
}
