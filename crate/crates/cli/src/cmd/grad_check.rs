use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::gradcheck::{dense_oracle_error, finite_difference_error, monte_carlo_unbiasedness, ConvInstance};

use crate::common::{csv_bytes, usage, ModeKind, Run};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSel {
    All,
    Exact,
    Indep,
    Multi,
    MultiOrtho,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckArgs {
    /// Image side; the image has side² pixels.
    #[arg(long, default_value_t = 8)]
    pub side: usize,
    #[arg(long, default_value_t = 2)]
    pub c_in: usize,
    #[arg(long, default_value_t = 2)]
    pub c_out: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub r: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub mode: ModeSel,
    /// Monte Carlo draws per probed mode.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Keep probability for multi-ortho; defaults to 1/C_in.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    pub z_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub fd_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub oracle_tol: f64,
}

#[derive(Serialize)]
struct Check {
    check: String,
    value: f64,
    threshold: f64,
    pass: bool,
}

#[derive(Serialize)]
struct ZRow {
    mode: &'static str,
    m: usize,
    n: usize,
    i: usize,
    exact: f64,
    mean: f64,
    se: f64,
    z: f64,
}

/// Largest image whose dense trace oracle is still cheap.
const ORACLE_MAX_PIXELS: usize = 256;

pub fn run(a: &mut GradCheckArgs, seed: u64) -> anyhow::Result<Run> {
    if a.r == 0 {
        return usage("--r must be positive");
    }
    if a.samples < 2 {
        return usage("--samples must be at least 2");
    }
    if a.side == 0 || a.c_in == 0 || a.c_out == 0 || a.batch == 0 {
        return usage("--side, --c-in, --c-out and --batch must be positive");
    }
    let inst = ConvInstance::random(a.side, a.c_in, a.c_out, a.kernel, a.batch, seed)?;
    let mut run = Run::new();
    let mut checks = Vec::new();
    let mut zrows = Vec::new();
    if matches!(a.mode, ModeSel::All | ModeSel::Exact) {
        let fd = finite_difference_error(&inst, 1e-3)?;
        run.say(format!("finite differences: max relative error {fd:.3e}"));
        checks.push(Check { check: "finite-difference".into(), value: fd, threshold: a.fd_tol, pass: fd <= a.fd_tol });
        if a.side * a.side <= ORACLE_MAX_PIXELS {
            let or = dense_oracle_error(&inst)?;
            run.say(format!("dense trace oracle: max relative deviation {or:.3e}"));
            checks.push(Check { check: "dense-oracle".into(), value: or, threshold: a.oracle_tol, pass: or <= a.oracle_tol });
        }
    }
    let probed = match a.mode {
        ModeSel::All => vec![ModeKind::Indep, ModeKind::Multi, ModeKind::MultiOrtho],
        ModeSel::Exact => vec![],
        ModeSel::Indep => vec![ModeKind::Indep],
        ModeSel::Multi => vec![ModeKind::Multi],
        ModeSel::MultiOrtho => vec![ModeKind::MultiOrtho],
    };
    for kind in probed {
        let mode = kind.probe_mode(a.c_in, a.p)?.expect("probed mode");
        let rep = monte_carlo_unbiasedness(&inst, a.r, &mode, a.samples, seed)?;
        let zmax = rep.max_abs_z();
        run.say(format!("{}: max |z| {zmax:.3} over {} coefficients", mode.name(), rep.coeffs.len()));
        checks.push(Check { check: format!("unbiased-{}", mode.name()), value: zmax, threshold: a.z_max, pass: zmax <= a.z_max });
        zrows.extend(rep.coeffs.into_iter().map(|c| ZRow {
            mode: mode.name(),
            m: c.m,
            n: c.n,
            i: c.i,
            exact: c.exact,
            mean: c.mean,
            se: c.se,
            z: c.z,
        }));
    }
    run.pass = checks.iter().all(|c| c.pass);
    if !zrows.is_empty() {
        run.file("grad_check.csv", csv_bytes(zrows)?);
    }
    run.file("grad_check_summary.csv", csv_bytes(checks)?);
    Ok(run)
}
