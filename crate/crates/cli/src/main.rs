//! `tracegrad`: seeded experiments over the low-memory gradient library.
//!
//! Every subcommand writes CSV files and a `manifest.json` into `--out`.
//! Exit status is 0 on success, 1 when a check fails, 2 on usage errors.

mod cmd;
mod common;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use common::{Run, UsageError};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "tracegrad", version, about = "Randomized trace estimation for low-memory conv gradients")]
struct Cli {
    /// Base seed; each subcommand has its own default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, env = "TRACEGRAD_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Estimator error against the number of probes.
    TraceBench(cmd::trace_bench::TraceBenchArgs),
    /// Finite-difference, dense-oracle and Monte Carlo checks of conv weight gradients.
    GradCheck(cmd::grad_check::GradCheckArgs),
    /// Empirical coverage of the deviation bounds.
    BoundCheck(cmd::bound_check::BoundCheckArgs),
    /// Trains a network from a spec and a config.
    Train(cmd::train::TrainArgs),
    /// Activation memory per layer, conventional against probed.
    MemReport(cmd::mem_report::MemReportArgs),
    /// Wall time of exact against probed weight gradients.
    PerfBench(cmd::perf_bench::PerfBenchArgs),
    /// Re-runs the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(clap::Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest file, or the directory holding it.
    pub manifest: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TraceBench(_) => "trace-bench",
            Command::GradCheck(_) => "grad-check",
            Command::BoundCheck(_) => "bound-check",
            Command::Train(_) => "train",
            Command::MemReport(_) => "mem-report",
            Command::PerfBench(_) => "perf-bench",
            Command::Replay(_) => "replay",
        }
    }

    fn default_seed(&self) -> u64 {
        match self {
            Command::TraceBench(_) => 7,
            _ => 0,
        }
    }
}

fn execute(mut command: Command, seed: Option<u64>, threads: usize, out: PathBuf) -> anyhow::Result<bool> {
    if let Command::Replay(r) = &command {
        let m = RunManifest::load(&r.manifest)?;
        if matches!(m.command, Command::Replay(_)) {
            return common::usage("a manifest cannot record a replay");
        }
        return execute(m.command, Some(m.seed), threads, out);
    }
    let explicit = seed;
    let mut seed = seed.unwrap_or_else(|| command.default_seed());
    let run: Run = match &mut command {
        Command::TraceBench(a) => cmd::trace_bench::run(a, seed)?,
        Command::GradCheck(a) => cmd::grad_check::run(a, seed)?,
        Command::BoundCheck(a) => cmd::bound_check::run(a, seed)?,
        Command::Train(a) => {
            let run = cmd::train::run(a, explicit)?;
            seed = a.resolved.as_ref().map_or(seed, |r| r.config.seed);
            run
        }
        Command::MemReport(a) => cmd::mem_report::run(a)?,
        Command::PerfBench(a) => cmd::perf_bench::run(a, seed)?,
        Command::Replay(_) => unreachable!(),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (name, bytes) in &run.files {
        std::fs::write(out.join(name), bytes).with_context(|| format!("writing {name}"))?;
    }
    let manifest = RunManifest {
        subcommand: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        threads,
        outputs: run.files.iter().map(|(n, _)| n.clone()).collect(),
        command,
        pass: run.pass,
    };
    manifest.write(&out)?;
    for line in &run.summary {
        println!("{line}");
    }
    println!("{} {} -> {}", manifest.subcommand, if run.pass { "ok" } else { "FAILED" }, out.display());
    Ok(run.pass)
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<tracegrad::Error>(),
                Some(tracegrad::Error::InvalidArgument(_) | tracegrad::Error::Spec(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| execute(cli.command, cli.seed, cli.threads, cli.out)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
