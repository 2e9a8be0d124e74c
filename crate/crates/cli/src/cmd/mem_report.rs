use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::lowmem::ProbeMode;
use tracegrad::mem_audit::{audit, AuditConfig, Convention, REPORT_NOTE};
use tracegrad::nn::NetworkSpec;
use tracegrad::BlockSparsity;

use crate::common::{usage, Run};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionArg {
    Native,
    Nnlib,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbedArg {
    Indep,
    Multi,
    MultiOrtho,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MemReportArgs {
    /// Network spec (JSON); shape-only specs are accepted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub r: usize,
    #[arg(long, default_value_t = 4)]
    pub element_bytes: usize,
    /// What pooling and dropout layers are charged for.
    #[arg(long, value_enum, default_value = "native")]
    pub convention: ConventionArg,
    #[arg(long, value_enum, default_value = "multi")]
    pub mode: ProbedArg,
    #[arg(skip)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<NetworkSpec>,
}

pub fn run(a: &mut MemReportArgs) -> anyhow::Result<Run> {
    if a.resolved.is_none() {
        let Some(path) = &a.spec else {
            return usage("mem-report needs --spec");
        };
        a.resolved = Some(NetworkSpec::load(path)?);
    }
    let spec = a.resolved.as_ref().expect("resolved above");
    let cfg = AuditConfig {
        batch: a.batch,
        r: a.r,
        element_bytes: a.element_bytes,
        convention: match a.convention {
            ConventionArg::Native => Convention::Native,
            ConventionArg::Nnlib => Convention::Nnlib,
        },
        mode: match a.mode {
            ProbedArg::Indep => ProbeMode::Independent,
            ProbedArg::Multi => ProbeMode::Multi,
            // Storage does not depend on the keep probabilities.
            ProbedArg::MultiOrtho => ProbeMode::MultiOrtho(BlockSparsity::dense(1)),
        },
    };
    let rep = audit(spec, &cfg)?;
    let mut run = Run::new();
    let (cb, pb) = rep.total_bytes();
    run.say(format!("{}: {REPORT_NOTE}", rep.network));
    run.say(format!(
        "conventional {} scalars ({cb} bytes), probed {} scalars ({pb} bytes), factor {:.3}",
        rep.total_conventional,
        rep.total_probed,
        rep.factor()
    ));
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    run.file("mem_report.csv", buf);
    Ok(run)
}
