use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::nn::{grad_noise_study, train, GradMode, Network, NetworkSpec, TrainConfig};

use crate::common::{parse_grid, usage, ModeKind, Run};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Network spec (JSON); defaults to the config's `network` entry.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Training config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gradient mode for every conv layer, overriding spec and config.
    #[arg(long, value_enum)]
    pub mode: Option<ModeKind>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also measure gradient spread at initialisation.
    #[arg(long)]
    pub grad_noise: bool,
    #[arg(long, default_value_t = 20)]
    pub noise_minibatches: usize,
    /// Probe counts compared in the noise study.
    #[arg(long, default_value = "64,256")]
    pub noise_r: String,
    #[arg(long)]
    pub noise_batch: Option<usize>,
    #[arg(long, value_enum, default_value = "multi-ortho")]
    pub noise_mode: ModeKind,
    #[arg(skip)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<Resolved>,
}

/// Spec and config as loaded, so a manifest replays without the files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Resolved {
    pub network: NetworkSpec,
    pub config: TrainConfig,
}

fn resolve(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<Resolved> {
    let Some(cfg_path) = &a.config else {
        return usage("train needs --config");
    };
    let mut config = TrainConfig::load(cfg_path)?;
    let spec_path = match (&a.spec, &config.network) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => return usage("no --spec given and the config names no network"),
    };
    let network = NetworkSpec::load(&spec_path)?;
    if let Some(kind) = a.mode {
        config.grad_mode = Some(kind.grad_mode(a.r)?);
    } else if a.r.is_some() {
        return usage("--r needs --mode");
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.network = None;
    Ok(Resolved { network, config })
}

pub fn run(a: &mut TrainArgs, seed: Option<u64>) -> anyhow::Result<Run> {
    if a.resolved.is_none() {
        a.resolved = Some(resolve(a, seed)?);
    }
    let Resolved { network, config } = a.resolved.clone().expect("resolved above");
    let (train_set, test_set) = config.dataset.load()?;
    let mut net = Network::build(&network, config.seed)?;
    let mut run = Run::new();
    if a.grad_noise {
        let mut modes = vec![GradMode::Exact];
        for r in parse_grid(&a.noise_r)? {
            modes.push(a.noise_mode.grad_mode(Some(r))?);
        }
        let batch = a.noise_batch.unwrap_or(config.batch);
        let rep = grad_noise_study(&net, &train_set, &modes, a.noise_minibatches, batch, config.seed, false)?;
        for l in &rep.layers {
            run.say(format!("noise layer {} {} r={:?}: median std {:.4e}", l.layer, l.mode.name(), l.mode.r(), l.median_std()));
        }
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        run.file("grad_noise.csv", buf);
    }
    let log = train(&mut net, &config, &train_set, &test_set)?;
    if let Some(last) = log.last() {
        run.say(format!(
            "epoch {}: train acc {:.4}, test acc {:.4}, test loss {:.4}",
            last.epoch, last.train_acc, last.test_acc, last.test_loss
        ));
    }
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    run.file("train_log.csv", buf);
    Ok(run)
}
