//! Optimizers and the epoch loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::data::{Dataset, DatasetSpec};
use crate::nn::network::{Network, StepContext};
use crate::nn::spec::GradMode;
use crate::rng::{Domain, ProbeSeed, SeqRng};

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam { lr, beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        match *self {
            OptimizerSpec::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerSpec::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::InvalidArgument("adam needs betas in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state, one buffer pair per parameter slice.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self { spec, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// One update with learning rate `lr` (the schedule is applied by the caller).
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Dimension("parameter and gradient layouts differ".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        match self.spec {
            OptimizerSpec::Sgd { momentum, .. } => {
                for ((p, g), m) in params.into_iter().zip(grads).zip(&mut self.m) {
                    for ((p, &g), m) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *m = momentum * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    pub batch: usize,
    pub epochs: usize,
    pub dataset: DatasetSpec,
    pub seed: u64,
    /// Replaces the gradient mode of every conv layer in the network spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_mode: Option<GradMode>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Learning-rate multiplier applied when any conv layer is probed.
    #[serde(default = "one")]
    pub probe_lr_scale: f64,
    #[serde(default)]
    pub dropout: bool,
    /// Network spec file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerSpec, batch: usize, epochs: usize, dataset: DatasetSpec, seed: u64) -> Self {
        Self {
            optimizer,
            batch,
            epochs,
            dataset,
            seed,
            grad_mode: None,
            lr_schedule: LrSchedule::Constant,
            probe_lr_scale: 1.0,
            dropout: false,
            network: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.rebase(base);
        if let Some(n) = &cfg.network {
            if n.is_relative() {
                cfg.network = Some(base.join(n));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.probe_lr_scale > 0.0 && self.probe_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("probe_lr_scale must be positive".into()));
        }
        if let Some(m) = &self.grad_mode {
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Activation scalars kept by one training step (first batch of the epoch).
    pub act_scalars: u64,
    pub act_bits: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `net` on `data`, no dropout.
pub fn evaluate(net: &Network, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let out = net.forward(&x)?;
        loss += net.loss(&out, &labels)?.0 * chunk.len() as f64;
        correct += labels.iter().enumerate().filter(|&(b, &l)| argmax(out.column(b)) == l).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Learning rate for `step` out of `total`.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
    }
}

/// Trains `net` in place. Batches are reshuffled each epoch from the config seed,
/// and probe seeds are derived from `(seed, layer, step)`.
pub fn train(net: &mut Network, cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(m) = &cfg.grad_mode {
        net.set_conv_mode(m)?;
    }
    let probed = net.spec.layers.iter().any(|l| match &l.layer {
        crate::nn::spec::LayerSpec::Conv { mode, .. } => mode.is_probed(),
        _ => false,
    });
    let base_lr = cfg.optimizer.lr() * if probed { cfg.probe_lr_scale } else { 1.0 };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = SeqRng::new(ProbeSeed::new(cfg.seed, epoch as u64), Domain::Shuffle);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut storage = None;
        let mut lr = base_lr;
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = train_set.batch(chunk)?;
            let ctx = StepContext { seed: cfg.seed, iteration: step, dropout: cfg.dropout };
            let (out, tape) = net.forward_train(&x, &ctx)?;
            let (loss, dout) = net.loss(&out, &labels)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += labels.iter().enumerate().filter(|&(b, &l)| argmax(out.column(b)) == l).count();
            storage.get_or_insert_with(|| tape.total());
            let grads = net.backward(&tape, dout)?;
            drop(tape);
            lr = scheduled_lr(base_lr, cfg.lr_schedule, step, total);
            opt.step(net.params_mut(), grads.slices(), lr)?;
            step += 1;
        }
        let (test_loss, test_acc) = evaluate(net, test_set, 250)?;
        let st = storage.unwrap_or_default();
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_loss,
            test_acc,
            act_scalars: st.scalars,
            act_bits: st.bits,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerSpec::adam(0.1));
        let mut p = [1.0, -1.0];
        opt.step(vec![&mut p[..]], vec![&[3.0, -0.5][..]], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_with_momentum() {
        let mut opt = Optimizer::new(OptimizerSpec::Sgd { lr: 0.5, momentum: 0.5 });
        let mut p = [0.0];
        opt.step(vec![&mut p[..]], vec![&[1.0][..]], 0.5).unwrap();
        opt.step(vec![&mut p[..]], vec![&[1.0][..]], 0.5).unwrap();
        assert_eq!(p[0], -0.5 - 0.75);
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        assert_eq!(scheduled_lr(1.0, LrSchedule::Cosine, 0, 10), 1.0);
        assert!(scheduled_lr(1.0, LrSchedule::Cosine, 10, 10).abs() < 1e-15);
        assert_eq!(scheduled_lr(0.3, LrSchedule::Constant, 7, 10), 0.3);
    }

    #[test]
    fn config_defaults_and_validation() {
        let text = r#"{"optimizer":{"kind":"adam","lr":0.003},"batch":64,"epochs":5,
            "dataset":{"kind":"synthetic","train":10,"test":5,"dims":{"channels":1,"height":4,"width":4},"seed":2},"seed":1}"#;
        let cfg = TrainConfig::from_json(text).unwrap();
        assert_eq!(cfg.optimizer, OptimizerSpec::adam(0.003));
        assert_eq!(cfg.probe_lr_scale, 1.0);
        let bad = text.replace("\"batch\":64", "\"batch\":0");
        assert!(TrainConfig::from_json(&bad).is_err());
        let bad = text.replace("0.003", "-1");
        assert!(TrainConfig::from_json(&bad).is_err());
    }
}
