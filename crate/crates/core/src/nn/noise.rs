//! Spread of conv weight gradients across minibatches and probe draws.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::data::Dataset;
use crate::nn::network::{Network, StepContext};
use crate::nn::spec::GradMode;
use crate::rng::{Domain, ProbeSeed, SeqRng};
use crate::trace::{median, quantile_sorted};

/// Per-coefficient statistics of one conv layer under one gradient mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub layer: usize,
    pub mode: GradMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LayerNoise {
    pub fn median_std(&self) -> f64 {
        median(&self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub layer: usize,
    pub mode: String,
    pub r: Option<usize>,
    pub batch: usize,
    pub minibatches: usize,
    pub statistic: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradNoiseReport {
    pub batch: usize,
    pub minibatches: usize,
    pub layers: Vec<LayerNoise>,
}

impl GradNoiseReport {
    pub fn get(&self, layer: usize, mode: &GradMode) -> Option<&LayerNoise> {
        self.layers.iter().find(|l| l.layer == layer && &l.mode == mode)
    }

    /// Summary quantiles per (layer, mode).
    pub fn rows(&self) -> Vec<NoiseRow> {
        let mut rows = Vec::new();
        for l in &self.layers {
            let mut sorted = l.std.clone();
            sorted.sort_by(f64::total_cmp);
            let mean_abs = l.mean.iter().map(|v| v.abs()).sum::<f64>() / l.mean.len().max(1) as f64;
            let stats = [
                ("std_q10", quantile_sorted(&sorted, 0.1)),
                ("std_median", quantile_sorted(&sorted, 0.5)),
                ("std_q90", quantile_sorted(&sorted, 0.9)),
                ("mean_abs", mean_abs),
            ];
            for (statistic, value) in stats {
                rows.push(NoiseRow {
                    layer: l.layer,
                    mode: l.mode.name().to_string(),
                    r: l.mode.r(),
                    batch: self.batch,
                    minibatches: self.minibatches,
                    statistic,
                    value,
                });
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in self.rows() {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Gradients at fixed weights over `m` minibatches of size `batch` for each mode.
/// Every mode sees the same minibatches; probe seeds change with the minibatch.
/// With `fixed_batch` the first minibatch is reused throughout, isolating probe noise.
pub fn grad_noise_study(
    net: &Network,
    data: &Dataset,
    modes: &[GradMode],
    m: usize,
    batch: usize,
    seed: u64,
    fixed_batch: bool,
) -> Result<GradNoiseReport> {
    if m < 2 {
        return Err(Error::InvalidArgument("noise statistics need at least 2 minibatches".into()));
    }
    if batch == 0 || batch > data.len() {
        return Err(Error::InvalidArgument(format!("batch {batch} does not fit a dataset of {}", data.len())));
    }
    let batches: Vec<Vec<usize>> = (0..m)
        .map(|k| {
            let k = if fixed_batch { 0 } else { k as u64 };
            let mut idx: Vec<usize> = (0..data.len()).collect();
            SeqRng::new(ProbeSeed::new(seed, k), Domain::Shuffle).shuffle(&mut idx);
            idx.truncate(batch);
            idx
        })
        .collect();
    let mut layers = Vec::new();
    for mode in modes {
        mode.validate()?;
        let mut probe_net = net.clone();
        probe_net.set_conv_mode(mode)?;
        // Welford accumulators per conv layer.
        let mut acc: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
        for (k, idx) in batches.iter().enumerate() {
            let (x, labels) = data.batch(idx)?;
            let (_, grads, _) = probe_net.loss_and_grad(&x, &labels, &StepContext::new(seed, k as u64))?;
            let conv = grads.conv_weights(&probe_net);
            if acc.is_empty() {
                acc = conv.iter().map(|(l, g)| (*l, vec![0.0; g.len()], vec![0.0; g.len()])).collect();
            }
            let n = (k + 1) as f64;
            for ((_, mean, m2), (_, g)) in acc.iter_mut().zip(&conv) {
                for ((mu, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(g.iter()) {
                    let d = v - *mu;
                    *mu += d / n;
                    *s += d * (v - *mu);
                }
            }
        }
        for (layer, mean, m2) in acc {
            let std = m2.iter().map(|s| (s.max(0.0) / (m - 1) as f64).sqrt()).collect();
            layers.push(LayerNoise { layer, mode: mode.clone(), mean, std });
        }
    }
    Ok(GradNoiseReport { batch, minibatches: m, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::data::synthetic;
    use crate::nn::spec::{Dims, LayerSpec, NetworkSpec};

    fn setup() -> (Network, Dataset) {
        let spec = NetworkSpec::new(
            "noise",
            Dims::new(2, 4, 4),
            vec![
                LayerSpec::Conv { kernel: 3, c_in: 2, c_out: 2, bias: false, mode: GradMode::Exact, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 32, outputs: 2, bias: true },
            ],
        );
        (Network::build(&spec, 3).unwrap(), synthetic(256, Dims::new(2, 4, 4), 2, 1.0, 4, 0).unwrap())
    }

    #[test]
    fn identical_minibatches_have_zero_exact_std() {
        let (net, data) = setup();
        let rep = grad_noise_study(&net, &data, &[GradMode::Exact], 4, 8, 1, true).unwrap();
        assert!(rep.layers[0].std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn larger_batches_are_less_noisy() {
        let (net, data) = setup();
        let small = grad_noise_study(&net, &data, &[GradMode::Exact], 30, 8, 2, false).unwrap();
        let large = grad_noise_study(&net, &data, &[GradMode::Exact], 30, 32, 2, false).unwrap();
        assert!(large.layers[0].median_std() < small.layers[0].median_std());
    }

    #[test]
    fn csv_has_four_statistics_per_layer_and_mode() {
        let (net, data) = setup();
        let modes = [GradMode::Exact, GradMode::Multi { r: 4 }];
        let rep = grad_noise_study(&net, &data, &modes, 3, 4, 0, false).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.starts_with("layer,mode,r,batch,minibatches,statistic,value\n"));
        assert!(grad_noise_study(&net, &data, &modes, 1, 4, 0, false).is_err());
    }
}
