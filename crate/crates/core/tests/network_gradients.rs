//! Probed conv layers inside a network give unbiased weight gradients.

use tracegrad::nn::{Dims, GradMode, LayerSpec, Network, NetworkSpec, StepContext};
use tracegrad::rng::{Domain, SeqRng};
use tracegrad::{ChannelTensor, ImageShape};

fn spec() -> NetworkSpec {
    use LayerSpec::*;
    NetworkSpec::new(
        "two-conv",
        Dims::new(1, 6, 6),
        vec![
            Conv { kernel: 3, c_in: 1, c_out: 3, bias: true, mode: GradMode::Exact, stride: 1 },
            Relu,
            Conv { kernel: 3, c_in: 3, c_out: 2, bias: true, mode: GradMode::Exact, stride: 1 },
            Relu,
            Flatten,
            Dense { inputs: 72, outputs: 3, bias: true },
            LogSoftmax,
        ],
    )
}

fn batch() -> (ChannelTensor, Vec<usize>) {
    let mut rng = SeqRng::from_u64(40, Domain::Instance);
    let x = ChannelTensor::from_fn(ImageShape::square(6).unwrap(), 1, 4, |_, _, _| rng.normal()).unwrap();
    (x, vec![0, 2, 1, 2])
}

/// Largest |mean - exact| / SE over every conv weight after `samples` steps.
fn max_z(mode: GradMode, samples: u64) -> f64 {
    let mut net = Network::build(&spec(), 3).unwrap();
    let (x, y) = batch();
    let (_, exact, _) = net.loss_and_grad(&x, &y, &StepContext::new(0, 0)).unwrap();
    let exact: Vec<Vec<f64>> = exact.conv_weights(&net).iter().map(|(_, g)| g.to_vec()).collect();
    net.set_conv_mode(&mode).unwrap();
    let mut sum: Vec<Vec<f64>> = exact.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut sq = sum.clone();
    for it in 0..samples {
        let (_, g, _) = net.loss_and_grad(&x, &y, &StepContext::new(11, it)).unwrap();
        for (k, (_, w)) in g.conv_weights(&net).into_iter().enumerate() {
            for (i, v) in w.iter().enumerate() {
                sum[k][i] += v;
                sq[k][i] += v * v;
            }
        }
    }
    let n = samples as f64;
    let mut worst: f64 = 0.0;
    for k in 0..exact.len() {
        for i in 0..exact[k].len() {
            let mean = sum[k][i] / n;
            let se = ((sq[k][i] / n - mean * mean) * n / (n - 1.0)).max(0.0).sqrt() / n.sqrt();
            if se > 0.0 {
                worst = worst.max((mean - exact[k][i]).abs() / se);
            } else {
                assert_eq!(mean, exact[k][i]);
            }
        }
    }
    worst
}

#[test]
fn multi_ortho_network_gradient_is_unbiased() {
    let z = max_z(GradMode::MultiOrtho { r: 8, probs: Some(vec![0.5]) }, 4000);
    assert!(z < 4.5, "max z {z}");
}

#[test]
fn independent_network_gradient_is_unbiased() {
    let z = max_z(GradMode::Indep { r: 4 }, 4000);
    assert!(z < 4.5, "max z {z}");
}

#[test]
fn same_step_replays_same_gradient() {
    let mut net = Network::build(&spec(), 3).unwrap();
    net.set_conv_mode(&GradMode::Multi { r: 5 }).unwrap();
    let (x, y) = batch();
    let ctx = StepContext::new(2, 17);
    let a = net.loss_and_grad(&x, &y, &ctx).unwrap().1;
    let b = net.loss_and_grad(&x, &y, &ctx).unwrap().1;
    let c = net.loss_and_grad(&x, &y, &StepContext::new(2, 18)).unwrap().1;
    assert_eq!(a, b);
    assert_ne!(a, c);
}
