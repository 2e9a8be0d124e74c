use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracegrad::gradcheck::ConvInstance;
use tracegrad::lowmem::{backward_weights, forward_compressed, LowMemConvConfig};
use tracegrad::{conv_forward, grad_weights_exact, ChannelTensor, ProbeSeed, Scalar};

use crate::common::{csv_bytes, parse_grid, usage, ModeKind, Run};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PerfBenchArgs {
    #[arg(long, default_value = "16,32")]
    pub side: String,
    #[arg(long, default_value = "8")]
    pub batch: String,
    /// Input and output channels.
    #[arg(long, default_value = "4,16")]
    pub channels: String,
    #[arg(long, default_value = "16,64")]
    pub r: String,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[arg(long, value_enum, default_value = "multi-ortho")]
    pub mode: ModeKind,
}

/// Everything but the timings; identical across re-runs.
#[derive(Serialize)]
struct Row {
    side: usize,
    batch: usize,
    channels: usize,
    r: usize,
    precision: &'static str,
    mode: &'static str,
    exact_stored: u64,
    probed_stored: u64,
    exact_checksum: String,
    probed_checksum: String,
}

#[derive(Serialize)]
struct Timing {
    side: usize,
    batch: usize,
    channels: usize,
    r: usize,
    precision: &'static str,
    exact_median_us: f64,
    probed_median_us: f64,
    speedup: f64,
}

fn median_us<F: FnMut() -> anyhow::Result<()>>(warmup: usize, reps: usize, mut f: F) -> anyhow::Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e6);
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

fn checksum<T: Scalar>(v: &[T]) -> String {
    let s: f64 = v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum();
    format!("{s:e}")
}

struct Case {
    side: usize,
    batch: usize,
    channels: usize,
    r: usize,
}

fn bench<T: Scalar>(a: &PerfBenchArgs, c: &Case, seed: u64) -> anyhow::Result<(Row, Timing)> {
    let inst = ConvInstance::random(c.side, c.channels, c.channels, a.kernel, c.batch, seed)?;
    let x: ChannelTensor<T> = inst.x.cast();
    let dy: ChannelTensor<T> = inst.dy.cast();
    let w = inst.weights.cast::<T>();
    let mode = a.mode.probe_mode(c.channels, None)?.expect("probed mode");
    let cfg = LowMemConvConfig::new(c.r, mode.clone(), w.clone())?;
    let ps = ProbeSeed::new(seed, 0);
    let exact_grad = grad_weights_exact(&x, &dy, w.offset_map())?;
    let (_, ctx) = forward_compressed(&x, &cfg, ps)?;
    let probed_grad = backward_weights(&ctx, &dy, &cfg)?;
    let exact_us = median_us(a.warmup, a.reps, || {
        let _y = conv_forward(&x, &w)?;
        std::hint::black_box(grad_weights_exact(&x, &dy, w.offset_map())?);
        Ok(())
    })?;
    let probed_us = median_us(a.warmup, a.reps, || {
        let (_y, ctx) = forward_compressed(&x, &cfg, ps)?;
        std::hint::black_box(backward_weights(&ctx, &dy, &cfg)?);
        Ok(())
    })?;
    let precision = if std::mem::size_of::<T>() == 4 { "f32" } else { "f64" };
    Ok((
        Row {
            side: c.side,
            batch: c.batch,
            channels: c.channels,
            r: c.r,
            precision,
            mode: mode.name(),
            exact_stored: x.len() as u64,
            probed_stored: ctx.stored_scalars() as u64,
            exact_checksum: checksum(&exact_grad.values),
            probed_checksum: checksum(&probed_grad.values),
        },
        Timing {
            side: c.side,
            batch: c.batch,
            channels: c.channels,
            r: c.r,
            precision,
            exact_median_us: exact_us,
            probed_median_us: probed_us,
            speedup: exact_us / probed_us,
        },
    ))
}

pub fn run(a: &mut PerfBenchArgs, seed: u64) -> anyhow::Result<Run> {
    if a.reps == 0 {
        return usage("--reps must be positive");
    }
    if a.mode == ModeKind::Exact {
        return usage("--mode must be a probed mode");
    }
    let (sides, batches, chans, rs) = (parse_grid(&a.side)?, parse_grid(&a.batch)?, parse_grid(&a.channels)?, parse_grid(&a.r)?);
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut run = Run::new();
    for &side in &sides {
        for &batch in &batches {
            for &channels in &chans {
                for &r in &rs {
                    let case = Case { side, batch, channels, r };
                    let (row, t) = match a.precision {
                        Precision::F32 => bench::<f32>(a, &case, seed)?,
                        Precision::F64 => bench::<f64>(a, &case, seed)?,
                    };
                    run.say(format!(
                        "N={}x{side} B={batch} C={channels} r={r}: exact {:.0} us, probed {:.0} us",
                        side, t.exact_median_us, t.probed_median_us
                    ));
                    rows.push(row);
                    timings.push(t);
                }
            }
        }
    }
    run.file("perf_bench.csv", csv_bytes(rows)?);
    // Wall-clock numbers differ between runs, so they live in their own file.
    run.file("perf_timings.csv", csv_bytes(timings)?);
    Ok(run)
}
