//! Static activation-memory accounting for a network spec.
//!
//! Only activations kept for the backward pass are counted: no weights,
//! optimizer state or workspace buffers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowmem::{memory_footprint, LayerDims, ProbeMode, Storage};
use crate::nn::spec::{Dims, LayerSpec, NetworkSpec};

pub const REPORT_NOTE: &str = "activation storage only; weights, optimizer state and workspace excluded";

/// What non-conv layers are charged for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// What this crate's network stores: u8 argmax for max pooling, a seed for dropout.
    #[default]
    Native,
    /// Pooling keeps its input and output, dropout keeps its mask.
    Nnlib,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub batch: usize,
    pub r: usize,
    pub element_bytes: usize,
    pub convention: Convention,
    pub mode: ProbeMode,
}

impl AuditConfig {
    pub fn new(batch: usize, r: usize) -> Self {
        Self { batch, r, element_bytes: 4, convention: Convention::Native, mode: ProbeMode::Multi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRow {
    pub layer: usize,
    pub kind: String,
    pub input: String,
    pub conventional: u64,
    pub probed: u64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub network: String,
    pub element_bytes: usize,
    pub rows: Vec<MemoryRow>,
    pub total_conventional: u64,
    pub total_probed: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 { 1.0 } else { f64::INFINITY }
    } else {
        a as f64 / b as f64
    }
}

impl MemoryReport {
    pub fn factor(&self) -> f64 {
        ratio(self.total_conventional, self.total_probed)
    }

    pub fn total_bytes(&self) -> (u64, u64) {
        let e = self.element_bytes as u64;
        (self.total_conventional * e, self.total_probed * e)
    }

    /// Rows followed by a `total` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "kind", "input", "conventional", "probed", "factor"])?;
        for r in &self.rows {
            out.write_record([
                r.layer.to_string(),
                r.kind.clone(),
                r.input.clone(),
                r.conventional.to_string(),
                r.probed.to_string(),
                format!("{:.6}", r.factor),
            ])?;
        }
        out.write_record([
            "total".to_string(),
            String::new(),
            String::new(),
            self.total_conventional.to_string(),
            self.total_probed.to_string(),
            format!("{:.6}", self.factor()),
        ])?;
        out.flush()?;
        Ok(())
    }
}

/// Bits charged as whole bytes, then as whole scalars.
fn bits_as_scalars(bits: u64, element_bytes: usize) -> u64 {
    bits.div_ceil(8).div_ceil(element_bytes as u64)
}

/// Per-layer activation storage with every conv exact versus every conv probed at `r`.
pub fn audit(spec: &NetworkSpec, cfg: &AuditConfig) -> Result<MemoryReport> {
    if cfg.batch == 0 || cfg.r == 0 || cfg.element_bytes == 0 {
        return Err(Error::InvalidArgument("batch, r and element_bytes must be positive".into()));
    }
    let dims = spec.layer_dims()?;
    let b = cfg.batch as u64;
    let len = |d: Dims| d.len() as u64 * b;
    let mut rows = Vec::with_capacity(dims.len());
    for (idx, (entry, &(din, dout))) in spec.layers.iter().zip(&dims).enumerate() {
        let after_conv = idx > 0 && matches!(spec.layers[idx - 1].layer, LayerSpec::Conv { .. });
        let (conventional, probed) = match &entry.layer {
            LayerSpec::Conv { c_in, c_out, .. } => {
                let ld = LayerDims { pixels: din.pixels(), c_in: *c_in, c_out: *c_out, batch: cfg.batch };
                let exact = memory_footprint(&ld, &Storage::Exact);
                let probed = memory_footprint(&ld, &Storage::Probed { r: cfg.r, mode: cfg.mode.clone() });
                (exact.stored, probed.stored)
            }
            LayerSpec::Relu => {
                let full = len(dout);
                (full, if after_conv { bits_as_scalars(full, cfg.element_bytes) } else { full })
            }
            LayerSpec::Maxpool { .. } | LayerSpec::Avgpool { .. } => {
                let s = match (cfg.convention, &entry.layer) {
                    (Convention::Nnlib, _) => len(din) + len(dout),
                    (Convention::Native, LayerSpec::Maxpool { .. }) => bits_as_scalars(8 * len(dout), cfg.element_bytes),
                    _ => 0,
                };
                (s, s)
            }
            LayerSpec::Flatten => (0, 0),
            LayerSpec::Dense { .. } => (len(din), len(din)),
            LayerSpec::LogSoftmax => (len(dout), len(dout)),
            LayerSpec::Dropout { .. } => {
                let s = if cfg.convention == Convention::Nnlib { len(dout) } else { 0 };
                (s, s)
            }
        };
        rows.push(MemoryRow {
            layer: idx,
            kind: entry.layer.kind().to_string(),
            input: din.to_string(),
            conventional,
            probed,
            factor: ratio(conventional, probed),
        });
    }
    let total_conventional = rows.iter().map(|r| r.conventional).sum();
    let total_probed = rows.iter().map(|r| r.probed).sum();
    Ok(MemoryReport {
        network: spec.name.clone(),
        element_bytes: cfg.element_bytes,
        rows,
        total_conventional,
        total_probed,
    })
}
