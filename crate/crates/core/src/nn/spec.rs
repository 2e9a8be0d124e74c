//! JSON network descriptions.
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "input": { "channels": 1, "height": 8, "width": 8 },
//!   "layers": [
//!     { "type": "conv", "kernel": 3, "c_in": 1, "c_out": 4, "mode": { "kind": "multi-ortho", "r": 16 } },
//!     { "type": "relu" },
//!     { "type": "maxpool", "size": 2 },
//!     { "type": "flatten" },
//!     { "type": "dense", "in": 64, "out": 2 }
//!   ]
//! }
//! ```
//!
//! Shape-only specs (`"shape_only": true`) describe networks the harness
//! cannot run, for memory accounting only: they may use strided convolutions
//! and may pin a layer's input shape with `"input"` to express branches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowmem::ProbeMode;
use crate::probing::BlockSparsity;

/// Channels and spatial size of an activation; flat vectors are `(features, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn flat(features: usize) -> Self {
        Self { channels: features, height: 1, width: 1 }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Gradient mode of a conv layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    Exact,
    Indep {
        r: usize,
    },
    Multi {
        r: usize,
    },
    MultiOrtho {
        r: usize,
        /// One keep probability for every channel, or one per channel.
        /// Unset means [`BlockSparsity::for_training`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
    },
}

impl GradMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradMode::Exact => "true",
            GradMode::Indep { .. } => "indep",
            GradMode::Multi { .. } => "multi",
            GradMode::MultiOrtho { .. } => "multi-ortho",
        }
    }

    pub fn is_probed(&self) -> bool {
        !matches!(self, GradMode::Exact)
    }

    pub fn r(&self) -> Option<usize> {
        match self {
            GradMode::Exact => None,
            GradMode::Indep { r } | GradMode::Multi { r } | GradMode::MultiOrtho { r, .. } => Some(*r),
        }
    }

    /// Same mode with a different probe count.
    pub fn with_r(&self, r: usize) -> Self {
        match self {
            GradMode::Exact => GradMode::Exact,
            GradMode::Indep { .. } => GradMode::Indep { r },
            GradMode::Multi { .. } => GradMode::Multi { r },
            GradMode::MultiOrtho { probs, .. } => GradMode::MultiOrtho { r, probs: probs.clone() },
        }
    }

    /// Probe count and probing scheme for a layer with `c_in` input channels.
    pub fn probe_mode(&self, c_in: usize) -> Result<Option<(usize, ProbeMode)>> {
        Ok(match self {
            GradMode::Exact => None,
            GradMode::Indep { r } => Some((*r, ProbeMode::Independent)),
            GradMode::Multi { r } => Some((*r, ProbeMode::Multi)),
            GradMode::MultiOrtho { r, probs } => {
                let sp = match probs {
                    Some(p) if p.len() == 1 => BlockSparsity::uniform(c_in, p[0])?,
                    Some(p) => BlockSparsity::new(p.clone())?,
                    None => BlockSparsity::for_training(c_in, *r),
                };
                Some((*r, ProbeMode::MultiOrtho(sp)))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.r() == Some(0) {
            return Err(Error::Spec("probe count r must be at least 1".into()));
        }
        Ok(())
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        c_in: usize,
        c_out: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        mode: GradMode,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
    },
    Relu,
    Maxpool {
        size: usize,
    },
    Avgpool {
        size: usize,
    },
    Flatten,
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
        #[serde(default)]
        bias: bool,
    },
    LogSoftmax,
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LogSoftmax => "log_softmax",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    /// Output dims for a given input, or a spec error.
    pub fn output_dims(&self, d: Dims) -> Result<Dims> {
        let fail = |msg: String| Err(Error::Spec(format!("{} on {d}: {msg}", self.kind())));
        match *self {
            LayerSpec::Conv { kernel, c_in, c_out, stride, .. } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return fail(format!("kernel size {kernel} must be odd"));
                }
                if c_in != d.channels {
                    return fail(format!("expects {c_in} input channels"));
                }
                if c_out == 0 || stride == 0 {
                    return fail("output channels and stride must be positive".into());
                }
                Ok(Dims::new(c_out, d.height.div_ceil(stride), d.width.div_ceil(stride)))
            }
            LayerSpec::Relu => Ok(d),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return fail(format!("drop probability {p} outside [0, 1)"));
                }
                Ok(d)
            }
            LayerSpec::Maxpool { size } | LayerSpec::Avgpool { size } => {
                if size == 0 || size > 16 || d.height < size || d.width < size {
                    return fail(format!("window {size} does not fit"));
                }
                Ok(Dims::new(d.channels, d.height / size, d.width / size))
            }
            LayerSpec::Flatten => Ok(Dims::flat(d.len())),
            LayerSpec::Dense { inputs, outputs, .. } => {
                if !d.is_flat() || d.channels != inputs {
                    return fail(format!("expects a flat input of {inputs} features"));
                }
                if outputs == 0 {
                    return fail("needs at least one output".into());
                }
                Ok(Dims::flat(outputs))
            }
            LayerSpec::LogSoftmax => {
                if !d.is_flat() {
                    return fail("expects a flat input".into());
                }
                Ok(d)
            }
        }
    }
}

/// A layer plus an optional pinned input shape (shape-only specs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub layer: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Dims>,
}

impl From<LayerSpec> for LayerEntry {
    fn from(layer: LayerSpec) -> Self {
        Self { layer, input: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: Dims,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub shape_only: bool,
}

impl NetworkSpec {
    pub fn new(name: &str, input: Dims, layers: Vec<LayerSpec>) -> Self {
        Self { name: name.into(), input, layers: layers.into_iter().map(Into::into).collect(), shape_only: false }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.layer_dims()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Spec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    /// `(input, output)` dims of every layer, validating the chain.
    pub fn layer_dims(&self) -> Result<Vec<(Dims, Dims)>> {
        if self.input.is_empty() {
            return Err(Error::Spec("input dims must be positive".into()));
        }
        let mut d = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, entry) in self.layers.iter().enumerate() {
            if let Some(pinned) = entry.input {
                if !self.shape_only {
                    return Err(Error::Spec(format!("layer {idx}: pinned input shapes need \"shape_only\": true")));
                }
                d = pinned;
            }
            if let LayerSpec::Conv { stride, mode, .. } = &entry.layer {
                if *stride != 1 && !self.shape_only {
                    return Err(Error::Spec(format!("layer {idx}: strided convolution is only allowed in shape-only specs")));
                }
                mode.validate().map_err(|e| Error::Spec(format!("layer {idx}: {e}")))?;
            }
            let next = entry.layer.output_dims(d).map_err(|e| Error::Spec(format!("layer {idx}: {e}")))?;
            out.push((d, next));
            d = next;
        }
        Ok(out)
    }

    pub fn output_dims(&self) -> Result<Dims> {
        Ok(self.layer_dims()?.last().map(|(_, o)| *o).unwrap_or(self.input))
    }

    /// Copy with every conv layer switched to `mode`.
    pub fn with_conv_mode(&self, mode: &GradMode) -> Self {
        let mut spec = self.clone();
        for e in &mut spec.layers {
            if let LayerSpec::Conv { mode: m, .. } = &mut e.layer {
                *m = mode.clone();
            }
        }
        spec
    }

    /// Three 3x3 conv blocks with max pooling and one dense layer, for 28x28 MNIST.
    pub fn mnist_conv3(mode: GradMode) -> Self {
        use LayerSpec::*;
        let conv = |c_in, c_out| Conv { kernel: 3, c_in, c_out, bias: true, mode: mode.clone(), stride: 1 };
        Self::new(
            "mnist_conv3",
            Dims::new(1, 28, 28),
            vec![
                conv(1, 16),
                Relu,
                Maxpool { size: 2 },
                conv(16, 32),
                Relu,
                Maxpool { size: 2 },
                conv(32, 32),
                Relu,
                Maxpool { size: 2 },
                Flatten,
                Dense { inputs: 288, outputs: 10, bias: true },
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv3_shapes() {
        let spec = NetworkSpec::mnist_conv3(GradMode::Exact);
        let dims = spec.layer_dims().unwrap();
        assert_eq!(dims[2].1, Dims::new(16, 14, 14));
        assert_eq!(dims[8].1, Dims::new(32, 3, 3));
        assert_eq!(spec.output_dims().unwrap(), Dims::flat(10));
    }

    #[test]
    fn json_round_trip() {
        let spec = NetworkSpec::mnist_conv3(GradMode::MultiOrtho { r: 16, probs: None });
        assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn broken_chain_rejected() {
        let text = r#"{"name":"bad","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","kernel":3,"c_in":2,"c_out":1}]}"#;
        assert!(matches!(NetworkSpec::from_json(text), Err(Error::Spec(_))));
        let text = r#"{"name":"bad","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","kernel":2,"c_in":1,"c_out":1}]}"#;
        assert!(NetworkSpec::from_json(text).is_err());
        let text = r#"{"name":"bad","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"flatten"},{"type":"dense","in":15,"out":2}]}"#;
        assert!(NetworkSpec::from_json(text).is_err());
    }

    #[test]
    fn pinned_inputs_need_shape_only() {
        let text = r#"{"name":"s","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"relu","input":{"channels":3,"height":2,"width":2}}]}"#;
        assert!(NetworkSpec::from_json(text).is_err());
        let text = r#"{"name":"s","shape_only":true,"input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","kernel":3,"c_in":3,"c_out":2,"stride":2,"input":{"channels":3,"height":5,"width":5}}]}"#;
        let spec = NetworkSpec::from_json(text).unwrap();
        assert_eq!(spec.output_dims().unwrap(), Dims::new(2, 3, 3));
    }
}
