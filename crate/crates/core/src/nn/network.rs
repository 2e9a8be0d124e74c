//! Layer stack with forward, backward and activation bookkeeping.

use nalgebra::{DMatrix, DMatrixView};

use crate::conv::{conv_forward, grad_bias, grad_input_exact, grad_weights_exact, ConvWeights, KernelOffsetMap};
use crate::error::{Error, Result};
use crate::lowmem::{backward_weights, forward_compressed, CompressedActivation, LowMemConvConfig, ProbeMode};
use crate::nn::spec::{Dims, GradMode, LayerSpec, NetworkSpec};
use crate::rng::{CounterStream, Domain, ProbeSeed, SeqRng};
use crate::tensor::{ChannelTensor, ImageShape};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { weights: ConvWeights, mode: GradMode, probe: Option<(usize, ProbeMode)> },
    Relu,
    MaxPool { size: usize },
    AvgPool { size: usize },
    Flatten,
    Dense { w: DMatrix<f64>, b: Option<Vec<f64>> },
    LogSoftmax,
    Dropout { p: f64 },
}

/// Per-step randomness: probe seeds come from `(seed, layer, iteration)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub iteration: u64,
    pub dropout: bool,
}

impl StepContext {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration, dropout: false }
    }
}

/// What a layer keeps from its forward pass.
#[derive(Clone, Debug)]
pub enum Saved {
    Input(ChannelTensor),
    Compressed(CompressedActivation),
    Output(ChannelTensor),
    Signs { bits: Vec<u64>, len: usize },
    Argmax(Vec<u8>),
    DropMask(ProbeSeed),
    Nothing,
}

/// Stored state of one layer, in scalars and in bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stored {
    pub scalars: u64,
    pub bits: u64,
}

impl Saved {
    pub fn stored(&self) -> Stored {
        match self {
            Saved::Input(t) | Saved::Output(t) => Stored { scalars: t.len() as u64, bits: 0 },
            Saved::Compressed(c) => Stored { scalars: c.stored_scalars() as u64, bits: 0 },
            Saved::Signs { len, .. } => Stored { scalars: 0, bits: *len as u64 },
            Saved::Argmax(v) => Stored { scalars: 0, bits: 8 * v.len() as u64 },
            Saved::DropMask(_) | Saved::Nothing => Stored::default(),
        }
    }
}

/// Forward record used by the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub saved: Vec<Saved>,
    pub batch: usize,
}

impl Tape {
    /// Scalars kept by conv layers.
    pub fn conv_scalars(&self, net: &Network) -> u64 {
        net.layers
            .iter()
            .zip(&self.saved)
            .filter(|(l, _)| matches!(l, Layer::Conv { .. }))
            .map(|(_, s)| s.stored().scalars)
            .sum()
    }

    /// Bits kept as ReLU signs.
    pub fn sign_bits(&self) -> u64 {
        self.saved.iter().filter(|s| matches!(s, Saved::Signs { .. })).map(|s| s.stored().bits).sum()
    }

    pub fn total(&self) -> Stored {
        self.saved.iter().map(Saved::stored).fold(Stored::default(), |a, b| Stored {
            scalars: a.scalars + b.scalars,
            bits: a.bits + b.bits,
        })
    }
}

/// Gradient of one parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

/// One entry per layer; `None` for layers without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Option<ParamGrad>>);

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in self.0.iter().flatten() {
            out.push(&g.w[..]);
            if let Some(b) = &g.b {
                out.push(&b[..]);
            }
        }
        out
    }

    /// Conv weight gradients as `(layer index, values)`.
    pub fn conv_weights<'a>(&'a self, net: &Network) -> Vec<(usize, &'a [f64])> {
        net.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .filter_map(|(i, _)| self.0[i].as_ref().map(|g| (i, &g.w[..])))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    dims: Vec<(Dims, Dims)>,
}

fn image_shape(d: Dims) -> Result<ImageShape> {
    ImageShape::new(d.height, d.width)
}

impl Network {
    /// Network with He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, |idx, fan_in, len| {
            let mut rng = SeqRng::new(ProbeSeed::new(seed, idx as u64), Domain::Init);
            let std = (2.0 / fan_in as f64).sqrt();
            (0..len).map(|_| std * rng.normal()).collect()
        })
    }

    /// Network with every parameter zero.
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        Self::build_with(spec, |_, _, len| vec![0.0; len])
    }

    fn build_with(spec: &NetworkSpec, mut init: impl FnMut(usize, usize, usize) -> Vec<f64>) -> Result<Self> {
        if spec.shape_only {
            return Err(Error::Spec(format!("{} is a shape-only spec", spec.name)));
        }
        let dims = spec.layer_dims()?;
        let mut layers = Vec::with_capacity(dims.len());
        for (idx, entry) in spec.layers.iter().enumerate() {
            layers.push(match &entry.layer {
                LayerSpec::Conv { kernel, c_in, c_out, bias, mode, .. } => {
                    let map = KernelOffsetMap::new(*kernel)?;
                    let n_w = map.len();
                    let mut w = ConvWeights::from_vec(*c_in, *c_out, map, init(idx, c_in * n_w, c_in * c_out * n_w))?;
                    if *bias {
                        w = w.with_bias(vec![0.0; *c_out])?;
                    }
                    let probe = mode.probe_mode(*c_in).map_err(|e| Error::Spec(format!("layer {idx}: {e}")))?;
                    Layer::Conv { weights: w, mode: mode.clone(), probe }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool { size } => Layer::MaxPool { size: *size },
                LayerSpec::Avgpool { size } => Layer::AvgPool { size: *size },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let w = DMatrix::from_vec(*outputs, *inputs, init(idx, *inputs, inputs * outputs));
                    Layer::Dense { w, b: bias.then(|| vec![0.0; *outputs]) }
                }
                LayerSpec::LogSoftmax => Layer::LogSoftmax,
                LayerSpec::Dropout { p } => Layer::Dropout { p: *p },
            });
        }
        Ok(Self { spec: spec.clone(), layers, dims })
    }

    pub fn input_dims(&self) -> Dims {
        self.spec.input
    }

    pub fn layer_dims(&self) -> &[(Dims, Dims)] {
        &self.dims
    }

    /// Switches the gradient mode of every conv layer.
    pub fn set_conv_mode(&mut self, mode: &GradMode) -> Result<()> {
        for (idx, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv { weights, mode: m, probe } = l {
                *probe = mode.probe_mode(weights.c_in()).map_err(|e| Error::Spec(format!("layer {idx}: {e}")))?;
                *m = mode.clone();
            }
        }
        self.spec = self.spec.with_conv_mode(mode);
        Ok(())
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { weights, .. } => {
                    out.push(weights.as_slice());
                    if let Some(b) = weights.bias() {
                        out.push(b);
                    }
                }
                Layer::Dense { w, b } => {
                    out.push(w.as_slice());
                    if let Some(b) = b {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { weights, .. } => {
                    let (w, b) = weights.split_mut();
                    out.push(w);
                    if let Some(b) = b {
                        out.push(b);
                    }
                }
                Layer::Dense { w, b } => {
                    out.push(w.as_mut_slice());
                    if let Some(b) = b {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, x: &ChannelTensor) -> Result<()> {
        let d = self.input_dims();
        if x.channels() != d.channels || x.shape() != image_shape(d)? {
            return Err(Error::Dimension(format!(
                "network expects {d} inputs, got {}x{}x{}",
                x.channels(),
                x.shape().height(),
                x.shape().width()
            )));
        }
        Ok(())
    }

    /// Inference forward pass; nothing is stored and dropout is off.
    pub fn forward(&self, x: &ChannelTensor) -> Result<ChannelTensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = self.layer_forward(idx, layer, cur, None)?.0;
        }
        Ok(cur)
    }

    /// Training forward pass; returns the output and what each layer stored.
    pub fn forward_train(&self, x: &ChannelTensor, ctx: &StepContext) -> Result<(ChannelTensor, Tape)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut saved = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let (next, s) = self.layer_forward(idx, layer, cur, Some(ctx))?;
            saved.push(s);
            cur = next;
        }
        Ok((cur, Tape { saved, batch: x.batch() }))
    }

    fn after_probed_conv(&self, idx: usize) -> bool {
        idx > 0 && matches!(self.layers[idx - 1], Layer::Conv { probe: Some(_), .. })
    }

    fn layer_forward(
        &self,
        idx: usize,
        layer: &Layer,
        x: ChannelTensor,
        ctx: Option<&StepContext>,
    ) -> Result<(ChannelTensor, Saved)> {
        let (_, dout) = self.dims[idx];
        let batch = x.batch();
        let train = ctx.is_some();
        Ok(match layer {
            Layer::Conv { weights, probe, .. } => match (probe, ctx) {
                (Some((r, mode)), Some(ctx)) => {
                    let cfg = LowMemConvConfig::new(*r, mode.clone(), weights.clone())?;
                    let seed = ProbeSeed::for_layer(ctx.seed, idx as u64, ctx.iteration);
                    let (y, c) = forward_compressed(&x, &cfg, seed)?;
                    (y, Saved::Compressed(c))
                }
                _ => {
                    let y = conv_forward(&x, weights)?;
                    (y, if train { Saved::Input(x) } else { Saved::Nothing })
                }
            },
            Layer::Relu => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                let saved = if !train {
                    Saved::Nothing
                } else if self.after_probed_conv(idx) {
                    let mut bits = vec![0u64; y.len().div_ceil(64)];
                    for (k, &v) in y.as_slice().iter().enumerate() {
                        if v > 0.0 {
                            bits[k / 64] |= 1 << (k % 64);
                        }
                    }
                    Saved::Signs { bits, len: y.len() }
                } else {
                    Saved::Output(y.clone())
                };
                (y, saved)
            }
            Layer::MaxPool { size } => {
                let (y, arg) = maxpool(&x, *size, dout)?;
                (y, if train { Saved::Argmax(arg) } else { Saved::Nothing })
            }
            Layer::AvgPool { size } => (avgpool(&x, *size, dout)?, Saved::Nothing),
            Layer::Flatten => {
                let y = ChannelTensor::from_vec(image_shape(dout)?, dout.channels, batch, x.into_vec())?;
                (y, Saved::Nothing)
            }
            Layer::Dense { w, b } => {
                let xin = DMatrixView::from_slice(x.as_slice(), w.ncols(), batch);
                let mut y = w * xin;
                if let Some(b) = b {
                    for mut col in y.column_iter_mut() {
                        for (v, bi) in col.iter_mut().zip(b) {
                            *v += bi;
                        }
                    }
                }
                let y = ChannelTensor::from_vec(image_shape(dout)?, dout.channels, batch, y.as_slice().to_vec())?;
                (y, if train { Saved::Input(x) } else { Saved::Nothing })
            }
            Layer::LogSoftmax => {
                let y = log_softmax(&x);
                (y.clone(), if train { Saved::Output(y) } else { Saved::Nothing })
            }
            Layer::Dropout { p } => match ctx {
                Some(ctx) if ctx.dropout && *p > 0.0 => {
                    let seed = ProbeSeed::for_layer(ctx.seed, idx as u64, ctx.iteration);
                    let y = apply_dropout(&x, *p, seed);
                    (y, Saved::DropMask(seed))
                }
                _ => (x, Saved::Nothing),
            },
        })
    }

    /// Backward pass from `dout` (gradient of the loss with respect to the output).
    pub fn backward(&self, tape: &Tape, dout: ChannelTensor) -> Result<Gradients> {
        if tape.saved.len() != self.layers.len() {
            return Err(Error::Context("tape was recorded by a different network".into()));
        }
        let mut grads = vec![None; self.layers.len()];
        let mut dy = dout;
        for idx in (0..self.layers.len()).rev() {
            let need_dx = idx > 0;
            let (din, _) = self.dims[idx];
            let batch = tape.batch;
            let saved = &tape.saved[idx];
            dy = match (&self.layers[idx], saved) {
                (Layer::Conv { weights, .. }, Saved::Input(x)) => {
                    let gw = grad_weights_exact(x, &dy, weights.offset_map())?;
                    grads[idx] = Some(ParamGrad { w: gw.values, b: weights.bias().map(|_| grad_bias(&dy)) });
                    if need_dx { grad_input_exact(&dy, weights)? } else { dy }
                }
                (Layer::Conv { weights, probe: Some((r, mode)), .. }, Saved::Compressed(c)) => {
                    let cfg = LowMemConvConfig::new(*r, mode.clone(), weights.clone())?;
                    let gw = backward_weights(c, &dy, &cfg)?;
                    grads[idx] = Some(ParamGrad { w: gw.values, b: weights.bias().map(|_| grad_bias(&dy)) });
                    if need_dx { grad_input_exact(&dy, weights)? } else { dy }
                }
                (Layer::Relu, Saved::Output(y)) => {
                    let mut d = dy;
                    for (g, &v) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    d
                }
                (Layer::Relu, Saved::Signs { bits, .. }) => {
                    let mut d = dy;
                    for (k, g) in d.as_mut_slice().iter_mut().enumerate() {
                        if bits[k / 64] >> (k % 64) & 1 == 0 {
                            *g = 0.0;
                        }
                    }
                    d
                }
                (Layer::MaxPool { size }, Saved::Argmax(arg)) => maxpool_backward(&dy, arg, *size, din)?,
                (Layer::AvgPool { size }, Saved::Nothing) => avgpool_backward(&dy, *size, din)?,
                (Layer::Flatten, Saved::Nothing) => {
                    ChannelTensor::from_vec(image_shape(din)?, din.channels, batch, dy.into_vec())?
                }
                (Layer::Dense { w, b }, Saved::Input(x)) => {
                    let xin = DMatrixView::from_slice(x.as_slice(), w.ncols(), batch);
                    let d = DMatrixView::from_slice(dy.as_slice(), w.nrows(), batch);
                    let gw = d * xin.transpose();
                    let gb = b.as_ref().map(|_| d.column_sum().as_slice().to_vec());
                    grads[idx] = Some(ParamGrad { w: gw.as_slice().to_vec(), b: gb });
                    let dx = w.transpose() * d;
                    ChannelTensor::from_vec(image_shape(din)?, din.channels, batch, dx.as_slice().to_vec())?
                }
                (Layer::LogSoftmax, Saved::Output(y)) => log_softmax_backward(&dy, y),
                (Layer::Dropout { p }, Saved::DropMask(seed)) => apply_dropout(&dy, *p, *seed),
                (Layer::Dropout { .. }, Saved::Nothing) => dy,
                _ => return Err(Error::Context(format!("layer {idx}: stored state does not match the layer"))),
            };
        }
        Ok(Gradients(grads))
    }

    /// Mean cross-entropy and its gradients. When the network does not end
    /// in `log_softmax` its output is treated as logits.
    pub fn loss_and_grad(
        &self,
        x: &ChannelTensor,
        labels: &[usize],
        ctx: &StepContext,
    ) -> Result<(f64, Gradients, Tape)> {
        let (out, tape) = self.forward_train(x, ctx)?;
        let (loss, dout) = self.loss(&out, labels)?;
        let grads = self.backward(&tape, dout)?;
        Ok((loss, grads, tape))
    }

    fn ends_in_log_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::LogSoftmax))
    }

    /// Loss and its gradient with respect to the network output.
    pub fn loss(&self, out: &ChannelTensor, labels: &[usize]) -> Result<(f64, ChannelTensor)> {
        let batch = out.batch();
        let k = out.channels() * out.pixels();
        if labels.len() != batch {
            return Err(Error::Dimension(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Dimension(format!("label {l} outside {k} outputs")));
        }
        let logp = if self.ends_in_log_softmax() { out.clone() } else { log_softmax(out) };
        let inv_b = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut d = out.map(|_| 0.0);
        for (b, &label) in labels.iter().enumerate() {
            let lp = logp.column(b);
            loss -= lp[label];
            let g = d.column_mut(b);
            if self.ends_in_log_softmax() {
                g[label] = -inv_b;
            } else {
                for (gi, &l) in g.iter_mut().zip(lp) {
                    *gi = l.exp() * inv_b;
                }
                g[label] -= inv_b;
            }
        }
        Ok((loss * inv_b, d))
    }
}

fn log_softmax(x: &ChannelTensor) -> ChannelTensor {
    let mut y = x.clone();
    for b in 0..x.batch() {
        let col = y.column_mut(b);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        col.iter_mut().for_each(|v| *v -= lse);
    }
    y
}

fn log_softmax_backward(dy: &ChannelTensor, y: &ChannelTensor) -> ChannelTensor {
    let mut dx = dy.clone();
    for b in 0..dy.batch() {
        let s: f64 = dy.column(b).iter().sum();
        for (g, &v) in dx.column_mut(b).iter_mut().zip(y.column(b)) {
            *g -= v.exp() * s;
        }
    }
    dx
}

fn apply_dropout(x: &ChannelTensor, p: f64, seed: ProbeSeed) -> ChannelTensor {
    let coin = CounterStream::new(seed, Domain::Dropout, 0);
    let scale = 1.0 / (1.0 - p);
    let mut y = x.clone();
    for (k, v) in y.as_mut_slice().iter_mut().enumerate() {
        *v = if coin.uniform(k as u64) < p { 0.0 } else { *v * scale };
    }
    y
}

fn maxpool(x: &ChannelTensor, k: usize, dout: Dims) -> Result<(ChannelTensor, Vec<u8>)> {
    let (w_in, ow) = (x.shape().width(), dout.width);
    let mut y = ChannelTensor::zeros(image_shape(dout)?, dout.channels, x.batch())?;
    let mut arg = vec![0u8; y.len()];
    let mut pos = 0;
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let img = x.image(c, b);
            let out = y.image_mut(c, b);
            for oy in 0..dout.height {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0u8);
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = img[(oy * k + dy) * w_in + ox * k + dx];
                            if v > best.0 {
                                best = (v, (dy * k + dx) as u8);
                            }
                        }
                    }
                    out[oy * ow + ox] = best.0;
                    arg[pos] = best.1;
                    pos += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

fn maxpool_backward(dy: &ChannelTensor, arg: &[u8], k: usize, din: Dims) -> Result<ChannelTensor> {
    let mut dx = ChannelTensor::zeros(image_shape(din)?, din.channels, dy.batch())?;
    let (ow, oh) = (dy.shape().width(), dy.shape().height());
    let mut pos = 0;
    for b in 0..dy.batch() {
        for c in 0..din.channels {
            let g = dy.image(c, b).to_vec();
            let out = dx.image_mut(c, b);
            for oy in 0..oh {
                for ox in 0..ow {
                    let a = arg[pos] as usize;
                    out[(oy * k + a / k) * din.width + ox * k + a % k] += g[oy * ow + ox];
                    pos += 1;
                }
            }
        }
    }
    Ok(dx)
}

fn avgpool(x: &ChannelTensor, k: usize, dout: Dims) -> Result<ChannelTensor> {
    let w_in = x.shape().width();
    let inv = 1.0 / (k * k) as f64;
    let mut y = ChannelTensor::zeros(image_shape(dout)?, dout.channels, x.batch())?;
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let img = x.image(c, b).to_vec();
            let out = y.image_mut(c, b);
            for oy in 0..dout.height {
                for ox in 0..dout.width {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += img[(oy * k + dy) * w_in + ox * k + dx];
                        }
                    }
                    out[oy * dout.width + ox] = s * inv;
                }
            }
        }
    }
    Ok(y)
}

fn avgpool_backward(dy: &ChannelTensor, k: usize, din: Dims) -> Result<ChannelTensor> {
    let inv = 1.0 / (k * k) as f64;
    let mut dx = ChannelTensor::zeros(image_shape(din)?, din.channels, dy.batch())?;
    let (ow, oh) = (dy.shape().width(), dy.shape().height());
    for b in 0..dy.batch() {
        for c in 0..din.channels {
            let g = dy.image(c, b).to_vec();
            let out = dx.image_mut(c, b);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ddy in 0..k {
                        for ddx in 0..k {
                            out[(oy * k + ddy) * din.width + ox * k + ddx] += g[oy * ow + ox] * inv;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec::*;

    fn tiny(mode: GradMode, tail: Vec<LayerSpec>) -> NetworkSpec {
        let mut layers = vec![Conv { kernel: 3, c_in: 1, c_out: 2, bias: true, mode, stride: 1 }, Relu];
        layers.extend(tail);
        NetworkSpec::new("tiny", Dims::new(1, 4, 4), layers)
    }

    fn input(batch: usize, seed: u64) -> ChannelTensor {
        let mut rng = SeqRng::from_u64(seed, Domain::Instance);
        ChannelTensor::from_fn(ImageShape::square(4).unwrap(), 1, batch, |_, _, _| rng.normal()).unwrap()
    }

    #[test]
    fn zero_dense_net_has_uniform_loss() {
        let spec = NetworkSpec::new(
            "d",
            Dims::new(1, 2, 2),
            vec![Flatten, Dense { inputs: 4, outputs: 10, bias: true }],
        );
        let net = Network::zeroed(&spec).unwrap();
        let x = ChannelTensor::from_fn(ImageShape::square(2).unwrap(), 1, 3, |_, p, b| (p + b) as f64).unwrap();
        let (loss, _, _) = net.loss_and_grad(&x, &[0, 3, 9], &StepContext::new(0, 0)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probed_forward_matches_exact_forward() {
        let tail = vec![Maxpool { size: 2 }, Flatten, Dense { inputs: 8, outputs: 3, bias: true }, LogSoftmax];
        let exact = Network::build(&tiny(GradMode::Exact, tail.clone()), 5).unwrap();
        let probed = Network::build(&tiny(GradMode::MultiOrtho { r: 4, probs: None }, tail), 5).unwrap();
        let x = input(3, 1);
        let ctx = StepContext::new(9, 2);
        assert_eq!(exact.forward_train(&x, &ctx).unwrap().0, probed.forward_train(&x, &ctx).unwrap().0);
        assert_eq!(exact.forward(&x).unwrap(), probed.forward(&x).unwrap());
    }

    #[test]
    fn conv_flatten_dense_matches_matrix_pipeline() {
        let spec = NetworkSpec::new(
            "cfd",
            Dims::new(1, 4, 4),
            vec![
                Conv { kernel: 3, c_in: 1, c_out: 2, bias: false, mode: GradMode::Exact, stride: 1 },
                Flatten,
                Dense { inputs: 32, outputs: 3, bias: false },
            ],
        );
        let net = Network::build(&spec, 3).unwrap();
        let Layer::Conv { weights, .. } = &net.layers[0] else { unreachable!() };
        let Layer::Dense { w, .. } = &net.layers[2] else { unreachable!() };
        // Conv as a 32x16 matrix of shift permutations.
        let shape = ImageShape::square(4).unwrap();
        let mut conv = DMatrix::zeros(32, 16);
        for m in 0..2 {
            for (i, &off) in weights.offset_map().offsets().iter().enumerate() {
                let p = crate::tensor::dense_shift_matrix(shape, off).unwrap();
                let mut blk = conv.view_mut((m * 16, 0), (16, 16));
                blk += p * weights.get(m, 0, i);
            }
        }
        let x = input(2, 4);
        let y = net.forward(&x).unwrap();
        for b in 0..2 {
            let xv = nalgebra::DVector::from_column_slice(x.column(b));
            let want = w * (&conv * xv);
            for k in 0..3 {
                assert!((y.column(b)[k] - want[k]).abs() < 1e-12);
            }
        }
    }

    fn flat_params(net: &Network) -> Vec<f64> {
        net.params().concat()
    }

    fn set_param(net: &mut Network, k: usize, v: f64) {
        let mut k = k;
        for p in net.params_mut() {
            if k < p.len() {
                p[k] = v;
                return;
            }
            k -= p.len();
        }
    }

    #[test]
    fn exact_gradients_match_finite_differences() {
        let tail = vec![Avgpool { size: 2 }, Flatten, Dense { inputs: 8, outputs: 3, bias: true }, LogSoftmax];
        let mut net = Network::build(&tiny(GradMode::Exact, tail), 11).unwrap();
        let x = input(2, 7);
        let labels = [2, 0];
        let ctx = StepContext::new(0, 0);
        let (_, grads, _) = net.loss_and_grad(&x, &labels, &ctx).unwrap();
        let g = grads.slices().concat();
        let theta = flat_params(&net);
        let h = 1e-5;
        for k in 0..theta.len() {
            set_param(&mut net, k, theta[k] + h);
            let lp = net.loss(&net.forward(&x).unwrap(), &labels).unwrap().0;
            set_param(&mut net, k, theta[k] - h);
            let lm = net.loss(&net.forward(&x).unwrap(), &labels).unwrap().0;
            set_param(&mut net, k, theta[k]);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = ChannelTensor::from_vec(ImageShape::square(2).unwrap(), 1, 1, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool(&x, 2, Dims::new(1, 1, 1)).unwrap();
        assert_eq!((y.as_slice(), arg.as_slice()), (&[5.0][..], &[1u8][..]));
        let dy = ChannelTensor::from_vec(ImageShape::square(1).unwrap(), 1, 1, vec![2.0]).unwrap();
        let dx = maxpool_backward(&dy, &arg, 2, Dims::new(1, 2, 2)).unwrap();
        assert_eq!(dx.as_slice(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn probed_storage_is_r_b_plus_sign_bits() {
        let tail = vec![Flatten, Dense { inputs: 32, outputs: 2, bias: false }];
        let exact = Network::build(&tiny(GradMode::Exact, tail.clone()), 1).unwrap();
        let probed = Network::build(&tiny(GradMode::Multi { r: 3 }, tail), 1).unwrap();
        let x = input(5, 2);
        let ctx = StepContext::new(1, 0);
        let (_, te) = exact.forward_train(&x, &ctx).unwrap();
        let (_, tp) = probed.forward_train(&x, &ctx).unwrap();
        assert_eq!(te.conv_scalars(&exact), 16 * 5);
        assert_eq!(tp.conv_scalars(&probed), 3 * 5);
        assert_eq!(tp.sign_bits(), 2 * 16 * 5);
        assert_eq!(te.sign_bits(), 0);
    }

    #[test]
    fn dropout_is_replayed_in_backward() {
        let spec = NetworkSpec::new(
            "drop",
            Dims::new(1, 2, 2),
            vec![Flatten, Dropout { p: 0.5 }, Dense { inputs: 4, outputs: 2, bias: false }],
        );
        let net = Network::build(&spec, 2).unwrap();
        let x = ChannelTensor::from_fn(ImageShape::square(2).unwrap(), 1, 4, |_, p, b| 1.0 + (p * b) as f64).unwrap();
        let ctx = StepContext { seed: 3, iteration: 1, dropout: true };
        let (out, tape) = net.forward_train(&x, &ctx).unwrap();
        let dout = out.map(|_| 1.0);
        let g1 = net.backward(&tape, dout.clone()).unwrap();
        assert_eq!(g1, net.backward(&tape, dout).unwrap());
        let Saved::DropMask(_) = &tape.saved[1] else { panic!("dropout not recorded") };
    }
}
