//! Small quantized networks with a hand-written backward pass.
//!
//! Each layer computes `h = q(W) q(a) + b`, an optional correction
//! `gamma * h + beta`, optional batch norm and a nonlinearity. Activation
//! quantizers sit on layer inputs, i.e. after the previous nonlinearity.

mod adam;
mod layer;
pub mod loss;
mod presets;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use adam::Adam;
pub use layer::{BatchNorm, BnMode, Layer, LayerKind, Nonlinearity};
pub use loss::LossKind;
pub use presets::{attach_quantizers, desk_cnn, mlp, QuantPlan};
pub use train::{
    dampening_penalty, evaluate, train_qat, DampeningPenalty, EmaConfig, EpochMetrics, EvalMetrics,
    TrainConfig, TrainOutcome,
};

pub(crate) use layer::channel_dims;

use crate::qc::{apply_correction, correction_backward};
use crate::quant::{integer_code, quantize, quantize_backward, quantize_backward_batched, soft_round, QuantizerState, SoftRoundConfig};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    /// All quantizers bypassed.
    Latent,
    /// Hard rounding everywhere.
    Quantized,
    /// Threshold-based soft rounding on weights and activations (diagnostic only).
    SoftRound(SoftRoundConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub precision: Precision,
    /// Use batch statistics in BN layers instead of the running ones.
    pub bn_train: bool,
}

impl ForwardOptions {
    pub fn eval(precision: Precision) -> Self {
        Self { precision, bn_train: false }
    }

    pub fn train(precision: Precision) -> Self {
        Self { precision, bn_train: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    WeightScale,
    ActScale,
    BnGain,
    BnBias,
    QcGamma,
    QcBeta,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::WeightScale => "w_scale",
            ParamKind::ActScale => "a_scale",
            ParamKind::BnGain => "bn.gain",
            ParamKind::BnBias => "bn.bias",
            ParamKind::QcGamma => "qc.gamma",
            ParamKind::QcBeta => "qc.beta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "w_scale" => ParamKind::WeightScale,
            "a_scale" => ParamKind::ActScale,
            "bn.gain" => ParamKind::BnGain,
            "bn.bias" => ParamKind::BnBias,
            "qc.gamma" => ParamKind::QcGamma,
            "qc.beta" => ParamKind::QcBeta,
            _ => return None,
        })
    }

    pub fn is_scale(self) -> bool {
        matches!(self, ParamKind::WeightScale | ParamKind::ActScale)
    }

    /// Parameters updated by the QAT optimizer (and shadowed by EMA).
    pub fn is_qat_trainable(self) -> bool {
        !matches!(self, ParamKind::QcGamma | ParamKind::QcBeta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn name(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind.as_str())
    }

    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("layers.")?;
        let (idx, kind) = rest.split_once('.')?;
        Some(Self { layer: idx.parse().ok()?, kind: ParamKind::parse(kind)? })
    }
}

/// Gradients in the network's canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    batch_stats: bool,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Tensor,
    input_q: Tensor,
    weight_q: Tensor,
    linear: Tensor,
    bn: Option<BnCache>,
    pre_act: Tensor,
}

/// Intermediate values kept by [`Network::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Shape of one sample (without batch dimension).
    pub input_shape: Vec<usize>,
    pub loss: LossKind,
}

fn fake_quant(t: &Tensor, q: Option<&QuantizerState>, precision: Precision) -> Result<Tensor> {
    match (q, precision) {
        (None, _) | (_, Precision::Latent) => Ok(t.clone()),
        (Some(q), Precision::Quantized) => quantize(t, q),
        (Some(q), Precision::SoftRound(c)) => soft_round(t, q, c),
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        let net = Self { layers, input_shape, loss };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape compatibility of consecutive layers and quantizer layouts.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.batch_shape(1);
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_channels() {
                return Err(Error::dim("Network", format!("layer {i}: bias length mismatch")));
            }
            if let Some(q) = &layer.w_quant {
                q.layout(layer.weight.shape())?;
                if let crate::quant::Granularity::PerChannel { axis } = q.granularity {
                    if axis != 0 {
                        return Err(Error::Argument(format!(
                            "layer {i}: weight quantizer must use the output-channel axis 0"
                        )));
                    }
                }
            }
            if let Some(q) = &layer.a_quant {
                q.layout(&shape)?;
            }
            let next = layer.output_shape(&shape)?;
            if let Some(bn) = &layer.bn {
                if bn.channels() != next[1] {
                    return Err(Error::dim("Network", format!("layer {i}: BN channel mismatch")));
                }
            }
            if let Some(c) = &layer.correction {
                c.check_channels(next[1])?;
            }
            shape = next;
        }
        Ok(())
    }

    fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.input_shape);
        s
    }

    /// Input shape of every layer followed by the output shape, for a batch of `n`.
    pub fn layer_shapes(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.batch_shape(n)];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Per-sample operation count of inference.
    pub fn op_count(&self) -> Result<usize> {
        let shapes = self.layer_shapes(1)?;
        self.layers.iter().zip(&shapes).map(|(l, s)| l.op_count(s)).sum()
    }

    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let id = |kind| ParamId { layer: i, kind };
            out.push((id(ParamKind::Weight), &l.weight));
            out.push((id(ParamKind::Bias), &l.bias));
            if let Some(q) = &l.w_quant {
                out.push((id(ParamKind::WeightScale), &q.scale));
            }
            if let Some(q) = &l.a_quant {
                out.push((id(ParamKind::ActScale), &q.scale));
            }
            if let Some(bn) = &l.bn {
                out.push((id(ParamKind::BnGain), &bn.gain));
                out.push((id(ParamKind::BnBias), &bn.bias));
            }
            if let Some(c) = &l.correction {
                out.push((id(ParamKind::QcGamma), &c.gamma));
                out.push((id(ParamKind::QcBeta), &c.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let id = |kind| ParamId { layer: i, kind };
            out.push((id(ParamKind::Weight), &mut l.weight));
            out.push((id(ParamKind::Bias), &mut l.bias));
            if let Some(q) = &mut l.w_quant {
                out.push((id(ParamKind::WeightScale), &mut q.scale));
            }
            if let Some(q) = &mut l.a_quant {
                out.push((id(ParamKind::ActScale), &mut q.scale));
            }
            if let Some(bn) = &mut l.bn {
                out.push((id(ParamKind::BnGain), &mut bn.gain));
                out.push((id(ParamKind::BnBias), &mut bn.bias));
            }
            if let Some(c) = &mut l.correction {
                out.push((id(ParamKind::QcGamma), &mut c.gamma));
                out.push((id(ParamKind::QcBeta), &mut c.beta));
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params().into_iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for bn in self.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
            bn.mode = mode;
        }
    }

    /// Eval-mode forward pass (BN uses running statistics).
    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        Ok(self.run(x, ForwardOptions::eval(precision), false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, opts: ForwardOptions) -> Result<(Tensor, ForwardCache)> {
        let (out, cache) = self.run(x, opts, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Latent-mode activations at the input of every layer, used to initialize
    /// activation scales.
    pub fn layer_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, cache) = self.run(x, ForwardOptions::eval(Precision::Latent), true)?;
        Ok(cache.expect("cache requested").layers.into_iter().map(|c| c.input).collect())
    }

    fn run(&self, x: &Tensor, opts: ForwardOptions, keep: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!("input {:?} does not match sample shape {:?}", x.shape(), self.input_shape),
            ));
        }
        let mut caches = Vec::new();
        let mut act = x.clone();
        for layer in &self.layers {
            let input_q = fake_quant(&act, layer.a_quant.as_ref(), opts.precision)?;
            let weight_q = fake_quant(&layer.weight, layer.w_quant.as_ref(), opts.precision)?;
            let linear = linear_forward(layer, &input_q, &weight_q)?;
            let corrected = match &layer.correction {
                Some(c) => apply_correction(&linear, c)?,
                None => linear.clone(),
            };
            let (bn_out, bn_cache) = match &layer.bn {
                Some(bn) => {
                    let (y, c) = bn_forward(bn, &corrected, opts.bn_train)?;
                    (y, Some(c))
                }
                None => (corrected, None),
            };
            let out = bn_out.map(|v| layer.nonlinearity.apply(v));
            if keep {
                caches.push(LayerCache {
                    input: act,
                    input_q,
                    weight_q,
                    linear,
                    bn: bn_cache,
                    pre_act: bn_out,
                });
            }
            act = out;
        }
        let cache = keep.then(|| ForwardCache { layers: caches, precision: opts.precision });
        Ok((act, cache))
    }

    /// Gradients of every parameter given `dL/d output`.
    pub fn backward(&self, cache: &ForwardCache, g_output: &Tensor) -> Result<Gradients> {
        if matches!(cache.precision, Precision::SoftRound(_)) {
            return Err(Error::State("soft-rounded forward passes have no backward".into()));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        let quantized = cache.precision == Precision::Quantized;
        let mut per_layer: Vec<Vec<(ParamId, Tensor)>> = Vec::with_capacity(self.layers.len());
        let mut g = g_output.clone();
        for (i, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let id = |kind| ParamId { layer: i, kind };
            let mut grads = Vec::new();
            g.expect_same_shape(&c.pre_act, "backward")?;
            let g_pre = g.zip_map(&c.pre_act, |gv, y| gv * layer.nonlinearity.derivative(y))?;

            let mut bn_grads = None;
            let g_corrected = match (&layer.bn, &c.bn) {
                (Some(bn), Some(bc)) => {
                    let (gh, g_gain, g_bias) = bn_backward(bn, bc, &g_pre)?;
                    bn_grads = Some((g_gain, g_bias));
                    gh
                }
                _ => g_pre,
            };
            let mut qc_grads = None;
            let g_linear = match &layer.correction {
                Some(corr) => {
                    let (gh, gg, gb) = correction_backward(&c.linear, corr, &g_corrected)?;
                    qc_grads = Some((gg, gb));
                    gh
                }
                None => g_corrected,
            };
            let (g_input_q, g_weight_q, g_bias) = linear_backward(layer, &c.input_q, &c.weight_q, &g_linear)?;

            let (g_weight, g_wscale) = match (&layer.w_quant, quantized) {
                (Some(q), true) => {
                    let qg = quantize_backward(&layer.weight, q, &g_weight_q)?;
                    (qg.input, Some(qg.scale))
                }
                (Some(q), false) => (g_weight_q, Some(Tensor::zeros(q.scale.shape().to_vec()))),
                (None, _) => (g_weight_q, None),
            };
            let (g_input, g_ascale) = match (&layer.a_quant, quantized) {
                (Some(q), true) => {
                    let qg = quantize_backward_batched(&c.input, q, &g_input_q)?;
                    (qg.input, Some(qg.scale))
                }
                (Some(q), false) => (g_input_q, Some(Tensor::zeros(q.scale.shape().to_vec()))),
                (None, _) => (g_input_q, None),
            };

            grads.push((id(ParamKind::Weight), g_weight));
            grads.push((id(ParamKind::Bias), g_bias));
            if let Some(t) = g_wscale {
                grads.push((id(ParamKind::WeightScale), t));
            }
            if let Some(t) = g_ascale {
                grads.push((id(ParamKind::ActScale), t));
            }
            if let Some((gg, gb)) = bn_grads {
                grads.push((id(ParamKind::BnGain), gg));
                grads.push((id(ParamKind::BnBias), gb));
            }
            if let Some((gg, gb)) = qc_grads {
                grads.push((id(ParamKind::QcGamma), gg));
                grads.push((id(ParamKind::QcBeta), gb));
            }
            per_layer.push(grads);
            g = g_input;
        }
        per_layer.reverse();
        Ok(Gradients { entries: per_layer.into_iter().flatten().collect() })
    }

    /// Folds the batch statistics of a training forward pass into the running estimates.
    pub fn update_bn_running(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            let (Some(bn), Some(bc)) = (&mut layer.bn, &c.bn) else { continue };
            if !bc.batch_stats {
                continue;
            }
            let (n, _, inner) = channel_dims(c.linear.shape()).expect("validated in forward");
            let m = (n * inner) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = bn.momentum;
            for ch in 0..bn.channels() {
                let rm = &mut bn.running_mean.data_mut()[ch];
                *rm = (1.0 - mom) * *rm + mom * bc.mean[ch];
                let rv = &mut bn.running_var.data_mut()[ch];
                *rv = (1.0 - mom) * *rv + mom * bc.var[ch] * unbias;
            }
        }
    }

    /// Integer codes of every quantized weight tensor, concatenated in layer order.
    pub fn weight_codes(&self) -> Result<Vec<i64>> {
        let mut codes = Vec::new();
        for l in &self.layers {
            if let Some(q) = &l.w_quant {
                codes.extend(integer_code(&l.weight, q)?);
            }
        }
        Ok(codes)
    }

    /// Names and current values of every scale factor.
    pub fn scale_values(&self) -> (Vec<String>, Vec<f64>) {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (id, t) in self.params() {
            if id.kind.is_scale() {
                for (c, &v) in t.data().iter().enumerate() {
                    names.push(if t.len() == 1 { id.name() } else { format!("{}[{c}]", id.name()) });
                    values.push(v);
                }
            }
        }
        (names, values)
    }

    /// Clamps every scale to the minimum allowed value.
    pub fn clamp_scales(&mut self) {
        for l in &mut self.layers {
            if let Some(q) = &mut l.w_quant {
                q.clamp_scale();
            }
            if let Some(q) = &mut l.a_quant {
                q.clamp_scale();
            }
        }
    }
}

fn linear_forward(layer: &Layer, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let out_shape = layer.output_shape(x.shape())?;
    let mut out = match layer.kind {
        LayerKind::Dense => {
            let n = x.shape()[0];
            let fin = layer.weight.shape()[1];
            let fout = layer.out_channels();
            let xd = x.data();
            let wd = w.data();
            let mut out = vec![0.0; n * fout];
            for b in 0..n {
                let row = &xd[b * fin..(b + 1) * fin];
                for o in 0..fout {
                    let wrow = &wd[o * fin..(o + 1) * fin];
                    let mut acc = 0.0;
                    for (a, c) in row.iter().zip(wrow) {
                        acc += a * c;
                    }
                    out[b * fout + o] = acc;
                }
            }
            out
        }
        _ => layer.conv_geometry(x.shape())?.forward(x.data(), w.data()),
    };
    let (n, c, inner) = channel_dims(&out_shape)?;
    let bias = layer.bias.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                *v += bias[ch];
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Returns `(g_input, g_weight, g_bias)`.
fn linear_backward(layer: &Layer, x: &Tensor, w: &Tensor, g_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, inner) = channel_dims(g_out.shape())?;
    let gd = g_out.data();
    let mut g_bias = vec![0.0; c];
    for b in 0..n {
        for (ch, gb) in g_bias.iter_mut().enumerate() {
            let base = (b * c + ch) * inner;
            for v in &gd[base..base + inner] {
                *gb += v;
            }
        }
    }
    let (g_x, g_w) = match layer.kind {
        LayerKind::Dense => {
            let fin = layer.weight.shape()[1];
            let fout = c;
            let xd = x.data();
            let wd = w.data();
            let mut g_x = vec![0.0; n * fin];
            let mut g_w = vec![0.0; fout * fin];
            for b in 0..n {
                let row = &xd[b * fin..(b + 1) * fin];
                let grow = &mut g_x[b * fin..(b + 1) * fin];
                for o in 0..fout {
                    let go = gd[b * fout + o];
                    if go == 0.0 {
                        continue;
                    }
                    let wrow = &wd[o * fin..(o + 1) * fin];
                    let gwrow = &mut g_w[o * fin..(o + 1) * fin];
                    for j in 0..fin {
                        gwrow[j] += go * row[j];
                        grow[j] += go * wrow[j];
                    }
                }
            }
            (g_x, g_w)
        }
        _ => layer.conv_geometry(x.shape())?.backward(x.data(), w.data(), gd),
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), g_x),
        Tensor::from_parts(layer.weight.shape().to_vec(), g_w),
        Tensor::from_parts(vec![c], g_bias),
    ))
}

fn bn_forward(bn: &BatchNorm, h: &Tensor, batch_stats: bool) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = channel_dims(h.shape())?;
    if c != bn.channels() {
        return Err(Error::dim("batch_norm", format!("{c} channels, BN has {}", bn.channels())));
    }
    let hd = h.data();
    let m = (n * inner) as f64;
    let (mean, var) = if batch_stats {
        if n * inner < 2 {
            return Err(Error::Argument("batch statistics need at least 2 values per channel".into()));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * inner;
                for v in &hd[base..base + inner] {
                    s += v;
                }
            }
            let mu = s / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * inner;
                for v in &hd[base..base + inner] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        (mean, var)
    } else {
        (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + bn.eps)).collect();
    let mut normalized = vec![0.0; hd.len()];
    let mut out = vec![0.0; hd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (g, beta) = (bn.gain.data()[ch], bn.bias.data()[ch]);
            for k in base..base + inner {
                let xh = (hd[k] - mean[ch]) * inv_std[ch];
                normalized[k] = xh;
                out[k] = g * xh + beta;
            }
        }
    }
    Ok((
        Tensor::from_parts(h.shape().to_vec(), out),
        BnCache { normalized, inv_std, mean, var, batch_stats },
    ))
}

/// Returns `(g_input, g_gain, g_bias)`.
fn bn_backward(bn: &BatchNorm, cache: &BnCache, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, inner) = channel_dims(g.shape())?;
    let gd = g.data();
    let xh = &cache.normalized;
    let m = (n * inner) as f64;
    let mut g_gain = vec![0.0; c];
    let mut g_bias = vec![0.0; c];
    let mut g_in = vec![0.0; gd.len()];
    for ch in 0..c {
        let gain = bn.gain.data()[ch];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for k in base..base + inner {
                sum_g += gd[k];
                sum_gx += gd[k] * xh[k];
            }
        }
        g_gain[ch] = sum_gx;
        g_bias[ch] = sum_g;
        let inv = cache.inv_std[ch];
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for k in base..base + inner {
                g_in[k] = if cache.batch_stats {
                    gain * inv * (gd[k] - sum_g / m - xh[k] * sum_gx / m)
                } else {
                    gain * inv * gd[k]
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(g.shape().to_vec(), g_in),
        Tensor::from_parts(vec![c], g_gain),
        Tensor::from_parts(vec![c], g_bias),
    ))
}

#[cfg(test)]
mod tests;
