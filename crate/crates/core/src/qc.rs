//! Post-hoc quantization correction: an affine map `gamma * h + beta` on the
//! output of every quantized linear op, fitted on a calibration subset and then
//! absorbed into the following batch norm (or into the layer itself).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Dataset, Split};
use crate::nn::loss::loss_and_grad;
use crate::nn::{
    channel_dims, evaluate, Adam, BatchNorm, BnMode, EvalMetrics, ForwardOptions, Layer, Network, ParamKind,
    Precision,
};
use crate::quant::{integer_code, QuantizerState};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QcGranularity {
    PerTensor,
    PerChannel,
}

impl QcGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            QcGranularity::PerTensor => "per_tensor",
            QcGranularity::PerChannel => "per_channel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionParams {
    /// `[1]` per-tensor or `[channels]` per-channel.
    pub gamma: Tensor,
    pub beta: Tensor,
    pub granularity: QcGranularity,
}

impl CorrectionParams {
    pub fn identity(channels: usize, granularity: QcGranularity) -> Self {
        let len = match granularity {
            QcGranularity::PerTensor => 1,
            QcGranularity::PerChannel => channels,
        };
        Self { gamma: Tensor::ones([len]), beta: Tensor::zeros([len]), granularity }
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        let want = match self.granularity {
            QcGranularity::PerTensor => 1,
            QcGranularity::PerChannel => channels,
        };
        if self.gamma.shape() != [want] || self.beta.shape() != [want] {
            return Err(Error::dim(
                "correction",
                format!("expected {want} correction entries for {channels} channels"),
            ));
        }
        Ok(())
    }

    #[inline]
    fn idx(&self, channel: usize) -> usize {
        match self.granularity {
            QcGranularity::PerTensor => 0,
            QcGranularity::PerChannel => channel,
        }
    }

    pub fn gamma_at(&self, channel: usize) -> f64 {
        self.gamma.data()[self.idx(channel)]
    }

    pub fn beta_at(&self, channel: usize) -> f64 {
        self.beta.data()[self.idx(channel)]
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.data().iter().all(|&g| g == 1.0) && self.beta.data().iter().all(|&b| b == 0.0)
    }
}

/// `gamma * h + beta` with channels on axis 1.
pub fn apply_correction(h: &Tensor, c: &CorrectionParams) -> Result<Tensor> {
    let (n, ch, inner) = channel_dims(h.shape())?;
    c.check_channels(ch)?;
    let mut out = h.clone();
    let d = out.data_mut();
    for b in 0..n {
        for k in 0..ch {
            let (g, be) = (c.gamma_at(k), c.beta_at(k));
            let base = (b * ch + k) * inner;
            for v in &mut d[base..base + inner] {
                *v = g * *v + be;
            }
        }
    }
    Ok(out)
}

/// Returns `(g_h, g_gamma, g_beta)`.
pub(crate) fn correction_backward(h: &Tensor, c: &CorrectionParams, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    h.expect_same_shape(g, "correction_backward")?;
    let (n, ch, inner) = channel_dims(h.shape())?;
    let mut g_h = vec![0.0; h.len()];
    let mut g_gamma = vec![0.0; c.gamma.len()];
    let mut g_beta = vec![0.0; c.beta.len()];
    for b in 0..n {
        for k in 0..ch {
            let i = c.idx(k);
            let gam = c.gamma_at(k);
            let base = (b * ch + k) * inner;
            for j in base..base + inner {
                let gv = g.data()[j];
                g_h[j] = gv * gam;
                g_gamma[i] += gv * h.data()[j];
                g_beta[i] += gv;
            }
        }
    }
    Ok((
        Tensor::from_parts(h.shape().to_vec(), g_h),
        Tensor::from_parts(c.gamma.shape().to_vec(), g_gamma),
        Tensor::from_parts(c.beta.shape().to_vec(), g_beta),
    ))
}

/// Batch norm `bn'` with `bn'(h) = bn(gamma * h + beta)` under frozen statistics.
pub fn absorb_into_bn(c: &CorrectionParams, bn: &BatchNorm) -> Result<BatchNorm> {
    if bn.mode != BnMode::Eval {
        return Err(Error::State("corrections can only be absorbed into eval-mode batch norm".into()));
    }
    c.check_channels(bn.channels())?;
    let mut out = bn.clone();
    for k in 0..bn.channels() {
        let (gam, be) = (c.gamma_at(k), c.beta_at(k));
        let g = bn.gain.data()[k];
        let mu = bn.running_mean.data()[k];
        let inv = 1.0 / libm::sqrt(bn.running_var.data()[k] + bn.eps);
        out.gain.data_mut()[k] = g * gam;
        out.bias.data_mut()[k] = bn.bias.data()[k] + g * (be + (gam - 1.0) * mu) * inv;
    }
    Ok(out)
}

/// Result of rewriting a layer's quantized weights under per-channel factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Rescaled {
    pub layer: Layer,
    /// Elements whose integer code could not be kept, because a sign flip moved
    /// them outside the representable range.
    pub recoded: usize,
}

/// Multiplies output channel `c` of the linear op by `factors[c]`, turning a
/// per-tensor weight quantizer into a per-channel one with scales `s * |f_c|`.
/// Integer codes are kept, negated where the factor is negative.
fn scale_output_channels(layer: &Layer, factors: &[f64]) -> Result<Rescaled> {
    let cout = layer.out_channels();
    let mut out = layer.clone();
    let per_out = layer.weight.len() / cout;
    let mut recoded = 0;
    match &layer.w_quant {
        None => {
            for (i, w) in out.weight.data_mut().iter_mut().enumerate() {
                *w *= factors[i / per_out];
            }
        }
        Some(q) => {
            if q.is_per_channel() {
                return Err(Error::Argument("weight quantizer is already per-channel".into()));
            }
            if factors.iter().any(|&f| f == 0.0 || !f.is_finite()) {
                return Err(Error::Argument("zero or non-finite channel factor".into()));
            }
            let s = q.scale.data()[0];
            let scales: Vec<f64> = factors.iter().map(|f| s * f.abs()).collect();
            let nq = QuantizerState::per_channel(q.bits, q.signed, 0, &scales)?.with_grad_scale(q.grad_scale);
            let codes = integer_code(&layer.weight, q)?;
            let (u, v) = (q.lower(), q.upper());
            for (i, w) in out.weight.data_mut().iter_mut().enumerate() {
                *w *= factors[i / per_out];
            }
            let new_codes = integer_code(&out.weight, &nq)?;
            for (i, w) in out.weight.data_mut().iter_mut().enumerate() {
                let c = i / per_out;
                let mut want = if factors[c] < 0.0 { -codes[i] } else { codes[i] };
                if want < u || want > v {
                    want = want.clamp(u, v);
                    recoded += 1;
                }
                if new_codes[i] != want {
                    *w = scales[c] * want as f64;
                }
            }
            out.w_quant = Some(nq);
        }
    }
    Ok(Rescaled { layer: out, recoded })
}

/// Folds an eval-mode batch norm into the preceding linear op. Any correction
/// is absorbed into the batch norm first.
pub fn fold_bn_into_quant_scale(layer: &Layer) -> Result<Rescaled> {
    let bn = layer.bn.as_ref().ok_or_else(|| Error::Argument("layer has no batch norm to fold".into()))?;
    if bn.mode != BnMode::Eval {
        return Err(Error::State("batch norm must be in eval mode to fold".into()));
    }
    let bn = match &layer.correction {
        Some(c) => absorb_into_bn(c, bn)?,
        None => bn.clone(),
    };
    let (factor, _) = bn.eval_affine();
    let mut res = scale_output_channels(layer, &factor)?;
    for k in 0..layer.out_channels() {
        let mu = bn.running_mean.data()[k];
        res.layer.bias.data_mut()[k] = factor[k] * (layer.bias.data()[k] - mu) + bn.bias.data()[k];
    }
    res.layer.bn = None;
    res.layer.correction = None;
    Ok(res)
}

/// Removes every correction from `net` without changing eval-mode outputs
/// (up to re-coded clip-edge weights, counted in the result).
pub fn absorb_corrections(net: &Network) -> Result<(Network, usize)> {
    let mut out = net.clone();
    let mut recoded = 0;
    for layer in &mut out.layers {
        let Some(c) = layer.correction.take() else { continue };
        match &layer.bn {
            Some(bn) => layer.bn = Some(absorb_into_bn(&c, bn)?),
            None => {
                let factors: Vec<f64> = (0..layer.out_channels()).map(|k| c.gamma_at(k)).collect();
                let mut r = scale_output_channels(layer, &factors)?;
                for k in 0..layer.out_channels() {
                    r.layer.bias.data_mut()[k] = c.gamma_at(k) * layer.bias.data()[k] + c.beta_at(k);
                }
                recoded += r.recoded;
                *layer = r.layer;
            }
        }
    }
    out.validate()?;
    Ok((out, recoded))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QcConfig {
    pub lr: f64,
    pub granularity: QcGranularity,
    pub use_scale: bool,
    pub use_shift: bool,
    pub batch: usize,
    pub seed: u64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            granularity: QcGranularity::PerChannel,
            use_scale: true,
            use_shift: true,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcOutcome {
    /// Network with corrections attached (not yet absorbed).
    pub net: Network,
    pub calib_loss_before: f64,
    pub calib_loss_after: f64,
}

impl QcOutcome {
    pub fn corrections(&self) -> Vec<Option<&CorrectionParams>> {
        self.net.layers.iter().map(|l| l.correction.as_ref()).collect()
    }
}

/// One epoch of Adam over the correction parameters on the calibration split.
/// Weights, scales and batch norm are frozen; batch norm runs in eval mode.
pub fn fit_qc(net: &Network, data: &Dataset, cfg: &QcConfig) -> Result<QcOutcome> {
    let calib = data.indices(Split::Calibration);
    if calib.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut net = net.clone();
    net.set_bn_mode(BnMode::Eval);
    let shapes = net.layer_shapes(1)?;
    for (layer, out_shape) in net.layers.iter_mut().zip(&shapes[1..]) {
        if layer.w_quant.is_some() && layer.correction.is_none() {
            layer.correction = Some(CorrectionParams::identity(out_shape[1], cfg.granularity));
        }
    }
    let before = evaluate(&net, data, Split::Calibration, Precision::Quantized)?.loss;
    let trainable = |k: ParamKind| (k == ParamKind::QcGamma && cfg.use_scale) || (k == ParamKind::QcBeta && cfg.use_shift);
    let mut adam = Adam::new(cfg.lr);
    let mut order = calib.to_vec();
    Rng::stream(cfg.seed, 0x9c).shuffle(&mut order);
    for rows in order.chunks(cfg.batch) {
        let (x, t) = data.batch(rows)?;
        let (out, cache) = net.forward_cached(&x, ForwardOptions::eval(Precision::Quantized))?;
        let (_, g) = loss_and_grad(net.loss, &out, &t)?;
        let grads = net.backward(&cache, &g)?;
        adam.step(&mut net, &grads, trainable)?;
    }
    let after = evaluate(&net, data, Split::Calibration, Precision::Quantized)?.loss;
    Ok(QcOutcome { net, calib_loss_before: before, calib_loss_after: after })
}

/// Which correction parameters a cell of the ablation fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QcVariant {
    ScaleOnly,
    ShiftOnly,
    Both,
    /// Nothing fitted; equals the uncorrected network.
    Identity,
}

impl QcVariant {
    pub const TABLE: [QcVariant; 3] = [QcVariant::ScaleOnly, QcVariant::ShiftOnly, QcVariant::Both];

    pub fn flags(self) -> (bool, bool) {
        match self {
            QcVariant::ScaleOnly => (true, false),
            QcVariant::ShiftOnly => (false, true),
            QcVariant::Both => (true, true),
            QcVariant::Identity => (false, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QcVariant::ScaleOnly => "scale",
            QcVariant::ShiftOnly => "shift",
            QcVariant::Both => "both",
            QcVariant::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub uncorrected: EvalMetrics,
    pub granularities: Vec<QcGranularity>,
    pub variants: Vec<QcVariant>,
    /// `cells[g][v]` is the eval metric for granularity `g` and variant `v`.
    pub cells: Vec<Vec<EvalMetrics>>,
}

impl AblationTable {
    pub fn cell(&self, g: QcGranularity, v: QcVariant) -> Option<&EvalMetrics> {
        let gi = self.granularities.iter().position(|&x| x == g)?;
        let vi = self.variants.iter().position(|&x| x == v)?;
        Some(&self.cells[gi][vi])
    }
}

/// Fits a correction for every (granularity, variant) pair and evaluates it.
pub fn qc_ablation(net: &Network, data: &Dataset, base: &QcConfig, variants: &[QcVariant]) -> Result<AblationTable> {
    let mut plain = net.clone();
    plain.set_bn_mode(BnMode::Eval);
    let uncorrected = evaluate(&plain, data, Split::Eval, Precision::Quantized)?;
    let granularities = vec![QcGranularity::PerTensor, QcGranularity::PerChannel];
    let mut cells = Vec::new();
    for &g in &granularities {
        let mut row = Vec::new();
        for &v in variants {
            let (use_scale, use_shift) = v.flags();
            let cfg = QcConfig { granularity: g, use_scale, use_shift, ..*base };
            let fitted = fit_qc(net, data, &cfg)?;
            row.push(evaluate(&fitted.net, data, Split::Eval, Precision::Quantized)?);
        }
        cells.push(row);
    }
    Ok(AblationTable { uncorrected, granularities, variants: variants.to_vec(), cells })
}
