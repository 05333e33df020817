//! Simulated uniform quantization `s * clip(round(w / s), u, v)` with
//! straight-through gradients and learned step sizes.
//!
//! Rounding is half-away-from-zero everywhere. The scale gradient follows the
//! learned-step-size rule: inside the clip range `d q / d s = round(z) - z`,
//! below it `u`, above it `v`, with `z = w / s`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::split_axis;
use crate::{Error, Result, Tensor, MIN_SCALE};

#[inline]
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Multiplier applied to the summed scale gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScale {
    /// Raw sum of elementwise contributions.
    None,
    /// `1 / sqrt(N * p)` with `N` elements per scale and `p` positive levels.
    Lsq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    /// Shape `[1]` for per-tensor, `[channels]` for per-channel.
    pub scale: Tensor,
    pub bits: u32,
    pub signed: bool,
    pub granularity: Granularity,
    pub grad_scale: GradScale,
}

impl QuantizerState {
    pub fn per_tensor(bits: u32, signed: bool, scale: f64) -> Result<Self> {
        let q = Self {
            scale: Tensor::scalar(scale),
            bits,
            signed,
            granularity: Granularity::PerTensor,
            grad_scale: GradScale::Lsq,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn per_channel(bits: u32, signed: bool, axis: usize, scales: &[f64]) -> Result<Self> {
        let q = Self {
            scale: Tensor::from_slice(scales),
            bits,
            signed,
            granularity: Granularity::PerChannel { axis },
            grad_scale: GradScale::Lsq,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_grad_scale(mut self, grad_scale: GradScale) -> Self {
        self.grad_scale = grad_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=24).contains(&self.bits) {
            return Err(Error::Argument(format!("bit width {} outside 1..=24", self.bits)));
        }
        if self.scale.is_empty() {
            return Err(Error::Argument("quantizer has no scale".into()));
        }
        if let Some(s) = self.scale.data().iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!("scale must be positive and finite, got {s}")));
        }
        if self.granularity == Granularity::PerTensor && self.scale.len() != 1 {
            return Err(Error::Argument("per-tensor quantizer needs exactly one scale".into()));
        }
        Ok(())
    }

    /// Lowest integer level `u`.
    pub fn lower(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    /// Highest integer level `v`.
    pub fn upper(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Number of representable levels on the dominant side; `v` unless `v == 0`
    /// (1-bit signed), where `|u|` is used instead.
    pub fn positive_levels(&self) -> f64 {
        let v = self.upper();
        if v > 0 {
            v as f64
        } else {
            (-self.lower()) as f64
        }
    }

    pub fn is_per_channel(&self) -> bool {
        matches!(self.granularity, Granularity::PerChannel { .. })
    }

    pub fn clamp_scale(&mut self) {
        for s in self.scale.data_mut() {
            if *s < MIN_SCALE {
                *s = MIN_SCALE;
            }
        }
    }

    /// Resolves which scale applies to each element of a tensor of `shape`.
    pub(crate) fn layout(&self, shape: &[usize]) -> Result<ScaleLayout> {
        self.validate()?;
        match self.granularity {
            Granularity::PerTensor => Ok(ScaleLayout { channels: 1, inner: shape.iter().product() }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(Error::dim(
                        "quantizer",
                        format!("channel axis {axis} out of range for {shape:?}"),
                    ));
                }
                let (_, c, inner) = split_axis(shape, axis);
                if c != self.scale.len() {
                    return Err(Error::dim(
                        "quantizer",
                        format!("{} scales for {c} channels on axis {axis}", self.scale.len()),
                    ));
                }
                Ok(ScaleLayout { channels: c, inner })
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScaleLayout {
    channels: usize,
    inner: usize,
}

impl ScaleLayout {
    #[inline]
    pub(crate) fn channel_of(&self, flat: usize) -> usize {
        if self.channels == 1 {
            0
        } else {
            (flat / self.inner) % self.channels
        }
    }

    /// Number of tensor elements sharing each scale.
    pub(crate) fn elems_per_scale(&self, len: usize) -> usize {
        len / self.channels
    }
}

fn check_finite(w: &Tensor, op: &'static str) -> Result<()> {
    if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("{op}: non-finite input at index {i}")));
    }
    Ok(())
}

/// Fake-quantizes `w` onto the grid `{s*u, ..., s*v}`.
pub fn quantize(w: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    check_finite(w, "quantize")?;
    let layout = q.layout(w.shape())?;
    let (u, v) = (q.lower() as f64, q.upper() as f64);
    let scales = q.scale.data();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scales[layout.channel_of(i)];
            // `+ 0.0` turns a negative zero into a positive one
            s * round_half_away(x / s).clamp(u, v) + 0.0
        })
        .collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), data))
}

/// Integer codes `clip(round(w / s), u, v)`.
pub fn integer_code(w: &Tensor, q: &QuantizerState) -> Result<Vec<i64>> {
    let layout = q.layout(w.shape())?;
    let (u, v) = (q.lower(), q.upper());
    let scales = q.scale.data();
    Ok(w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (round_half_away(x / scales[layout.channel_of(i)]) as i64).clamp(u, v))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrad {
    /// Straight-through gradient w.r.t. the latent input.
    pub input: Tensor,
    /// Gradient w.r.t. the scale, same shape as `QuantizerState::scale`.
    pub scale: Tensor,
}

/// Backward pass of [`quantize`] given the upstream gradient `g_out`.
pub fn quantize_backward(w: &Tensor, q: &QuantizerState, g_out: &Tensor) -> Result<QuantGrad> {
    backward_impl(w, q, g_out, 1)
}

/// [`quantize_backward`] for a batch of activations: the gradient-scaling
/// constant counts elements of one sample, so it does not depend on batch size.
pub fn quantize_backward_batched(a: &Tensor, q: &QuantizerState, g_out: &Tensor) -> Result<QuantGrad> {
    let batch = a.shape().first().copied().unwrap_or(1).max(1);
    backward_impl(a, q, g_out, batch)
}

fn backward_impl(w: &Tensor, q: &QuantizerState, g_out: &Tensor, batch: usize) -> Result<QuantGrad> {
    w.expect_same_shape(g_out, "quantize_backward")?;
    let layout = q.layout(w.shape())?;
    let (u, v) = (q.lower() as f64, q.upper() as f64);
    let scales = q.scale.data();
    let mut g_w = vec![0.0; w.len()];
    let mut g_s = vec![0.0; scales.len()];
    for (i, (&x, &g)) in w.data().iter().zip(g_out.data()).enumerate() {
        let c = layout.channel_of(i);
        let z = x / scales[c];
        let r = round_half_away(z);
        let (dw, ds) = if r < u {
            (0.0, u)
        } else if r > v {
            (0.0, v)
        } else {
            (1.0, r - z)
        };
        g_w[i] = g * dw;
        g_s[c] += g * ds;
    }
    if q.grad_scale == GradScale::Lsq {
        let n = (layout.elems_per_scale(w.len()) / batch).max(1) as f64;
        let factor = 1.0 / libm::sqrt(n * q.positive_levels());
        for g in &mut g_s {
            *g *= factor;
        }
    }
    Ok(QuantGrad {
        input: Tensor::from_parts(w.shape().to_vec(), g_w),
        scale: Tensor::from_parts(q.scale.shape().to_vec(), g_s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftRoundConfig {
    k: f64,
}

impl SoftRoundConfig {
    pub fn new(k: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&k) {
            return Err(Error::Argument(format!("soft-round threshold {k} outside [0, 0.5]")));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> f64 {
        self.k
    }
}

/// Rounds only elements within `k` of their nearest level; the rest keep their
/// latent value (still clipped to the representable range).
pub fn soft_round(w: &Tensor, q: &QuantizerState, c: SoftRoundConfig) -> Result<Tensor> {
    check_finite(w, "soft_round")?;
    let layout = q.layout(w.shape())?;
    let (u, v) = (q.lower() as f64, q.upper() as f64);
    let scales = q.scale.data();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scales[layout.channel_of(i)];
            let z = x / s;
            let r = round_half_away(z);
            if (z - r).abs() <= c.k {
                s * r.clamp(u, v) + 0.0
            } else {
                x.clamp(s * u, s * v)
            }
        })
        .collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), data))
}

/// What a quantizer is initialized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleSource {
    /// `max |w| / v`.
    Weights,
    /// 99.9th percentile of `|a|` over a calibration batch, divided by `v`.
    Activations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleTemplate {
    pub bits: u32,
    pub signed: bool,
    pub granularity: Granularity,
    pub source: ScaleSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleInit {
    pub state: QuantizerState,
    /// Set when some scale hit the floor because its statistic was zero.
    pub degenerate: bool,
}

pub const ACTIVATION_PERCENTILE: f64 = 99.9;

/// Derives an initial scale from data.
pub fn init_scale(w: &Tensor, template: ScaleTemplate) -> Result<ScaleInit> {
    if w.is_empty() {
        return Err(Error::Argument("cannot initialize a scale from an empty tensor".into()));
    }
    check_finite(w, "init_scale")?;
    let channels = match template.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => {
            if axis >= w.shape().len() {
                return Err(Error::dim("init_scale", format!("axis {axis} for {:?}", w.shape())));
            }
            w.shape()[axis]
        }
    };
    let mut probe = QuantizerState {
        scale: Tensor::full([channels], 1.0),
        bits: template.bits,
        signed: template.signed,
        granularity: template.granularity,
        grad_scale: GradScale::Lsq,
    };
    let layout = probe.layout(w.shape())?;
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, &x) in w.data().iter().enumerate() {
        per_channel[layout.channel_of(i)].push(x.abs());
    }
    let levels = probe.positive_levels();
    let mut degenerate = false;
    for (c, values) in per_channel.iter_mut().enumerate() {
        let stat = match template.source {
            ScaleSource::Weights => values.iter().fold(0.0f64, |a, &b| a.max(b)),
            ScaleSource::Activations => percentile(values, ACTIVATION_PERCENTILE),
        };
        let mut s = stat / levels;
        if !(s >= MIN_SCALE) {
            degenerate = true;
            s = MIN_SCALE;
        }
        probe.scale.data_mut()[c] = s;
    }
    Ok(ScaleInit { state: probe, degenerate })
}

/// Linear-interpolated percentile (`p` in `[0, 100]`); sorts `values` in place.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0) * (values.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}
