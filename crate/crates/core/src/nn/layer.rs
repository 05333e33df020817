use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::qc::CorrectionParams;
use crate::quant::QuantizerState;
use crate::tensor::split_axis;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight `[out, in]`; inputs are flattened to `[n, in]`.
    Dense,
    /// Weight `[out, in, kh, kw]` on `[n, c, h, w]` inputs.
    Conv2d { stride: usize, padding: usize },
    /// Weight `[c, 1, kh, kw]`, one filter per channel.
    DepthwiseConv2d { stride: usize, padding: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Silu,
    None,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Relu => y.max(0.0),
            Nonlinearity::Silu => y * sigmoid(y),
            Nonlinearity::None => y,
        }
    }

    #[inline]
    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Silu => {
                let s = sigmoid(y);
                s * (1.0 + y * (1.0 - s))
            }
            Nonlinearity::None => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics are still being updated.
    Train,
    /// Statistics frozen; the layer is a fixed per-channel affine map.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Tensor::ones([channels]),
            bias: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: 0.1,
            eps: 1e-5,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let inv = 1.0 / libm::sqrt(self.running_var.data()[c] + self.eps);
            let g = self.gain.data()[c] * inv;
            scale.push(g);
            shift.push(self.bias.data()[c] - g * self.running_mean.data()[c]);
        }
        (scale, shift)
    }

    /// Eval-mode forward on a tensor with channels on axis 1.
    pub fn forward_eval(&self, h: &Tensor) -> Result<Tensor> {
        let (scale, shift) = self.eval_affine();
        let (n, c, inner) = channel_dims(h.shape())?;
        if c != self.channels() {
            return Err(Error::dim("batch_norm", format!("{c} channels, BN has {}", self.channels())));
        }
        let mut out = h.clone();
        let d = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for v in &mut d[base..base + inner] {
                    *v = scale[ch] * *v + shift[ch];
                }
            }
        }
        Ok(out)
    }
}

/// `(batch, channels, spatial)` of a tensor whose channels sit on axis 1.
pub(crate) fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim("channels", format!("rank >= 2 expected, got {shape:?}")));
    }
    Ok(split_axis(shape, 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Tensor,
    /// One entry per output channel.
    pub bias: Tensor,
    pub w_quant: Option<QuantizerState>,
    /// Quantizer on this layer's input activations.
    pub a_quant: Option<QuantizerState>,
    /// Post-hoc affine correction between the linear op and BN.
    pub correction: Option<CorrectionParams>,
    pub bn: Option<BatchNorm>,
    pub nonlinearity: Nonlinearity,
}

impl Layer {
    pub fn new(kind: LayerKind, weight: Tensor) -> Result<Self> {
        let out = match kind {
            LayerKind::Dense => {
                if weight.shape().len() != 2 {
                    return Err(Error::dim("Layer::new", "dense weight must be [out, in]"));
                }
                weight.shape()[0]
            }
            LayerKind::Conv2d { stride, .. } | LayerKind::DepthwiseConv2d { stride, .. } => {
                if weight.shape().len() != 4 {
                    return Err(Error::dim("Layer::new", "conv weight must be [out, in, kh, kw]"));
                }
                if stride == 0 {
                    return Err(Error::Argument("stride must be positive".into()));
                }
                if matches!(kind, LayerKind::DepthwiseConv2d { .. }) && weight.shape()[1] != 1 {
                    return Err(Error::dim("Layer::new", "depthwise weight must be [c, 1, kh, kw]"));
                }
                weight.shape()[0]
            }
        };
        Ok(Self {
            kind,
            weight,
            bias: Tensor::zeros([out]),
            w_quant: None,
            a_quant: None,
            correction: None,
            bn: None,
            nonlinearity: Nonlinearity::None,
        })
    }

    pub fn with_bn(mut self) -> Self {
        self.bn = Some(BatchNorm::new(self.out_channels()));
        self
    }

    pub fn with_nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Output shape for a batch input of `input` shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => {
                let n = input[0];
                let features: usize = input[1..].iter().product();
                if features != self.weight.shape()[1] {
                    return Err(Error::dim(
                        "dense",
                        format!("input has {features} features, weight expects {}", self.weight.shape()[1]),
                    ));
                }
                Ok(vec![n, self.out_channels()])
            }
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } => {
                let g = self.conv_geometry(input)?;
                Ok(vec![g.n, g.cout, g.hout, g.wout])
            }
        }
    }

    pub(crate) fn conv_geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        let (stride, padding, depthwise) = match self.kind {
            LayerKind::Conv2d { stride, padding } => (stride, padding, false),
            LayerKind::DepthwiseConv2d { stride, padding } => (stride, padding, true),
            LayerKind::Dense => return Err(Error::State("dense layer has no conv geometry".into())),
        };
        if input.len() != 4 {
            return Err(Error::dim("conv2d", format!("input must be [n, c, h, w], got {input:?}")));
        }
        let ws = self.weight.shape();
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let cout = ws[0];
        let groups = if depthwise { cin } else { 1 };
        if depthwise && cout != cin {
            return Err(Error::dim("depthwise_conv2d", format!("{cin} input channels, {cout} filters")));
        }
        if ws[1] * groups != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels, weight expects {}", ws[1] * groups),
            ));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            groups,
            kh,
            kw,
            stride,
            padding,
            hout: (h + 2 * padding - kh) / stride + 1,
            wout: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Multiply-accumulates of the linear op for one sample of `input` shape,
    /// plus per-element work of correction and BN.
    pub fn op_count(&self, input: &[usize]) -> Result<usize> {
        let out = self.output_shape(input)?;
        let per_sample_out: usize = out[1..].iter().product();
        let fan_in: usize = self.weight.shape()[1..].iter().product();
        let mut ops = per_sample_out * fan_in;
        if self.correction.is_some() {
            ops += per_sample_out;
        }
        if self.bn.is_some() {
            ops += per_sample_out;
        }
        Ok(ops)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    #[inline]
    fn input_pos(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        if p >= 0 && (p as usize) < limit {
            Some(p as usize)
        } else {
            None
        }
    }

    pub fn forward(&self, x: &[f64], weight: &[f64]) -> Vec<f64> {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        let mut out = vec![0.0; self.n * self.cout * self.hout * self.wout];
        for b in 0..self.n {
            for o in 0..self.cout {
                let g = o / cout_g;
                for oy in 0..self.hout {
                    for ox in 0..self.wout {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let ic = g * cin_g + ci;
                            let xbase = (b * self.cin + ic) * self.h;
                            let wbase = (o * cin_g + ci) * self.kh;
                            for ky in 0..self.kh {
                                let Some(iy) = self.input_pos(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.input_pos(ox, kx, self.w) else { continue };
                                    acc += weight[(wbase + ky) * self.kw + kx] * x[(xbase + iy) * self.w + ix];
                                }
                            }
                        }
                        out[((b * self.cout + o) * self.hout + oy) * self.wout + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_weight)`.
    pub fn backward(&self, x: &[f64], weight: &[f64], g_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        let mut g_x = vec![0.0; x.len()];
        let mut g_w = vec![0.0; weight.len()];
        for b in 0..self.n {
            for o in 0..self.cout {
                let g = o / cout_g;
                for oy in 0..self.hout {
                    for ox in 0..self.wout {
                        let go = g_out[((b * self.cout + o) * self.hout + oy) * self.wout + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin_g {
                            let ic = g * cin_g + ci;
                            let xbase = (b * self.cin + ic) * self.h;
                            let wbase = (o * cin_g + ci) * self.kh;
                            for ky in 0..self.kh {
                                let Some(iy) = self.input_pos(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.input_pos(ox, kx, self.w) else { continue };
                                    let wi = (wbase + ky) * self.kw + kx;
                                    let xi = (xbase + iy) * self.w + ix;
                                    g_w[wi] += go * x[xi];
                                    g_x[xi] += go * weight[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (g_x, g_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;
    use crate::rng::{uniform, Rng};

    #[test]
    fn silu_derivative_matches_finite_difference() {
        for y in [-3.0, -0.4, 0.0, 0.7, 2.5] {
            let fd = finite_diff(|t| Nonlinearity::Silu.apply(t.data()[0]), &Tensor::scalar(y), 1e-6)
                .unwrap();
            assert!((fd.data()[0] - Nonlinearity::Silu.derivative(y)).abs() < 1e-8);
        }
    }

    fn conv_case(kind: LayerKind, wshape: [usize; 4], input: [usize; 4]) {
        let mut rng = Rng::new(21);
        let w = uniform(&mut rng, &wshape, -1.0, 1.0).unwrap();
        let x = uniform(&mut rng, &input, -1.0, 1.0).unwrap();
        let layer = Layer::new(kind, w.clone()).unwrap();
        let g = layer.conv_geometry(&input).unwrap();
        let out = g.forward(x.data(), w.data());
        let probe = uniform(&mut rng, &[out.len()], -1.0, 1.0).unwrap();
        let (gx, gw) = g.backward(x.data(), w.data(), probe.data());
        let dot = |o: &[f64]| o.iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let fd_x = finite_diff(|t| dot(&g.forward(t.data(), w.data())), &x, 1e-6).unwrap();
        let fd_w = finite_diff(|t| dot(&g.forward(x.data(), t.data())), &w, 1e-6).unwrap();
        for (a, b) in gx.iter().zip(fd_x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        for (a, b) in gw.iter().zip(fd_w.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        conv_case(LayerKind::Conv2d { stride: 1, padding: 1 }, [3, 2, 3, 3], [2, 2, 5, 5]);
        conv_case(LayerKind::Conv2d { stride: 2, padding: 0 }, [2, 3, 1, 1], [1, 3, 4, 4]);
        conv_case(LayerKind::DepthwiseConv2d { stride: 2, padding: 1 }, [3, 1, 3, 3], [2, 3, 6, 6]);
    }

    #[test]
    fn conv_identity_kernel() {
        let w = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let layer = Layer::new(LayerKind::Conv2d { stride: 1, padding: 0 }, w.clone()).unwrap();
        let g = layer.conv_geometry(&[1, 1, 2, 2]).unwrap();
        assert_eq!(g.forward(&[1.0, 2.0, 3.0, 4.0], w.data()), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn geometry_errors() {
        let layer = Layer::new(
            LayerKind::DepthwiseConv2d { stride: 1, padding: 0 },
            Tensor::zeros([3, 1, 3, 3]),
        )
        .unwrap();
        assert!(layer.conv_geometry(&[1, 2, 5, 5]).is_err());
        assert!(Layer::new(LayerKind::Dense, Tensor::zeros([3])).is_err());
    }
}
