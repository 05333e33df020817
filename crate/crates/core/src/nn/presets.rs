use alloc::vec;
use alloc::vec::Vec;

use super::{Layer, LayerKind, LossKind, Network, Nonlinearity};
use crate::quant::{init_scale, Granularity, ScaleSource, ScaleTemplate};
use crate::rng::normal;
use crate::{Error, Result, Rng, Tensor};

fn he(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal(rng, shape, libm::sqrt(2.0 / fan_in as f64))
}

/// Dense stack over `dims` (input first). Hidden layers get BN and SiLU.
pub fn mlp(dims: &[usize], loss: LossKind, rng: &mut Rng) -> Result<Network> {
    if dims.len() < 2 {
        return Err(Error::Argument("an MLP needs at least input and output widths".into()));
    }
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let layer = Layer::new(LayerKind::Dense, he(rng, &[pair[1], pair[0]]))?;
        layers.push(if i + 2 < dims.len() {
            layer.with_bn().with_nonlinearity(Nonlinearity::Silu)
        } else {
            layer
        });
    }
    Network::new(vec![dims[0]], layers, loss)
}

/// Four blocks for `[c, h, w]` inputs: a 3x3 conv, a strided 3x3 depthwise
/// conv, a 1x1 pointwise conv (all with BN and SiLU) and a dense classifier.
pub fn desk_cnn(input: [usize; 3], width: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    let [c, h, w] = input;
    let wide = 2 * width;
    let (h2, w2) = ((h + 1) / 2, (w + 1) / 2);
    let conv = |k: LayerKind, t: Tensor| -> Result<Layer> {
        Ok(Layer::new(k, t)?.with_bn().with_nonlinearity(Nonlinearity::Silu))
    };
    let layers = vec![
        conv(LayerKind::Conv2d { stride: 1, padding: 1 }, he(rng, &[width, c, 3, 3]))?,
        conv(LayerKind::DepthwiseConv2d { stride: 2, padding: 1 }, he(rng, &[width, 1, 3, 3]))?,
        conv(LayerKind::Conv2d { stride: 1, padding: 0 }, he(rng, &[wide, width, 1, 1]))?,
        Layer::new(LayerKind::Dense, he(rng, &[classes, wide * h2 * w2]))?,
    ];
    Network::new(vec![c, h, w], layers, LossKind::SoftmaxCrossEntropy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantPlan {
    pub bits_w: u32,
    pub bits_a: u32,
    /// Bit-width for the first and last layer; `None` uses the plain widths.
    pub first_last_bits: Option<u32>,
    /// Granularity of weight quantizers (activations are always per-tensor).
    pub per_channel_weights: bool,
    /// Whether the network input may be negative.
    pub input_signed: bool,
}

impl Default for QuantPlan {
    fn default() -> Self {
        Self { bits_w: 4, bits_a: 4, first_last_bits: Some(8), per_channel_weights: false, input_signed: false }
    }
}

/// Adds weight and input-activation quantizers to every layer, initializing
/// scales from the weights and from latent activations of `calib_x`.
/// Returns the number of quantizers whose initialization was degenerate.
pub fn attach_quantizers(net: &mut Network, plan: &QuantPlan, calib_x: &Tensor) -> Result<usize> {
    let inputs = net.layer_inputs(calib_x)?;
    let last = net.layers.len() - 1;
    let mut degenerate = 0;
    for (i, x) in inputs.iter().enumerate() {
        let edge = i == 0 || i == last;
        let (bw, ba) = match plan.first_last_bits {
            Some(b) if edge => (b, b),
            _ => (plan.bits_w, plan.bits_a),
        };
        let signed_in = if i == 0 {
            plan.input_signed
        } else {
            net.layers[i - 1].nonlinearity == Nonlinearity::None
        };
        let w_init = init_scale(
            &net.layers[i].weight,
            ScaleTemplate {
                bits: bw,
                signed: true,
                granularity: if plan.per_channel_weights {
                    Granularity::PerChannel { axis: 0 }
                } else {
                    Granularity::PerTensor
                },
                source: ScaleSource::Weights,
            },
        )?;
        let a_init = init_scale(
            x,
            ScaleTemplate { bits: ba, signed: signed_in, granularity: Granularity::PerTensor, source: ScaleSource::Activations },
        )?;
        degenerate += usize::from(w_init.degenerate) + usize::from(a_init.degenerate);
        net.layers[i].w_quant = Some(w_init.state);
        net.layers[i].a_quant = Some(a_init.state);
    }
    net.validate()?;
    Ok(degenerate)
}
