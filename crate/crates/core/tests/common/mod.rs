//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use qatlab_core::nn::{Network, Nonlinearity};
use qatlab_core::quant::QuantizerState;

/// Nearest representable level by brute force over every integer level, ties
/// broken away from zero. Returns `(value, code)`.
pub fn nearest_level(w: f64, s: f64, lo: i64, hi: i64) -> (f64, i64) {
    let mut best = lo;
    let mut best_d = f64::INFINITY;
    for k in lo..=hi {
        let d = (w / s - k as f64).abs();
        let better = d < best_d || (d == best_d && (k as f64).abs() > (best as f64).abs());
        if better {
            best = k;
            best_d = d;
        }
    }
    (s * best as f64, best)
}

/// How one element passes through a quantizer, frozen at a base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frozen {
    /// In range with rounding residual `round(z) - z`.
    Residual(f64),
    Low,
    High,
}

pub fn freeze(x: f64, s: f64, lo: i64, hi: i64) -> Frozen {
    let z = x / s;
    let r = z.abs().floor() + if z.abs().fract() >= 0.5 { 1.0 } else { 0.0 };
    let r = r.copysign(z);
    if r < lo as f64 {
        Frozen::Low
    } else if r > hi as f64 {
        Frozen::High
    } else {
        Frozen::Residual(r - z)
    }
}

/// Straight-through surrogate: identity plus a frozen offset in range, the
/// clip level (scaled by `s`) outside it.
pub fn surrogate(x: f64, s: f64, f: Frozen, lo: i64, hi: i64) -> f64 {
    match f {
        Frozen::Residual(r) => x + s * r,
        Frozen::Low => s * lo as f64,
        Frozen::High => s * hi as f64,
    }
}

fn scale_for(q: &QuantizerState, shape: &[usize], flat: usize) -> f64 {
    if q.scale.len() == 1 {
        q.scale.data()[0]
    } else {
        let per: usize = shape[1..].iter().product();
        q.scale.data()[flat / per]
    }
}

fn levels(q: &QuantizerState) -> (i64, i64) {
    (q.lower(), q.upper())
}

/// Frozen states for every quantizer application of a reference forward pass.
#[derive(Clone, Debug, Default)]
pub struct FrozenPass {
    pub weights: Vec<Vec<Frozen>>,
    pub acts: Vec<Vec<Frozen>>,
}

fn silu(y: f64) -> f64 {
    y / (1.0 + (-y).exp())
}

/// Reference training-mode forward of a dense network (batch-statistics BN,
/// SiLU/ReLU/none), written without the library's kernels. With `frozen`
/// given, quantizers are replaced by their straight-through surrogates.
/// Returns the mean squared error against `targets` and the frozen states.
pub fn reference_mse(
    net: &Network,
    x: &[f64],
    n: usize,
    targets: &[f64],
    frozen: Option<&FrozenPass>,
) -> (f64, FrozenPass) {
    let mut rec = FrozenPass::default();
    let mut act = x.to_vec();
    let mut width = x.len() / n;
    for (li, layer) in net.layers.iter().enumerate() {
        let wshape = layer.weight.shape();
        let (fout, fin) = (wshape[0], wshape[1]);
        assert_eq!(fin, width);
        let q_act: Vec<f64> = match &layer.a_quant {
            None => act.clone(),
            Some(q) => {
                let (lo, hi) = levels(q);
                let s = q.scale.data()[0];
                let states: Vec<Frozen> = match frozen {
                    Some(f) => f.acts[li].clone(),
                    None => act.iter().map(|&a| freeze(a, s, lo, hi)).collect(),
                };
                let out = act.iter().zip(&states).map(|(&a, &f)| surrogate(a, s, f, lo, hi)).collect();
                rec.acts.push(states);
                out
            }
        };
        if layer.a_quant.is_none() {
            rec.acts.push(Vec::new());
        }
        let q_w: Vec<f64> = match &layer.w_quant {
            None => layer.weight.data().to_vec(),
            Some(q) => {
                let (lo, hi) = levels(q);
                let states: Vec<Frozen> = match frozen {
                    Some(f) => f.weights[li].clone(),
                    None => layer
                        .weight
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| freeze(w, scale_for(q, wshape, i), lo, hi))
                        .collect(),
                };
                let out = layer
                    .weight
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| surrogate(w, scale_for(q, wshape, i), states[i], lo, hi))
                    .collect();
                rec.weights.push(states);
                out
            }
        };
        if layer.w_quant.is_none() {
            rec.weights.push(Vec::new());
        }
        let mut h = vec![0.0; n * fout];
        for b in 0..n {
            for o in 0..fout {
                let mut acc = layer.bias.data()[o];
                for i in 0..fin {
                    acc += q_act[b * fin + i] * q_w[o * fin + i];
                }
                h[b * fout + o] = acc;
            }
        }
        if let Some(c) = &layer.correction {
            for b in 0..n {
                for o in 0..fout {
                    h[b * fout + o] = c.gamma_at(o) * h[b * fout + o] + c.beta_at(o);
                }
            }
        }
        if let Some(bn) = &layer.bn {
            for o in 0..fout {
                let mean = (0..n).map(|b| h[b * fout + o]).sum::<f64>() / n as f64;
                let var = (0..n).map(|b| (h[b * fout + o] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + bn.eps).sqrt();
                for b in 0..n {
                    let v = &mut h[b * fout + o];
                    *v = bn.gain.data()[o] * (*v - mean) * inv + bn.bias.data()[o];
                }
            }
        }
        act = h
            .into_iter()
            .map(|v| match layer.nonlinearity {
                Nonlinearity::Silu => silu(v),
                Nonlinearity::Relu => v.max(0.0),
                Nonlinearity::None => v,
            })
            .collect();
        width = fout;
    }
    let loss = act.iter().zip(targets).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / act.len() as f64;
    (loss, rec)
}
