use alloc::vec::Vec;

use super::loss::{accuracy, loss_and_grad};
use super::{Adam, BnMode, ForwardOptions, Gradients, Network, ParamId, ParamKind, Precision};
use crate::data::{Dataset, Split, Task};
use crate::ema::{materialize_ema, warmup_iters, EmaState, DEFAULT_WARMUP_FRACTION};
use crate::oscillation::OscillationTracker;
use crate::quant::{quantize, round_half_away};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub alpha: f64,
    pub warmup_fraction: f64,
}

impl EmaConfig {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, warmup_fraction: DEFAULT_WARMUP_FRACTION }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// `Latent` for full-precision pre-training, `Quantized` for QAT.
    pub precision: Precision,
    /// One shadow model per entry; none of them affects training.
    pub emas: Vec<EmaConfig>,
    /// Weight of the pull-to-grid regularizer; 0 disables it.
    pub dampening: f64,
    pub seed: u64,
    pub flip_window: usize,
    pub divergence_limit: f64,
    /// Evaluate shadow models at the end of every epoch.
    pub eval_emas: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            precision: Precision::Quantized,
            emas: Vec::new(),
            dampening: 0.0,
            seed: 0,
            flip_window: 2000,
            divergence_limit: 1e6,
            eval_emas: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Classification tasks only.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iterations: usize,
    pub train_loss: f64,
    pub eval: EvalMetrics,
    pub ema_eval: Vec<EvalMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub emas: Vec<EmaState>,
    pub tracker: OscillationTracker,
    pub history: Vec<EpochMetrics>,
}

/// Eval-mode metrics on one split, in batches of 256 (last partial batch kept).
pub fn evaluate(net: &Network, data: &Dataset, split: Split, precision: Precision) -> Result<EvalMetrics> {
    let rows = data.indices(split);
    if rows.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for chunk in rows.chunks(256) {
        let (x, t) = data.batch(chunk)?;
        let out = net.forward(&x, precision)?;
        let (l, _) = loss_and_grad(net.loss, &out, &t)?;
        loss_sum += l * chunk.len() as f64;
        if matches!(data.task, Task::Classification { .. }) {
            acc_sum += accuracy(&out, &t)? * chunk.len() as f64;
        }
    }
    let n = rows.len() as f64;
    Ok(EvalMetrics {
        loss: loss_sum / n,
        accuracy: matches!(data.task, Task::Classification { .. }).then_some(acc_sum / n),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DampeningPenalty {
    pub value: f64,
    /// Gradients with respect to latent weights only.
    pub grads: Gradients,
}

/// `lambda * sum ||q(W) - W||^2` over in-range weights of every quantized layer.
/// The quantized value is treated as a constant, so only latent weights receive gradient.
pub fn dampening_penalty(net: &Network, lambda: f64) -> Result<DampeningPenalty> {
    let mut value = 0.0;
    let mut entries = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let Some(q) = &layer.w_quant else { continue };
        let layout = q.layout(layer.weight.shape())?;
        let wq = quantize(&layer.weight, q)?;
        let (u, v) = (q.lower() as f64, q.upper() as f64);
        let mut g = Tensor::zeros(layer.weight.shape().to_vec());
        for (k, (&w, &qw)) in layer.weight.data().iter().zip(wq.data()).enumerate() {
            let r = round_half_away(w / q.scale.data()[layout.channel_of(k)]);
            if r < u || r > v {
                continue;
            }
            let d = w - qw;
            value += lambda * d * d;
            g.data_mut()[k] = 2.0 * lambda * d;
        }
        entries.push((ParamId { layer: i, kind: ParamKind::Weight }, g));
    }
    Ok(DampeningPenalty { value, grads: Gradients { entries } })
}

/// Trains all weights, biases, scales and BN affine parameters with Adam.
/// Per iteration: forward with batch statistics, backward, optimizer step,
/// BN running-stat update, shadow updates and flip tracking.
pub fn train_qat(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut net = net;
    if cfg.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let train_rows = data.indices(Split::Train);
    let per_epoch = train_rows.len() / cfg.batch;
    if cfg.epochs > 0 && per_epoch == 0 {
        return Err(Error::Argument("training split smaller than one batch".into()));
    }
    let total = (per_epoch * cfg.epochs) as u64;
    let mut emas = cfg
        .emas
        .iter()
        .map(|e| EmaState::new(e.alpha, warmup_iters(total, e.warmup_fraction)))
        .collect::<Result<Vec<_>>>()?;
    let (scale_names, _) = net.scale_values();
    let mut tracker = OscillationTracker::new(cfg.flip_window, scale_names)?;
    let mut history = Vec::new();
    let mut adam = Adam::new(cfg.lr);
    let track = cfg.precision == Precision::Quantized;
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        net.set_bn_mode(BnMode::Train);
        let mut order = train_rows.to_vec();
        Rng::stream(cfg.seed, epoch as u64 + 1).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for rows in order.chunks_exact(cfg.batch) {
            let (x, t) = data.batch(rows)?;
            let (out, cache) = net.forward_cached(&x, ForwardOptions::train(cfg.precision))?;
            let (loss, g) = loss_and_grad(net.loss, &out, &t)?;
            if !loss.is_finite() || loss > cfg.divergence_limit {
                return Err(Error::Divergence { step: iteration, loss });
            }
            loss_sum += loss;
            let mut grads = net.backward(&cache, &g)?;
            if cfg.dampening > 0.0 {
                let pen = dampening_penalty(&net, cfg.dampening)?;
                for (id, gp) in pen.grads.entries {
                    let gw = grads.get_mut(id).expect("every layer has a weight gradient");
                    for (a, b) in gw.data_mut().iter_mut().zip(gp.data()) {
                        *a += b;
                    }
                }
            }
            adam.step(&mut net, &grads, ParamKind::is_qat_trainable)?;
            net.update_bn_running(&cache);
            for ema in &mut emas {
                ema.update_from(&net)?;
            }
            if track {
                let (_, scales) = net.scale_values();
                tracker.record_step(&net.weight_codes()?, &scales)?;
            }
            iteration += 1;
        }
        net.set_bn_mode(BnMode::Eval);
        let eval = evaluate(&net, data, Split::Eval, cfg.precision)?;
        let mut ema_eval = Vec::new();
        if cfg.eval_emas {
            for ema in &emas {
                let shadow = materialize_ema(&net, ema)?;
                ema_eval.push(evaluate(&shadow, data, Split::Eval, cfg.precision)?);
            }
        }
        history.push(EpochMetrics {
            epoch,
            iterations: iteration,
            train_loss: loss_sum / per_epoch as f64,
            eval,
            ema_eval,
        });
    }
    net.set_bn_mode(BnMode::Eval);
    Ok(TrainOutcome { net, emas, tracker, history })
}
