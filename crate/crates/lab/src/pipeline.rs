//! Building blocks shared by the CLI tasks and the acceptance suite.

use std::path::Path;

use qatlab_core::data::{gen_classification, gen_regression, ClassMode, Dataset, Split, Task, Teacher};
use qatlab_core::ema::materialize_ema;
use qatlab_core::nn::{
    attach_quantizers, desk_cnn, mlp, train_qat, BnMode, EmaConfig, EvalMetrics, LossKind, Network, Precision,
    QuantPlan, TrainConfig, TrainOutcome,
};
use qatlab_core::qc::{absorb_corrections, fold_bn_into_quant_scale, QcConfig, QcGranularity};
use qatlab_core::quant::GradScale;
use qatlab_core::toy::ToyProblem;
use qatlab_core::{Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSpec, ExperimentConfig, GranularitySpec, NetworkSpec};
use crate::loaders::{load_csv, load_idx, CsvSchema};
use crate::{LabError, LabResult};

/// RNG stream for network initialization, separate from data and shuffling.
const INIT_STREAM: u64 = 100;

pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> LabResult<Dataset> {
    Ok(match spec {
        DatasetSpec::Blobs { n, classes, dim, noise, sample_shape } => {
            let d = gen_classification(seed, *n, *classes, ClassMode::Blobs { dim: *dim, noise: *noise })?;
            match sample_shape {
                Some(s) => d.reshape_samples(s)?,
                None => d,
            }
        }
        DatasetSpec::Spirals { n, classes, noise } => gen_classification(seed, *n, *classes, ClassMode::Spirals { noise: *noise })?,
        DatasetSpec::Regression { n, dim, hidden, outputs, noise } => {
            gen_regression(seed, *n, *dim, &Teacher::Mlp { hidden: hidden.clone(), outputs: *outputs }, *noise)?
        }
        DatasetSpec::Idx { images, labels, classes } => load_idx(Path::new(images), Path::new(labels), *classes, seed)?,
        DatasetSpec::Csv { path, targets, classes } => {
            load_csv(Path::new(path), &CsvSchema { targets: targets.clone(), classes: *classes }, seed)?
        }
    })
}

/// Latent (unquantized) network sized for `data`. MLPs flatten image samples.
pub fn build_network(cfg: &ExperimentConfig, data: Dataset, seed: u64) -> LabResult<(Network, Dataset)> {
    let mut rng = Rng::stream(seed, INIT_STREAM);
    let (loss, outputs) = match data.task {
        Task::Classification { classes } => (LossKind::SoftmaxCrossEntropy, classes),
        Task::Regression => (LossKind::Mse, data.targets.len() / data.len()),
    };
    match &cfg.network {
        NetworkSpec::Mlp { hidden } => {
            let features: usize = data.sample_shape().iter().product();
            let data = if data.sample_shape().len() > 1 { data.reshape_samples(&[features])? } else { data };
            let mut dims = vec![features];
            dims.extend_from_slice(hidden);
            dims.push(outputs);
            Ok((mlp(&dims, loss, &mut rng)?, data))
        }
        NetworkSpec::DeskCnn { width } => {
            let s = data.sample_shape();
            if s.len() != 3 || loss != LossKind::SoftmaxCrossEntropy {
                return Err(LabError::Config(format!("network: desk_cnn needs [c, h, w] classification samples, got {s:?}")));
            }
            Ok((desk_cnn([s[0], s[1], s[2]], *width, outputs, &mut rng)?, data))
        }
    }
}

pub fn quant_plan(cfg: &ExperimentConfig) -> QuantPlan {
    QuantPlan {
        bits_w: cfg.bits_w,
        bits_a: cfg.bits_a,
        first_last_bits: cfg.first_last_bits,
        per_channel_weights: cfg.granularity == GranularitySpec::PerChannel,
        input_signed: cfg.input_signed,
    }
}

pub fn qat_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let emas = if cfg.ema.on {
        cfg.ema.alphas.iter().map(|&alpha| EmaConfig { alpha, warmup_fraction: cfg.ema.warmup_fraction }).collect()
    } else {
        Vec::new()
    };
    TrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        precision: Precision::Quantized,
        emas,
        dampening: cfg.dampening,
        seed,
        flip_window: cfg.flip_window,
        eval_emas: true,
        ..TrainConfig::default()
    }
}

pub fn qc_config(cfg: &ExperimentConfig, seed: u64) -> QcConfig {
    QcConfig {
        lr: cfg.qc.lr,
        granularity: match cfg.qc.granularity {
            GranularitySpec::PerTensor => QcGranularity::PerTensor,
            GranularitySpec::PerChannel => QcGranularity::PerChannel,
        },
        use_scale: cfg.qc.scale,
        use_shift: cfg.qc.shift,
        batch: cfg.qc.batch,
        seed,
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    /// Pre-trained network with freshly initialized quantizers.
    pub net: Network,
    /// Eval metrics of the pre-trained network before quantization.
    pub latent_eval: Option<EvalMetrics>,
}

/// Data, latent pre-training, then quantizer attachment from the first
/// `calibration_rows` training rows.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> LabResult<Prepared> {
    let data = build_dataset(&cfg.dataset, seed)?;
    let (mut net, data) = build_network(cfg, data, seed)?;
    let mut latent_eval = None;
    if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            epochs: cfg.pretrain_epochs,
            batch: cfg.batch,
            lr: cfg.pretrain_lr,
            precision: Precision::Latent,
            seed,
            eval_emas: false,
            ..TrainConfig::default()
        };
        let out = train_qat(net, &data, &pre)?;
        latent_eval = out.history.last().map(|h| h.eval);
        net = out.net;
    }
    let train = data.indices(Split::Train);
    let rows = &train[..cfg.calibration_rows.min(train.len())];
    let (x, _) = data.batch(rows)?;
    attach_quantizers(&mut net, &quant_plan(cfg), &x)?;
    Ok(Prepared { data, net, latent_eval })
}

pub struct Trained {
    pub data: Dataset,
    pub outcome: TrainOutcome,
    pub latent_eval: Option<EvalMetrics>,
}

pub fn train(cfg: &ExperimentConfig, seed: u64) -> LabResult<Trained> {
    let p = prepare(cfg, seed)?;
    let outcome = train_qat(p.net, &p.data, &qat_config(cfg, seed))?;
    Ok(Trained { data: p.data, outcome, latent_eval: p.latent_eval })
}

/// Method label for the live network of a QAT run.
pub fn live_method(cfg: &ExperimentConfig) -> &'static str {
    if cfg.dampening > 0.0 {
        "dampening"
    } else {
        "plain"
    }
}

/// The config stored in a checkpoint, and the dataset it was trained on.
pub fn checkpoint_context(ckpt: &Checkpoint) -> LabResult<(ExperimentConfig, Dataset)> {
    let cfg = ExperimentConfig::from_value(ckpt.config.clone())
        .map_err(|e| LabError::Format(format!("checkpoint config snapshot: {e}")))?;
    let seed = cfg.seeds[0];
    let data = build_dataset(&cfg.dataset, seed)?;
    let data = match &cfg.network {
        NetworkSpec::Mlp { .. } if data.sample_shape().len() > 1 => {
            let f = data.sample_shape().iter().product::<usize>();
            data.reshape_samples(&[f])?
        }
        _ => data,
    };
    Ok((cfg, data))
}

/// The network QC starts from: the first EMA shadow when requested and present.
pub fn qc_base(ckpt: &Checkpoint, use_ema: bool) -> LabResult<(Network, bool)> {
    match ckpt.emas.first() {
        Some(ema) if use_ema => Ok((materialize_ema(&ckpt.network, ema)?, true)),
        _ => Ok((ckpt.network.clone(), false)),
    }
}

/// Absorbs corrections, then folds every batch norm into per-channel weight
/// scales. Returns the folded network and the re-coded element count per layer.
pub fn fold_network(net: &Network) -> LabResult<(Network, Vec<usize>)> {
    let mut base = net.clone();
    base.set_bn_mode(BnMode::Eval);
    let (mut out, _) = absorb_corrections(&base)?;
    let mut recoded = vec![0; out.layers.len()];
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if layer.bn.is_none() {
            continue;
        }
        let r = fold_bn_into_quant_scale(layer)?;
        recoded[i] = r.recoded;
        *layer = r.layer;
    }
    out.validate()?;
    Ok((out, recoded))
}

/// Max abs difference of eval-split outputs under `precision`.
pub fn max_output_diff(a: &Network, b: &Network, data: &Dataset, precision: Precision) -> LabResult<f64> {
    let mut worst = 0.0f64;
    for rows in data.indices(Split::Eval).chunks(256) {
        let (x, _) = data.batch(rows)?;
        let d = a.forward(&x, precision)?.max_abs_diff(&b.forward(&x, precision)?)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

pub fn toy_problem(cfg: &ExperimentConfig) -> ToyProblem {
    let t = &cfg.toy;
    let alpha = cfg.ema.alphas.first().copied().unwrap_or(0.99);
    ToyProblem {
        w_star: Tensor::from_slice(&t.w_star),
        w_init: None,
        bits_w: t.bits_w,
        bits_x: t.bits_x,
        signed_w: t.signed_w,
        s_w0: t.s_w0,
        s_x0: t.s_x0,
        batch_size: t.batch,
        steps: t.steps,
        lr: t.lr,
        grad_scale: if t.lsq_grad_scale { GradScale::Lsq } else { GradScale::None },
        ema_alpha: alpha,
        ema_warmup: qatlab_core::ema::warmup_iters(t.steps as u64, cfg.ema.warmup_fraction),
        divergence_limit: 1e6,
    }
}

/// Final-window length for toy flip frequencies and losses.
pub const TOY_TAIL: usize = 500;

/// Fixed evaluation batch for toy losses, shared by every seed.
pub fn toy_eval_batch(p: &ToyProblem) -> LabResult<Tensor> {
    Ok(qatlab_core::rng::uniform(&mut Rng::stream(0, 77), &[4096, p.dim()], 0.0, 1.0)?)
}

/// Mean loss on `x` over the last `TOY_TAIL` recorded `(w, s_w, s_x)` states.
pub fn toy_window_loss<'a>(
    p: &ToyProblem,
    states: impl DoubleEndedIterator<Item = (&'a [f64], f64, f64)> + ExactSizeIterator,
    x: &Tensor,
) -> LabResult<f64> {
    let n = states.len().min(TOY_TAIL);
    let mut sum = 0.0;
    for (w, s_w, s_x) in states.rev().take(n) {
        sum += qatlab_core::toy::toy_loss_at(p, &Tensor::from_slice(w), s_w, s_x, x)?;
    }
    Ok(sum / n.max(1) as f64)
}
