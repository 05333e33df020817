//! Experiment configuration: one JSON object, unknown keys rejected, with
//! `--dotted.key=value` overrides applied before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use qatlab_core::nn::Precision;
use qatlab_core::quant::SoftRoundConfig;

use crate::{LabError, LabResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Toy,
    Train,
    Qc,
    Fold,
    Ablate,
    Eval,
    Report,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Toy => "toy",
            TaskKind::Train => "train",
            TaskKind::Qc => "qc",
            TaskKind::Fold => "fold",
            TaskKind::Ablate => "ablate",
            TaskKind::Eval => "eval",
            TaskKind::Report => "report",
        }
    }

    /// Tasks that start from an existing checkpoint.
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, TaskKind::Qc | TaskKind::Fold | TaskKind::Ablate | TaskKind::Eval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        noise: f64,
        /// Reinterpret each `dim`-vector with this shape, e.g. `[1, 8, 8]` for the CNN.
        #[serde(default)]
        sample_shape: Option<Vec<usize>>,
    },
    Spirals {
        n: usize,
        classes: usize,
        noise: f64,
    },
    Regression {
        n: usize,
        dim: usize,
        hidden: Vec<usize>,
        outputs: usize,
        noise: f64,
    },
    Idx {
        images: String,
        labels: String,
        #[serde(default)]
        classes: Option<usize>,
    },
    Csv {
        path: String,
        /// Target column names; one integer label column when `classes` is set.
        targets: Vec<String>,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Mlp { hidden: Vec<usize> },
    DeskCnn { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularitySpec {
    PerTensor,
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaSpec {
    pub on: bool,
    /// One shadow per decay; the first one is the reported EMA model.
    pub alphas: Vec<f64>,
    pub warmup_fraction: f64,
}

impl Default for EmaSpec {
    fn default() -> Self {
        Self { on: true, alphas: vec![0.99], warmup_fraction: qatlab_core::ema::DEFAULT_WARMUP_FRACTION }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcSpec {
    pub lr: f64,
    pub batch: usize,
    pub granularity: GranularitySpec,
    pub scale: bool,
    pub shift: bool,
    /// Fit on the first EMA shadow when the checkpoint has one.
    pub use_ema: bool,
}

impl Default for QcSpec {
    fn default() -> Self {
        Self { lr: 5e-3, batch: 16, granularity: GranularitySpec::PerChannel, scale: true, shift: true, use_ema: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub w_star: Vec<f64>,
    pub bits_w: u32,
    pub bits_x: u32,
    pub signed_w: bool,
    pub s_w0: f64,
    pub s_x0: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub lsq_grad_scale: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        let p = qatlab_core::toy::ToyProblem::one_bit();
        Self {
            w_star: p.w_star.data().to_vec(),
            bits_w: p.bits_w,
            bits_x: p.bits_x,
            signed_w: p.signed_w,
            s_w0: p.s_w0,
            s_x0: p.s_x0,
            batch: p.batch_size,
            steps: p.steps,
            lr: p.lr,
            lsq_grad_scale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Bit-width override for the first and last layer; `null` keeps `bits_w`/`bits_a`.
    pub first_last_bits: Option<u32>,
    /// Weight quantizer granularity.
    pub granularity: GranularitySpec,
    /// Whether the network input is quantized on a signed grid.
    pub input_signed: bool,
    /// Rows of the train split used to initialize scales.
    pub calibration_rows: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema: EmaSpec,
    pub dampening: f64,
    pub flip_window: usize,
    pub qc: QcSpec,
    /// `quantized`, `latent` or `soft:<k>`.
    pub eval_precision: String,
    pub toy: ToySpec,
    /// Input checkpoint for qc, fold, ablate and eval.
    pub checkpoint: Option<String>,
    /// Run directories aggregated by `report`.
    pub runs: Vec<String>,
    /// Output directory; defaults to `$QATLAB_OUT/<task>-<hash>`.
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Train,
            seeds: vec![0],
            dataset: DatasetSpec::Blobs { n: 8000, classes: 8, dim: 64, noise: 0.8, sample_shape: Some(vec![1, 8, 8]) },
            network: NetworkSpec::DeskCnn { width: 8 },
            bits_w: 3,
            bits_a: 3,
            first_last_bits: None,
            granularity: GranularitySpec::PerTensor,
            input_signed: true,
            calibration_rows: 256,
            pretrain_epochs: 6,
            pretrain_lr: 1e-2,
            epochs: 15,
            batch: 32,
            lr: 1e-2,
            ema: EmaSpec::default(),
            dampening: 0.0,
            flip_window: 2000,
            qc: QcSpec::default(),
            eval_precision: "quantized".into(),
            toy: ToySpec::default(),
            checkpoint: None,
            runs: Vec::new(),
            out_dir: None,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{field}: {msg}"))
}

fn check_lr(field: &str, v: f64) -> LabResult<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(field_err(field, format!("must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_bits(field: &str, v: u32) -> LabResult<()> {
    if !(1..=16).contains(&v) {
        return Err(field_err(field, format!("must be in 1..=16, got {v}")));
    }
    Ok(())
}

fn check_positive(field: &str, v: usize) -> LabResult<()> {
    if v == 0 {
        return Err(field_err(field, "must be positive"));
    }
    Ok(())
}

/// Parses `quantized`, `latent` or `soft:<k>`.
pub fn parse_precision(s: &str) -> LabResult<Precision> {
    match s {
        "quantized" => Ok(Precision::Quantized),
        "latent" => Ok(Precision::Latent),
        _ => {
            let k = s
                .strip_prefix("soft:")
                .and_then(|k| k.parse::<f64>().ok())
                .ok_or_else(|| field_err("eval_precision", format!("expected quantized, latent or soft:<k>, got {s:?}")))?;
            SoftRoundConfig::new(k).map(Precision::SoftRound).map_err(|e| field_err("eval_precision", e))
        }
    }
}

impl ExperimentConfig {
    /// Field-level checks; nothing is computed before these pass.
    pub fn validate(&self) -> LabResult<()> {
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        match &self.dataset {
            DatasetSpec::Blobs { n, classes, dim, noise, sample_shape } => {
                check_positive("dataset.n", *n)?;
                check_positive("dataset.dim", *dim)?;
                if *classes < 2 {
                    return Err(field_err("dataset.classes", "must be >= 2"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(field_err("dataset.noise", "must be finite and >= 0"));
                }
                if let Some(s) = sample_shape {
                    if s.iter().product::<usize>() != *dim {
                        return Err(field_err("dataset.sample_shape", format!("{s:?} does not hold {dim} values")));
                    }
                }
            }
            DatasetSpec::Spirals { n, classes, noise } => {
                check_positive("dataset.n", *n)?;
                if *classes < 2 {
                    return Err(field_err("dataset.classes", "must be >= 2"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(field_err("dataset.noise", "must be finite and >= 0"));
                }
            }
            DatasetSpec::Regression { n, dim, outputs, noise, .. } => {
                check_positive("dataset.n", *n)?;
                check_positive("dataset.dim", *dim)?;
                check_positive("dataset.outputs", *outputs)?;
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(field_err("dataset.noise", "must be finite and >= 0"));
                }
            }
            DatasetSpec::Idx { classes, .. } | DatasetSpec::Csv { classes, .. } => {
                if matches!(classes, Some(c) if *c < 2) {
                    return Err(field_err("dataset.classes", "must be >= 2"));
                }
            }
        }
        match &self.network {
            NetworkSpec::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(field_err("network.hidden", "widths must be positive"));
                }
            }
            NetworkSpec::DeskCnn { width } => {
                check_positive("network.width", *width)?;
                let ok = match &self.dataset {
                    DatasetSpec::Blobs { sample_shape: Some(s), .. } => s.len() == 3,
                    DatasetSpec::Idx { .. } => true,
                    _ => false,
                };
                if !ok {
                    return Err(field_err("network", "desk_cnn needs image samples (blobs with a 3-d sample_shape, or idx)"));
                }
            }
        }
        check_bits("bits_w", self.bits_w)?;
        check_bits("bits_a", self.bits_a)?;
        if let Some(b) = self.first_last_bits {
            check_bits("first_last_bits", b)?;
        }
        check_positive("calibration_rows", self.calibration_rows)?;
        check_lr("pretrain_lr", self.pretrain_lr)?;
        check_lr("lr", self.lr)?;
        check_positive("batch", self.batch)?;
        if self.ema.on && self.ema.alphas.is_empty() {
            return Err(field_err("ema.alphas", "at least one decay is required when ema.on"));
        }
        for a in &self.ema.alphas {
            if !(0.0..1.0).contains(a) {
                return Err(field_err("ema.alphas", format!("decay {a} outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema.warmup_fraction) {
            return Err(field_err("ema.warmup_fraction", "must be in [0, 1]"));
        }
        if !(self.dampening.is_finite() && self.dampening >= 0.0) {
            return Err(field_err("dampening", "must be finite and >= 0"));
        }
        if self.flip_window < 2 {
            return Err(field_err("flip_window", "must be >= 2"));
        }
        check_lr("qc.lr", self.qc.lr)?;
        check_positive("qc.batch", self.qc.batch)?;
        parse_precision(&self.eval_precision)?;
        let t = &self.toy;
        if t.w_star.is_empty() {
            return Err(field_err("toy.w_star", "must not be empty"));
        }
        check_bits("toy.bits_w", t.bits_w)?;
        check_bits("toy.bits_x", t.bits_x)?;
        check_positive("toy.batch", t.batch)?;
        check_lr("toy.lr", t.lr)?;
        check_lr("toy.s_w0", t.s_w0)?;
        check_lr("toy.s_x0", t.s_x0)?;
        if self.task.needs_checkpoint() && self.checkpoint.is_none() {
            return Err(field_err("checkpoint", format!("required by the {} task", self.task.as_str())));
        }
        if self.task == TaskKind::Report && self.runs.is_empty() {
            return Err(field_err("runs", "report needs at least one run directory"));
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        parse_precision(&self.eval_precision).expect("validated")
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    /// The same config restricted to one seed, as recorded in run manifests.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self { seeds: vec![seed], ..self.clone() }
    }

    pub fn from_value(v: Value) -> LabResult<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            LabError::Config(format!("{path}: {}", e.inner()))
        })
    }
}

/// Sets `path` (dot-separated) in `root`, creating intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> LabResult<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("override key {path:?} is malformed")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| LabError::Config(format!("override {path}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last part")
}

/// Applies `--key=value` overrides. Values parse as JSON, falling back to a plain string.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> LabResult<()> {
    for o in overrides {
        let body = o.strip_prefix("--").unwrap_or(o);
        let (key, raw) = body
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("override {o:?} is not of the form --key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(root, key, value)?;
    }
    Ok(())
}

/// Reads the optional config file, applies overrides, parses and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> LabResult<ExperimentConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| LabError::Config(format!("{}: line {} column {}: {e}", p.display(), e.line(), e.column())))?;
            if !v.is_object() {
                return Err(LabError::Config(format!("{}: top level must be a JSON object", p.display())));
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut root, overrides)?;
    let cfg = ExperimentConfig::from_value(root)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = ExperimentConfig::default();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(ExperimentConfig::from_value(v).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = load_config(None, &["--bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = load_config(None, &["--qc.rate=1".into()]).unwrap_err();
        assert!(err.to_string().contains("qc") && err.to_string().contains("rate"), "{err}");
        let err = load_config(None, &[r#"--dataset={"kind":"spirals","n":10,"classes":2,"noise":0.1,"dim":3}"#.into()])
            .unwrap_err();
        assert!(err.to_string().contains("dim"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = load_config(None, &["--epochs=3".into(), "--qc.lr=0.1".into(), "--eval_precision=soft:0.45".into()]).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.qc.lr, 0.1);
        assert!(matches!(c.precision(), Precision::SoftRound(_)));
    }

    #[test]
    fn field_level_diagnostics() {
        for (o, field) in [
            ("--lr=-1", "lr"),
            ("--bits_w=0", "bits_w"),
            ("--ema.alphas=[1.0]", "ema.alphas"),
            ("--seeds=[]", "seeds"),
            ("--eval_precision=soft:0.7", "eval_precision"),
            ("--epochs=\"many\"", "epochs"),
        ] {
            let err = load_config(None, &[o.into()]).unwrap_err();
            assert!(matches!(err, LabError::Config(_)));
            assert!(err.to_string().contains(field), "{o}: {err}");
        }
        let err = load_config(None, &["--task=qc".into()]).unwrap_err();
        assert!(err.to_string().contains("checkpoint"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
