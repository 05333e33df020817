//! Task dispatch. Every seed gets its own directory `<out>/seed-<s>` holding
//! the task's CSVs, checkpoints and a `manifest.json` with the single-seed
//! config, its hash, the wall time and the run status.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use qatlab_core::data::Split;
use qatlab_core::ema::materialize_ema;
use qatlab_core::nn::{evaluate, EvalMetrics, Precision};
use qatlab_core::qc::{fit_qc, qc_ablation, QcVariant};
use qatlab_core::toy::run_toy;
use qatlab_core::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, ExperimentConfig, TaskKind};
use crate::metrics::{cols, fmt_f64, fmt_opt, write_csv};
use crate::pipeline::{self, TOY_TAIL};
use crate::report;
use crate::{LabError, LabResult};

pub const OUT_ENV: &str = "QATLAB_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub seed: Option<u64>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub wall_time_secs: f64,
    /// `complete` or `failed`; failed runs keep whatever artifacts they wrote.
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<String>,
    pub version: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub run_dirs: Vec<PathBuf>,
}

pub fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    root.join(format!("{}-{}", cfg.task.as_str(), &cfg.hash()[..12]))
}

/// Loads a config (or a run manifest, whose embedded config is used),
/// forces `task`, applies overrides and runs it.
pub fn run(task: TaskKind, config: Option<&Path>, overrides: &[String]) -> LabResult<RunSummary> {
    let mut all = Vec::with_capacity(overrides.len() + 1);
    all.push(format!("--task={}", task.as_str()));
    all.extend(overrides.iter().cloned());
    let cfg = match config {
        Some(p) if is_manifest(p)? => {
            let m = read_manifest(p)?;
            let mut v = serde_json::to_value(&m.config).expect("config serializes");
            crate::config::apply_overrides(&mut v, &all)?;
            let c = ExperimentConfig::from_value(v)?;
            c.validate()?;
            c
        }
        _ => load_config(config, &all)?,
    };
    run_config(&cfg)
}

fn is_manifest(p: &Path) -> LabResult<bool> {
    let text = std::fs::read_to_string(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_str::<Value>(&text).map(|v| v.get("config_hash").is_some()).unwrap_or(false))
}

pub fn read_manifest(p: &Path) -> LabResult<Manifest> {
    let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::parse(p, format!("line {}", e.line()), e.to_string()))
}

fn write_json(path: &Path, v: &impl Serialize) -> LabResult<()> {
    let text = serde_json::to_string_pretty(v).expect("serializes");
    std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

fn list_artifacts(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n != "manifest.json")
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

pub fn run_config(cfg: &ExperimentConfig) -> LabResult<RunSummary> {
    cfg.validate()?;
    let out_dir = cfg.out_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| default_out_dir(cfg));
    std::fs::create_dir_all(&out_dir).map_err(|e| LabError::io(&out_dir, e))?;
    if cfg.task == TaskKind::Report {
        execute(cfg, None, &out_dir)?;
        return Ok(RunSummary { run_dirs: vec![out_dir.clone()], out_dir });
    }
    let mut run_dirs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out_dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        let single = ExperimentConfig { out_dir: Some(out_dir.display().to_string()), ..cfg.for_seed(seed) };
        execute(&single, Some(seed), &dir)?;
        run_dirs.push(dir);
    }
    Ok(RunSummary { out_dir, run_dirs })
}

fn execute(cfg: &ExperimentConfig, seed: Option<u64>, dir: &Path) -> LabResult<()> {
    let start = Instant::now();
    let result = match cfg.task {
        TaskKind::Toy => toy(cfg, seed.expect("seeded"), dir),
        TaskKind::Train => train(cfg, seed.expect("seeded"), dir),
        TaskKind::Qc => qc(cfg, seed.expect("seeded"), dir),
        TaskKind::Fold => fold(cfg, dir),
        TaskKind::Ablate => ablate(cfg, seed.expect("seeded"), dir),
        TaskKind::Eval => eval(cfg, dir),
        TaskKind::Report => report_task(cfg, dir),
    };
    let manifest = Manifest {
        task: cfg.task,
        seed,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        status: if result.is_ok() { "complete" } else { "failed" }.into(),
        error: result.as_ref().err().map(|e| e.to_string()),
        artifacts: list_artifacts(dir),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    result
}

fn metric_cells(m: &EvalMetrics) -> [String; 2] {
    [fmt_f64(m.loss), fmt_opt(m.accuracy)]
}

fn final_row(method: &str, cfg: &ExperimentConfig, seed: u64, m: &EvalMetrics) -> Vec<String> {
    let [l, a] = metric_cells(m);
    vec![method.into(), cfg.bits_w.to_string(), cfg.bits_a.to_string(), seed.to_string(), l, a]
}

const FINAL_COLUMNS: [&str; 6] = ["method", "bits_w", "bits_a", "seed", "eval_loss", "eval_accuracy"];

fn toy(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> LabResult<()> {
    let p = pipeline::toy_problem(cfg);
    let run = run_toy(&p, cfg.ema.on, &mut Rng::new(seed))?;
    let d = p.dim();
    let coord_cols = |prefix: &'static str| (0..d).map(move |i| format!("{prefix}_{i}"));
    let mut header = vec!["iter".to_string()];
    header.extend(coord_cols("w"));
    header.extend(coord_cols("q_w"));
    header.extend(cols(&["s_w", "s_x", "loss", "flips"]));
    let rows: Vec<Vec<String>> = run
        .steps
        .iter()
        .map(|s| {
            let mut r = vec![s.iter.to_string()];
            r.extend(s.w.iter().map(|&v| fmt_f64(v)));
            r.extend(s.q_w.iter().map(|&v| fmt_f64(v)));
            r.extend([fmt_f64(s.s_w), fmt_f64(s.s_x), fmt_f64(s.loss), s.flips.to_string()]);
            r
        })
        .collect();
    write_csv(&dir.join("trace.csv"), &header, &rows)?;

    let x = pipeline::toy_eval_batch(&p)?;
    let mut summary = Vec::new();
    let mut losses = vec![vec![
        "live".to_string(),
        fmt_f64(pipeline::toy_window_loss(&p, run.steps.iter().map(|s| (s.w.as_slice(), s.s_w, s.s_x)), &x)?),
    ]];
    for (i, f) in run.tail_flip_frequency(TOY_TAIL).iter().enumerate() {
        summary.push(vec!["live".into(), i.to_string(), fmt_f64(*f)]);
    }
    if let (Some(shadow), Some(freq)) = (&run.shadow, run.shadow_tail_flip_frequency(TOY_TAIL)) {
        let mut header = vec!["iter".to_string()];
        header.extend(coord_cols("w"));
        header.extend(coord_cols("q_w"));
        header.extend(cols(&["s_w", "s_x", "flips"]));
        let mut prev: Option<&[i64]> = None;
        let rows: Vec<Vec<String>> = shadow
            .iter()
            .enumerate()
            .map(|(it, s)| {
                let flips = prev.map_or(0, |p| p.iter().zip(&s.codes).filter(|(a, b)| a != b).count());
                prev = Some(&s.codes);
                let mut r = vec![it.to_string()];
                r.extend(s.w.iter().map(|&v| fmt_f64(v)));
                r.extend(s.codes.iter().map(|&c| fmt_f64(c as f64 * s.s_w)));
                r.extend([fmt_f64(s.s_w), fmt_f64(s.s_x), flips.to_string()]);
                r
            })
            .collect();
        write_csv(&dir.join("shadow_trace.csv"), &header, &rows)?;
        for (i, f) in freq.iter().enumerate() {
            summary.push(vec!["shadow".into(), i.to_string(), fmt_f64(*f)]);
        }
        let l = pipeline::toy_window_loss(&p, shadow.iter().map(|s| (s.w.as_slice(), s.s_w, s.s_x)), &x)?;
        losses.push(vec!["shadow".into(), fmt_f64(l)]);
    }
    write_csv(&dir.join("toy_summary.csv"), &cols(&["series", "coordinate", "tail_flip_frequency"]), &summary)?;
    write_csv(&dir.join("toy_loss.csv"), &cols(&["series", "window_mean_loss"]), &losses)
}

fn train(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> LabResult<()> {
    let t = pipeline::train(cfg, seed)?;
    let out = &t.outcome;
    let mut header = cols(&["epoch", "iterations", "train_loss", "eval_loss", "eval_accuracy"]);
    for k in 0..out.emas.len() {
        header.push(format!("ema{k}_loss"));
        header.push(format!("ema{k}_accuracy"));
    }
    let rows: Vec<Vec<String>> = out
        .history
        .iter()
        .map(|h| {
            let mut r = vec![h.epoch.to_string(), h.iterations.to_string(), fmt_f64(h.train_loss)];
            r.extend(metric_cells(&h.eval));
            for m in &h.ema_eval {
                r.extend(metric_cells(m));
            }
            r
        })
        .collect();
    write_csv(&dir.join("metrics.csv"), &header, &rows)?;

    let precision = Precision::Quantized;
    let live = evaluate(&out.net, &t.data, Split::Eval, precision)?;
    let mut finals = vec![final_row(pipeline::live_method(cfg), cfg, seed, &live)];
    if let Some(ema) = out.emas.first() {
        let shadow = materialize_ema(&out.net, ema)?;
        finals.push(final_row("ema", cfg, seed, &evaluate(&shadow, &t.data, Split::Eval, precision)?));
    }
    write_csv(&dir.join("final.csv"), &cols(&FINAL_COLUMNS), &finals)?;

    let mut osc = Vec::new();
    if out.tracker.steps_in_window() >= 2 {
        for th in [0.001, 0.01, 0.05] {
            osc.push(vec![fmt_f64(th), fmt_f64(out.tracker.oscillating_fraction(th)?)]);
        }
    }
    write_csv(&dir.join("oscillation.csv"), &cols(&["threshold", "oscillating_fraction"]), &osc)?;

    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    Checkpoint::new(out.net.clone(), out.emas.clone(), snapshot).save(&dir.join("model.qckpt"))
}

fn load_input(cfg: &ExperimentConfig) -> LabResult<Checkpoint> {
    Checkpoint::load(Path::new(cfg.checkpoint.as_ref().expect("validated")))
}

fn qc(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> LabResult<()> {
    let ckpt = load_input(cfg)?;
    let (ccfg, data) = pipeline::checkpoint_context(&ckpt)?;
    let (base, used_ema) = pipeline::qc_base(&ckpt, cfg.qc.use_ema)?;
    let out = fit_qc(&base, &data, &pipeline::qc_config(cfg, seed))?;
    let m = evaluate(&out.net, &data, Split::Eval, Precision::Quantized)?;
    let [l, a] = metric_cells(&m);
    write_csv(
        &dir.join("qc.csv"),
        &cols(&["calib_loss_before", "calib_loss_after", "eval_loss", "eval_accuracy"]),
        &[vec![fmt_f64(out.calib_loss_before), fmt_f64(out.calib_loss_after), l, a]],
    )?;
    let method = if used_ema { "ema+qc" } else { "qc" };
    write_csv(&dir.join("final.csv"), &cols(&FINAL_COLUMNS), &[final_row(method, &ccfg, ccfg.seeds[0], &m)])?;
    Checkpoint::new(out.net, Vec::new(), ckpt.config.clone()).save(&dir.join("corrected.qckpt"))
}

fn fold(cfg: &ExperimentConfig, dir: &Path) -> LabResult<()> {
    let ckpt = load_input(cfg)?;
    let (_, data) = pipeline::checkpoint_context(&ckpt)?;
    let (folded, recoded) = pipeline::fold_network(&ckpt.network)?;
    let rows: Vec<Vec<String>> = recoded.iter().enumerate().map(|(i, r)| vec![i.to_string(), r.to_string()]).collect();
    write_csv(&dir.join("fold.csv"), &cols(&["layer", "recoded"]), &rows)?;
    let p = Precision::Quantized;
    let diff = pipeline::max_output_diff(&ckpt.network, &folded, &data, p)?;
    let before = evaluate(&ckpt.network, &data, Split::Eval, p)?;
    let after = evaluate(&folded, &data, Split::Eval, p)?;
    write_csv(
        &dir.join("fold_check.csv"),
        &cols(&["max_abs_output_diff", "eval_loss_before", "eval_loss_after"]),
        &[vec![fmt_f64(diff), fmt_f64(before.loss), fmt_f64(after.loss)]],
    )?;
    Checkpoint::new(folded, Vec::new(), ckpt.config.clone()).save(&dir.join("folded.qckpt"))
}

fn eval(cfg: &ExperimentConfig, dir: &Path) -> LabResult<()> {
    let ckpt = load_input(cfg)?;
    let (_, data) = pipeline::checkpoint_context(&ckpt)?;
    let m = evaluate(&ckpt.network, &data, Split::Eval, cfg.precision())?;
    let [l, a] = metric_cells(&m);
    write_csv(&dir.join("eval.csv"), &cols(&["precision", "loss", "accuracy"]), &[vec![cfg.eval_precision.clone(), l, a]])
}

fn ablate(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> LabResult<()> {
    let ckpt = load_input(cfg)?;
    let (_, data) = pipeline::checkpoint_context(&ckpt)?;
    let (base, _) = pipeline::qc_base(&ckpt, cfg.qc.use_ema)?;
    let t = qc_ablation(&base, &data, &pipeline::qc_config(cfg, seed), &QcVariant::TABLE)?;
    let [l, a] = metric_cells(&t.uncorrected);
    let mut rows = vec![vec!["none".into(), "none".into(), l, a]];
    for (gi, g) in t.granularities.iter().enumerate() {
        for (vi, v) in t.variants.iter().enumerate() {
            let [l, a] = metric_cells(&t.cells[gi][vi]);
            rows.push(vec![g.as_str().into(), v.as_str().into(), l, a]);
        }
    }
    write_csv(&dir.join("ablation.csv"), &cols(&["granularity", "variant", "eval_loss", "eval_accuracy"]), &rows)
}

fn report_task(cfg: &ExperimentConfig, dir: &Path) -> LabResult<()> {
    let dirs: Vec<PathBuf> = cfg.runs.iter().map(PathBuf::from).collect();
    let rows = report::collect(&dirs)?;
    report::write_report(&dir.join("report.csv"), &report::summarize(&rows))
}
