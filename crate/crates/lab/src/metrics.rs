//! Metrics CSV writing. Floats use Rust's shortest round-trip formatting, so
//! equal values always produce equal bytes.
//!
//! Frozen schemas, one row per step or epoch:
//!
//! | file | task | columns |
//! |---|---|---|
//! | `trace.csv` | toy | `iter, w_0.., q_w_0.., s_w, s_x, loss, flips` |
//! | `shadow_trace.csv` | toy with EMA | `iter, w_0.., q_w_0.., s_w, s_x, flips` |
//! | `toy_summary.csv` | toy | `series, coordinate, tail_flip_frequency` |
//! | `toy_loss.csv` | toy | `series, window_mean_loss` |
//! | `metrics.csv` | train | `epoch, iterations, train_loss, eval_loss, eval_accuracy`, then `ema<k>_loss, ema<k>_accuracy` per shadow |
//! | `oscillation.csv` | train | `threshold, oscillating_fraction` |
//! | `final.csv` | train, qc | `method, bits_w, bits_a, seed, eval_loss, eval_accuracy` |
//! | `qc.csv` | qc | `calib_loss_before, calib_loss_after, eval_loss, eval_accuracy` |
//! | `fold.csv` | fold | `layer, recoded` |
//! | `fold_check.csv` | fold | `max_abs_output_diff, eval_loss_before, eval_loss_after` |
//! | `eval.csv` | eval | `precision, loss, accuracy` |
//! | `ablation.csv` | ablate | `granularity, variant, eval_loss, eval_accuracy` |
//! | `report.csv` | report | `method, bits_w, bits_a, n, accuracy_mean, accuracy_spread, loss_mean, loss_spread` |
//!
//! Missing accuracies (regression) and absent report cells are empty fields.

use std::path::Path;

use crate::{LabError, LabResult};

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> LabResult<()> {
    let err = |e: csv::Error| LabError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Column names from string literals.
pub fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
