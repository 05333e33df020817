//! Aggregation of per-seed `final.csv` rows into mean ± spread tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::metrics::{cols, fmt_f64, write_csv};
use crate::{LabError, LabResult};

/// Row order within each bit-width group.
pub const METHODS: [&str; 4] = ["plain", "dampening", "ema", "ema+qc"];

#[derive(Clone, Debug, PartialEq)]
pub struct FinalRow {
    pub method: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub seed: u64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub spread: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let spread = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, spread })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Number of runs; 0 marks an absent cell.
    pub n: usize,
    pub accuracy: Option<Summary>,
    pub loss: Option<Summary>,
}

pub const REPORT_COLUMNS: [&str; 8] =
    ["method", "bits_w", "bits_a", "n", "accuracy_mean", "accuracy_spread", "loss_mean", "loss_spread"];

fn find_final_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> LabResult<()> {
    if dir.join("manifest.json").is_file() {
        let f = dir.join("final.csv");
        if f.is_file() {
            out.push(f);
        }
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| LabError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_final_csvs(&d, out)?;
    }
    Ok(())
}

pub fn read_final_csv(path: &Path) -> LabResult<Vec<FinalRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| LabError::io(path, std::io::Error::other(e)))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| LabError::parse(path, "record", e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| LabError::parse(path, format!("line {line}"), format!("bad {what}"));
        let get = |i: usize| rec.get(i).unwrap_or("");
        rows.push(FinalRow {
            method: get(0).to_string(),
            bits_w: get(1).parse().map_err(|_| bad("bits_w"))?,
            bits_a: get(2).parse().map_err(|_| bad("bits_a"))?,
            seed: get(3).parse().map_err(|_| bad("seed"))?,
            eval_loss: get(4).parse().map_err(|_| bad("eval_loss"))?,
            eval_accuracy: match get(5) {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("eval_accuracy"))?),
            },
        });
    }
    Ok(rows)
}

/// Groups rows by bit-width, then lists the four standard methods in order
/// (absent ones with `n = 0`), followed by any other method names.
pub fn summarize(rows: &[FinalRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(u32, u32), BTreeMap<String, Vec<&FinalRow>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.bits_w, r.bits_a)).or_default().entry(r.method.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((bits_w, bits_a), methods) in &groups {
        let mut names: Vec<String> = METHODS.iter().map(|s| s.to_string()).collect();
        names.extend(methods.keys().filter(|m| !METHODS.contains(&m.as_str())).cloned());
        for name in names {
            let runs = methods.get(&name).map(Vec::as_slice).unwrap_or(&[]);
            let acc: Vec<f64> = runs.iter().filter_map(|r| r.eval_accuracy).collect();
            let loss: Vec<f64> = runs.iter().map(|r| r.eval_loss).collect();
            out.push(ReportRow {
                method: name,
                bits_w: *bits_w,
                bits_a: *bits_a,
                n: runs.len(),
                accuracy: Summary::of(&acc),
                loss: Summary::of(&loss),
            });
        }
    }
    out
}

pub fn collect(dirs: &[PathBuf]) -> LabResult<Vec<FinalRow>> {
    let mut files = Vec::new();
    for d in dirs {
        find_final_csvs(d, &mut files)?;
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_final_csv(&f)?);
    }
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> LabResult<()> {
    let cell = |s: Option<Summary>, spread: bool| s.map(|s| fmt_f64(if spread { s.spread } else { s.mean })).unwrap_or_default();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.bits_w.to_string(),
                r.bits_a.to_string(),
                r.n.to_string(),
                cell(r.accuracy, false),
                cell(r.accuracy, true),
                cell(r.loss, false),
                cell(r.loss, true),
            ]
        })
        .collect();
    write_csv(path, &cols(&REPORT_COLUMNS), &body)
}
