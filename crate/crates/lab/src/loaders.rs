//! File ingestion.
//!
//! IDX: big-endian header `00 00 08 <ndim>` followed by `ndim` u32 sizes and
//! unsigned bytes. Images use magic `0x00000803` (`[n, rows, cols]`), labels
//! `0x00000801` (`[n]`). Pixels are divided by 255.
//!
//! CSV: UTF-8, comma-delimited, one header row. The schema names the target
//! columns; every other column is a feature. For classification there is a
//! single target column of integer labels.

use std::path::Path;

use qatlab_core::data::{Dataset, Task, DEFAULT_CALIBRATION_FRACTION, DEFAULT_EVAL_FRACTION};
use qatlab_core::Tensor;

use crate::{LabError, LabResult};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Idx {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> LabResult<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| LabError::parse(path, format!("byte {offset}"), "unexpected end of header"))
}

fn parse_idx(bytes: &[u8], path: &Path, magic: u32) -> LabResult<Idx> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(LabError::parse(path, "byte 0", format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have != want {
        return Err(LabError::parse(
            path,
            format!("byte {}", start + have.min(want)),
            format!("header promises {want} data bytes, file has {have}"),
        ));
    }
    Ok(Idx { dims, data: bytes[start..].to_vec() })
}

fn read(path: &Path) -> LabResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

/// Loads an image/label IDX pair as `[n, 1, rows, cols]` inputs in `[0, 1]`.
/// `classes` defaults to the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>, seed: u64) -> LabResult<Dataset> {
    let img = parse_idx(&read(images)?, images, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&read(labels)?, labels, IDX_LABELS_MAGIC)?;
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(LabError::parse(labels, "byte 4", format!("{} labels for {n} images", lab.dims[0])));
    }
    if n == 0 {
        return Err(LabError::parse(images, "byte 4", "no images"));
    }
    let max_label = *lab.data.iter().max().expect("n > 0") as usize;
    let classes = classes.unwrap_or(max_label + 1).max(2);
    if max_label >= classes {
        let at = lab.data.iter().position(|&l| l as usize >= classes).expect("exists");
        return Err(LabError::parse(labels, format!("byte {}", 8 + at), format!("label {} >= {classes} classes", lab.data[at])));
    }
    let inputs = Tensor::new(
        [n, 1, img.dims[1], img.dims[2]],
        img.data.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let targets = Tensor::new([n], lab.data.iter().map(|&l| l as f64).collect())?;
    Ok(Dataset::from_samples(
        inputs,
        targets,
        Task::Classification { classes },
        seed,
        DEFAULT_EVAL_FRACTION,
        DEFAULT_CALIBRATION_FRACTION,
    )?)
}

/// Writes `[n, rows, cols]` images (values `0..=255`) in IDX format.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> LabResult<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(LabError::Format("pixel count is not a multiple of rows * cols".into()));
    }
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [pixels.len() / (rows * cols), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> LabResult<()> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub targets: Vec<String>,
    /// `Some` for classification with a single integer label column.
    pub classes: Option<usize>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema, seed: u64) -> LabResult<Dataset> {
    let bytes = read(path)?;
    if bytes.is_empty() {
        return Err(LabError::parse(path, "line 1", "empty file, expected a header row"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| LabError::parse(path, "line 1", e.to_string()))?.clone();
    let mut target_idx = Vec::with_capacity(schema.targets.len());
    for t in &schema.targets {
        let i = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| LabError::parse(path, "line 1", format!("no column named {t:?}")))?;
        target_idx.push(i);
    }
    if schema.classes.is_some() && target_idx.len() != 1 {
        return Err(LabError::Config("classification CSV needs exactly one target column".into()));
    }
    if target_idx.is_empty() || target_idx.len() == header.len() {
        return Err(LabError::parse(path, "line 1", "need at least one feature and one target column"));
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let (mut xs, mut ys, mut n) = (Vec::new(), Vec::new(), 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            LabError::parse(path, format!("line {line}"), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> LabResult<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LabError::parse(path, format!("line {line}"), format!("column {:?}: {s:?} is not a finite number", &header[i])))
        };
        for &i in &feature_idx {
            xs.push(field(i)?);
        }
        for &i in &target_idx {
            let v = field(i)?;
            if let Some(c) = schema.classes {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= c {
                    return Err(LabError::parse(path, format!("line {line}"), format!("label {v} not in 0..{c}")));
                }
            }
            ys.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(LabError::parse(path, "line 2", "no data rows"));
    }
    let inputs = Tensor::new([n, feature_idx.len()], xs)?;
    let (targets, task) = match schema.classes {
        Some(classes) => (Tensor::new([n], ys)?, Task::Classification { classes }),
        None => (Tensor::new([n, target_idx.len()], ys)?, Task::Regression),
    };
    Ok(Dataset::from_samples(inputs, targets, task, seed, DEFAULT_EVAL_FRACTION, DEFAULT_CALIBRATION_FRACTION)?)
}

/// Writes features as `x0, x1, ...` and targets under the schema's names.
pub fn write_csv_dataset(path: &Path, d: &Dataset, schema: &CsvSchema) -> LabResult<()> {
    let n = d.len();
    let features = d.inputs.len() / n;
    let outputs = d.targets.len() / n;
    if outputs != schema.targets.len() {
        return Err(LabError::Config(format!("schema names {} targets, dataset has {outputs}", schema.targets.len())));
    }
    let mut header: Vec<String> = (0..features).map(|i| format!("x{i}")).collect();
    header.extend(schema.targets.iter().cloned());
    let rows: Vec<Vec<String>> = (0..n)
        .map(|r| {
            let mut row: Vec<String> = d.inputs.data()[r * features..(r + 1) * features].iter().map(|v| format!("{v}")).collect();
            row.extend(d.targets.data()[r * outputs..(r + 1) * outputs].iter().map(|v| format!("{v}")));
            row
        })
        .collect();
    crate::metrics::write_csv(path, &header, &rows)
}
