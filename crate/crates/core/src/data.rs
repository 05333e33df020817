//! Synthetic datasets with train / eval / calibration splits.
//!
//! Every generator is a pure function of its seed and parameters. The
//! calibration split is always a subset of the training split, and the eval
//! split never overlaps training.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{normal, Rng};
use crate::{Error, Result, Tensor};

pub const DEFAULT_EVAL_FRACTION: f64 = 0.2;
pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Calibration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, ...]` sample tensor.
    pub inputs: Tensor,
    /// `[n]` class indices for classification, `[n, d]` for regression.
    pub targets: Tensor,
    pub task: Task,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub calibration: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    /// Wraps raw samples, splitting off `eval_fraction` for evaluation and a
    /// `calibration_fraction` subsample of the remaining training items.
    pub fn from_samples(
        inputs: Tensor,
        targets: Tensor,
        task: Task,
        seed: u64,
        eval_fraction: f64,
        calibration_fraction: f64,
    ) -> Result<Self> {
        let n = inputs.rows();
        if targets.rows() != n {
            return Err(Error::dim(
                "Dataset",
                format!("{n} inputs but {} targets", targets.rows()),
            ));
        }
        if n == 0 {
            return Err(Error::Argument("dataset is empty".into()));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Argument(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let mut order = Rng::stream(seed, 0x5911).permutation(n);
        let n_eval = libm::round(eval_fraction * n as f64) as usize;
        let mut eval: Vec<usize> = order.drain(..n_eval).collect();
        let mut train = order;
        eval.sort_unstable();
        train.sort_unstable();
        let d = Self { inputs, targets, task, train, eval, calibration: Vec::new(), seed };
        d.validate_targets()?;
        make_calibration(&d, calibration_fraction, seed)
    }

    fn validate_targets(&self) -> Result<()> {
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::Argument("classification needs at least 2 classes".into()));
            }
            for (i, &t) in self.targets.data().iter().enumerate() {
                if t < 0.0 || t != libm::trunc(t) || t as usize >= classes {
                    return Err(Error::Argument(format!("label {t} at {i} not in 0..{classes}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Calibration => &self.calibration,
        }
    }

    /// Reinterprets every sample with a new shape of the same size, e.g. `[64]` as `[1, 8, 8]`.
    pub fn reshape_samples(mut self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        self.inputs = self.inputs.reshape(shape)?;
        Ok(self)
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((self.inputs.select_rows(rows)?, self.targets.select_rows(rows)?))
    }

    /// Checks the split invariants.
    pub fn check_splits(&self) -> Result<()> {
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        if self.eval.iter().any(|i| train.contains(i)) {
            return Err(Error::State("eval and train splits overlap".into()));
        }
        if self.calibration.iter().any(|i| !train.contains(i)) {
            return Err(Error::State("calibration split is not inside train".into()));
        }
        let n = self.len();
        if self.train.iter().chain(&self.eval).any(|&i| i >= n) {
            return Err(Error::State("split index out of range".into()));
        }
        Ok(())
    }

    /// Classes counted over all samples.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let Task::Classification { classes } = self.task else {
            return None;
        };
        let mut counts = vec![0; classes];
        for &t in self.targets.data() {
            counts[t as usize] += 1;
        }
        Some(counts)
    }
}

/// Reproducible subsample of the train split, `round(fraction * |train|)` items
/// (at least one).
pub fn make_calibration(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("calibration fraction {fraction} outside (0, 1]")));
    }
    let k = (libm::round(fraction * d.train.len() as f64) as usize).clamp(1, d.train.len().max(1));
    let mut pick = d.train.clone();
    Rng::stream(seed, 0xca1b).shuffle(&mut pick);
    pick.truncate(k);
    pick.sort_unstable();
    let mut out = d.clone();
    out.calibration = pick;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Teacher {
    /// Targets equal inputs.
    Identity,
    /// Random tanh MLP with the given hidden widths and output width.
    Mlp { hidden: Vec<usize>, outputs: usize },
}

/// Inputs uniform in `[0, 1)^dim`, targets from a fixed random teacher plus
/// Gaussian noise of standard deviation `noise`.
pub fn gen_regression(seed: u64, n: usize, dim: usize, teacher: &Teacher, noise: f64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::Argument("regression needs n > 0 and dim > 0".into()));
    }
    let mut data_rng = Rng::stream(seed, 1);
    let inputs = crate::rng::uniform(&mut data_rng, &[n, dim], 0.0, 1.0)?;
    let mut clean = match teacher {
        Teacher::Identity => inputs.clone(),
        Teacher::Mlp { hidden, outputs } => {
            let mut teacher_rng = Rng::stream(seed, 2);
            let mut act = inputs.clone();
            let mut widths = hidden.clone();
            widths.push(*outputs);
            let last = widths.len() - 1;
            for (i, &w) in widths.iter().enumerate() {
                let fan_in = act.shape()[1];
                let weight = normal(&mut teacher_rng, &[fan_in, w], 1.0 / libm::sqrt(fan_in as f64));
                act = act.matmul(&weight)?;
                if i != last {
                    act = act.map(libm::tanh);
                }
            }
            act
        }
    };
    if noise > 0.0 {
        let mut noise_rng = Rng::stream(seed, 3);
        for v in clean.data_mut() {
            *v += noise * noise_rng.normal();
        }
    }
    Dataset::from_samples(
        inputs,
        clean,
        Task::Regression,
        seed,
        DEFAULT_EVAL_FRACTION,
        DEFAULT_CALIBRATION_FRACTION,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassMode {
    /// Gaussian clusters around centers drawn uniformly from `[0, 1)^dim`.
    Blobs { dim: usize, noise: f64 },
    /// Interleaved 2-D spiral arms, not linearly separable.
    Spirals { noise: f64 },
}

/// Balanced labelled points: sample `i` belongs to class `i % classes`.
pub fn gen_classification(seed: u64, n: usize, classes: usize, mode: ClassMode) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 {
        return Err(Error::Argument("n must be positive".into()));
    }
    let mut rng = Rng::stream(seed, 4);
    let labels: Vec<f64> = (0..n).map(|i| (i % classes) as f64).collect();
    let inputs = match mode {
        ClassMode::Blobs { dim, noise } => {
            if dim == 0 {
                return Err(Error::Argument("blob dimension must be positive".into()));
            }
            let mut center_rng = Rng::stream(seed, 5);
            let centers: Vec<f64> = (0..classes * dim).map(|_| center_rng.next_f64()).collect();
            let mut data = Vec::with_capacity(n * dim);
            for &label in &labels {
                let c = label as usize;
                for j in 0..dim {
                    data.push(centers[c * dim + j] + noise * rng.normal());
                }
            }
            Tensor::from_parts(vec![n, dim], data)
        }
        ClassMode::Spirals { noise } => {
            let mut data = Vec::with_capacity(n * 2);
            for &label in &labels {
                let t = rng.next_f64();
                let radius = 0.1 + 0.9 * t;
                let angle = 2.0 * core::f64::consts::PI * (1.5 * t + label / classes as f64);
                data.push(0.5 + 0.5 * radius * libm::cos(angle) + noise * rng.normal());
                data.push(0.5 + 0.5 * radius * libm::sin(angle) + noise * rng.normal());
            }
            Tensor::from_parts(vec![n, 2], data)
        }
    };
    let targets = Tensor::from_parts(vec![n], labels);
    Dataset::from_samples(
        inputs,
        targets,
        Task::Classification { classes },
        seed,
        DEFAULT_EVAL_FRACTION,
        DEFAULT_CALIBRATION_FRACTION,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_teacher_without_noise() {
        let d = gen_regression(1, 50, 3, &Teacher::Identity, 0.0).unwrap();
        assert_eq!(d.inputs, d.targets);
    }

    #[test]
    fn regression_is_deterministic() {
        let t = Teacher::Mlp { hidden: vec![8], outputs: 2 };
        assert_eq!(gen_regression(4, 100, 3, &t, 0.1).unwrap(), gen_regression(4, 100, 3, &t, 0.1).unwrap());
    }

    #[test]
    fn regression_target_variance_adds_noise() {
        let t = Teacher::Mlp { hidden: vec![16], outputs: 1 };
        let n = 100_000;
        let clean = gen_regression(8, n, 4, &t, 0.0).unwrap();
        let noisy = gen_regression(8, n, 4, &t, 0.3).unwrap();
        let var = |x: &Tensor| {
            let m = x.sum() / x.len() as f64;
            x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
        };
        let expected = var(&clean.targets) + 0.09;
        let got = var(&noisy.targets);
        assert!((got - expected).abs() / expected < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn classes_are_balanced() {
        for n in [100, 101, 103] {
            let d = gen_classification(2, n, 4, ClassMode::Spirals { noise: 0.01 }).unwrap();
            let c = d.class_counts().unwrap();
            let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
            assert!(hi - lo <= 1, "{c:?}");
        }
        assert!(gen_classification(2, 10, 1, ClassMode::Spirals { noise: 0.0 }).is_err());
    }

    #[test]
    fn classification_is_deterministic() {
        let m = ClassMode::Blobs { dim: 5, noise: 0.1 };
        assert_eq!(gen_classification(3, 64, 3, m).unwrap(), gen_classification(3, 64, 3, m).unwrap());
    }

    #[test]
    fn split_invariants_hold() {
        let d = gen_classification(9, 1000, 3, ClassMode::Blobs { dim: 4, noise: 0.2 }).unwrap();
        d.check_splits().unwrap();
        assert_eq!(d.eval.len(), 200);
        assert_eq!(d.train.len(), 800);
        assert_eq!(d.calibration.len(), 80);
    }

    #[test]
    fn calibration_fractions() {
        let d = gen_classification(9, 1250, 2, ClassMode::Blobs { dim: 2, noise: 0.2 }).unwrap();
        assert_eq!(d.train.len(), 1000);
        let full = make_calibration(&d, 1.0, 1).unwrap();
        assert_eq!(full.calibration, full.train);
        let tenth = make_calibration(&d, 0.1, 1).unwrap();
        assert_eq!(tenth.calibration.len(), 100);
        tenth.check_splits().unwrap();
        assert!(make_calibration(&d, 0.0, 1).is_err());
        assert!(make_calibration(&d, 1.5, 1).is_err());
    }
}
