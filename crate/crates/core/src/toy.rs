//! Three-dimensional toy regression with quantized weights and inputs:
//! minimize `E_x || x * w_star - q(x; s_x) * q(w; s_w) ||` (elementwise
//! products) over the latent `w` and both scales by plain gradient descent.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::ema::EmaState;
use crate::oscillation::OscillationTracker;
use crate::quant::{integer_code, quantize, quantize_backward, quantize_backward_batched, GradScale, QuantizerState};
use crate::rng::uniform;
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyProblem {
    pub w_star: Tensor,
    /// Starting latent weights; `None` draws them uniformly from `[-s_w0/4, s_w0/4)`.
    pub w_init: Option<Tensor>,
    pub bits_w: u32,
    pub bits_x: u32,
    pub signed_w: bool,
    pub s_w0: f64,
    pub s_x0: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub grad_scale: GradScale,
    /// Shadow decay when a run tracks EMA.
    pub ema_alpha: f64,
    pub ema_warmup: u64,
    pub divergence_limit: f64,
}

impl ToyProblem {
    /// The 1-bit configuration with `w_star = [0.55, -0.3, 1.2] * s_w0`.
    pub fn one_bit() -> Self {
        let s_w0 = 1.0;
        Self {
            w_star: Tensor::from_slice(&[0.55 * s_w0, -0.3 * s_w0, 1.2 * s_w0]),
            w_init: None,
            bits_w: 1,
            bits_x: 1,
            signed_w: false,
            s_w0,
            s_x0: 1.0,
            batch_size: 16,
            steps: 10_000,
            lr: 0.01,
            grad_scale: GradScale::Lsq,
            ema_alpha: 0.99,
            ema_warmup: 100,
            divergence_limit: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits_w == 0 || self.bits_x == 0 {
            return Err(Error::Argument("bit-widths must be >= 1".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Argument("steps and batch size must be positive".into()));
        }
        if let Some(w) = &self.w_init {
            w.expect_same_shape(&self.w_star, "ToyProblem")?;
        }
        if self.w_star.shape().len() != 1 {
            return Err(Error::dim("ToyProblem", "w_star must be a vector"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    fn quantizers(&self) -> Result<(QuantizerState, QuantizerState)> {
        Ok((
            QuantizerState::per_tensor(self.bits_w, self.signed_w, self.s_w0)?.with_grad_scale(self.grad_scale),
            QuantizerState::per_tensor(self.bits_x, false, self.s_x0)?.with_grad_scale(self.grad_scale),
        ))
    }
}

fn residuals(w: &Tensor, q_w: &QuantizerState, q_x: &QuantizerState, x: &Tensor, w_star: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = w_star.len();
    if x.shape().len() != 2 || x.shape()[1] != d || w.len() != d {
        return Err(Error::dim("toy_objective", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let wq = quantize(w, q_w)?;
    let xq = quantize(x, q_x)?;
    let mut e = vec![0.0; x.len()];
    for (k, ek) in e.iter_mut().enumerate() {
        let i = k % d;
        *ek = x.data()[k] * w_star.data()[i] - xq.data()[k] * wq.data()[i];
    }
    Ok((wq, xq, e))
}

/// Mean over the batch of the (unsquared) L2 residual norm.
pub fn toy_objective(w: &Tensor, q_w: &QuantizerState, q_x: &QuantizerState, x: &Tensor, w_star: &Tensor) -> Result<f64> {
    let (_, _, e) = residuals(w, q_w, q_x, x, w_star)?;
    let d = w_star.len();
    let n = x.shape()[0];
    let total: f64 = e.chunks(d).map(|r| libm::sqrt(r.iter().map(|v| v * v).sum())).sum();
    Ok(total / n as f64)
}

/// Mean squared residual norm; the quantity gradient descent minimizes.
pub fn toy_objective_squared(w: &Tensor, q_w: &QuantizerState, q_x: &QuantizerState, x: &Tensor, w_star: &Tensor) -> Result<f64> {
    let (_, _, e) = residuals(w, q_w, q_x, x, w_star)?;
    Ok(e.iter().map(|v| v * v).sum::<f64>() / x.shape()[0] as f64)
}

/// STE gradients of [`toy_objective_squared`]: `(g_w, g_s_w, g_s_x)`.
pub fn toy_gradients(w: &Tensor, q_w: &QuantizerState, q_x: &QuantizerState, x: &Tensor, w_star: &Tensor) -> Result<(Tensor, f64, f64)> {
    let (wq, xq, e) = residuals(w, q_w, q_x, x, w_star)?;
    let d = w_star.len();
    let n = x.shape()[0] as f64;
    let mut g_wq = vec![0.0; d];
    let mut g_xq = vec![0.0; x.len()];
    for (k, &ek) in e.iter().enumerate() {
        let i = k % d;
        g_wq[i] += -2.0 * ek * xq.data()[k] / n;
        g_xq[k] = -2.0 * ek * wq.data()[i] / n;
    }
    let gw = quantize_backward(w, q_w, &Tensor::from_parts(w.shape().to_vec(), g_wq))?;
    let gx = quantize_backward_batched(x, q_x, &Tensor::from_parts(x.shape().to_vec(), g_xq))?;
    Ok((gw.input, gw.scale.data()[0], gx.scale.data()[0]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyStep {
    pub iter: usize,
    pub w: Vec<f64>,
    pub q_w: Vec<f64>,
    pub codes: Vec<i64>,
    pub s_w: f64,
    pub s_x: f64,
    /// Batch loss before the update.
    pub loss: f64,
    /// Coordinates whose code changed at this step.
    pub flips: usize,
}

/// Shadow parameters recorded alongside the live trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyShadowStep {
    pub w: Vec<f64>,
    pub codes: Vec<i64>,
    pub s_w: f64,
    pub s_x: f64,
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub steps: Vec<ToyStep>,
    pub tracker: OscillationTracker,
    pub shadow: Option<Vec<ToyShadowStep>>,
    pub shadow_tracker: Option<OscillationTracker>,
}

fn tail_frequency<'a>(codes: impl Iterator<Item = &'a [i64]>, dim: usize) -> Vec<f64> {
    let codes: Vec<&[i64]> = codes.collect();
    let mut flips = vec![0usize; dim];
    for pair in codes.windows(2) {
        for i in 0..dim {
            if pair[0][i] != pair[1][i] {
                flips[i] += 1;
            }
        }
    }
    let denom = codes.len().saturating_sub(1).max(1) as f64;
    flips.into_iter().map(|f| f as f64 / denom).collect()
}

impl ToyRun {
    /// Per-coordinate flip frequency of the live codes over the last `n` steps.
    pub fn tail_flip_frequency(&self, n: usize) -> Vec<f64> {
        let start = self.steps.len().saturating_sub(n);
        let dim = self.steps.first().map_or(0, |s| s.codes.len());
        tail_frequency(self.steps[start..].iter().map(|s| s.codes.as_slice()), dim)
    }

    /// Same for the shadow codes, if recorded.
    pub fn shadow_tail_flip_frequency(&self, n: usize) -> Option<Vec<f64>> {
        let shadow = self.shadow.as_ref()?;
        let start = shadow.len().saturating_sub(n);
        let dim = shadow.first().map_or(0, |s| s.codes.len());
        Some(tail_frequency(shadow[start..].iter().map(|s| s.codes.as_slice()), dim))
    }

    /// Final live `(w, s_w, s_x)`.
    pub fn final_live(&self) -> (Tensor, f64, f64) {
        let last = self.steps.last().expect("runs have at least one step");
        (Tensor::from_slice(&last.w), last.s_w, last.s_x)
    }

    pub fn final_shadow(&self) -> Option<(Tensor, f64, f64)> {
        let last = self.shadow.as_ref()?.last()?;
        Some((Tensor::from_slice(&last.w), last.s_w, last.s_x))
    }
}

/// Loss of `(w, s_w, s_x)` on a batch, using the problem's bit-widths.
pub fn toy_loss_at(p: &ToyProblem, w: &Tensor, s_w: f64, s_x: f64, x: &Tensor) -> Result<f64> {
    let (mut qw, mut qx) = p.quantizers()?;
    qw.scale = Tensor::from_slice(&[s_w]);
    qx.scale = Tensor::from_slice(&[s_x]);
    toy_objective(w, &qw, &qx, x, &p.w_star)
}

/// Gradient descent on the toy problem. Records every step; with `use_ema`,
/// shadows of `w`, `s_w` and `s_x` are kept and recorded in parallel.
pub fn run_toy(p: &ToyProblem, use_ema: bool, rng: &mut Rng) -> Result<ToyRun> {
    p.validate()?;
    let d = p.dim();
    let (mut qw, mut qx) = p.quantizers()?;
    let mut w = match &p.w_init {
        Some(w) => w.clone(),
        None => uniform(rng, &[d], -0.25 * p.s_w0, 0.25 * p.s_w0)?,
    };
    let names: Vec<String> = vec!["s_w".into(), "s_x".into()];
    let mut tracker = OscillationTracker::new(p.steps.max(2), names.clone())?;
    let mut shadow_tracker = if use_ema { Some(OscillationTracker::new(p.steps.max(2), names)?) } else { None };
    let mut ema = if use_ema { Some(EmaState::new(p.ema_alpha, p.ema_warmup)?) } else { None };
    let mut steps = Vec::with_capacity(p.steps);
    let mut shadow_steps = use_ema.then(|| Vec::with_capacity(p.steps));
    let mut prev: Option<Vec<i64>> = None;

    for iter in 0..p.steps {
        let x = uniform(rng, &[p.batch_size, d], 0.0, 1.0)?;
        let loss = toy_objective(&w, &qw, &qx, &x, &p.w_star)?;
        if !loss.is_finite() || loss > p.divergence_limit {
            return Err(Error::Divergence { step: iter, loss });
        }
        let (gw, gsw, gsx) = toy_gradients(&w, &qw, &qx, &x, &p.w_star)?;
        for (wi, gi) in w.data_mut().iter_mut().zip(gw.data()) {
            *wi -= p.lr * gi;
        }
        qw.scale.data_mut()[0] -= p.lr * gsw;
        qx.scale.data_mut()[0] -= p.lr * gsx;
        qw.clamp_scale();
        qx.clamp_scale();

        let codes = integer_code(&w, &qw)?;
        let flips = prev.as_ref().map_or(0, |pc| pc.iter().zip(&codes).filter(|(a, b)| a != b).count());
        let (s_w, s_x) = (qw.scale.data()[0], qx.scale.data()[0]);
        tracker.record_step(&codes, &[s_w, s_x])?;
        steps.push(ToyStep {
            iter,
            w: w.data().to_vec(),
            q_w: quantize(&w, &qw)?.into_data(),
            codes: codes.clone(),
            s_w,
            s_x,
            loss,
            flips,
        });
        prev = Some(codes);

        if let (Some(ema), Some(rec), Some(st)) = (&mut ema, &mut shadow_steps, &mut shadow_tracker) {
            let sw = Tensor::scalar(s_w);
            let sx = Tensor::scalar(s_x);
            ema.update([("w".into(), &w), ("s_w".into(), &sw), ("s_x".into(), &sx)])?;
            let w_bar = ema.shadows["w"].clone();
            let sw_bar = ema.shadows["s_w"].data()[0].max(crate::MIN_SCALE);
            let sx_bar = ema.shadows["s_x"].data()[0].max(crate::MIN_SCALE);
            let mut q_bar = qw.clone();
            q_bar.scale = Tensor::from_slice(&[sw_bar]);
            let codes = integer_code(&w_bar, &q_bar)?;
            st.record_step(&codes, &[sw_bar, sx_bar])?;
            rec.push(ToyShadowStep { w: w_bar.into_data(), codes, s_w: sw_bar, s_x: sx_bar });
        }
    }
    Ok(ToyRun { steps, tracker, shadow: shadow_steps, shadow_tracker })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_representation_has_zero_loss() {
        let qw = QuantizerState::per_tensor(4, true, 0.5).unwrap();
        let qx = QuantizerState::per_tensor(4, false, 0.25).unwrap();
        let w_star = Tensor::from_slice(&[0.5, -1.0, 1.5]);
        let x = Tensor::new([2, 3], vec![0.25, 0.5, 0.75, 0.0, 1.0, 0.5]).unwrap();
        assert_eq!(toy_objective(&w_star, &qw, &qx, &x, &w_star).unwrap(), 0.0);
    }

    #[test]
    fn zero_target_and_weight() {
        let qw = QuantizerState::per_tensor(1, true, 1.0).unwrap();
        let qx = QuantizerState::per_tensor(1, false, 1.0).unwrap();
        let x = Tensor::new([1, 3], vec![1.0; 3]).unwrap();
        let zero = Tensor::zeros([3]);
        assert_eq!(toy_objective(&zero, &qw, &qx, &x, &zero).unwrap(), 0.0);
    }

    #[test]
    fn starting_at_representable_optimum_never_flips() {
        let mut p = ToyProblem::one_bit();
        p.w_star = Tensor::zeros([3]);
        p.w_init = Some(p.w_star.clone());
        p.steps = 500;
        let run = run_toy(&p, false, &mut Rng::new(3)).unwrap();
        assert!(run.tracker.flip_counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let mut p = ToyProblem::one_bit();
        p.steps = 300;
        let a = run_toy(&p, true, &mut Rng::new(11)).unwrap();
        let b = run_toy(&p, true, &mut Rng::new(11)).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.shadow, b.shadow);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = ToyProblem::one_bit();
        p.divergence_limit = 1e-9;
        p.w_star = Tensor::from_slice(&[5.0, 5.0, 5.0]);
        assert!(matches!(run_toy(&p, false, &mut Rng::new(0)), Err(Error::Divergence { step: 0, .. })));
    }
}
