//! Exponential moving averages of latent weights and scale factors.
//!
//! Shadows follow `shadow <- alpha * shadow + (1 - alpha) * live` after every
//! optimizer step. The decay is zero during warmup, so early shadows simply
//! copy the live values. There is no bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::nn::{Network, ParamId};
use crate::{Error, Result, Tensor};

/// Fraction of total iterations run with zero decay.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.9999;

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadows: BTreeMap<String, Tensor>,
    pub alpha: f64,
    pub warmup_iters: u64,
    pub iter: u64,
}

/// Warmup length for a run of `total_iters` iterations.
pub fn warmup_iters(total_iters: u64, fraction: f64) -> u64 {
    libm::ceil(total_iters as f64 * fraction) as u64
}

impl EmaState {
    pub fn new(alpha: f64, warmup_iters: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Argument(format!("EMA decay {alpha} outside [0, 1)")));
        }
        Ok(Self { shadows: BTreeMap::new(), alpha, warmup_iters, iter: 0 })
    }

    /// Starts from explicit shadow values instead of copying the first live values.
    pub fn with_shadows(mut self, shadows: BTreeMap<String, Tensor>) -> Self {
        self.shadows = shadows;
        self
    }

    pub fn effective_decay(&self) -> f64 {
        if self.iter < self.warmup_iters {
            0.0
        } else {
            self.alpha
        }
    }

    /// One update. The first call on empty shadows copies `live`.
    pub fn update<'a, I>(&mut self, live: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a Tensor)>,
    {
        let a = self.effective_decay();
        if self.shadows.is_empty() {
            for (name, t) in live {
                self.shadows.insert(name, t.clone());
            }
        } else {
            for (name, t) in live {
                let shadow = self
                    .shadows
                    .get_mut(&name)
                    .ok_or_else(|| Error::State(format!("no EMA shadow for {name}")))?;
                if shadow.shape() != t.shape() {
                    return Err(Error::State(format!(
                        "EMA shadow {name} has shape {:?}, live {:?}",
                        shadow.shape(),
                        t.shape()
                    )));
                }
                for (s, &l) in shadow.data_mut().iter_mut().zip(t.data()) {
                    *s = a * *s + (1.0 - a) * l;
                }
            }
        }
        self.iter += 1;
        Ok(())
    }

    /// Updates from every QAT-trainable parameter of `net`.
    pub fn update_from(&mut self, net: &Network) -> Result<()> {
        self.update(tracked(net).map(|(id, t)| (id.name(), t)))
    }

    pub fn shadow(&self, name: &str) -> Option<&Tensor> {
        self.shadows.get(name)
    }
}

fn tracked(net: &Network) -> impl Iterator<Item = (ParamId, &Tensor)> {
    net.params().into_iter().filter(|(id, _)| id.kind.is_qat_trainable())
}

/// A copy of `net` whose weights, biases, scales and BN affine parameters are
/// the shadow values. BN running statistics stay those of the live network.
pub fn materialize_ema(net: &Network, ema: &EmaState) -> Result<Network> {
    let mut out = net.clone();
    for (id, param) in out.params_mut() {
        if !id.kind.is_qat_trainable() {
            continue;
        }
        let name = id.name();
        let shadow = ema.shadows.get(&name).ok_or_else(|| Error::State(format!("no EMA shadow for {name}")))?;
        if shadow.shape() != param.shape() {
            return Err(Error::State(format!("EMA shadow {name} shape mismatch")));
        }
        param.data_mut().copy_from_slice(shadow.data());
    }
    out.clamp_scales();
    Ok(out)
}
