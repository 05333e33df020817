use alloc::collections::BTreeMap;
use alloc::format;

use super::{Gradients, Network, ParamId, ParamKind};
use crate::{Error, Result, Tensor};

/// Adam with bias-corrected moments. Scales are clamped to the minimum after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Updates every parameter of `net` whose kind passes `trainable`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, trainable: impl Fn(ParamKind) -> bool) -> Result<()> {
        if let Some((id, _)) = grads.entries.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Evaluation(format!("non-finite gradient for {}", id.name())));
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (id, param) in net.params_mut() {
            if !trainable(id.kind) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            g.expect_same_shape(param, "adam")?;
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        net.clamp_scales();
        Ok(())
    }
}
