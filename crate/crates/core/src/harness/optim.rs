//! Adam with decoupled weight decay.

use crate::encoder::Encoder;
use crate::error::{bail, Result};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &Encoder, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = model
            .param_ids()
            .into_iter()
            .map(|id| model.param(id).numel())
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on the model's parameters.
    /// Parameters without a gradient buffer are left alone.
    pub fn step(&mut self, model: &mut Encoder) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        for (slot, id) in model.param_ids().into_iter().enumerate() {
            let p = model.param_mut(id);
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if g.iter().any(|x| !x.is_finite()) {
                bail!(Numerical, "non-finite gradient reached the optimizer");
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        }
        Ok(())
    }
}
