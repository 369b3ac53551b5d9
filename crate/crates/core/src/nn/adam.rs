//! Adam over named parameters, with checkpointable state and the plateau
//! learning-rate rule.

use crate::error::Result;
use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use std::collections::BTreeMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    state: BTreeMap<String, (Var, Var)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, state: BTreeMap::new() }
    }

    /// The (0.9, 0.999) configuration used by the recognition heads.
    pub fn standard(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999)
    }

    /// The (0.0, 0.99) configuration used by the adversarial stages.
    pub fn gan(lr: f64) -> Self {
        Self::new(lr, 0.0, 0.99)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, var) in params {
            let Some(grad) = grads.get(var) else { continue };
            let (m, v) = match self.state.get(name) {
                Some(pair) => pair.clone(),
                None => {
                    let zeros = Tensor::zeros(var.dims(), var.dtype(), var.device())?;
                    let pair = (Var::from_tensor(&zeros)?, Var::from_tensor(&zeros)?);
                    self.state.insert(name.clone(), pair.clone());
                    pair
                }
            };
            let new_m = ((m.as_tensor() * self.beta1)? + (grad * (1.0 - self.beta1))?)?;
            let new_v =
                ((v.as_tensor() * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&new_m / bc1)?;
            let v_hat = (&new_v / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            m.set(&new_m)?;
            v.set(&new_v)?;
        }
        Ok(())
    }

    /// Flatten optimizer state for checkpointing under `opt.<prefix>`.
    pub fn state_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.state.len() + 1);
        for (name, (m, v)) in &self.state {
            out.push((format!("opt.{prefix}.{name}.m"), m.as_tensor().clone()));
            out.push((format!("opt.{prefix}.{name}.v"), v.as_tensor().clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        prefix: &str,
        tensors: &std::collections::HashMap<String, Tensor>,
        step: usize,
    ) -> Result<()> {
        self.step = step;
        for (full, t) in tensors {
            let Some(rest) = full.strip_prefix(&format!("opt.{prefix}.")) else { continue };
            if let Some(name) = rest.strip_suffix(".m") {
                let v_name = format!("opt.{prefix}.{name}.v");
                if let Some(vt) = tensors.get(&v_name) {
                    self.state.insert(
                        name.to_string(),
                        (Var::from_tensor(t)?, Var::from_tensor(vt)?),
                    );
                }
            }
        }
        Ok(())
    }
}

/// Halve the learning rate when the loss stops improving: compares the mean
/// loss over the last `window` steps against the window before it and decays
/// by `factor` when the improvement is below `threshold` (relative). A
/// cooldown of one window follows each decay.
pub struct PlateauDecay {
    pub factor: f64,
    pub window: usize,
    pub threshold: f64,
    pub min_lr: f64,
    history: Vec<f64>,
    cooldown: usize,
}

impl PlateauDecay {
    pub fn new(window: usize) -> Self {
        Self { factor: 0.5, window, threshold: 0.01, min_lr: 1e-6, history: Vec::new(), cooldown: 0 }
    }

    /// Record a loss; returns the new LR when a decay fires.
    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> Option<f64> {
        self.history.push(loss);
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return None;
        }
        let n = self.history.len();
        if n < 2 * self.window {
            return None;
        }
        let recent: f64 =
            self.history[n - self.window..].iter().sum::<f64>() / self.window as f64;
        let previous: f64 = self.history[n - 2 * self.window..n - self.window]
            .iter()
            .sum::<f64>()
            / self.window as f64;
        if recent > previous * (1.0 - self.threshold) && *lr > self.min_lr {
            *lr = (*lr * self.factor).max(self.min_lr);
            self.cooldown = self.window;
            return Some(*lr);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::Init;
    use crate::nn::ParamStore;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let store = ParamStore::new(1);
        let x = store.param("x", &[4], Init::Const(2.0)).unwrap();
        let mut opt = Adam::standard(0.1);
        let entries = store.entries();
        for _ in 0..200 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&entries, &grads).unwrap();
        }
        let vals = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|v| v.abs() < 1e-2), "{vals:?}");
    }

    #[test]
    fn plateau_decay_fires_on_flat_loss() {
        let mut sched = PlateauDecay::new(5);
        let mut lr = 2e-4;
        let mut fired = false;
        for i in 0..30 {
            let loss = if i < 10 { 1.0 / (i + 1) as f64 } else { 0.1 };
            if sched.observe(loss, &mut lr).is_some() {
                fired = true;
            }
        }
        assert!(fired);
        assert!((lr - 1e-4).abs() / 1e-4 < 1e-9 || lr < 1e-4);
    }
}
