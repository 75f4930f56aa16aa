//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decays, ModelParams};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat parameter slice. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = c(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = c(lr);
    let eps = c(cfg.eps);
    let shrink = if decay {
        c(1.0 - lr * cfg.weight_decay)
    } else {
        T::one()
    };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for a whole model: first/second moments per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ModelParams<T>) -> Self {
        let named = params.named();
        AdamW {
            config,
            m: named.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect(),
            v: named.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect(),
            step: 0,
            decay: named.iter().map(|(n, _)| decays(n)).collect(),
        }
    }

    /// Restores saved moments; shapes must match the model.
    pub fn with_state(mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) -> Result<Self> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Contract("optimizer moments do not match model".into()));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(self)
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        let names = params.names();
        if grads.len() != names.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} tensors",
                grads.len(),
                names.len()
            )));
        }
        for (name, g) in names.iter().zip(grads) {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] = {} at optimizer step {}",
                    g[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            adamw_update(
                p.data_mut(),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                &self.config,
                self.decay[i],
            );
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub final_fraction: f64,
}

impl LrSchedule {
    /// `warmup = max(1, round(ratio · steps))`; decays to 10% of `lr`.
    pub fn new(lr: f64, steps: usize, warmup_ratio: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be > 0")));
        }
        if steps == 0 {
            return Err(Error::Config("zero training steps".into()));
        }
        let warmup_steps = ((warmup_ratio * steps as f64).round() as usize).clamp(1, steps);
        Ok(LrSchedule {
            lr,
            steps,
            warmup_steps,
            final_fraction: 0.1,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.steps);
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let floor = self.lr * self.final_fraction;
        let span = (self.steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = [0.3f64, -1.2, 4.0];
        let before = p;
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for t in 1..=5 {
            adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, t, 1e-3, &no_decay(), true);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &no_decay(), true);
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let cfg = AdamWConfig::default();
        let mut p = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let lr = 1e-2;
        for t in 1..=10 {
            adamw_update(&mut p, &[0.0], &mut m, &mut v, t, lr, &cfg, true);
            let want = 2.0 * (1.0 - lr * cfg.weight_decay).powi(t as i32);
            assert!((p[0] - want).abs() < 1e-14);
        }
        let mut q = [2.0f64];
        adamw_update(&mut q, &[0.0], &mut m, &mut v, 11, lr, &cfg, false);
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-4, 3000, 0.01).unwrap();
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(30), 1e-4);
        assert!((s.lr_at(3000) - 1e-5).abs() < 1e-12);
        assert!(s.lr_at(15) > 0.0 && s.lr_at(15) < 1e-4);
        assert!(s.lr_at(1500) < 1e-4 && s.lr_at(1500) > 1e-5);
        assert_eq!(LrSchedule::new(1.0, 10, 0.01).unwrap().warmup_steps, 1);
        assert!(LrSchedule::new(0.0, 10, 0.01).is_err());
    }

    #[test]
    fn nan_gradient_aborts() {
        let cfg = crate::model::ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ff: 4,
            max_seq_len: 4,
            dropout_rate: 0.0,
        };
        let mut p = ModelParams::<f32>::init(cfg, 0).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut grads: Vec<Vec<f32>> = p.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        grads[3][1] = f32::NAN;
        match opt.step(&mut p, &grads, 1e-3) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layers.0.ln1.bias"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
