//! Adam with bias correction and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{OptState, StnoModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators aligned with the model's visitation order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &StnoModel<f32>) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        AdamState { v: m.clone(), m, step: 0 }
    }

    /// One bias-corrected update, in place. Gradients must be finite.
    pub fn step(
        &mut self,
        model: &mut StnoModel<f32>,
        grads: &[Tensor<f32>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {i} at optimizer step {}",
                    self.step
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let mut idx = 0usize;
        model.visit_mut(&mut |_, p| {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                pd[j] -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
            }
            idx += 1;
        });
        debug_assert_eq!(idx, grads.len());
        Ok(())
    }

    /// Named snapshot for checkpoints.
    pub fn to_opt_state(&self, model: &StnoModel<f32>) -> OptState {
        let mut names = Vec::new();
        model.visit(&mut |n, _| names.push(n.to_string()));
        OptState {
            m: names.iter().cloned().zip(self.m.iter().cloned()).collect(),
            v: names.iter().cloned().zip(self.v.iter().cloned()).collect(),
        }
    }

    pub fn from_opt_state(model: &StnoModel<f32>, st: &OptState, step: u64) -> Result<Self> {
        let mut names = Vec::new();
        model.visit(&mut |n, _| names.push(n.to_string()));
        let lookup = |list: &[(String, Tensor<f32>)], name: &str| -> Result<Tensor<f32>> {
            list.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("optimizer state missing {name}")))
        };
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for n in &names {
            m.push(lookup(&st.m, n)?);
            v.push(lookup(&st.v, n)?);
        }
        Ok(AdamState { m, v, step })
    }
}

/// lr_final + (lr_init - lr_final)·(1 + cos(π·step/total))/2, clamped to
/// lr_final past the end.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> f64 {
    if step >= total_steps {
        return lr_final;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 2e-4, 1e-7), 2e-4);
        assert_eq!(cosine_lr(1000, 1000, 2e-4, 1e-7), 1e-7);
        let mid = cosine_lr(500, 1000, 2e-4, 1e-7);
        assert!((mid - (2e-4 + 1e-7) / 2.0).abs() < 1e-12);
        // clamp past the end
        assert_eq!(cosine_lr(1500, 1000, 2e-4, 1e-7), 1e-7);
    }

    #[test]
    fn cosine_is_monotonically_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=2000 {
            let lr = cosine_lr(step, 2000, 2e-4, 1e-7);
            assert!(lr <= prev + 1e-18, "step {step}");
            prev = lr;
        }
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // bias-corrected first step moves each parameter by ~lr·sign(g)
        let mut model = StnoModel::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        let before = model.param_map();
        let grads: Vec<Tensor<f32>> =
            before.iter().map(|(_, t)| Tensor::full(t.shape(), 0.5)).collect();
        let mut st = AdamState::new(&model);
        let lr = 1e-3;
        st.step(&mut model, &grads, lr, &AdamConfig::default()).unwrap();
        let after = model.param_map();
        for ((_, b), (_, a)) in before.iter().zip(after.iter()) {
            for (x0, x1) in b.data().iter().zip(a.data()) {
                let delta = (x0 - x1) as f64;
                assert!((delta - lr).abs() < lr * 1e-4, "delta {delta}");
            }
        }
    }

    #[test]
    fn zero_gradients_change_nothing() {
        let mut model = StnoModel::<f32>::new(ModelConfig::tiny(), 2).unwrap();
        let before = model.param_map();
        let grads: Vec<Tensor<f32>> =
            before.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut st = AdamState::new(&model);
        st.step(&mut model, &grads, 1e-3, &AdamConfig::default()).unwrap();
        for ((_, b), (_, a)) in before.iter().zip(model.param_map().iter()) {
            assert_eq!(b.data(), a.data());
        }
    }

    #[test]
    fn lr_zero_changes_nothing() {
        let mut model = StnoModel::<f32>::new(ModelConfig::tiny(), 2).unwrap();
        let before = model.param_map();
        let grads: Vec<Tensor<f32>> =
            before.iter().map(|(_, t)| Tensor::full(t.shape(), 0.3)).collect();
        let mut st = AdamState::new(&model);
        st.step(&mut model, &grads, 0.0, &AdamConfig::default()).unwrap();
        for ((_, b), (_, a)) in before.iter().zip(model.param_map().iter()) {
            assert_eq!(b.data(), a.data());
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let mut model = StnoModel::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let before = model.param_map();
        let g0 = 0.25f64;
        let grads: Vec<Tensor<f32>> =
            before.iter().map(|(_, t)| Tensor::full(t.shape(), g0 as f32)).collect();
        let mut st = AdamState::new(&model);
        let cfg = AdamConfig::default();
        let lr = 2e-3;
        st.step(&mut model, &grads, lr, &cfg).unwrap();
        st.step(&mut model, &grads, lr, &cfg).unwrap();

        // scalar reference with constant gradient
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut delta = 0.0f64;
        for t in 1..=2u32 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g0;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g0 * g0;
            let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = v / (1.0 - cfg.beta2.powi(t as i32));
            delta += lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        for ((_, b), (_, a)) in before.iter().zip(model.param_map().iter()) {
            for (x0, x1) in b.data().iter().zip(a.data()) {
                assert!(((x0 - x1) as f64 - delta).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut model = StnoModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let mut grads: Vec<Tensor<f32>> =
            model.param_map().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = f32::NAN;
        let mut st = AdamState::new(&model);
        assert!(st.step(&mut model, &grads, 1e-3, &AdamConfig::default()).is_err());
    }
}
