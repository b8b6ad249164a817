//! Adaptive-moment optimizer with decoupled weight decay and an optional
//! linear learning-rate warmup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::GradMap;
use crate::param::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay. Defaults to 0 because the training loss
    /// already carries an explicit L2 term.
    pub weight_decay: f64,
    /// Steps of linear warmup from 0 to `learning_rate`; 0 disables warmup.
    pub warmup_steps: usize,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_warmup(mut self, warmup_steps: usize) -> Self {
        self.warmup_steps = warmup_steps;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Effective learning rate at 1-based step `t`.
    fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps as u64 {
            self.learning_rate
        } else {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        }
    }

    /// One update. Every non-frozen parameter must have a gradient in `grads`;
    /// frozen parameters are untouched and carry no moment buffers.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        for p in params.iter() {
            if !p.frozen && !grads.contains_key(&p.name) {
                return Err(Error::Numerical(format!(
                    "optimizer step missing gradient for trainable parameter `{}`",
                    p.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.lr_at(t);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);

        for p in params.iter_mut() {
            if p.frozen {
                // keep the moment-buffer invariant if a parameter was frozen mid-run
                self.m.remove(&p.name);
                self.v.remove(&p.name);
                continue;
            }
            let g = grads[&p.name].data();
            let n = g.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamSet, Parameter};
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("theta", Tensor::scalar(value))).unwrap();
        ps
    }

    fn grad_of(value: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("theta".into(), Tensor::scalar(value));
        g
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        // bias-corrected first step: update = lr * g / (|g| + eps') ~ lr
        let mut ps = one_param(1.0);
        let mut opt = AdamW::new(1e-3);
        opt.step(&mut ps, &grad_of(2.0)).unwrap();
        let theta = ps.get("theta").unwrap().tensor.item().unwrap();
        assert!((theta - 0.999).abs() < 1e-6, "theta = {theta}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let mut ps = one_param(1.25);
        ps.set_frozen("theta", true);
        let before = ps.byte_snapshot();
        let mut opt = AdamW::new(1e-3);
        // frozen params take no gradient; an empty map is a legal full step
        opt.step(&mut ps, &GradMap::new()).unwrap();
        assert_eq!(before, ps.byte_snapshot());
        assert!(opt.m.is_empty() && opt.v.is_empty());
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameter_unchanged() {
        let mut ps = one_param(0.75);
        let mut opt = AdamW::new(1e-3);
        opt.step(&mut ps, &grad_of(0.0)).unwrap();
        let theta = ps.get("theta").unwrap().tensor.item().unwrap();
        assert_eq!(theta, 0.75);
    }

    #[test]
    fn missing_gradient_for_trainable_parameter_is_an_error() {
        let mut ps = one_param(1.0);
        let mut opt = AdamW::new(1e-3);
        let err = opt.step(&mut ps, &GradMap::new()).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn warmup_scales_early_steps_linearly() {
        let mut opt = AdamW::new(1e-2).with_warmup(10);
        assert_eq!(opt.lr_at(1), 1e-3);
        assert_eq!(opt.lr_at(5), 5e-3);
        assert_eq!(opt.lr_at(10), 1e-2);
        assert_eq!(opt.lr_at(100), 1e-2);
        // and the warmup actually shrinks the first update
        let mut ps = one_param(1.0);
        opt.step(&mut ps, &grad_of(2.0)).unwrap();
        let theta = ps.get("theta").unwrap().tensor.item().unwrap();
        assert!((theta - (1.0 - 1e-3)).abs() < 1e-7, "theta = {theta}");
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut ps = one_param(1.0);
        let mut opt = AdamW::new(1e-3);
        for expect in 1..=5 {
            opt.step(&mut ps, &grad_of(1.0)).unwrap();
            assert_eq!(opt.step_count(), expect);
        }
    }

    #[test]
    fn moment_buffers_exist_only_for_trainable_params() {
        let mut ps = one_param(1.0);
        let mut opt = AdamW::new(1e-3);
        opt.step(&mut ps, &grad_of(1.0)).unwrap();
        assert!(opt.m.contains_key("theta"));
        ps.set_frozen("theta", true);
        opt.step(&mut ps, &GradMap::new()).unwrap();
        assert!(!opt.m.contains_key("theta"));
        assert!(!opt.v.contains_key("theta"));
    }
}
