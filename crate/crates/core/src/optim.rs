//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the warmup→cosine learning-rate schedule.
//!
//! Weight decay applies only to rank ≥ 2 tensors (matrices and kernels);
//! biases, gains, and other vectors train without shrinkage. Moments align
//! with `ParamMap` entry order so checkpoints can serialize them by name.

use serde::{Deserialize, Serialize};

use crate::params::ParamMap;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // Short-run defaults: beta2 below the textbook 0.999 so the variance
        // estimate adapts within a few hundred steps.
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamMap<T>, cfg: AdamWConfig) -> Self {
        let m = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        Self { cfg, m, v, t: 0 }
    }

    /// One update over the trainable entries; `grads` aligns with entry
    /// order, `None` meaning no gradient reached that tensor this step.
    pub fn step(
        &mut self,
        params: &mut ParamMap<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Incompatible {
                op: "adamw step",
                detail: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let decay = T::from_f64(lr * self.cfg.weight_decay);
        for i in 0..params.len() {
            if !params.is_trainable(i) {
                continue;
            }
            if let Some(g) = &grads[i] {
                if g.shape() != params.tensor(i).shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw step",
                        lhs: params.tensor(i).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                let gd = g.data();
                let md = self.m[i].data_mut();
                let vd = self.v[i].data_mut();
                let pd = params.tensor_mut(i).data_mut();
                for j in 0..gd.len() {
                    md[j] = b1 * md[j] + (one - b1) * gd[j];
                    vd[j] = b2 * vd[j] + (one - b2) * gd[j] * gd[j];
                    let m_hat = md[j] / bc1;
                    let v_hat = vd[j] / bc2;
                    pd[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            }
            if params.tensor(i).rank() >= 2 {
                for p in params.tensor_mut(i).data_mut() {
                    *p -= decay * *p;
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm; gradients at or under the bound are untouched.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        sq += g.data().iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 10% of peak at `steps`.
pub fn lr_schedule(step: u64, steps: u64, warmup: u64, peak: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let floor = 0.1 * peak;
    if steps <= warmup {
        return peak;
    }
    let t = ((step - warmup) as f64 / (steps - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamMap<f64> {
        let mut p = ParamMap::new();
        p.insert("w", Tensor::full(&[2, 2], v), true).unwrap();
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(&params, cfg);
        let g = Tensor::full(&[2, 2], 0.5);
        opt.step(&mut params, &[Some(g)], 1e-2).unwrap();
        // m̂ = g, v̂ = g² after bias correction: θ' = θ − lr·g/(|g|+ε).
        let expect = 1.0 - 1e-2 * 0.5 / (0.5 + 1e-8);
        for &v in params.tensor(0).data() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn weight_decay_skips_rank_one_tensors() {
        let mut params = ParamMap::new();
        params.insert("w", Tensor::full(&[2, 2], 1.0f64), true).unwrap();
        params.insert("b", Tensor::full(&[2], 1.0f64), true).unwrap();
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        // Zero gradients isolate the decay term.
        let z = |shape: &[usize]| Some(Tensor::zeros(shape));
        opt.step(&mut params, &[z(&[2, 2]), z(&[2])], 1e-2).unwrap();
        let wd = AdamWConfig::default().weight_decay;
        for &v in params.tensor(0).data() {
            assert!((v - (1.0 - 1e-2 * wd)).abs() < 1e-12);
        }
        for &v in params.tensor(1).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn untrainable_entries_never_move() {
        let mut params = ParamMap::new();
        params.insert("stat", Tensor::full(&[2, 2], 3.0f64), false).unwrap();
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        opt.step(&mut params, &[Some(Tensor::full(&[2, 2], 1.0))], 1e-2).unwrap();
        for &v in params.tensor(0).data() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn clip_scales_to_bound_and_reports_norm() {
        let mut grads = vec![Some(Tensor::full(&[9], 1.0f64)), None, Some(Tensor::full(&[16], 1.0f64))];
        // norm = sqrt(9 + 16) = 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_bit_identical() {
        let g = Tensor::full(&[3], 0.1f64);
        let mut grads = vec![Some(g.clone())];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!(norm < 1.0);
        assert_eq!(grads[0].as_ref().unwrap().data(), g.data());
    }

    #[test]
    fn schedule_endpoints_are_pinned() {
        let (steps, warmup, peak) = (1000, 100, 3e-4);
        assert_eq!(lr_schedule(0, steps, warmup, peak), 0.0);
        assert!((lr_schedule(warmup, steps, warmup, peak) - peak).abs() < 1e-18);
        let end = lr_schedule(steps, steps, warmup, peak);
        assert!((end - 0.1 * peak).abs() < 1e-12);
        // Strictly decreasing after warmup.
        let mut prev = f64::INFINITY;
        for s in warmup..=steps {
            let lr = lr_schedule(s, steps, warmup, peak);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut params = one_param(0.7);
            let mut opt = AdamW::new(&params, AdamWConfig::default());
            for k in 1..=5 {
                let g = Tensor::full(&[2, 2], 0.1 * k as f64);
                opt.step(&mut params, &[Some(g)], 1e-3).unwrap();
            }
            params.tensor(0).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
