//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Piecewise-linear schedule: 0 → `peak` over `warmup` steps, then linearly
/// back to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step as f64;
        let up = if self.warmup == 0 {
            f64::INFINITY
        } else {
            s / self.warmup as f64
        };
        let down = if self.total > self.warmup {
            ((self.total as f64 - s) / (self.total - self.warmup) as f64).max(0.0)
        } else {
            0.0
        };
        self.peak * up.min(down)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first and second moments for every parameter block.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    m: ParamStore<F>,
    v: ParamStore<F>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update at 1-based `step`; returns the learning rate used.
    ///
    /// `θ ← θ − lr · (m̂ / (√v̂ + ε) + λ θ)`, with `λ` applied only to blocks
    /// flagged for decay.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::invalid("step", "schedule steps are 1-based"));
        }
        for (_, g) in grads.iter() {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(g.name.clone()));
            }
        }
        let lr = self.schedule.lr(step);
        let c = self.config;
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powf(step as f64));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powf(step as f64));
        let lr_f = F::from_f64_lossy(lr);
        let eps = F::from_f64_lossy(c.eps);
        let wd = F::from_f64_lossy(c.weight_decay);
        let blocks = params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, (_, g)), (m, v)) in blocks {
            let decay = if p.decay { wd } else { F::zero() };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                let theta = p.data[i];
                p.data[i] = theta - lr_f * (m_hat / (v_hat.sqrt() + eps) + decay * theta);
            }
        }
        Ok(lr)
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(F::from_f64_lossy(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 5e-4,
            warmup: 100,
            total: 1000,
        };
        assert_eq!(s.lr(100), 5e-4);
        assert_eq!(s.lr(1000), 0.0);
        assert_eq!(s.lr(2000), 0.0);
        assert!((s.lr(50) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr(550) - 2.5e-4).abs() < 1e-18);
        // continuity and single apex
        let mut prev = 0.0;
        for step in 0..=1000 {
            let lr = s.lr(step);
            assert!((lr - prev).abs() <= 5e-4 / 100.0 + 1e-15);
            assert!(lr <= s.lr(100));
            prev = lr;
        }
    }

    #[test]
    fn single_scalar_update_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::<f64>::new();
        let id = params.add("w", 1, 1, Init::Zeros, true, &mut rng);
        params.data_mut(id)[0] = 0.5;
        let mut grads = params.zeros_like();
        grads.data_mut(id)[0] = 0.2;
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let sched = LrSchedule {
            peak: 1e-2,
            warmup: 1,
            total: 10,
        };
        let mut opt = AdamW::new(&params, cfg, sched);
        let lr = opt.step(&mut params, &grads, 1).unwrap();
        assert_eq!(lr, 1e-2);
        // m = 0.02, v = 4e-5, m̂ = 0.2, v̂ = 0.04
        let expect = 0.5 - 1e-2 * (0.2 / (0.2 + 1e-8) + 0.1 * 0.5);
        assert!((params.data(id)[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::<f32>::new();
        params.add("a", 1, 2, Init::Zeros, true, &mut rng);
        let b = params.add("layer3.ffn.w1", 1, 2, Init::Zeros, true, &mut rng);
        let mut grads = params.zeros_like();
        grads.data_mut(b)[1] = f32::NAN;
        let sched = LrSchedule {
            peak: 1.0,
            warmup: 1,
            total: 2,
        };
        let mut opt = AdamW::new(&params, AdamWConfig::default(), sched);
        match opt.step(&mut params, &grads, 1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layer3.ffn.w1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ParamStore::<f64>::new();
        let id = g.add("g", 1, 2, Init::Zeros, false, &mut rng);
        g.data_mut(id).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
