//! Adam with optional global-norm clipping and linear warmup.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

/// Global L2 norm of a gradient set.
pub fn global_norm<F: Real>(grads: &BTreeMap<ParamId, Tensor<F>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// Restores saved state; shapes must match the current moments.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::contract("optimizer state has the wrong number of entries"));
        }
        for (a, b) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "optimizer restore",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Learning rate after warmup scaling for the upcoming step.
    pub fn effective_lr(&self) -> f64 {
        let t = self.step + 1;
        if self.config.warmup_steps > 0 && t < self.config.warmup_steps {
            self.config.lr * t as f64 / self.config.warmup_steps as f64
        } else {
            self.config.lr
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched, moments included. Returns the pre-clipping global norm.
    pub fn step(&mut self, params: &mut ParamStore<F>, mut grads: BTreeMap<ParamId, Tensor<F>>) -> f64 {
        let norm = global_norm(&grads);
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let s = F::lit(self.config.grad_clip / norm);
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        let lr = self.effective_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = F::lit(1.0 - b1.powi(t));
        let c2 = F::lit(1.0 - b2.powi(t));
        let (b1, b2) = (F::lit(b1), F::lit(b2));
        let (lr, eps) = (F::lit(lr), F::lit(self.config.eps));
        let one = F::one();
        for (id, g) in grads {
            let i = id.index();
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                let delta = lr * mhat / (vhat.sqrt() + eps);
                // a zero step must not flip the sign of a -0.0 parameter
                if delta != F::zero() {
                    *pv -= delta;
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[vals.len()], vals).unwrap());
        (s, id)
    }

    fn grads(id: ParamId, g: &[f64]) -> BTreeMap<ParamId, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(id, Tensor::from_f64(&[g.len()], g).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, grads(id, &[0.0, 0.0]));
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let (mut s, id) = store(&[0.0, 0.0]);
        let cfg = AdamConfig {
            grad_clip: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        opt.step(&mut s, grads(id, &[0.5, -3.0]));
        let d = s.get(id).data();
        assert!((d[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((d[1] - 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let (mut s, id) = store(&[0.3, -0.7]);
            let mut opt = Adam::new(AdamConfig::default(), &s);
            for k in 0..20 {
                let g = [0.1 * k as f64, (k as f64).sin()];
                opt.step(&mut s, grads(id, &g));
            }
            s.get(id).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_update_direction() {
        let (mut s, id) = store(&[0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let norm = opt.step(&mut s, grads(id, &[10.0]));
        assert_eq!(norm, 10.0);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let (mut s, id) = store(&[0.25, -0.0, 3.5]);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &s);
        opt.step(&mut s, grads(id, &[1.0, 2.0, -3.0]));
        assert_eq!(
            s.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn warmup_ramps_lr() {
        let (s, _) = store(&[0.0]);
        let opt = Adam::new(
            AdamConfig {
                warmup_steps: 4,
                ..AdamConfig::default()
            },
            &s,
        );
        assert!((opt.effective_lr() - 0.25e-3).abs() < 1e-18);
    }
}
