use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Elem, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let c = self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm: f64 = store
                .entries()
                .iter()
                .flat_map(|e| e.grad.iter())
                .map(|g| {
                    let g = g.as_f64();
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (ob1, ob2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let scale = F::of(scale);
        for ((entry, m), v) in store.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut entry.value)
                .and(&mut entry.grad)
                .and(m)
                .and(v)
                .for_each(|p, g, m, v| {
                    let gs = *g * scale;
                    *m = b1 * *m + ob1 * gs;
                    *v = b2 * *v + ob2 * gs * gs;
                    *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                    *g = F::zero();
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let (value, grad) = store.value_and_grad_mut(id);
            let g = value.mapv(|x| 2.0 * (x - 1.0));
            grad.assign(&g);
            adam.step(&mut store);
        }
        assert!(store.value(id).iter().all(|x| (x - 1.0).abs() < 1e-2));
        assert!(store.grad(id).iter().all(|g| *g == 0.0));
    }
}
