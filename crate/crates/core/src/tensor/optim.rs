use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, restricted to an explicit parameter subset.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m = params
            .iter()
            .map(|&p| ArrayD::zeros(store.get(p).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Apply one update. Parameters without a gradient keep their moments but
    /// still see the step counter advance.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    /// Moment buffers keyed by parameter, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(ParamId, &ArrayD<f64>, &ArrayD<f64>)>) {
        (
            self.step,
            self.params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .map(|(&p, (m, v))| (p, m, v))
                .collect(),
        )
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, ArrayD<f64>, ArrayD<f64>)>) {
        self.step = step;
        for (id, m, v) in moments {
            if let Some(i) = self.params.iter().position(|&p| p == id) {
                self.m[i] = m;
                self.v[i] = v;
            }
        }
    }
}
