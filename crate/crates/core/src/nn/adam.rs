use std::collections::HashMap;

use super::param::{join, Module};

/// Adam without weight decay. State is keyed by parameter name, so one
/// optimizer can drive several modules under distinct prefixes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to every trainable parameter of `module`.
    pub fn update(&mut self, module: &mut dyn Module, prefix: &str) {
        assert!(self.step > 0, "Adam::update before begin_step");
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let moments = &mut self.moments;
        module.visit_mut(prefix, &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments
                .entry(join(prefix, name))
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
    }
}
