use super::param::{join, Module, Param};
use crate::tensor::Tensor;

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Per-channel batch normalization over all `n·h·w` positions.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let scale: Vec<f64> = (0..c)
            .map(|i| self.gamma.value[i] / (self.running_var.value[i] + EPS).sqrt())
            .collect();
        let shift: Vec<f64> = (0..c)
            .map(|i| self.beta.value[i] - self.running_mean.value[i] * scale[i])
            .collect();
        let mut y = x.clone();
        for p in y.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                p[i] = p[i] * scale[i] + shift[i];
            }
        }
        y
    }

    /// Training mode: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let count = x.positions() as f64;
        let mut mean = vec![0.0; c];
        for p in x.data().chunks_exact(c) {
            for i in 0..c {
                mean[i] += p[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for p in x.data().chunks_exact(c) {
            for i in 0..c {
                let d = p[i] - mean[i];
                var[i] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();

        let mut xhat = x.clone();
        for p in xhat.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                p[i] = (p[i] - mean[i]) * inv_std[i];
            }
        }
        let mut y = xhat.clone();
        for p in y.data_mut().chunks_exact_mut(c) {
            for i in 0..c {
                p[i] = p[i] * self.gamma.value[i] + self.beta.value[i];
            }
        }

        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for i in 0..c {
            let rm = &mut self.running_mean.value[i];
            *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean[i];
            let rv = &mut self.running_var.value[i];
            *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * var[i] * unbias;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self
            .cache
            .take()
            .expect("BatchNorm2d::backward called without forward_train");
        let c = self.channels();
        let count = dy.positions() as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (g, xh) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
            for i in 0..c {
                dgamma[i] += g[i] * xh[i];
                dbeta[i] += g[i];
            }
        }
        let mut dx = dy.clone();
        for (d, xh) in dx.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)) {
            for i in 0..c {
                d[i] = self.gamma.value[i] * inv_std[i] / count
                    * (count * d[i] - dbeta[i] - xh[i] * dgamma[i]);
            }
        }
        for i in 0..c {
            self.gamma.grad[i] += dgamma[i];
            self.beta.grad[i] += dbeta[i];
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
