//! Minimal convolutional layers with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward` is a read-only
//! inference pass, `forward_train` caches what `backward` needs, and
//! `backward` accumulates parameter gradients and returns the input
//! gradient. Layouts are NHWC throughout.

mod adam;
mod batchnorm;
mod conv;
mod gemm;
mod param;
mod trconv;

pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use param::{Module, Param};
pub(crate) use param::join as param_name;
pub use trconv::TrConv2x;

use rand::Rng;

use crate::tensor::Tensor;

/// Convolution, optional batch normalization and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub relu: bool,
    relu_out: Option<Tensor>,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, kernel / 2, rng),
            bn: norm.then(|| BatchNorm2d::new(cout)),
            relu,
            relu_out: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward(&y);
        }
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward_train(x);
        if let Some(bn) = &mut self.bn {
            y = bn.forward_train(&y);
        }
        if self.relu {
            relu_inplace(&mut y);
            self.relu_out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let mut g = dy.clone();
        if self.relu {
            let out = self
                .relu_out
                .take()
                .expect("ConvBlock::backward called without forward_train");
            relu_backward_inplace(&mut g, &out);
        }
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g);
        }
        self.conv.backward(&g, need_input_grad)
    }
}

impl Module for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&param::join(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&param::join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&param::join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&param::join(prefix, "bn"), f);
        }
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, out: &Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// He-normal sample with the given fan-in.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Rows per work item in the parallel conv kernels. Fixed so results do
/// not depend on the thread count.
pub(crate) const ROW_CHUNK: usize = 1024;
