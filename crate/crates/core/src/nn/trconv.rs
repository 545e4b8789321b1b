use rand::Rng;

use super::gemm::gemm;
use super::he_normal;
use super::param::{join, Module, Param};
use crate::tensor::Tensor;

/// 2× transposed convolution (kernel 2, stride 2).
///
/// Every input position expands into a non-overlapping 2×2 output block:
/// `out[2y+a, 2x+b, o] = Σ_c in[y, x, c]·W[c, a, b, o] + bias[o]`.
#[derive(Clone, Debug)]
pub struct TrConv2x {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    input: Option<Tensor>,
}

impl TrConv2x {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(vec![cin, 2, 2, cout], he_normal(rng, cin, cin * 4 * cout)),
            bias: Param::new(vec![cout], vec![0.0; cout]),
            cin,
            cout,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.cin, "trconv input channels");
        let [n, h, w, _] = x.shape();
        let rows = n * h * w;
        let wide = 4 * self.cout;
        let mut r = vec![0.0; rows * wide];
        gemm(rows, self.cin, wide, x.data(), false, &self.weight.value, false, &mut r, 0.0);
        let mut out = Tensor::zeros([n, 2 * h, 2 * w, self.cout]);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((b * h + y) * w + xx) * wide;
                    for a in 0..2 {
                        for bb in 0..2 {
                            let dst = out.index(b, 2 * y + a, 2 * xx + bb, 0);
                            let s = src + (a * 2 + bb) * self.cout;
                            let (o, rr) = (&mut out.data_mut()[dst..dst + self.cout], &r[s..s + self.cout]);
                            for ((ov, rv), bv) in o.iter_mut().zip(rr).zip(&self.bias.value) {
                                *ov = rv + bv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("TrConv2x::backward called without forward_train");
        let [n, h, w, _] = x.shape();
        assert_eq!(dy.shape(), [n, 2 * h, 2 * w, self.cout]);
        let rows = n * h * w;
        let wide = 4 * self.cout;
        let mut dr = vec![0.0; rows * wide];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let dst = ((b * h + y) * w + xx) * wide;
                    for a in 0..2 {
                        for bb in 0..2 {
                            let src = dy.index(b, 2 * y + a, 2 * xx + bb, 0);
                            let d = dst + (a * 2 + bb) * self.cout;
                            dr[d..d + self.cout].copy_from_slice(&dy.data()[src..src + self.cout]);
                        }
                    }
                }
            }
        }
        for p in dy.data().chunks_exact(self.cout) {
            for (g, v) in self.bias.grad.iter_mut().zip(p) {
                *g += v;
            }
        }
        gemm(self.cin, rows, wide, x.data(), true, &dr, false, &mut self.weight.grad, 1.0);
        let mut dx = Tensor::zeros(x.shape());
        gemm(rows, wide, self.cin, &dr, false, &self.weight.value, true, dx.data_mut(), 0.0);
        dx
    }
}

impl Module for TrConv2x {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
