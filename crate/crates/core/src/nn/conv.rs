use rand::Rng;
use rayon::prelude::*;

use super::gemm::gemm;
use super::param::{join, Module, Param};
use super::{he_normal, ROW_CHUNK};
use crate::tensor::Tensor;

/// Square 2-D convolution via im2col + GEMM. Weights are `[cout, kh, kw, cin]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor>,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    /// Input offset for output row `r` and tap `(ky, kx)`, or `None` in padding.
    #[inline]
    fn source(&self, r: usize, ky: usize, kx: usize) -> Option<usize> {
        let per_img = self.oh * self.ow;
        let (b, rem) = (r / per_img, r % per_img);
        let (oy, ox) = (rem / self.ow, rem % self.ow);
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some(((b * self.h + iy as usize) * self.w + ix as usize) * self.cin)
    }

    fn im2col(&self, x: &[f64], rows: std::ops::Range<usize>, col: &mut [f64]) {
        let plen = self.patch_len();
        for (i, r) in rows.enumerate() {
            let dst_row = &mut col[i * plen..(i + 1) * plen];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let t = (ky * self.kernel + kx) * self.cin;
                    let dst = &mut dst_row[t..t + self.cin];
                    match self.source(r, ky, kx) {
                        Some(s) => dst.copy_from_slice(&x[s..s + self.cin]),
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: Param::new(
                vec![cout, kernel, kernel, cin],
                he_normal(rng, fan_in, cout * fan_in),
            ),
            bias: Param::new(vec![cout], vec![0.0; cout]),
            cin,
            cout,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        assert_eq!(
            x.c(),
            self.cin,
            "conv expects {} input channels, got {}",
            self.cin,
            x.c()
        );
        let (oh, ow) = self.output_hw(x.h(), x.w());
        Geometry {
            h: x.h(),
            w: x.w(),
            cin: self.cin,
            oh,
            ow,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let rows = x.n() * g.oh * g.ow;
        let plen = g.patch_len();
        let cout = self.cout;
        let mut out = Tensor::zeros([x.n(), g.oh, g.ow, cout]);
        out.data_mut()
            .par_chunks_mut(ROW_CHUNK * cout)
            .enumerate()
            .for_each(|(ci, y)| {
                let start = ci * ROW_CHUNK;
                let nrows = (rows - start).min(ROW_CHUNK);
                let mut col = vec![0.0; nrows * plen];
                g.im2col(x.data(), start..start + nrows, &mut col);
                for row in y.chunks_exact_mut(cout) {
                    row.copy_from_slice(&self.bias.value);
                }
                gemm(nrows, plen, cout, &col, false, &self.weight.value, true, y, 1.0);
            });
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward called without forward_train");
        let g = self.geometry(&x);
        let rows = x.n() * g.oh * g.ow;
        assert_eq!(dy.shape(), [x.n(), g.oh, g.ow, self.cout]);
        let plen = g.patch_len();
        let cout = self.cout;
        let weight = &self.weight.value;

        let partials: Vec<(Vec<f64>, Option<Vec<f64>>)> = dy
            .data()
            .par_chunks(ROW_CHUNK * cout)
            .enumerate()
            .map(|(ci, dyc)| {
                let start = ci * ROW_CHUNK;
                let nrows = (rows - start).min(ROW_CHUNK);
                let mut col = vec![0.0; nrows * plen];
                g.im2col(x.data(), start..start + nrows, &mut col);
                let mut dw = vec![0.0; cout * plen];
                gemm(cout, nrows, plen, dyc, true, &col, false, &mut dw, 0.0);
                let dcol = need_input_grad.then(|| {
                    gemm(nrows, cout, plen, dyc, false, weight, false, &mut col, 0.0);
                    col
                });
                (dw, dcol)
            })
            .collect();

        for row in dy.data().chunks_exact(cout) {
            for (b, d) in self.bias.grad.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for (ci, (dw, dcol)) in partials.into_iter().enumerate() {
            for (acc, v) in self.weight.grad.iter_mut().zip(&dw) {
                *acc += v;
            }
            if let (Some(dx), Some(dcol)) = (dx.as_mut(), dcol) {
                let start = ci * ROW_CHUNK;
                let dxd = dx.data_mut();
                for (i, drow) in dcol.chunks_exact(plen).enumerate() {
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            if let Some(s) = g.source(start + i, ky, kx) {
                                let t = (ky * g.kernel + kx) * g.cin;
                                for (d, v) in dxd[s..s + g.cin].iter_mut().zip(&drow[t..t + g.cin]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of cross-correlation with zero padding.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_hw(x.h(), x.w());
        let mut out = Tensor::zeros([x.n(), oh, ow, conv.cout]);
        for b in 0..x.n() {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..conv.cout {
                        let mut acc = conv.bias.value[o];
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                    continue;
                                }
                                for c in 0..conv.cin {
                                    let wi = ((o * conv.kernel + ky) * conv.kernel + kx) * conv.cin + c;
                                    acc += conv.weight.value[wi] * x.at(b, iy as usize, ix as usize, c);
                                }
                            }
                        }
                        out.set(b, oy, ox, o, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, size) in [(1, 5), (2, 6), (2, 7)] {
            let mut conv = Conv2d::new(3, 4, 3, stride, 1, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = Tensor::from_vec(
                [2, size, size, 3],
                (0..2 * size * size * 3).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect(),
            )
            .unwrap();
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn large_inputs_span_several_row_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = Tensor::from_vec(
            [3, 24, 24, 2],
            (0..3 * 24 * 24 * 2).map(|i| (i as f64 * 0.013).sin()).collect(),
        )
        .unwrap();
        assert!(x.positions() > ROW_CHUNK);
        assert!(conv.forward(&x).max_abs_diff(&naive_conv(&conv, &x)) < 1e-12);
    }
}
