//! Dense `f64` tensors in batch × height × width × channel layout.
//!
//! A single image is a tensor with a batch dimension of one. Feature maps,
//! similarity masks and segmentation outputs all share this type so that the
//! patching and layer code only has one memory layout to deal with.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// An `H×W×C` image with values in `[0, 1]` (batch dimension 1).
pub type ImageTensor = Tensor;
/// A stage feature map, `n×h×w×c`.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "buffer of length {} cannot be viewed as {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a single-image tensor from a closure over `(y, x, c)`.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self {
            shape: [1, h, w, c],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial positions across the whole batch.
    #[inline]
    pub fn positions(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(n, y, x, c);
        self.data[i] = v;
    }

    /// Channel vector at one spatial position.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[f64] {
        let start = self.index(n, y, x, 0);
        &self.data[start..start + self.shape[3]]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies out batch element `i` as a batch-of-one tensor.
    pub fn item(&self, i: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let [_, h, w, c] = first.shape;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        for t in items {
            if t.shape[1..] != [h, w, c] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, h, w, c],
            data,
        })
    }

    /// Concatenates two tensors along the channel dimension.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[..3] != b.shape[..3] {
            return Err(Error::shape(format!(
                "channel concat needs equal n×h×w, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let (ca, cb) = (a.c(), b.c());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (pa, pb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        Ok(Tensor {
            shape: [a.n(), a.h(), a.w(), ca + cb],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let c = self.c();
        assert!(ca <= c, "split point {ca} beyond {c} channels");
        let mut a = Vec::with_capacity(self.positions() * ca);
        let mut b = Vec::with_capacity(self.positions() * (c - ca));
        for p in self.data.chunks_exact(c) {
            a.extend_from_slice(&p[..ca]);
            b.extend_from_slice(&p[ca..]);
        }
        let [n, h, w, _] = self.shape;
        (
            Tensor {
                shape: [n, h, w, ca],
                data: a,
            },
            Tensor {
                shape: [n, h, w, c - ca],
                data: b,
            },
        )
    }

    /// Single channel `ch` as an `n×h×w×1` tensor.
    pub fn channel(&self, ch: usize) -> Tensor {
        let data = self.data.chunks_exact(self.c()).map(|p| p[ch]).collect();
        Tensor {
            shape: [self.n(), self.h(), self.w(), 1],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
