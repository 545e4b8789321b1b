//! Non-overlapping `k×k` patch grids.
//!
//! Patches are ordered row-major: patch `j` covers grid cell
//! `(j / k, j % k)`. Source pixel `(u, v)` lands in patch
//! `⌊u/(H/k)⌋·k + ⌊v/(W/k)⌋` at local offset `(u mod H/k, v mod W/k)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    k: usize,
    patches: Vec<Tensor>,
    source_shape: [usize; 4],
}

impl PatchGrid {
    /// Wraps an existing list of patches, e.g. per-patch feature maps.
    ///
    /// `source_shape` is inferred from the patch shape and `k`.
    pub fn from_patches(k: usize, patches: Vec<Tensor>) -> Result<Self> {
        if k == 0 || patches.len() != k * k {
            return Err(Error::shape(format!(
                "a {k}×{k} grid needs {} patches, got {}",
                k * k,
                patches.len()
            )));
        }
        let first = patches[0].shape();
        if let Some(bad) = patches.iter().find(|p| p.shape() != first) {
            return Err(Error::shape(format!(
                "patch shapes disagree: {:?} vs {:?}",
                first,
                bad.shape()
            )));
        }
        Ok(Self {
            k,
            patches,
            source_shape: [first[0], first[1] * k, first[2] * k, first[3]],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn patches(&self) -> &[Tensor] {
        &self.patches
    }

    pub fn into_patches(self) -> Vec<Tensor> {
        self.patches
    }

    pub fn source_shape(&self) -> [usize; 4] {
        self.source_shape
    }
}

fn check_divisible(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("patch grid side k must be at least 1"));
    }
    for size in [h, w] {
        if size % k != 0 {
            return Err(Error::Divisibility {
                size,
                factor: k,
                context: "patch split",
            });
        }
    }
    Ok(())
}

/// Splits `x` into `k²` non-overlapping patches in row-major order.
pub fn split(x: &Tensor, k: usize) -> Result<PatchGrid> {
    let [n, h, w, c] = x.shape();
    check_divisible(h, w, k)?;
    let (ph, pw) = (h / k, w / k);
    let row = pw * c;
    let mut patches = Vec::with_capacity(k * k);
    for gy in 0..k {
        for gx in 0..k {
            let mut data = Vec::with_capacity(n * ph * row);
            for b in 0..n {
                for y in 0..ph {
                    let start = x.index(b, gy * ph + y, gx * pw, 0);
                    data.extend_from_slice(&x.data()[start..start + row]);
                }
            }
            patches.push(Tensor::from_vec([n, ph, pw, c], data)?);
        }
    }
    Ok(PatchGrid {
        k,
        patches,
        source_shape: x.shape(),
    })
}

/// Places every patch back at its original grid position.
pub fn reassemble(grid: &PatchGrid) -> Result<Tensor> {
    let k = grid.k;
    let first = grid
        .patches
        .first()
        .ok_or_else(|| Error::shape("empty patch grid"))?
        .shape();
    let [n, ph, pw, c] = first;
    let mut out = Tensor::zeros([n, ph * k, pw * k, c]);
    let row = pw * c;
    for (j, patch) in grid.patches.iter().enumerate() {
        if patch.shape() != first {
            return Err(Error::shape(format!(
                "patch {j} has shape {:?}, expected {:?}",
                patch.shape(),
                first
            )));
        }
        let (gy, gx) = (j / k, j % k);
        for b in 0..n {
            for y in 0..ph {
                let src = patch.index(b, y, 0, 0);
                let dst = out.index(b, gy * ph + y, gx * pw, 0);
                out.data_mut()[dst..dst + row].copy_from_slice(&patch.data()[src..src + row]);
            }
        }
    }
    Ok(out)
}

/// Splits every image of `x` into `k²` patches and stacks them along the
/// batch axis: image-major, then row-major within the image.
pub fn split_to_batch(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let [n, h, w, c] = x.shape();
    check_divisible(h, w, k)?;
    let (ph, pw) = (h / k, w / k);
    let row = pw * c;
    let mut data = Vec::with_capacity(x.len());
    for b in 0..n {
        for gy in 0..k {
            for gx in 0..k {
                for y in 0..ph {
                    let start = x.index(b, gy * ph + y, gx * pw, 0);
                    data.extend_from_slice(&x.data()[start..start + row]);
                }
            }
        }
    }
    Tensor::from_vec([n * k * k, ph, pw, c], data)
}

/// Inverse of [`split_to_batch`].
pub fn merge_from_batch(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let [nb, ph, pw, c] = x.shape();
    if k == 0 || nb % (k * k) != 0 {
        return Err(Error::shape(format!(
            "batch of {nb} patches is not a multiple of {k}²"
        )));
    }
    let n = nb / (k * k);
    let mut out = Tensor::zeros([n, ph * k, pw * k, c]);
    let row = pw * c;
    let mut src = 0;
    for b in 0..n {
        for gy in 0..k {
            for gx in 0..k {
                for y in 0..ph {
                    let dst = out.index(b, gy * ph + y, gx * pw, 0);
                    out.data_mut()[dst..dst + row].copy_from_slice(&x.data()[src..src + row]);
                    src += row;
                }
            }
        }
    }
    Ok(out)
}
