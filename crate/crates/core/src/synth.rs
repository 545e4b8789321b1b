//! Simulated anomalies: thresholded Perlin noise masks filled with foreign
//! texture, blended onto normal images.

use std::f64::consts::{SQRT_2, TAU};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::load_image_hw;
use crate::error::{Error, Result};
use crate::losses::PixelGt;
use crate::tensor::{ImageTensor, Tensor};

/// Smallest Perlin lattice cell, in pixels, used for masks.
pub const MIN_CELL: usize = 8;

/// Number of fresh noise fields tried before falling back to a rectangle.
pub const MASK_ATTEMPTS: usize = 10;

/// Where anomaly textures come from.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TextureSource {
    #[default]
    Procedural,
    Folder(PathBuf),
}

impl From<String> for TextureSource {
    fn from(s: String) -> Self {
        if s == "procedural" {
            TextureSource::Procedural
        } else {
            TextureSource::Folder(PathBuf::from(s))
        }
    }
}

impl From<TextureSource> for String {
    fn from(t: TextureSource) -> Self {
        t.to_string()
    }
}

impl fmt::Display for TextureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextureSource::Procedural => f.write_str("procedural"),
            TextureSource::Folder(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub anomaly_prob: f64,
    /// Inclusive range of lattice-resolution exponents: the noise has
    /// `2^e` cells along each axis, `e` drawn independently per axis.
    pub perlin_scale_range: [u32; 2],
    pub threshold: f64,
    pub beta_range: [f64; 2],
    pub texture_source: TextureSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            anomaly_prob: 0.5,
            perlin_scale_range: [0, 5],
            threshold: 0.5,
            beta_range: [0.2, 1.0],
            texture_source: TextureSource::Procedural,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_prob) {
            return Err(Error::config(format!("anomaly_prob {} outside [0, 1]", self.anomaly_prob)));
        }
        let [lo, hi] = self.perlin_scale_range;
        if lo > hi || hi > 16 {
            return Err(Error::config(format!("perlin_scale_range [{lo}, {hi}] is not a valid range")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        let [blo, bhi] = self.beta_range;
        if !(0.0 <= blo && blo <= bhi && bhi <= 1.0) {
            return Err(Error::config(format!("beta_range [{blo}, {bhi}] is not an ordered subrange of [0, 1]")));
        }
        Ok(())
    }
}

/// A training triple. `label == 1` iff `gt` has an anomalous pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: ImageTensor,
    pub gt: PixelGt,
    pub label: u8,
}

/// SplitMix64 finalizer applied to `seed ^ index`: independent streams per sample.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Gradient noise with `cells_y × cells_x` lattice cells over an `h×w`
/// field, scaled into roughly `[-1, 1]`.
pub fn perlin_field<R: Rng>(h: usize, w: usize, cells_y: usize, cells_x: usize, rng: &mut R) -> Vec<f64> {
    let grads: Vec<(f64, f64)> = (0..(cells_y + 1) * (cells_x + 1))
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            (a.cos(), a.sin())
        })
        .collect();
    let g = |iy: usize, ix: usize| grads[iy * (cells_x + 1) + ix];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = y as f64 * cells_y as f64 / h as f64;
        let iy = v as usize;
        let fy = v - iy as f64;
        for x in 0..w {
            let u = x as f64 * cells_x as f64 / w as f64;
            let ix = u as usize;
            let fx = u - ix as f64;
            let dot = |dy: usize, dx: usize| {
                let (gx, gy) = g(iy + dy, ix + dx);
                gx * (fx - dx as f64) + gy * (fy - dy as f64)
            };
            let (sx, sy) = (fade(fx), fade(fy));
            let top = dot(0, 0) + sx * (dot(0, 1) - dot(0, 0));
            let bottom = dot(1, 0) + sx * (dot(1, 1) - dot(1, 0));
            out.push(SQRT_2 * (top + sy * (bottom - top)));
        }
    }
    out
}

/// Largest lattice exponent allowed for a side: cells stay at least
/// [`MIN_CELL`] pixels wide.
fn max_exponent(side: usize) -> u32 {
    let limit = (side / MIN_CELL).max(1);
    usize::BITS - 1 - limit.leading_zeros()
}

/// Binary `1×H×W×1` anomaly mask. Never empty: after [`MASK_ATTEMPTS`]
/// empty noise masks a random rectangle of side `H/8..=H/4` is used.
pub fn perlin_mask(h: usize, w: usize, cfg: &SynthConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.perlin_scale_range;
    for _ in 0..MASK_ATTEMPTS {
        let ey = rng.random_range(lo..=hi).min(max_exponent(h));
        let ex = rng.random_range(lo..=hi).min(max_exponent(w));
        let field = perlin_field(h, w, 1 << ey, 1 << ex, &mut rng);
        let data: Vec<f64> = field
            .into_iter()
            .map(|v| if v > cfg.threshold { 1.0 } else { 0.0 })
            .collect();
        if data.iter().any(|&v| v == 1.0) {
            return Tensor::from_vec([1, h, w, 1], data).expect("sized by construction");
        }
    }
    let rh = rng.random_range((h / 8).max(1)..=(h / 4).max(1));
    let rw = rng.random_range((w / 8).max(1)..=(w / 4).max(1));
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    Tensor::from_fn(h, w, 1, |y, x, _| {
        if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

/// Colored fractal noise in `[0, 1]`: a smooth field interpolating between two
/// random colors plus a finer grain field.
pub fn procedural_texture(h: usize, w: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1usize << rng.random_range(1..=max_exponent(h.min(w)).clamp(1, 3));
    let fractal = |rng: &mut ChaCha8Rng, base: usize| {
        let mut acc = vec![0.0; h * w];
        let mut amp = 1.0;
        let mut cells = base;
        let mut total = 0.0;
        for _ in 0..4 {
            let cells_y = cells.min((h / 2).max(1));
            let cells_x = cells.min((w / 2).max(1));
            for (a, v) in acc.iter_mut().zip(perlin_field(h, w, cells_y, cells_x, rng)) {
                *a += amp * v;
            }
            total += amp;
            amp *= 0.5;
            cells *= 2;
        }
        acc.into_iter().map(move |v| (0.5 + 0.5 * v / total).clamp(0.0, 1.0)).collect::<Vec<_>>()
    };
    let shade = fractal(&mut rng, base);
    let grain = fractal(&mut rng, base * 4);
    let col_a: Vec<f64> = (0..channels).map(|_| rng.random()).collect();
    let col_b: Vec<f64> = (0..channels).map(|_| rng.random()).collect();
    Tensor::from_fn(h, w, channels, |y, x, c| {
        let i = y * w + x;
        let s = shade[i];
        (col_a[c] * (1.0 - s) + col_b[c] * s + 0.3 * (grain[i] - 0.5)).clamp(0.0, 1.0)
    })
}

/// `out = (1−m)·I + m·(β·texture + (1−β)·I)`, `gt = m`.
pub fn blend(image: &ImageTensor, texture: &ImageTensor, mask: &Tensor, beta: f64) -> Result<(ImageTensor, PixelGt)> {
    if image.shape() != texture.shape() || image.n() != 1 {
        return Err(Error::shape(format!(
            "image {:?} and texture {:?} must be equal single images",
            image.shape(),
            texture.shape()
        )));
    }
    let [_, h, w, c] = image.shape();
    if mask.shape() != [1, h, w, 1] {
        return Err(Error::shape(format!("mask {:?} does not cover image {:?}", mask.shape(), image.shape())));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::shape(format!("opacity {beta} outside [0, 1]")));
    }
    let mut out = image.clone();
    for ((px, tx), &m) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(texture.data().chunks_exact(c))
        .zip(mask.data())
    {
        for (p, &t) in px.iter_mut().zip(tx) {
            *p = (1.0 - m) * *p + m * (beta * t + (1.0 - beta) * *p);
        }
    }
    Ok((out, PixelGt::new(mask.clone())?))
}

/// Anomaly synthesizer with its texture bank loaded once.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: SynthConfig,
    textures: Vec<ImageTensor>,
    size: (usize, usize),
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig, h: usize, w: usize) -> Result<Self> {
        cfg.validate()?;
        let textures = match &cfg.texture_source {
            TextureSource::Procedural => Vec::new(),
            TextureSource::Folder(dir) => load_texture_folder(dir, h, w)?,
        };
        Ok(Self {
            cfg,
            textures,
            size: (h, w),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    fn texture(&self, channels: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
        let (h, w) = self.size;
        if self.textures.is_empty() {
            return procedural_texture(h, w, channels, rng.next_u64());
        }
        let t = &self.textures[rng.random_range(0..self.textures.len())];
        if t.c() == channels {
            t.clone()
        } else {
            Tensor::from_fn(h, w, channels, |y, x, _| t.pixel(0, y, x).iter().sum::<f64>() / t.c() as f64)
        }
    }

    /// Anomalizes a single normal image using the stream for `seed`.
    pub fn sample(&self, normal: &ImageTensor, seed: u64) -> Result<TrainSample> {
        let [n, h, w, c] = normal.shape();
        if n != 1 || (h, w) != self.size {
            return Err(Error::shape(format!(
                "synthesizer built for {:?} got image {:?}",
                self.size,
                normal.shape()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.random::<f64>() >= self.cfg.anomaly_prob {
            return Ok(TrainSample {
                image: normal.clone(),
                gt: PixelGt::zeros(1, h, w),
                label: 0,
            });
        }
        let mask = perlin_mask(h, w, &self.cfg, rng.next_u64());
        let texture = self.texture(c, &mut rng);
        let [blo, bhi] = self.cfg.beta_range;
        let beta = if blo < bhi { rng.random_range(blo..=bhi) } else { blo };
        let (image, gt) = blend(normal, &texture, &mask, beta)?;
        Ok(TrainSample { image, gt, label: 1 })
    }

    /// One sample per normal image; sample `i` uses `derive_seed(seed, i)`.
    pub fn make_batch(&self, normals: &[ImageTensor], seed: u64) -> Result<Vec<TrainSample>> {
        if normals.is_empty() {
            return Err(Error::EmptyDataset("no normal images to synthesize from".into()));
        }
        normals
            .par_iter()
            .enumerate()
            .map(|(i, img)| self.sample(img, derive_seed(seed, i as u64)))
            .collect()
    }
}

/// Convenience wrapper building a [`Synthesizer`] sized from the first image.
pub fn make_batch(normals: &[ImageTensor], cfg: &SynthConfig, seed: u64) -> Result<Vec<TrainSample>> {
    let first = normals
        .first()
        .ok_or_else(|| Error::EmptyDataset("no normal images to synthesize from".into()))?;
    Synthesizer::new(cfg.clone(), first.h(), first.w())?.make_batch(normals, seed)
}

fn load_texture_folder(dir: &Path, h: usize, w: usize) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Layout {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| crate::data::is_image_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no texture images in {}", dir.display())));
    }
    paths.iter().map(|p| load_image_hw(p, h, w)).collect()
}
