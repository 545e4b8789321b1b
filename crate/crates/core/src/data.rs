//! Dataset ingestion for MVTec-style and KolektorSDD-style trees, plus a
//! procedural toy dataset that is written out in the MVTec layout.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PixelGt;
use crate::synth::{derive_seed, SynthConfig, Synthesizer};
use crate::tensor::{ImageTensor, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "bmp", "jpg", "jpeg"];

/// Defect directory name used for toy anomalies.
pub const TOY_DEFECT: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Kolektor,
    Toy,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "kolektor" => Ok(Layout::Kolektor),
            "toy" => Ok(Layout::Toy),
            other => Err(Error::config(format!("unknown dataset layout {other:?}"))),
        }
    }
}

/// Sizes and seed of an in-memory toy dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 60,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: Layout,
    pub category: Option<String>,
    pub resolution: usize,
    /// Only consulted for [`Layout::Toy`], where `root` is ignored.
    pub toy: ToySpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub gt: Option<PixelGt>,
    pub label: u8,
    pub split: Split,
    pub source_path: String,
}

impl LabeledImage {
    /// Ground truth, all-normal when none was recorded.
    pub fn gt_or_empty(&self) -> PixelGt {
        self.gt
            .clone()
            .unwrap_or_else(|| PixelGt::zeros(1, self.image.h(), self.image.w()))
    }
}

pub fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// RGB image scaled to `[0, 1]`, bilinearly resized to `h×w`.
pub fn load_image_hw(path: &Path, h: usize, w: usize) -> Result<ImageTensor> {
    let mut img: Rgb32FImage = open(path)?.into_rgb32f();
    if img.dimensions() != (w as u32, h as u32) {
        img = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    let data = img.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect();
    Tensor::from_vec([1, h, w, 3], data)
}

pub fn load_image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    load_image_hw(path, resolution, resolution)
}

/// Single-channel mask, nearest-neighbour resized and binarized at 0.5.
pub fn load_mask(path: &Path, resolution: usize) -> Result<PixelGt> {
    let mut img: GrayImage = open(path)?.into_luma8();
    let r = resolution as u32;
    if img.dimensions() != (r, r) {
        img = imageops::resize(&img, r, r, FilterType::Nearest);
    }
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    PixelGt::new(Tensor::from_vec([1, resolution, resolution, 1], data)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest multiple of 1/255.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

/// Writes a single image (1 or 3 channels) as 8-bit PNG/BMP/JPEG by extension.
pub fn save_image(path: &Path, t: &ImageTensor) -> Result<()> {
    let (h, w) = (t.h() as u32, t.w() as u32);
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let res = match t.c() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(Error::shape(format!("cannot save a {c}-channel image"))),
    };
    res.expect("buffer sized by tensor shape").map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Layout {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    paths.sort();
    Ok(paths)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Layout {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok(dirs)
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Layout {
            path,
            reason: "expected directory is missing".into(),
        })
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `(train, test)` lists according to the declared layout.
pub fn load(spec: &DatasetSpec) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if spec.resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    let (train, test) = match spec.layout {
        Layout::Mvtec => load_mvtec(spec)?,
        Layout::Kolektor => load_kolektor(spec)?,
        Layout::Toy => generate_toy(spec.toy.n_train, spec.toy.n_test, spec.resolution, spec.toy.seed)?,
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("no training images under {}", spec.root.display())));
    }
    Ok((train, test))
}

fn category_root(spec: &DatasetSpec) -> Result<PathBuf> {
    let root = match &spec.category {
        Some(c) => spec.root.join(c),
        None => spec.root.clone(),
    };
    require_dir(root)
}

fn load_mvtec(spec: &DatasetSpec) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let root = category_root(spec)?;
    let res = spec.resolution;
    let train_dir = require_dir(root.join("train").join("good"))?;
    let test_dir = require_dir(root.join("test"))?;
    let gt_dir = root.join("ground_truth");

    let train = sorted_images(&train_dir)?
        .par_iter()
        .map(|p| {
            Ok(LabeledImage {
                image: load_image(p, res)?,
                gt: None,
                label: 0,
                split: Split::Train,
                source_path: p.display().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for defect_dir in sorted_dirs(&test_dir)? {
        let defect = defect_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for img in sorted_images(&defect_dir)? {
            let mask = if defect == "good" {
                None
            } else {
                Some(find_mvtec_mask(&gt_dir.join(&defect), &img)?)
            };
            jobs.push((img, mask));
        }
    }
    jobs.sort_by(|a, b| a.0.cmp(&b.0));
    let test = jobs
        .par_iter()
        .map(|(p, mask)| {
            let image = load_image(p, res)?;
            let gt = match mask {
                Some(m) => load_mask(m, res)?,
                None => PixelGt::zeros(1, res, res),
            };
            Ok(LabeledImage {
                image,
                label: mask.is_some() as u8,
                gt: Some(gt),
                split: Split::Test,
                source_path: p.display().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

fn find_mvtec_mask(dir: &Path, image: &Path) -> Result<PathBuf> {
    let prefix = format!("{}_mask", stem(image));
    let found = if dir.is_dir() {
        sorted_images(dir)?.into_iter().find(|m| stem(m).starts_with(&prefix))
    } else {
        None
    };
    found.ok_or_else(|| Error::Pairing(image.to_path_buf()))
}

/// KolektorSDD2 keeps `train/` and `test/` folders of `<id>.<ext>` images
/// next to `<id>_GT.<ext>` masks; a root without those folders is treated as
/// a single flat folder used for both splits.
fn load_kolektor(spec: &DatasetSpec) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let root = category_root(spec)?;
    let (train_dir, test_dir) = if root.join("train").is_dir() && root.join("test").is_dir() {
        (root.join("train"), root.join("test"))
    } else {
        (root.clone(), root)
    };
    let train = load_kolektor_dir(&train_dir, spec.resolution, Split::Train)?
        .into_iter()
        .filter(|s| s.label == 0)
        .map(|mut s| {
            s.gt = None;
            s
        })
        .collect();
    let test = load_kolektor_dir(&test_dir, spec.resolution, Split::Test)?;
    Ok((train, test))
}

fn load_kolektor_dir(dir: &Path, res: usize, split: Split) -> Result<Vec<LabeledImage>> {
    let all = sorted_images(dir)?;
    let images: Vec<&PathBuf> = all.iter().filter(|p| !stem(p).ends_with("_GT")).collect();
    images
        .par_iter()
        .map(|p| {
            let want = format!("{}_GT", stem(p));
            let mask = all.iter().find(|m| stem(m) == want).ok_or_else(|| Error::Pairing((*p).clone()))?;
            let gt = load_mask(mask, res)?;
            Ok(LabeledImage {
                image: load_image(p, res)?,
                label: gt.is_anomalous() as u8,
                gt: Some(gt),
                split,
                source_path: p.display().to_string(),
            })
        })
        .collect()
}

/// Appearance shared by every image of one toy dataset: a woven two-tone
/// pattern with a fixed palette, period and orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyStyle {
    pub dark: [f64; 3],
    pub light: [f64; 3],
    /// Pattern period in pixels.
    pub period: f64,
    /// Orientation in radians.
    pub angle: f64,
}

impl ToyStyle {
    pub fn from_seed(resolution: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = resolution as f64;
        let mut dark = [0.0; 3];
        let mut light = [0.0; 3];
        for c in 0..3 {
            dark[c] = rng.random_range(0.15..0.35);
            light[c] = rng.random_range(0.6..0.8);
        }
        Self {
            dark,
            light,
            period: rng.random_range(r / 8.0..r / 5.0),
            angle: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
        }
    }
}

/// A normal toy image, already quantized to 8 bits. Images of one style
/// differ in phase, a small jitter of angle, period and brightness, and
/// sensor noise.
pub fn toy_normal(style: &ToyStyle, resolution: usize, seed: u64) -> ImageTensor {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = style.angle + rng.random_range(-0.08..0.08);
    let period = style.period * rng.random_range(0.95..1.05);
    let (pu, pv): (f64, f64) = (rng.random(), rng.random());
    let offset = rng.random_range(-0.03..0.03);
    let (s, c) = angle.sin_cos();
    let img = Tensor::from_fn(resolution, resolution, 3, |y, x, ch| {
        let (x, y) = (x as f64, y as f64);
        let u = (x * c + y * s) / period + pu;
        let v = (y * c - x * s) / period + pv;
        let m = 0.5 + 0.25 * (u * TAU).sin() + 0.25 * (v * TAU).sin();
        style.dark[ch] * (1.0 - m) + style.light[ch] * m + offset
    });
    let data = img
        .into_vec()
        .into_iter()
        .map(|v| (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
        .collect();
    quantize(&Tensor::from_vec([1, resolution, resolution, 3], data).expect("same shape"))
}

fn toy_path(split: &str, class: &str, i: usize) -> String {
    format!("toy/{split}/{class}/{i:03}.png")
}

/// Deterministic toy dataset: all normals share one [`ToyStyle`], every
/// odd test image carries a synthesized anomaly with exact ground truth.
/// Both lists are ordered by their virtual MVTec path.
pub fn generate_toy(
    n_train: usize,
    n_test: usize,
    resolution: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if resolution < 32 {
        return Err(Error::config(format!("toy resolution {resolution} is below 32")));
    }
    let style = ToyStyle::from_seed(resolution, seed);
    let train = (0..n_train)
        .into_par_iter()
        .map(|i| LabeledImage {
            image: toy_normal(&style, resolution, derive_seed(seed, i as u64)),
            gt: None,
            label: 0,
            split: Split::Train,
            source_path: toy_path("train", "good", i),
        })
        .collect();

    let synth = Synthesizer::new(
        SynthConfig {
            anomaly_prob: 1.0,
            ..SynthConfig::default()
        },
        resolution,
        resolution,
    )?;
    let test_seed = derive_seed(seed, u64::MAX);
    let mut test = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let normal = toy_normal(&style, resolution, derive_seed(test_seed, i as u64));
            if i % 2 == 0 {
                return Ok(LabeledImage {
                    image: normal,
                    gt: Some(PixelGt::zeros(1, resolution, resolution)),
                    label: 0,
                    split: Split::Test,
                    source_path: toy_path("test", "good", i),
                });
            }
            let s = synth.sample(&normal, derive_seed(test_seed ^ 0xA5A5, i as u64))?;
            Ok(LabeledImage {
                image: quantize(&s.image),
                gt: Some(s.gt),
                label: 1,
                split: Split::Test,
                source_path: toy_path("test", TOY_DEFECT, i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    test.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    Ok((train, test))
}

/// Writes lists to `<root>/<category>/{train,test,ground_truth}` in the MVTec layout.
/// Anomalous test images go under the [`TOY_DEFECT`] defect name.
pub fn write_mvtec(root: &Path, category: &str, train: &[LabeledImage], test: &[LabeledImage]) -> Result<()> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let good_dir = base.join("test").join("good");
    let bad_dir = base.join("test").join(TOY_DEFECT);
    let gt_dir = base.join("ground_truth").join(TOY_DEFECT);
    for d in [&train_dir, &good_dir, &bad_dir, &gt_dir] {
        std::fs::create_dir_all(d)?;
    }
    train.par_iter().enumerate().try_for_each(|(i, s)| save_image(&train_dir.join(format!("{i:03}.png")), &s.image))?;
    test.par_iter().enumerate().try_for_each(|(i, s)| {
        let name = format!("{i:03}");
        if s.label == 1 {
            save_image(&bad_dir.join(format!("{name}.png")), &s.image)?;
            save_image(&gt_dir.join(format!("{name}_mask.png")), s.gt_or_empty().mask())
        } else {
            save_image(&good_dir.join(format!("{name}.png")), &s.image)
        }
    })
}
