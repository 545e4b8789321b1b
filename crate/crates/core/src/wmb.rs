//! Weight Mask Block: per-position teacher–student agreement and the
//! weighted teacher features handed to the decoder.
//!
//! `W[x,y]` is the cosine similarity of the aligned channel vectors;
//! `C = (1 − W)·T` keeps teacher features only where the student failed to
//! reproduce them. Two alternative fusions (plain difference and a learned
//! concat + 3×3 conv) exist for comparison runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StagePyramid;
use crate::error::{Error, Result};
use crate::nn::{param_name, Conv2d, Module, Param};
use crate::tensor::{FeatureMap, Tensor};

/// Lower bound applied to feature norms before dividing.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMetric {
    Cosine,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Wmb,
    Difference,
    ConcatConv,
}

impl std::str::FromStr for MaskMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "mse" => Ok(Self::Mse),
            other => Err(Error::config(format!("unknown mask metric {other:?}"))),
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wmb" => Ok(Self::Wmb),
            "difference" => Ok(Self::Difference),
            "concat-conv" => Ok(Self::ConcatConv),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Per-position similarity map, `n×h×w×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMask {
    pub values: Tensor,
    pub metric: MaskMetric,
}

impl SimilarityMask {
    /// The coarse localization map `1 − W`.
    pub fn coarse(&self) -> Tensor {
        self.values.map(|w| 1.0 - w)
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn cosine(t: &[f64], s: &[f64]) -> f64 {
    let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
    (dot / (norm(t).max(NORM_FLOOR) * norm(s).max(NORM_FLOOR))).clamp(-1.0, 1.0)
}

/// Adds `scale · ∂cos(t, s)/∂s` into `out`.
pub(crate) fn cosine_grad_s(t: &[f64], s: &[f64], scale: f64, out: &mut [f64]) {
    let nt = norm(t).max(NORM_FLOOR);
    let raw_ns = norm(s);
    let ns = raw_ns.max(NORM_FLOOR);
    let cos = cosine(t, s);
    let clamped = raw_ns < NORM_FLOOR;
    for i in 0..s.len() {
        let mut g = t[i] / (nt * ns);
        if !clamped {
            g -= cos * s[i] / (ns * ns);
        }
        out[i] += scale * g;
    }
}

/// Mean squared channel difference at one position.
#[inline]
pub(crate) fn mse(t: &[f64], s: &[f64]) -> f64 {
    t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64
}

fn check_same(t: &Tensor, s: &Tensor) -> Result<()> {
    if t.shape() != s.shape() {
        return Err(Error::shape(format!(
            "teacher {:?} and student {:?} features differ in shape",
            t.shape(),
            s.shape()
        )));
    }
    Ok(())
}

/// Raw per-position MSE, `n×h×w×1`.
fn mse_map(t: &Tensor, s: &Tensor) -> Tensor {
    let c = t.c();
    let data = t
        .data()
        .chunks_exact(c)
        .zip(s.data().chunks_exact(c))
        .map(|(a, b)| mse(a, b))
        .collect();
    Tensor::from_vec([t.n(), t.h(), t.w(), 1], data).expect("positions match")
}

/// Per-image maximum of a single-channel map; the MSE mask normaliser.
fn per_image_max(d: &Tensor) -> Vec<f64> {
    let per = d.h() * d.w();
    d.data()
        .chunks_exact(per)
        .map(|img| img.iter().cloned().fold(0.0, f64::max))
        .collect()
}

pub fn similarity_mask(t: &FeatureMap, s: &FeatureMap, metric: MaskMetric) -> Result<SimilarityMask> {
    check_same(t, s)?;
    let c = t.c();
    let values = match metric {
        MaskMetric::Cosine => {
            let data = t
                .data()
                .chunks_exact(c)
                .zip(s.data().chunks_exact(c))
                .map(|(a, b)| cosine(a, b))
                .collect();
            Tensor::from_vec([t.n(), t.h(), t.w(), 1], data)?
        }
        MaskMetric::Mse => {
            let mut d = mse_map(t, s);
            let per = d.h() * d.w();
            let maxes = per_image_max(&d);
            for (img, m) in d.data_mut().chunks_exact_mut(per).zip(maxes) {
                for v in img {
                    *v = if m > 0.0 { 1.0 - *v / m } else { 1.0 };
                }
            }
            d
        }
    };
    Ok(SimilarityMask { values, metric })
}

/// `C = (1 − W)·T`, broadcast over channels.
pub fn weight_features(t: &FeatureMap, w: &SimilarityMask) -> Result<FeatureMap> {
    let wv = &w.values;
    if wv.shape() != [t.n(), t.h(), t.w(), 1] {
        return Err(Error::shape(format!(
            "mask {:?} does not cover features {:?}",
            wv.shape(),
            t.shape()
        )));
    }
    let mut out = t.clone();
    let c = t.c();
    for (p, &wi) in out.data_mut().chunks_exact_mut(c).zip(wv.data()) {
        let scale = 1.0 - wi;
        p.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Fuses one stage. `conv` is required for [`FusionMode::ConcatConv`].
pub fn fuse(
    t: &FeatureMap,
    s: &FeatureMap,
    mode: FusionMode,
    metric: MaskMetric,
    conv: Option<&Conv2d>,
) -> Result<FeatureMap> {
    check_same(t, s)?;
    match mode {
        FusionMode::Wmb => weight_features(t, &similarity_mask(t, s, metric)?),
        FusionMode::Difference => {
            let mut out = t.clone();
            for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                *o -= v;
            }
            Ok(out)
        }
        FusionMode::ConcatConv => {
            let conv = conv.ok_or_else(|| Error::config("concat-conv fusion needs its conv layer"))?;
            let cat = Tensor::concat_channels(t, s)?;
            if cat.c() != conv.in_channels() {
                return Err(Error::shape(format!(
                    "fusion conv expects {} channels, got {}",
                    conv.in_channels(),
                    cat.c()
                )));
            }
            Ok(conv.forward(&cat))
        }
    }
}

struct StageCache {
    t: Tensor,
    s: Tensor,
}

/// Per-stage fusion with its trainable state (concat convs) and the
/// caches needed to push gradients back into the student.
pub struct Fusion {
    mode: FusionMode,
    metric: MaskMetric,
    convs: Vec<Conv2d>,
    cache: Vec<StageCache>,
}

impl Clone for Fusion {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            metric: self.metric,
            convs: self.convs.clone(),
            cache: Vec::new(),
        }
    }
}

impl std::fmt::Debug for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fusion")
            .field("mode", &self.mode)
            .field("metric", &self.metric)
            .field("convs", &self.convs.len())
            .finish()
    }
}

impl Fusion {
    pub fn new(mode: FusionMode, metric: MaskMetric, stage_channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = match mode {
            FusionMode::ConcatConv => stage_channels
                .iter()
                .map(|&c| Conv2d::new(2 * c, c, 3, 1, 1, &mut rng))
                .collect(),
            _ => Vec::new(),
        };
        Self {
            mode,
            metric,
            convs,
            cache: Vec::new(),
        }
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn metric(&self) -> MaskMetric {
        self.metric
    }

    /// Similarity masks for every stage.
    pub fn masks(&self, t: &StagePyramid, s: &StagePyramid) -> Result<Vec<SimilarityMask>> {
        t.check_aligned(s)?;
        t.stages
            .iter()
            .zip(&s.stages)
            .map(|(a, b)| similarity_mask(a, b, self.metric))
            .collect()
    }

    pub fn forward(&self, t: &StagePyramid, s: &StagePyramid) -> Result<StagePyramid> {
        t.check_aligned(s)?;
        let stages = t
            .stages
            .iter()
            .zip(&s.stages)
            .enumerate()
            .map(|(i, (a, b))| fuse(a, b, self.mode, self.metric, self.convs.get(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StagePyramid::new(stages))
    }

    pub fn forward_train(&mut self, t: &StagePyramid, s: &StagePyramid) -> Result<StagePyramid> {
        t.check_aligned(s)?;
        self.cache.clear();
        let mut stages = Vec::with_capacity(t.len());
        for (i, (a, b)) in t.stages.iter().zip(&s.stages).enumerate() {
            let c = match self.mode {
                FusionMode::ConcatConv => {
                    let cat = Tensor::concat_channels(a, b)?;
                    self.convs[i].forward_train(&cat)
                }
                _ => fuse(a, b, self.mode, self.metric, None)?,
            };
            self.cache.push(StageCache {
                t: a.clone(),
                s: b.clone(),
            });
            stages.push(c);
        }
        Ok(StagePyramid::new(stages))
    }

    /// Accumulates fusion-conv gradients. When `student_grad` is set, also
    /// returns `∂L/∂S_i` through the fusion (for the MSE mask the per-image
    /// normaliser is treated as a constant).
    pub fn backward(&mut self, grads: &[Tensor], student_grad: bool) -> Result<Option<Vec<Tensor>>> {
        if grads.len() != self.cache.len() {
            return Err(Error::shape("fusion backward without matching forward_train"));
        }
        let cache = std::mem::take(&mut self.cache);
        let mut out = Vec::with_capacity(grads.len());
        for (i, (dc, sc)) in grads.iter().zip(&cache).enumerate() {
            let c = sc.t.c();
            let ds = match self.mode {
                FusionMode::ConcatConv => {
                    let dcat = self.convs[i].backward(dc, student_grad);
                    dcat.map(|d| d.split_channels(c).1)
                }
                FusionMode::Difference => student_grad.then(|| dc.map(|v| -v)),
                FusionMode::Wmb => student_grad.then(|| wmb_student_grad(dc, &sc.t, &sc.s, self.metric)),
            };
            if let Some(ds) = ds {
                out.push(ds);
            }
        }
        Ok(student_grad.then_some(out))
    }
}

fn wmb_student_grad(dc: &Tensor, t: &Tensor, s: &Tensor, metric: MaskMetric) -> Tensor {
    let c = t.c();
    let mut ds = Tensor::zeros(s.shape());
    let maxes = match metric {
        MaskMetric::Mse => per_image_max(&mse_map(t, s)),
        MaskMetric::Cosine => Vec::new(),
    };
    let per = t.h() * t.w();
    let positions = dc
        .data()
        .chunks_exact(c)
        .zip(t.data().chunks_exact(c))
        .zip(s.data().chunks_exact(c))
        .zip(ds.data_mut().chunks_exact_mut(c));
    for (p, (((g, tv), sv), out)) in positions.enumerate() {
        // C = (1 − W)·T  ⇒  ∂L/∂W = −⟨∂L/∂C, T⟩
        let dw: f64 = -g.iter().zip(tv).map(|(a, b)| a * b).sum::<f64>();
        match metric {
            MaskMetric::Cosine => cosine_grad_s(tv, sv, dw, out),
            MaskMetric::Mse => {
                let m = maxes[p / per];
                if m > 0.0 {
                    // W = 1 − d/m, d = mean (t − s)²
                    for i in 0..c {
                        out[i] += dw * (-1.0 / m) * (-2.0 * (tv[i] - sv[i]) / c as f64);
                    }
                }
            }
        }
    }
    ds
}

impl Module for Fusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(&param_name(prefix, &format!("stage{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&param_name(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}
