//! Teacher and student feature extractors.
//!
//! Both networks share one architecture: `n` stages, each a strided entry
//! conv block followed by a stride-1 conv block. The teacher always sees
//! whole images in inference mode. The student follows an
//! [`AsymmetryPlan`]: its input is cut into a `k×k` patch grid whose patches
//! are forwarded independently (stacked along the batch axis), and each
//! stage output is reassembled by position into a full-size map.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Module, Param};
use crate::patching::{merge_from_batch, split_to_batch};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    /// Cumulative downsampling factor of each stage output.
    pub stage_strides: Vec<usize>,
    pub input_channels: usize,
    pub norm: bool,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_kernel() -> usize {
    3
}

impl BackboneConfig {
    /// Three stages at strides 2/4/8 with 16/32/64 channels.
    pub fn toy() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 4, 8],
            input_channels: 3,
            norm: true,
            kernel_size: 3,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn deepest_stride(&self) -> usize {
        *self.stage_strides.last().unwrap_or(&1)
    }

    /// Downsampling factor applied by stage `j` itself.
    pub fn stage_ratio(&self, j: usize) -> usize {
        if j == 0 {
            self.stage_strides[0]
        } else {
            self.stage_strides[j] / self.stage_strides[j - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.stage_strides.len() != n {
            return Err(Error::config(format!(
                "{} stage channels but {} stage strides",
                n,
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd"));
        }
        if self.stage_strides[0] == 0 {
            return Err(Error::config("strides must be positive"));
        }
        for j in 1..n {
            let (prev, cur) = (self.stage_strides[j - 1], self.stage_strides[j]);
            if cur <= prev || cur % prev != 0 {
                return Err(Error::config(format!(
                    "stage strides must strictly increase by integer factors, got {:?}",
                    self.stage_strides
                )));
            }
        }
        Ok(())
    }

    /// Expected `(h, w, c)` of every stage for an `h×w` input.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        self.stage_strides
            .iter()
            .zip(&self.stage_channels)
            .map(|(&s, &c)| (h / s, w / s, c))
            .collect()
    }
}

/// Ordered per-stage feature maps, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePyramid {
    pub stages: Vec<FeatureMap>,
}

impl StagePyramid {
    pub fn new(stages: Vec<FeatureMap>) -> Self {
        Self { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.stages.iter().map(Tensor::shape).collect()
    }

    pub fn check_aligned(&self, other: &StagePyramid) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::shape(format!(
                "pyramids are not aligned: {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }
}

/// Where the student's inputs are cut into patches.
///
/// `input_k` splits the image. A `stage_splits` entry `i → s` cuts every
/// current patch of the stage-`i` output (1-based) into a further `s×s`
/// grid before stage `i+1` consumes it, so the effective grid multiplies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsymmetryPlan {
    pub input_k: usize,
    #[serde(default)]
    pub stage_splits: BTreeMap<usize, usize>,
}

impl AsymmetryPlan {
    pub fn input_only(k: usize) -> Self {
        Self {
            input_k: k,
            stage_splits: BTreeMap::new(),
        }
    }

    pub fn symmetric() -> Self {
        Self::input_only(1)
    }

    /// Effective patch grid side at the input of every stage, validated
    /// against an `h×w` input.
    pub fn grids(&self, cfg: &BackboneConfig, h: usize, w: usize) -> Result<Vec<usize>> {
        if self.input_k == 0 || self.stage_splits.values().any(|&s| s == 0) {
            return Err(Error::config("split factors must be at least 1"));
        }
        let n = cfg.num_stages();
        if let Some(&bad) = self.stage_splits.keys().find(|&&i| i == 0 || i >= n) {
            return Err(Error::config(format!(
                "stage split at stage {bad} has no following stage (valid: 1..{})",
                n.saturating_sub(1)
            )));
        }
        let mut grids = Vec::with_capacity(n);
        let mut g = self.input_k;
        for j in 0..n {
            if j > 0 {
                if let Some(s) = self.stage_splits.get(&j) {
                    g *= s;
                }
            }
            let in_stride = if j == 0 { 1 } else { cfg.stage_strides[j - 1] };
            let block = g * cfg.stage_ratio(j);
            for size in [h / in_stride, w / in_stride] {
                if size % block != 0 {
                    return Err(Error::Divisibility {
                        size,
                        factor: block,
                        context: "student patch grid at stage input",
                    });
                }
            }
            grids.push(g);
        }
        Ok(grids)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    entry: ConvBlock,
    body: ConvBlock,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.body.forward(&self.entry.forward(x))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.entry.forward_train(x);
        self.body.forward_train(&y)
    }

    fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = self.body.backward(dy, true).expect("input grad requested");
        self.entry.backward(&g, need_input_grad)
    }
}

/// A stage-pyramid CNN. Used directly as the trainable student; the
/// teacher wraps it in [`Teacher`].
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
    train_grids: Option<Vec<usize>>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = cfg.input_channels;
        let k = cfg.kernel_size;
        let stages = (0..cfg.num_stages())
            .map(|j| {
                let cout = cfg.stage_channels[j];
                let stage = Stage {
                    entry: ConvBlock::new(cin, cout, k, cfg.stage_ratio(j), cfg.norm, true, &mut rng),
                    body: ConvBlock::new(cout, cout, k, 1, cfg.norm, true, &mut rng),
                };
                cin = cout;
                stage
            })
            .collect();
        Ok(Self {
            cfg,
            stages,
            train_grids: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {}",
                self.cfg.input_channels,
                x.c()
            )));
        }
        let deepest = self.cfg.deepest_stride();
        for size in [x.h(), x.w()] {
            if size % deepest != 0 {
                return Err(Error::Divisibility {
                    size,
                    factor: deepest,
                    context: "input size vs deepest stride",
                });
            }
        }
        Ok(())
    }

    /// Whole-image inference forward.
    pub fn forward(&self, x: &Tensor) -> Result<StagePyramid> {
        self.forward_plan(x, &AsymmetryPlan::symmetric())
    }

    /// Inference forward following `plan`.
    pub fn forward_plan(&self, x: &Tensor, plan: &AsymmetryPlan) -> Result<StagePyramid> {
        self.check_input(x)?;
        let grids = plan.grids(&self.cfg, x.h(), x.w())?;
        run_plan(&grids, x, |j, act| self.stages[j].forward(act))
    }

    /// Training forward following `plan`; caches activations for [`Self::backward`].
    pub fn forward_plan_train(&mut self, x: &Tensor, plan: &AsymmetryPlan) -> Result<StagePyramid> {
        self.check_input(x)?;
        let grids = plan.grids(&self.cfg, x.h(), x.w())?;
        let stages = &mut self.stages;
        let pyramid = run_plan(&grids, x, |j, act| stages[j].forward_train(act))?;
        self.train_grids = Some(grids);
        Ok(pyramid)
    }

    /// Back-propagates per-stage gradients of the reassembled maps.
    pub fn backward(&mut self, grads: &[Tensor]) -> Result<()> {
        let grids = self
            .train_grids
            .take()
            .ok_or_else(|| Error::shape("backward without a training forward"))?;
        if grads.len() != self.stages.len() {
            return Err(Error::shape(format!(
                "{} stage gradients for {} stages",
                grads.len(),
                self.stages.len()
            )));
        }
        let mut carried: Option<Tensor> = None;
        for j in (0..self.stages.len()).rev() {
            let mut g = split_to_batch(&grads[j], grids[j])?;
            if let Some(c) = carried.take() {
                g.add_assign(&c);
            }
            let dx = self.stages[j].backward(&g, j > 0);
            if j > 0 {
                let dx = dx.expect("input grad requested");
                carried = Some(if grids[j] != grids[j - 1] {
                    split_to_batch(&merge_from_batch(&dx, grids[j])?, grids[j - 1])?
                } else {
                    dx
                });
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push(NamedTensor::from_param(name, p)));
        out
    }

    /// Loads every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        load_module(self, "", tensors)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

fn run_plan(
    grids: &[usize],
    x: &Tensor,
    mut stage_fn: impl FnMut(usize, &Tensor) -> Tensor,
) -> Result<StagePyramid> {
    let mut act = split_to_batch(x, grids[0])?;
    let mut stages = Vec::with_capacity(grids.len());
    for (j, &g) in grids.iter().enumerate() {
        if j > 0 && g != grids[j - 1] {
            act = split_to_batch(&merge_from_batch(&act, grids[j - 1])?, g)?;
        }
        act = stage_fn(j, &act);
        stages.push(merge_from_batch(&act, g)?);
    }
    Ok(StagePyramid::new(stages))
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (j, s) in self.stages.iter().enumerate() {
            s.entry.visit(&crate::nn::param_name(prefix, &format!("stage{}.entry", j + 1)), f);
            s.body.visit(&crate::nn::param_name(prefix, &format!("stage{}.body", j + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (j, s) in self.stages.iter_mut().enumerate() {
            s.entry.visit_mut(&crate::nn::param_name(prefix, &format!("stage{}.entry", j + 1)), f);
            s.body.visit_mut(&crate::nn::param_name(prefix, &format!("stage{}.body", j + 1)), f);
        }
    }
}

pub(crate) fn load_module(
    module: &mut dyn Module,
    prefix: &str,
    tensors: &BTreeMap<String, NamedTensor>,
) -> Result<()> {
    let mut err = None;
    module.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape != p.shape => {
                err = Some(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, network expects {:?}",
                    t.shape, p.shape
                )))
            }
            Some(t) => p.value.clone_from(&t.data),
        }
    });
    err.map_or(Ok(()), Err)
}

pub(crate) fn fingerprint(module: &dyn Module) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    module.visit("", &mut |name, p| {
        hasher.update(name.as_bytes());
        for d in &p.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// How the teacher gets its weights.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightsMode {
    /// Seeded random initialization, then frozen.
    RandomFrozen { seed: u64 },
    /// Weights read from a checkpoint archive.
    LoadCheckpoint(PathBuf),
}

/// A frozen backbone. Only inference-mode forwards are exposed, so no
/// parameter or normalization statistic can change after construction.
#[derive(Clone, Debug)]
pub struct Teacher {
    net: Backbone,
}

impl Teacher {
    pub fn config(&self) -> &BackboneConfig {
        self.net.config()
    }

    pub fn forward(&self, image: &Tensor) -> Result<StagePyramid> {
        self.net.forward(image)
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    pub fn network(&self) -> &Backbone {
        &self.net
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "teacher",
            "backbone": self.net.config(),
        });
        Archive::new(header, self.net.to_tensors()).write(path)
    }
}

/// Builds the frozen teacher network.
pub fn build_teacher(cfg: BackboneConfig, mode: &WeightsMode) -> Result<Teacher> {
    match mode {
        WeightsMode::RandomFrozen { seed } => Ok(Teacher {
            net: Backbone::new(cfg, *seed)?,
        }),
        WeightsMode::LoadCheckpoint(path) => {
            let mut net = Backbone::new(cfg, 0)?;
            let archive = Archive::read(path)?;
            net.load_tensors(&archive.tensor_map())?;
            Ok(Teacher { net })
        }
    }
}

/// Teacher-style whole-image forward.
pub fn teacher_forward(teacher: &Teacher, image: &Tensor) -> Result<StagePyramid> {
    teacher.forward(image)
}

/// Student forward in inference mode under `plan`.
pub fn student_forward(student: &Backbone, image: &Tensor, plan: &AsymmetryPlan) -> Result<StagePyramid> {
    student.forward_plan(image, plan)
}
