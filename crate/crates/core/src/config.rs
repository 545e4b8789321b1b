//! Flat training configuration, presets and `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{AsymmetryPlan, BackboneConfig, WeightsMode};
use crate::data::{DatasetSpec, Layout, ToySpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricsConfig;
use crate::psm::PsmConfig;
use crate::synth::{SynthConfig, TextureSource};
use crate::wmb::{FusionMode, MaskMetric};

/// Framework variants used in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Teacher, student, weight mask and decoder.
    Full,
    /// Decoder on student features alone.
    NoTeacher,
    /// Decoder on teacher features alone.
    NoStudent,
    /// No decoder: the map is the mean upsampled coarse mask.
    NoPsmWmb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTeacher, Variant::NoStudent, Variant::NoPsmWmb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTeacher => "no-teacher",
            Variant::NoStudent => "no-student",
            Variant::NoPsmWmb => "no-psm-wmb",
        }
    }

    pub fn has_student(self) -> bool {
        self != Variant::NoStudent
    }

    pub fn has_psm(self) -> bool {
        self != Variant::NoPsmWmb
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Every knob of a run. Serialized as a flat TOML table; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // model
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub input_channels: usize,
    pub norm: bool,
    pub kernel_size: usize,
    pub upblock_channels: Vec<usize>,
    pub head_channels: usize,
    pub teacher_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    pub fusion_mode: FusionMode,
    pub mask_metric: MaskMetric,
    pub variant: Variant,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub k: usize,
    /// `[stage, factor]` pairs: re-split the student's activations by
    /// `factor` before 1-based stage `stage + 1`.
    pub stage_splits: Vec<[usize; 2]>,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub joint_backprop: bool,

    // synthesis
    pub anomaly_prob: f64,
    pub perlin_scale_range: [u32; 2],
    pub threshold: f64,
    pub beta_range: [f64; 2],
    pub texture_source: TextureSource,

    // data
    pub layout: Layout,
    pub dataset_root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub resolution: usize,
    pub toy_n_train: usize,
    pub toy_n_test: usize,
    pub toy_seed: u64,

    // evaluation
    pub fpr_limit: f64,
    pub smooth_sigma: f64,
    pub per_image_pixel_auroc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings: 256² inputs, k = 8, 300 epochs, Adam at 1e-4
    /// decayed ×0.2 at epochs 240 and 270.
    pub fn paper() -> Self {
        let synth = SynthConfig::default();
        let toy = ToySpec::default();
        let metrics = MetricsConfig::default();
        Self {
            stage_channels: vec![256, 512, 1024],
            stage_strides: vec![4, 8, 16],
            input_channels: 3,
            norm: true,
            kernel_size: 3,
            upblock_channels: vec![256, 512],
            head_channels: 64,
            teacher_seed: 0,
            teacher_checkpoint: None,
            fusion_mode: FusionMode::Wmb,
            mask_metric: MaskMetric::Cosine,
            variant: Variant::Full,
            epochs: 300,
            batch_size: 32,
            lr: 1e-4,
            lr_decay_epochs: vec![240, 270],
            lr_decay_factor: 0.2,
            k: 8,
            stage_splits: Vec::new(),
            lambda: 1.0,
            tau: 2.0,
            seed: 0,
            joint_backprop: false,
            anomaly_prob: synth.anomaly_prob,
            perlin_scale_range: synth.perlin_scale_range,
            threshold: synth.threshold,
            beta_range: synth.beta_range,
            texture_source: synth.texture_source,
            layout: Layout::Mvtec,
            dataset_root: PathBuf::from("data/mvtec"),
            category: None,
            resolution: 256,
            toy_n_train: toy.n_train,
            toy_n_test: toy.n_test,
            toy_seed: toy.seed,
            fpr_limit: metrics.fpr_limit,
            smooth_sigma: metrics.smooth_sigma,
            per_image_pixel_auroc: metrics.per_image_pixel_auroc,
        }
    }

    /// Desk-scale settings on the procedural toy dataset: 64² inputs, three
    /// small stages, 30 epochs of batch 16.
    pub fn toy() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 4, 8],
            upblock_channels: vec![16, 32],
            head_channels: 16,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_decay_epochs: vec![24, 27],
            k: 4,
            layout: Layout::Toy,
            resolution: 64,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(format!("unknown preset {other:?} (expected paper or toy)"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Applies a single `key=value` override. The value is parsed as a TOML
    /// value, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override {key}: {}", e.message())))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        assignments.iter().try_for_each(|a| self.apply_override(a.as_ref()))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            input_channels: self.input_channels,
            norm: self.norm,
            kernel_size: self.kernel_size,
        }
    }

    pub fn psm(&self) -> PsmConfig {
        PsmConfig {
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            upblock_channels: self.upblock_channels.clone(),
            head_channels: self.head_channels,
        }
    }

    pub fn plan(&self) -> AsymmetryPlan {
        AsymmetryPlan {
            input_k: self.k,
            stage_splits: self.stage_splits.iter().map(|&[s, f]| (s, f)).collect::<BTreeMap<_, _>>(),
        }
    }

    pub fn teacher_weights(&self) -> WeightsMode {
        match &self.teacher_checkpoint {
            Some(p) => WeightsMode::LoadCheckpoint(p.clone()),
            None => WeightsMode::RandomFrozen { seed: self.teacher_seed },
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            anomaly_prob: self.anomaly_prob,
            perlin_scale_range: self.perlin_scale_range,
            threshold: self.threshold,
            beta_range: self.beta_range,
            texture_source: self.texture_source.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            tau: self.tau,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            root: self.dataset_root.clone(),
            layout: self.layout,
            category: self.category.clone(),
            resolution: self.resolution,
            toy: ToySpec {
                n_train: self.toy_n_train,
                n_test: self.toy_n_test,
                seed: self.toy_seed,
            },
        }
    }

    pub fn metrics(&self) -> MetricsConfig {
        MetricsConfig {
            fpr_limit: self.fpr_limit,
            smooth_sigma: self.smooth_sigma,
            per_image_pixel_auroc: self.per_image_pixel_auroc,
        }
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::config(format!(
                "lr_decay_epochs {:?} must be below epochs {}",
                self.lr_decay_epochs, self.epochs
            )));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr_decay_factor must be positive"));
        }
        if self.tau < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("lambda and tau must be non-negative"));
        }
        if self.resolution < 8 {
            return Err(Error::config(format!("resolution {} is too small", self.resolution)));
        }
        let backbone = self.backbone();
        backbone.validate()?;
        self.psm().validate()?;
        self.synth().validate()?;
        self.plan().grids(&backbone, self.resolution, self.resolution)?;
        let deepest = backbone.deepest_stride();
        if self.resolution % deepest != 0 {
            return Err(Error::Divisibility {
                size: self.resolution,
                factor: deepest,
                context: "resolution vs deepest stride",
            });
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) || self.smooth_sigma < 0.0 {
            return Err(Error::config("fpr_limit must lie in (0, 1] and smooth_sigma be non-negative"));
        }
        Ok(())
    }
}
