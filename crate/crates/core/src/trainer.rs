//! Model assembly, the training loop, checkpoints and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_teacher, load_module, AsymmetryPlan, Backbone, StagePyramid, Teacher};
use crate::checkpoint::{Archive, NamedTensor};
use crate::config::{TrainConfig, Variant};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::losses::{distillation_grad, focal_grad, softmax_backward, total_loss, PixelGt};
use crate::metrics::{evaluate_batch, map_score, EvalBatch, MetricsReport};
use crate::nn::{Adam, Module};
use crate::psm::{Psm, SegMask};
use crate::synth::{derive_seed, Synthesizer, TrainSample};
use crate::tensor::{ImageTensor, Tensor};
use crate::wmb::Fusion;

const CHECKPOINT_KIND: &str = "adps-model";

/// Seed streams derived from the run seed.
const STREAM_STUDENT: u64 = 1;
const STREAM_FUSION: u64 = 2;
const STREAM_PSM: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_SYNTH: u64 = 5;

/// Output of [`Model::infer`] for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub mask: SegMask,
    pub score: f64,
    /// Similarity masks `W_i`, `1×h_i×w_i×1`; empty for variants without them.
    pub stage_masks: Vec<Tensor>,
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ld: f64,
    pub ls: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ld: f64,
    pub ls: f64,
    pub total: f64,
}

/// Teacher, student, fusion and decoder under one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: TrainConfig,
    teacher: Teacher,
    student: Backbone,
    fusion: Fusion,
    psm: Psm,
    epoch: usize,
}

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = build_teacher(cfg.backbone(), &cfg.teacher_weights())?;
        let student = Backbone::new(cfg.backbone(), derive_seed(cfg.seed, STREAM_STUDENT))?;
        let fusion = Fusion::new(
            cfg.fusion_mode,
            cfg.mask_metric,
            &cfg.stage_channels,
            derive_seed(cfg.seed, STREAM_FUSION),
        );
        let psm = Psm::new(cfg.psm(), derive_seed(cfg.seed, STREAM_PSM))?;
        Ok(Self {
            cfg,
            teacher,
            student,
            fusion,
            psm,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn student(&self) -> &Backbone {
        &self.student
    }

    pub fn psm(&self) -> &Psm {
        &self.psm
    }

    pub fn epochs_trained(&self) -> usize {
        self.epoch
    }

    pub fn plan(&self) -> AsymmetryPlan {
        self.cfg.plan()
    }

    /// The same weights scored as another variant. Only switching a full
    /// model to `no-psm-wmb` is meaningful: without joint back-propagation
    /// the student never sees the decoder.
    pub fn with_variant(&self, variant: Variant) -> Result<Model> {
        if variant != self.cfg.variant && !(self.cfg.variant == Variant::Full && variant == Variant::NoPsmWmb) {
            return Err(Error::config(format!(
                "cannot re-score a {} model as {}",
                self.cfg.variant.name(),
                variant.name()
            )));
        }
        let mut m = self.clone();
        m.cfg.variant = variant;
        Ok(m)
    }

    /// The same weights under a new configuration that may differ only in
    /// data, training-schedule and evaluation keys, plus a variant switch
    /// allowed by [`Self::with_variant`].
    pub fn reconfigured(&self, cfg: TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let locked = |c: &TrainConfig| {
            (
                c.backbone(),
                c.psm(),
                c.teacher_weights(),
                c.fusion_mode,
                c.mask_metric,
                c.plan(),
                c.resolution,
            )
        };
        if locked(&cfg) != locked(&self.cfg) {
            return Err(Error::config(
                "only data, schedule, evaluation and variant keys can change for a trained model",
            ));
        }
        let mut m = self.with_variant(cfg.variant)?;
        m.cfg = cfg;
        Ok(m)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let r = self.cfg.resolution;
        if x.h() != r || x.w() != r || x.c() != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "model expects {r}×{r}×{} inputs, got {:?}",
                self.cfg.input_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Batched inference over an `n×H×W×C` tensor.
    pub fn infer_batch(&self, x: &Tensor) -> Result<Vec<Inference>> {
        self.check_images(x)?;
        let (mask, stage_masks) = match self.cfg.variant {
            Variant::Full => {
                let t = self.teacher.forward(x)?;
                let s = self.student.forward_plan(x, &self.plan())?;
                let w = self.fusion.masks(&t, &s)?;
                let c = self.fusion.forward(&t, &s)?;
                (self.psm.segment(&c)?, w.into_iter().map(|m| m.values).collect())
            }
            Variant::NoTeacher => (self.psm.segment(&self.student.forward_plan(x, &self.plan())?)?, Vec::new()),
            Variant::NoStudent => (self.psm.segment(&self.teacher.forward(x)?)?, Vec::new()),
            Variant::NoPsmWmb => {
                let t = self.teacher.forward(x)?;
                let s = self.student.forward_plan(x, &self.plan())?;
                let w: Vec<Tensor> = self.fusion.masks(&t, &s)?.into_iter().map(|m| m.values).collect();
                (SegMask::from_abnormal(&coarse_map(&w, x.h(), x.w())), w)
            }
        };
        let abnormal = mask.abnormal();
        Ok((0..x.n())
            .map(|i| {
                let a = abnormal.item(i);
                Inference {
                    score: map_score(&a, self.cfg.smooth_sigma),
                    mask: SegMask::from_abnormal(&a),
                    stage_masks: stage_masks.iter().map(|w| w.item(i)).collect(),
                }
            })
            .collect())
    }

    pub fn infer(&self, image: &ImageTensor) -> Result<Inference> {
        if image.n() != 1 {
            return Err(Error::shape(format!("infer takes a single image, got batch {}", image.n())));
        }
        Ok(self.infer_batch(image)?.remove(0))
    }

    fn zero_grad(&mut self) {
        self.student.zero_grad();
        self.fusion.zero_grad();
        self.psm.zero_grad();
    }

    /// Forward, backward and one Adam update on a stacked batch.
    pub fn train_step(&mut self, x: &Tensor, y: &PixelGt, adam: &mut Adam) -> Result<StepLosses> {
        self.check_images(x)?;
        self.zero_grad();
        let weights = self.cfg.loss_weights();
        let plan = self.plan();
        let metric = self.cfg.mask_metric;
        let mut ld = 0.0;
        let mut ls = 0.0;
        match self.cfg.variant {
            Variant::Full | Variant::NoPsmWmb => {
                let t = self.teacher.forward(x)?;
                let s = self.student.forward_plan_train(x, &plan)?;
                let dist = distillation_grad(&t, &s, y, metric)?;
                ld = dist.loss;
                let mut ds = dist.d_student;
                if self.cfg.variant == Variant::Full {
                    let c = self.fusion.forward_train(&t, &s)?;
                    let (loss, dc) = self.segmentation_backward(&c, y)?;
                    ls = loss;
                    if let Some(extra) = self.fusion.backward(&dc, self.cfg.joint_backprop)? {
                        for (d, e) in ds.iter_mut().zip(&extra) {
                            d.add_assign(e);
                        }
                    }
                }
                self.student.backward(&ds)?;
            }
            Variant::NoTeacher => {
                let s = self.student.forward_plan_train(x, &plan)?;
                let (loss, ds) = self.segmentation_backward(&s, y)?;
                ls = loss;
                self.student.backward(&ds)?;
            }
            Variant::NoStudent => {
                let t = self.teacher.forward(x)?;
                ls = self.segmentation_backward(&t, y)?.0;
            }
        }
        adam.begin_step();
        if self.cfg.variant.has_student() {
            adam.update(&mut self.student, "student");
        }
        if self.cfg.variant == Variant::Full {
            adam.update(&mut self.fusion, "fusion");
        }
        if self.cfg.variant.has_psm() {
            adam.update(&mut self.psm, "psm");
        }
        Ok(StepLosses {
            ld,
            ls,
            total: total_loss(ld, ls, &weights),
        })
    }

    /// Decoder forward/backward under the focal loss; returns the loss and
    /// `∂(λ·ls)/∂C_i`.
    fn segmentation_backward(&mut self, c: &StagePyramid, y: &PixelGt) -> Result<(f64, Vec<Tensor>)> {
        let logits = self.psm.logits_train(c)?;
        let m = SegMask::from_logits(&logits);
        let (loss, dp) = focal_grad(&m, y, self.cfg.tau)?;
        let mut dz = softmax_backward(&m, &dp);
        dz.scale(self.cfg.lambda);
        Ok((loss, self.psm.backward(&dz)))
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "version": 1,
            "epoch": self.epoch,
            "teacher_hash": self.teacher.fingerprint(),
            "config": self.cfg,
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors: Vec<NamedTensor> = Vec::new();
        let mut push = |prefix: &str, m: &dyn Module| {
            m.visit(prefix, &mut |name, p| tensors.push(NamedTensor::from_param(name, p)));
        };
        push("student", &self.student);
        push("fusion", &self.fusion);
        push("psm", &self.psm);
        Archive::new(self.header(), tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    /// Rebuilds a model from an archive; the teacher is rebuilt from the
    /// stored configuration and must match the recorded hash.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let h = &archive.header;
        if h.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("archive is not a model checkpoint".into()));
        }
        let cfg: TrainConfig = serde_json::from_value(h.get("config").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        let mut model = Model::new(cfg)?;
        let expected = h.get("teacher_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if model.teacher.fingerprint() != expected {
            return Err(Error::Checkpoint("teacher does not match the hash recorded in the checkpoint".into()));
        }
        let tensors = archive.tensor_map();
        load_module(&mut model.student, "student", &tensors)?;
        load_module(&mut model.fusion, "fusion", &tensors)?;
        load_module(&mut model.psm, "psm", &tensors)?;
        model.epoch = h.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Mean over stages of bilinearly upsampled `(1 − W_i)/2`, `n×H×W×1`.
pub fn coarse_map(w: &[Tensor], h: usize, wd: usize) -> Tensor {
    let mut acc = Tensor::zeros([w[0].n(), h, wd, 1]);
    for m in w {
        acc.add_assign(&upsample_bilinear(&m.map(|v| (1.0 - v) / 2.0), h, wd));
    }
    acc.scale(1.0 / w.len() as f64);
    acc
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn upsample_bilinear(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, ih, iw, c] = t.shape();
    let coord = |o: usize, out: usize, inp: usize| {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Tensor::zeros([n, h, w, c]);
    for b in 0..n {
        for y in 0..h {
            let (y0, y1, fy) = coord(y, h, ih);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, w, iw);
                for ch in 0..c {
                    let top = t.at(b, y0, x0, ch) * (1.0 - fx) + t.at(b, y0, x1, ch) * fx;
                    let bottom = t.at(b, y1, x0, ch) * (1.0 - fx) + t.at(b, y1, x1, ch) * fx;
                    out.set(b, y, x, ch, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    out
}

/// Stacks samples into an image batch and its ground truth.
pub fn collate(samples: &[TrainSample]) -> Result<(Tensor, PixelGt)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<PixelGt> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok((Tensor::stack(&images)?, PixelGt::stack(&gts)?))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model on normal images; `on_epoch` sees every epoch's log.
pub fn train_with(
    normals: &[ImageTensor],
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if normals.is_empty() {
        return Err(Error::EmptyDataset("training split has no images".into()));
    }
    let mut model = Model::new(cfg)?;
    let cfg = model.cfg.clone();
    let synth = Synthesizer::new(cfg.synth(), cfg.resolution, cfg.resolution)?;
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..normals.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_SHUFFLE), epoch as u64));
        order.shuffle(&mut rng);
        let epoch_seed = derive_seed(derive_seed(cfg.seed, STREAM_SYNTH), epoch as u64);
        let (mut ld, mut ls, mut total) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| normals[i].clone()).collect();
            let samples = synth.make_batch(&batch, derive_seed(epoch_seed, step as u64))?;
            let (x, y) = collate(&samples)?;
            let l = model.train_step(&x, &y, &mut adam)?;
            ld += l.ld;
            ls += l.ls;
            total += l.total;
            steps += 1;
        }
        let n = steps as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            ld: ld / n,
            ls: ls / n,
            total: total / n,
            lr: adam.lr,
        };
        log::info!(
            "epoch {}/{}: ld {:.5} ls {:.5} total {:.5} lr {:.2e}",
            entry.epoch,
            cfg.epochs,
            entry.ld,
            entry.ls,
            entry.total,
            entry.lr
        );
        on_epoch(&entry);
        log.push(entry);
        model.epoch = epoch + 1;
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(train_split: &[LabeledImage], cfg: TrainConfig) -> Result<TrainOutcome> {
    let normals: Vec<ImageTensor> = train_split.iter().filter(|s| s.label == 0).map(|s| s.image.clone()).collect();
    train_with(&normals, cfg, |_| {})
}

/// Writes the per-epoch log as `epoch,ld,ls,total,lr` CSV.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,ld,ls,total,lr")?;
    for e in log {
        writeln!(f, "{},{},{},{},{}", e.epoch, e.ld, e.ls, e.total, e.lr)?;
    }
    f.flush()?;
    Ok(())
}

/// Runs inference over a test split and assembles the metric inputs.
pub fn predict(model: &Model, test: &[LabeledImage]) -> Result<EvalBatch> {
    let mut batch = EvalBatch::default();
    for chunk in test.chunks(model.cfg.batch_size.max(1)) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let out = model.infer_batch(&Tensor::stack(&images)?)?;
        for (s, inf) in chunk.iter().zip(out) {
            batch.anomaly_maps.push(inf.mask.abnormal());
            batch.image_scores.push(inf.score);
            batch.gts.push(s.gt_or_empty());
            batch.image_labels.push(s.label);
        }
    }
    Ok(batch)
}

/// Scores already-assembled predictions; the hook used to bypass inference.
pub fn evaluate_predictions(batch: &EvalBatch, cfg: &TrainConfig) -> Result<MetricsReport> {
    evaluate_batch(batch, &cfg.metrics())
}

pub fn evaluate(model: &Model, test: &[LabeledImage]) -> Result<MetricsReport> {
    evaluate_predictions(&predict(model, test)?, &model.cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy;

    fn tiny() -> TrainConfig {
        TrainConfig {
            stage_channels: vec![4, 8, 8],
            upblock_channels: vec![4, 8],
            head_channels: 4,
            resolution: 32,
            epochs: 2,
            batch_size: 4,
            lr_decay_epochs: vec![1],
            ..TrainConfig::toy()
        }
    }

    fn normals(n: usize) -> Vec<ImageTensor> {
        generate_toy(n, 0, 32, 9).unwrap().0.into_iter().map(|s| s.image).collect()
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let t = crate::testutil::random_tensor([2, 4, 4, 3], 1);
        assert_eq!(upsample_bilinear(&t, 4, 4), t);
        let c = upsample_bilinear(&Tensor::full([1, 2, 2, 1], 0.25), 8, 8);
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_features_give_zero_coarse_map() {
        let w = vec![Tensor::full([1, 4, 4, 1], 1.0), Tensor::full([1, 2, 2, 1], 1.0)];
        assert!(coarse_map(&w, 8, 8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconfigured_accepts_eval_keys_only() {
        let model = Model::new(tiny()).unwrap();
        let mut cfg = tiny();
        cfg.fpr_limit = 0.1;
        cfg.variant = Variant::NoPsmWmb;
        let m = model.reconfigured(cfg).unwrap();
        assert_eq!(m.config().fpr_limit, 0.1);
        assert_eq!(m.config().variant, Variant::NoPsmWmb);
        let mut cfg = tiny();
        cfg.k = 2;
        assert!(matches!(model.reconfigured(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn short_training_is_finite_and_teacher_frozen() {
        let data = normals(8);
        let model = Model::new(tiny()).unwrap();
        let before = model.teacher().fingerprint();
        let out = train_with(&data, tiny(), |_| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        for e in &out.log {
            assert!(e.ld.is_finite() && e.ls.is_finite() && e.total.is_finite());
        }
        assert!((out.log[1].lr - 2e-4).abs() < 1e-15);
        assert_eq!(out.model.teacher().fingerprint(), before);
        assert_ne!(out.model.student().fingerprint(), model.student().fingerprint());
    }

    #[test]
    fn training_is_deterministic() {
        let data = normals(4);
        let a = train_with(&data, tiny(), |_| {}).unwrap();
        let b = train_with(&data, tiny(), |_| {}).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn every_variant_trains_and_infers() {
        let data = normals(4);
        for v in Variant::ALL {
            let cfg = TrainConfig {
                variant: v,
                epochs: 1,
                lr_decay_epochs: vec![],
                ..tiny()
            };
            let out = train_with(&data, cfg, |_| {}).unwrap();
            let e = out.log[0];
            assert_eq!(e.ld == 0.0, !matches!(v, Variant::Full | Variant::NoPsmWmb), "{v:?}");
            assert_eq!(e.ls == 0.0, v == Variant::NoPsmWmb, "{v:?}");
            let inf = out.model.infer(&data[0]).unwrap();
            assert_eq!(inf.mask.probs.shape(), [1, 32, 32, 2]);
            assert!(inf.score.is_finite());
            let has_w = matches!(v, Variant::Full | Variant::NoPsmWmb);
            assert_eq!(inf.stage_masks.len(), if has_w { 3 } else { 0 });
        }
    }

    #[test]
    fn joint_backprop_changes_student_updates() {
        let data = normals(4);
        let a = train_with(&data, TrainConfig { epochs: 1, lr_decay_epochs: vec![], ..tiny() }, |_| {}).unwrap();
        let b = train_with(
            &data,
            TrainConfig {
                epochs: 1,
                lr_decay_epochs: vec![],
                joint_backprop: true,
                ..tiny()
            },
            |_| {},
        )
        .unwrap();
        assert_ne!(a.model.student().fingerprint(), b.model.student().fingerprint());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let data = normals(4);
        let out = train_with(&data, TrainConfig { epochs: 1, lr_decay_epochs: vec![], ..tiny() }, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        out.model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.epochs_trained(), 1);
        let a = out.model.infer(&data[1]).unwrap();
        let b = loaded.infer(&data[1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_with_foreign_teacher_is_rejected() {
        let model = Model::new(tiny()).unwrap();
        let mut archive = model.to_archive();
        archive.header["teacher_hash"] = serde_json::json!("00");
        assert!(matches!(Model::from_archive(&archive), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn infer_rejects_wrong_resolution() {
        let model = Model::new(tiny()).unwrap();
        assert!(matches!(model.infer(&Tensor::zeros([1, 64, 64, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn log_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&path, &[EpochLog { epoch: 1, ld: 0.5, ls: 0.25, total: 0.75, lr: 1e-3 }]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "epoch,ld,ls,total,lr\n1,0.5,0.25,0.75,0.001\n");
    }
}
