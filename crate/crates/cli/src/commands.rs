use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adps_core::config::{TrainConfig, Variant};
use adps_core::data::{is_image_file, load, load_image, save_image, LabeledImage};
use adps_core::metrics::{EvalBatch, MetricsReport};
use adps_core::synth::Synthesizer;
use adps_core::trainer::{evaluate, evaluate_predictions, predict, train, upsample_bilinear, write_log_csv, Model};
use adps_core::wmb::{FusionMode, MaskMetric};
use anyhow::{Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{AblateArgs, ConfigArgs, EvalArgs, InferArgs, PreviewArgs, TrainArgs};
use crate::{rawmap, render, UsageError};

pub const CHECKPOINT_FILE: &str = "ckpt.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_CHART: &str = "ablation.svg";

/// Resolves `--config` (file or preset name) and applies `--set` overrides.
pub fn resolve_config(args: &ConfigArgs, default_preset: &str) -> Result<TrainConfig> {
    let name = args.config.as_deref().unwrap_or(default_preset);
    let mut cfg = if Path::new(name).is_file() {
        TrainConfig::from_file(Path::new(name))?
    } else if matches!(name, "paper" | "toy") {
        TrainConfig::preset(name)?
    } else {
        return Err(UsageError(format!("--config {name:?} is neither a file nor a preset (paper, toy)")).into());
    };
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} not found", path.display())).into());
    }
    Model::load(path).with_context(|| format!("loading {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.cfg, "paper")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (train_split, _) = load(&cfg.dataset())?;
    info!("training on {} images", train_split.len());
    let outcome = train(&train_split, cfg.clone())?;
    create_out(&args.out)?;
    outcome.model.save(&args.out.join(CHECKPOINT_FILE))?;
    write_log_csv(&args.out.join(LOG_FILE), &outcome.log)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;
    info!("wrote {}", args.out.display());
    Ok(())
}

fn write_metrics(out: &Path, report: &MetricsReport) -> Result<()> {
    create_out(out)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out.join(METRICS_FILE), format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (batch, cfg, test) = match (&args.ckpt, &args.maps) {
        (Some(ckpt), _) => {
            let model = load_checkpoint(ckpt)?;
            let mut cfg = model.config().clone();
            if args.cfg.config.is_some() {
                return Err(UsageError("--config cannot be combined with --ckpt; use --set".into()).into());
            }
            cfg.apply_overrides(&args.cfg.set)?;
            let model = model.reconfigured(cfg.clone())?;
            let (_, test) = load(&cfg.dataset())?;
            (predict(&model, &test)?, cfg, test)
        }
        (None, Some(dir)) => {
            let cfg = resolve_config(&args.cfg, "paper")?;
            cfg.validate()?;
            let (_, test) = load(&cfg.dataset())?;
            (read_maps(dir, &test)?, cfg, test)
        }
        (None, None) => unreachable!("clap requires --ckpt or --maps"),
    };
    if args.dump_maps {
        let dir = args.out.join("maps");
        for (i, item) in test.iter().enumerate() {
            let stem = dir.join(rawmap::key(Path::new(&item.source_path)));
            rawmap::write(&stem, &batch.anomaly_maps[i], batch.image_scores[i], &item.source_path)?;
        }
    }
    let report = evaluate_predictions(&batch, &cfg)?;
    write_metrics(&args.out, &report)
}

fn read_maps(dir: &Path, test: &[LabeledImage]) -> Result<EvalBatch> {
    let mut batch = EvalBatch::default();
    for item in test {
        let (map, meta) = rawmap::read(&dir.join(rawmap::key(Path::new(&item.source_path))))?;
        batch.anomaly_maps.push(map);
        batch.image_scores.push(meta.score);
        batch.gts.push(item.gt_or_empty());
        batch.image_labels.push(item.label);
    }
    Ok(batch)
}

/// Expands directories (non-recursively, sorted) into image files.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_image_file(p))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(UsageError(format!("input {} does not exist", p.display())).into());
        }
    }
    if files.is_empty() {
        return Err(UsageError("no input images".into()).into());
    }
    Ok(files)
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(UsageError(format!("--threshold {} outside [0, 1]", args.threshold)).into());
    }
    let model = load_checkpoint(&args.ckpt)?;
    let files = collect_inputs(&args.inputs)?;
    create_out(&args.out)?;
    let res = model.config().resolution;
    for path in files {
        let (w, h) = image::image_dimensions(&path).with_context(|| format!("reading {}", path.display()))?;
        let (w, h) = (w as usize, h as usize);
        let inf = model.infer(&load_image(&path, res)?)?;
        let prob = upsample_bilinear(&inf.mask.abnormal(), h, w);
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        save_image(&args.out.join(format!("{name}_heat.png")), &render::heatmap(&prob))?;
        save_image(
            &args.out.join(format!("{name}_mask.png")),
            &render::threshold_mask(&prob, args.threshold),
        )?;
        for (i, wmap) in inf.stage_masks.iter().enumerate() {
            let coarse = upsample_bilinear(&wmap.map(|v| (1.0 - v) / 2.0), h, w);
            save_image(
                &args.out.join(format!("{name}_wmb_stage{}.png", i + 1)),
                &render::grayscale(&coarse),
            )?;
        }
        if args.raw {
            rawmap::write(
                &args.out.join(format!("{name}_map")),
                &prob,
                inf.score,
                &path.to_string_lossy(),
            )?;
        }
        info!("{}: score {:.4}", path.display(), inf.score);
    }
    Ok(())
}

pub fn cmd_synth_preview(args: &PreviewArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.cfg, "paper")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (train_split, _) = load(&cfg.dataset())?;
    let normals: Vec<_> = train_split.iter().filter(|s| s.label == 0).map(|s| s.image.clone()).collect();
    if normals.is_empty() {
        return Err(adps_core::Error::EmptyDataset("no normal training images to preview".into()).into());
    }
    let picked: Vec<_> = (0..args.count).map(|i| normals[i % normals.len()].clone()).collect();
    let synth = Synthesizer::new(cfg.synth(), cfg.resolution, cfg.resolution)?;
    let samples = synth.make_batch(&picked, cfg.seed)?;
    create_out(&args.out)?;
    for (i, s) in samples.iter().enumerate() {
        save_image(&args.out.join(format!("preview_{i:03}.png")), &s.image)?;
        save_image(&args.out.join(format!("preview_{i:03}_mask.png")), s.gt.mask())?;
    }
    info!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GridEntry {
    pub group: &'static str,
    pub cfg: TrainConfig,
}

impl GridEntry {
    pub fn label(&self) -> String {
        match self.group {
            "k" => format!("k={}", self.cfg.k),
            "fusion" => format!("fusion={}", fusion_name(self.cfg.fusion_mode)),
            "metric" => format!("metric={}", metric_name(self.cfg.mask_metric)),
            _ => format!("variant={}", self.cfg.variant.name()),
        }
    }
}

fn fusion_name(m: FusionMode) -> &'static str {
    match m {
        FusionMode::Wmb => "wmb",
        FusionMode::Difference => "difference",
        FusionMode::ConcatConv => "concat-conv",
    }
}

fn metric_name(m: MaskMetric) -> &'static str {
    match m {
        MaskMetric::Cosine => "cosine",
        MaskMetric::Mse => "mse",
    }
}

pub const GRID_K: [usize; 5] = [1, 2, 4, 8, 16];

/// One entry per distinct `(k, fusion, metric, variant)` over the requested
/// groups, each varying a single key of `base`.
pub fn build_grid(base: &TrainConfig, groups: &str) -> Result<Vec<GridEntry>> {
    let mut entries: Vec<GridEntry> = Vec::new();
    for group in groups.split(',').map(str::trim).filter(|g| !g.is_empty()) {
        let variants: Vec<(&'static str, TrainConfig)> = match group {
            "k" => GRID_K
                .iter()
                .map(|&k| ("k", TrainConfig { k, ..base.clone() }))
                .collect(),
            "fusion" => [FusionMode::Wmb, FusionMode::Difference, FusionMode::ConcatConv]
                .into_iter()
                .map(|fusion_mode| ("fusion", TrainConfig { fusion_mode, ..base.clone() }))
                .collect(),
            "metric" => [MaskMetric::Cosine, MaskMetric::Mse]
                .into_iter()
                .map(|mask_metric| ("metric", TrainConfig { mask_metric, ..base.clone() }))
                .collect(),
            "variant" => Variant::ALL
                .into_iter()
                .map(|variant| ("variant", TrainConfig { variant, ..base.clone() }))
                .collect(),
            other => {
                return Err(UsageError(format!("unknown grid group {other:?} (expected k, fusion, metric, variant)")).into())
            }
        };
        for (group, cfg) in variants {
            let id = |c: &TrainConfig| (c.k, c.fusion_mode, c.mask_metric, c.variant);
            if !entries.iter().any(|e| id(&e.cfg) == id(&cfg)) {
                entries.push(GridEntry { group, cfg });
            }
        }
    }
    if entries.is_empty() {
        return Err(UsageError("empty ablation grid".into()).into());
    }
    Ok(entries)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub label: String,
    pub k: usize,
    pub fusion_mode: String,
    pub mask_metric: String,
    pub variant: String,
    pub status: String,
    pub auroc_cla: Option<f64>,
    pub auroc_seg: Option<f64>,
    pub pro_seg: Option<f64>,
    pub ap_seg: Option<f64>,
}

fn run_entry(entry: &GridEntry, train_split: &[LabeledImage], test: &[LabeledImage]) -> Result<AblationRow> {
    let cfg = &entry.cfg;
    let mut row = AblationRow {
        group: entry.group.into(),
        label: entry.label(),
        k: cfg.k,
        fusion_mode: fusion_name(cfg.fusion_mode).into(),
        mask_metric: metric_name(cfg.mask_metric).into(),
        variant: cfg.variant.name().into(),
        status: "ok".into(),
        auroc_cla: None,
        auroc_seg: None,
        pro_seg: None,
        ap_seg: None,
    };
    let feasible = cfg
        .validate()
        .and_then(|_| cfg.plan().grids(&cfg.backbone(), cfg.resolution, cfg.resolution).map(|_| ()));
    if let Err(e) = feasible {
        info!("{}: skipped ({e})", row.label);
        row.status = format!("skipped: {e}");
        return Ok(row);
    }
    let t0 = Instant::now();
    let outcome = train(train_split, cfg.clone()).with_context(|| format!("training {}", row.label))?;
    let report = evaluate(&outcome.model, test).with_context(|| format!("evaluating {}", row.label))?;
    info!(
        "{}: ap_seg {:.4} auroc_seg {:.4} ({:.0}s)",
        row.label,
        report.ap_seg,
        report.auroc_seg,
        t0.elapsed().as_secs_f64()
    );
    row.auroc_cla = Some(report.auroc_cla);
    row.auroc_seg = Some(report.auroc_seg);
    row.pro_seg = Some(report.pro_seg);
    row.ap_seg = Some(report.ap_seg);
    Ok(row)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    let mut base = resolve_config(&args.cfg, "toy")?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    base.validate()?;
    let grid = build_grid(&base, &args.grid)?;
    let (train_split, test) = load(&base.dataset())?;
    info!("ablation grid with {} configurations", grid.len());
    let rows: Vec<AblationRow> = if args.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
        pool.install(|| {
            grid.par_iter()
                .map(|e| run_entry(e, &train_split, &test))
                .collect::<Result<_>>()
        })?
    } else {
        grid.iter()
            .map(|e| run_entry(e, &train_split, &test))
            .collect::<Result<_>>()?
    };
    create_out(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join(ABLATION_CSV))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let chart: Vec<(String, Vec<(&str, f64)>)> = rows
        .iter()
        .filter(|r| r.status == "ok")
        .map(|r| {
            let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
            (
                r.label.clone(),
                vec![
                    ("auroc_cla", v(r.auroc_cla)),
                    ("auroc_seg", v(r.auroc_seg)),
                    ("pro_seg", v(r.pro_seg)),
                    ("ap_seg", v(r.ap_seg)),
                ],
            )
        })
        .collect();
    fs::write(args.out.join(ABLATION_CHART), render::bar_chart_svg(&chart))?;
    info!("wrote {}", args.out.display());
    Ok(())
}
