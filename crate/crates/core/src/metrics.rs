//! Image- and pixel-level detection metrics: AUROC, average precision and
//! per-region overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PixelGt;
use crate::psm::SegMask;
use crate::tensor::Tensor;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_SMOOTH_SIGMA: f64 = 4.0;

/// Gaussian kernels are truncated at this many standard deviations.
const TRUNCATE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub fpr_limit: f64,
    pub smooth_sigma: f64,
    /// Average per-image pixel AUROC instead of pooling all pixels.
    pub per_image_pixel_auroc: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fpr_limit: DEFAULT_FPR_LIMIT,
            smooth_sigma: DEFAULT_SMOOTH_SIGMA,
            per_image_pixel_auroc: false,
        }
    }
}

/// Everything needed to score a test split.
#[derive(Clone, Debug, Default)]
pub struct EvalBatch {
    /// `1×H×W×1` abnormal-channel probability maps.
    pub anomaly_maps: Vec<Tensor>,
    pub gts: Vec<PixelGt>,
    pub image_scores: Vec<f64>,
    pub image_labels: Vec<u8>,
}

impl EvalBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.anomaly_maps.len();
        if self.gts.len() != n || self.image_scores.len() != n || self.image_labels.len() != n {
            return Err(Error::shape(format!(
                "eval batch lengths differ: {} maps, {} gts, {} scores, {} labels",
                n,
                self.gts.len(),
                self.image_scores.len(),
                self.image_labels.len()
            )));
        }
        for (i, (m, g)) in self.anomaly_maps.iter().zip(&self.gts).enumerate() {
            if m.n() != 1 || m.c() != 1 || m.shape() != g.mask().shape() {
                return Err(Error::shape(format!(
                    "item {i}: map {:?} vs ground truth {:?}",
                    m.shape(),
                    g.mask().shape()
                )));
            }
        }
        Ok(())
    }
}

/// Counts attached to a report; kept out of the serialized metric file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n_images: usize,
    pub n_anomalous_images: usize,
    pub n_pixels: usize,
    pub n_anomalous_pixels: usize,
    pub n_regions: usize,
    pub fpr_limit: f64,
    pub per_image_pixel_auroc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc_cla: f64,
    pub auroc_seg: f64,
    pub pro_seg: f64,
    pub ap_seg: f64,
    #[serde(skip)]
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn values(&self) -> [(&'static str, f64); 4] {
        [
            ("auroc_cla", self.auroc_cla),
            ("auroc_seg", self.auroc_seg),
            ("pro_seg", self.pro_seg),
            ("ap_seg", self.ap_seg),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.values() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::shape(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// 1-D Gaussian weights for `sigma`, normalized, radius `ceil(4σ)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (TRUNCATE * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric boundary: `d c b a | a b c d | d c b a`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur of every channel of every batch item.
pub fn gaussian_smooth(t: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return t.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [n, h, w, c] = t.shape();
    let mut tmp = Tensor::zeros(t.shape());
    let mut out = Tensor::zeros(t.shape());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * t.at(b, y, reflect(x as isize + i as isize - r, w), ch))
                        .sum();
                    tmp.set(b, y, x, ch, v);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * tmp.at(b, reflect(y as isize + i as isize - r, h), x, ch))
                        .sum();
                    out.set(b, y, x, ch, v);
                }
            }
        }
    }
    out
}

/// Maximum of the smoothed map (`σ = 0` gives the raw maximum).
pub fn map_score(map: &Tensor, sigma: f64) -> f64 {
    gaussian_smooth(map, sigma)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Image-level anomaly score of a single-image mask.
pub fn image_score(m: &SegMask, sigma: f64) -> f64 {
    map_score(&m.abnormal(), sigma)
}

fn check_both_classes(labels: impl Iterator<Item = bool>, what: &str) -> Result<(usize, usize)> {
    let (mut pos, mut neg) = (0, 0);
    for l in labels {
        if l {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{what} needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUROC with tied scores counted as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = check_both_classes(labels.iter().map(|&l| l == 1), "AUROC")?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-interpolated area under the precision–recall curve.
pub fn average_precision_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::DegenerateLabels("average precision needs an anomalous pixel".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let before = tp;
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > before {
            ap += (tp as f64 / (tp + fp) as f64) * ((tp - before) as f64 / pos as f64);
        }
    }
    // Summation rounding can overshoot by an ulp or two.
    Ok(ap.min(1.0))
}

fn pool(maps: &[Tensor], gts: &[PixelGt]) -> Result<(Vec<f64>, Vec<u8>)> {
    if maps.len() != gts.len() {
        return Err(Error::shape(format!("{} maps vs {} ground truths", maps.len(), gts.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, g) in maps.iter().zip(gts) {
        if m.len() != g.mask().len() {
            return Err(Error::shape(format!("map {:?} vs ground truth {:?}", m.shape(), g.mask().shape())));
        }
        scores.extend_from_slice(m.data());
        labels.extend(g.mask().data().iter().map(|&v| v as u8));
    }
    Ok((scores, labels))
}

pub fn average_precision(maps: &[Tensor], gts: &[PixelGt]) -> Result<f64> {
    let (s, l) = pool(maps, gts)?;
    average_precision_scores(&s, &l)
}

/// Pixel AUROC, pooled over all images or averaged per image (images lacking
/// one of the classes are skipped in the per-image mode).
pub fn pixel_auroc(maps: &[Tensor], gts: &[PixelGt], per_image: bool) -> Result<f64> {
    if !per_image {
        let (s, l) = pool(maps, gts)?;
        return auroc(&s, &l);
    }
    let mut values = Vec::new();
    for (m, g) in maps.iter().zip(gts) {
        let (s, l) = pool(std::slice::from_ref(m), std::slice::from_ref(g))?;
        match auroc(&s, &l) {
            Ok(v) => values.push(v),
            Err(Error::DegenerateLabels(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::DegenerateLabels("no image contains both pixel classes".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// 8-connected component labels of a single-image mask: `0` for background,
/// `1..=count` for regions. Returns `(labels, count)`.
pub fn connected_components(mask: &Tensor) -> (Vec<usize>, usize) {
    let (h, w) = (mask.h(), mask.w());
    let data = mask.data();
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if data[start] != 1.0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if data[q] == 1.0 && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Trapezoidal area under `(fpr, value)` points up to `limit`, normalized by
/// `limit`. Points must be sorted by non-decreasing fpr and start at fpr 0.
pub(crate) fn clipped_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((f0, p0), (f1, p1)) = (pair[0], pair[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let p_lim = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
    }
    // Summation rounding can overshoot by an ulp or two.
    (area / limit).clamp(0.0, 1.0)
}

/// Per-region overlap integrated over false-positive rates `[0, fpr_limit]`,
/// normalized by `fpr_limit`. Every distinct score is a threshold.
pub fn pro(maps: &[Tensor], gts: &[PixelGt], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::config(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let (scores, labels) = pool(maps, gts)?;
    // Region id per pooled pixel (0 = background) and region sizes.
    let mut region = Vec::with_capacity(scores.len());
    let mut sizes = vec![0usize];
    for g in gts {
        let (lab, count) = connected_components(g.mask());
        let offset = sizes.len() - 1;
        sizes.extend(std::iter::repeat_n(0, count));
        for l in lab {
            let id = if l == 0 { 0 } else { l + offset };
            sizes[id] += (id != 0) as usize;
            region.push(id);
        }
    }
    let n_regions = sizes.len() - 1;
    if n_regions == 0 {
        return Err(Error::DegenerateLabels("PRO needs at least one anomalous region".into()));
    }
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if neg == 0 {
        return Err(Error::DegenerateLabels("PRO needs normal pixels for the false-positive rate".into()));
    }

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut overlap) = (0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            let r = region[idx[i]];
            if r == 0 {
                fp += 1;
            } else {
                overlap += 1.0 / sizes[r] as f64;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, overlap / n_regions as f64));
    }
    Ok(clipped_area(&points, fpr_limit))
}

/// All four metrics for an evaluated split.
pub fn evaluate_batch(batch: &EvalBatch, cfg: &MetricsConfig) -> Result<MetricsReport> {
    batch.validate()?;
    let auroc_cla = auroc(&batch.image_scores, &batch.image_labels)?;
    let auroc_seg = pixel_auroc(&batch.anomaly_maps, &batch.gts, cfg.per_image_pixel_auroc)?;
    let ap_seg = average_precision(&batch.anomaly_maps, &batch.gts)?;
    let pro_seg = pro(&batch.anomaly_maps, &batch.gts, cfg.fpr_limit)?;
    let meta = ReportMeta {
        n_images: batch.anomaly_maps.len(),
        n_anomalous_images: batch.image_labels.iter().filter(|&&l| l == 1).count(),
        n_pixels: batch.anomaly_maps.iter().map(Tensor::len).sum(),
        n_anomalous_pixels: batch.gts.iter().map(PixelGt::anomalous_pixels).sum(),
        n_regions: batch.gts.iter().map(|g| connected_components(g.mask()).1).sum(),
        fpr_limit: cfg.fpr_limit,
        per_image_pixel_auroc: cfg.per_image_pixel_auroc,
    };
    let report = MetricsReport {
        auroc_cla,
        auroc_seg,
        pro_seg,
        ap_seg,
        meta,
    };
    report.validate()?;
    Ok(report)
}
