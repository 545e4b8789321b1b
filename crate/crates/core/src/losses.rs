//! Training objectives: label-aware distillation loss, focal segmentation
//! loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::backbone::StagePyramid;
use crate::error::{Error, Result};
use crate::psm::SegMask;
use crate::tensor::Tensor;
use crate::wmb::{cosine, cosine_grad_s, mse, MaskMetric};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary pixel ground truth, `n×H×W×1` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGt {
    mask: Tensor,
}

impl PixelGt {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.c() != 1 {
            return Err(Error::shape(format!("ground truth must be single-channel, got {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape("ground truth values must be 0 or 1"));
        }
        Ok(Self { mask })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            mask: Tensor::zeros([n, h, w, 1]),
        }
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn into_mask(self) -> Tensor {
        self.mask
    }

    pub fn anomalous_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_anomalous(&self) -> bool {
        self.anomalous_pixels() > 0
    }

    pub fn stack(items: &[PixelGt]) -> Result<PixelGt> {
        let masks: Vec<Tensor> = items.iter().map(|g| g.mask.clone()).collect();
        Ok(Self {
            mask: Tensor::stack(&masks)?,
        })
    }

    pub fn item(&self, i: usize) -> PixelGt {
        Self {
            mask: self.mask.item(i),
        }
    }
}

/// Max-pools the ground truth to `h×w`: a cell is anomalous iff any pixel it covers is.
pub fn downsample_gt(y: &PixelGt, h: usize, w: usize) -> Result<PixelGt> {
    let m = &y.mask;
    let [n, hh, ww, _] = m.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot downsample to an empty map"));
    }
    for (full, target) in [(hh, h), (ww, w)] {
        if full % target != 0 {
            return Err(Error::Divisibility {
                size: full,
                factor: target,
                context: "ground-truth downsampling",
            });
        }
    }
    let (fy, fx) = (hh / h, ww / w);
    let mut out = Tensor::zeros([n, h, w, 1]);
    for b in 0..n {
        for yy in 0..hh {
            for xx in 0..ww {
                if m.at(b, yy, xx, 0) == 1.0 {
                    out.set(b, yy / fy, xx / fx, 0, 1.0);
                }
            }
        }
    }
    Ok(PixelGt { mask: out })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, tau: 2.0 }
    }
}

/// Distillation loss and its gradients with respect to both pyramids.
#[derive(Clone, Debug)]
pub struct DistillationGrad {
    pub loss: f64,
    pub d_student: Vec<Tensor>,
    pub d_teacher: Vec<Tensor>,
}

/// Per-position similarity used by the loss for `metric`, plus the
/// derivative callbacks' shared state.
#[inline]
fn loss_similarity(t: &[f64], s: &[f64], metric: MaskMetric) -> f64 {
    match metric {
        MaskMetric::Cosine => cosine(t, s),
        MaskMetric::Mse => 1.0 / (1.0 + mse(t, s)),
    }
}

/// `Σ_stages mean_positions [(1−y)(1−sim) + y·sim]` with `sim` the cosine
/// (or `1/(1+mse)` under the MSE metric). Normal positions are pulled
/// together, anomalous positions pushed apart.
pub fn distillation_loss(t: &StagePyramid, s: &StagePyramid, y: &PixelGt) -> Result<f64> {
    distillation_loss_with(t, s, y, MaskMetric::Cosine)
}

pub fn distillation_loss_with(t: &StagePyramid, s: &StagePyramid, y: &PixelGt, metric: MaskMetric) -> Result<f64> {
    Ok(distillation_grad(t, s, y, metric)?.loss)
}

pub fn distillation_grad(t: &StagePyramid, s: &StagePyramid, y: &PixelGt, metric: MaskMetric) -> Result<DistillationGrad> {
    t.check_aligned(s)?;
    let mut loss = 0.0;
    let mut d_student = Vec::with_capacity(t.len());
    let mut d_teacher = Vec::with_capacity(t.len());
    for (ts, ss) in t.stages.iter().zip(&s.stages) {
        if y.mask.n() != ts.n() {
            return Err(Error::shape(format!(
                "ground truth batch {} vs feature batch {}",
                y.mask.n(),
                ts.n()
            )));
        }
        let yd = downsample_gt(y, ts.h(), ts.w())?;
        let c = ts.c();
        let count = ts.positions() as f64;
        let mut ds = Tensor::zeros(ss.shape());
        let mut dt = Tensor::zeros(ts.shape());
        let mut stage = 0.0;
        let positions = ts
            .data()
            .chunks_exact(c)
            .zip(ss.data().chunks_exact(c))
            .zip(yd.mask.data())
            .zip(ds.data_mut().chunks_exact_mut(c).zip(dt.data_mut().chunks_exact_mut(c)));
        for (((tv, sv), &yv), (dsv, dtv)) in positions {
            let sim = loss_similarity(tv, sv, metric);
            stage += (1.0 - yv) * (1.0 - sim) + yv * sim;
            let dsim = (2.0 * yv - 1.0) / count;
            match metric {
                MaskMetric::Cosine => {
                    cosine_grad_s(tv, sv, dsim, dsv);
                    cosine_grad_s(sv, tv, dsim, dtv);
                }
                MaskMetric::Mse => {
                    let d = mse(tv, sv);
                    let dd = dsim * (-1.0 / ((1.0 + d) * (1.0 + d)));
                    for i in 0..c {
                        let g = dd * 2.0 * (tv[i] - sv[i]) / c as f64;
                        dtv[i] += g;
                        dsv[i] -= g;
                    }
                }
            }
        }
        loss += stage / count;
        d_student.push(ds);
        d_teacher.push(dt);
    }
    Ok(DistillationGrad {
        loss,
        d_student,
        d_teacher,
    })
}

fn check_mask_gt(m: &SegMask, y: &PixelGt) -> Result<()> {
    let [n, h, w, c] = m.probs.shape();
    if c != 2 || y.mask.shape() != [n, h, w, 1] {
        return Err(Error::shape(format!(
            "mask {:?} and ground truth {:?} do not match",
            m.probs.shape(),
            y.mask.shape()
        )));
    }
    Ok(())
}

#[inline]
fn focal_term(p: f64, y: f64, tau: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1.0 {
        -(1.0 - p).powf(tau) * p.ln()
    } else {
        -p.powf(tau) * (1.0 - p).ln()
    }
}

#[inline]
fn focal_dp(p: f64, y: f64, tau: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    if y == 1.0 {
        let q = 1.0 - p;
        let pow_d = if tau == 0.0 { 0.0 } else { tau * q.powf(tau - 1.0) };
        pow_d * p.ln() - q.powf(tau) / p
    } else {
        let pow_d = if tau == 0.0 { 0.0 } else { tau * p.powf(tau - 1.0) };
        -pow_d * (1.0 - p).ln() + p.powf(tau) / (1.0 - p)
    }
}

/// Mean focal loss over all pixels; `p` is the abnormal-channel probability.
pub fn focal_loss(m: &SegMask, y: &PixelGt, tau: f64) -> Result<f64> {
    check_mask_gt(m, y)?;
    let total: f64 = m
        .probs
        .data()
        .chunks_exact(2)
        .zip(y.mask.data())
        .map(|(p, &yv)| focal_term(p[1], yv, tau))
        .sum();
    Ok(total / y.mask.len() as f64)
}

/// Focal loss and its gradient with respect to the abnormal probability, `n×H×W×1`.
pub fn focal_grad(m: &SegMask, y: &PixelGt, tau: f64) -> Result<(f64, Tensor)> {
    let loss = focal_loss(m, y, tau)?;
    let count = y.mask.len() as f64;
    let data = m
        .probs
        .data()
        .chunks_exact(2)
        .zip(y.mask.data())
        .map(|(p, &yv)| focal_dp(p[1], yv, tau) / count)
        .collect();
    Ok((loss, Tensor::from_vec(y.mask.shape(), data)?))
}

/// Chains an abnormal-probability gradient through the two-way softmax.
pub fn softmax_backward(m: &SegMask, d_abnormal: &Tensor) -> Tensor {
    let mut out = m.probs.clone();
    for (o, &g) in out.data_mut().chunks_exact_mut(2).zip(d_abnormal.data()) {
        let p = o[1];
        let j = g * p * (1.0 - p);
        o[0] = -j;
        o[1] = j;
    }
    out
}

/// `ld + λ·ls`.
pub fn total_loss(distill: f64, seg: f64, weights: &LossWeights) -> f64 {
    distill + weights.lambda * seg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{max_rel_err, numeric_grad, random_tensor};

    fn gt(h: usize, w: usize, ones: &[(usize, usize)]) -> PixelGt {
        let mut m = Tensor::zeros([1, h, w, 1]);
        for &(y, x) in ones {
            m.set(0, y, x, 0, 1.0);
        }
        PixelGt::new(m).unwrap()
    }

    fn pyramid(seed: u64) -> StagePyramid {
        StagePyramid::new(vec![
            random_tensor([1, 4, 4, 3], seed),
            random_tensor([1, 2, 2, 5], seed + 1),
        ])
    }

    #[test]
    fn downsample_cases() {
        let z = downsample_gt(&gt(8, 8, &[]), 2, 4).unwrap();
        assert!(!z.is_anomalous());
        let one = downsample_gt(&gt(8, 8, &[(5, 2)]), 4, 4).unwrap();
        assert_eq!(one.anomalous_pixels(), 1);
        assert_eq!(one.mask().at(0, 2, 1, 0), 1.0);
        let block = downsample_gt(&gt(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]), 2, 2).unwrap();
        assert_eq!(block.mask().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(downsample_gt(&gt(6, 6, &[]), 4, 4), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn gt_rejects_non_binary() {
        assert!(PixelGt::new(Tensor::full([1, 2, 2, 1], 0.5)).is_err());
    }

    #[test]
    fn distillation_identities() {
        let t = pyramid(1);
        let normal = distillation_loss(&t, &t, &gt(8, 8, &[])).unwrap();
        assert!(normal.abs() < 1e-12);
        let all: Vec<(usize, usize)> = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).collect();
        let anomalous = distillation_loss(&t, &t, &gt(8, 8, &all)).unwrap();
        assert!((anomalous - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_features_cost_one_per_stage() {
        let t = StagePyramid::new(vec![Tensor::from_fn(2, 2, 2, |_, _, c| if c == 0 { 1.0 } else { 0.0 })]);
        let s = StagePyramid::new(vec![Tensor::from_fn(2, 2, 2, |_, _, c| if c == 1 { 3.0 } else { 0.0 })]);
        assert!((distillation_loss(&t, &s, &gt(4, 4, &[])).unwrap() - 1.0).abs() < 1e-12);
    }

    fn check_distill_grads(metric: MaskMetric) {
        let t = pyramid(3);
        let s = pyramid(7);
        let y = gt(8, 8, &[(0, 0), (5, 6), (6, 6)]);
        let g = distillation_grad(&t, &s, &y, metric).unwrap();
        for stage in 0..2 {
            let eval = |tp: &StagePyramid, sp: &StagePyramid| distillation_loss_with(tp, sp, &y, metric).unwrap();
            let mut sv = s.stages[stage].data().to_vec();
            let num = numeric_grad(&mut sv, |v| {
                let mut sp = s.clone();
                sp.stages[stage] = Tensor::from_vec(s.stages[stage].shape(), v.to_vec()).unwrap();
                eval(&t, &sp)
            });
            assert!(max_rel_err(g.d_student[stage].data(), &num) < 1e-3);
            let mut tv = t.stages[stage].data().to_vec();
            let num = numeric_grad(&mut tv, |v| {
                let mut tp = t.clone();
                tp.stages[stage] = Tensor::from_vec(t.stages[stage].shape(), v.to_vec()).unwrap();
                eval(&tp, &s)
            });
            assert!(max_rel_err(g.d_teacher[stage].data(), &num) < 1e-3);
        }
    }

    #[test]
    fn distillation_gradients() {
        check_distill_grads(MaskMetric::Cosine);
        check_distill_grads(MaskMetric::Mse);
    }

    fn mask_of(p: f64) -> SegMask {
        SegMask::from_abnormal(&Tensor::full([1, 1, 1, 1], p))
    }

    #[test]
    fn focal_analytic_values() {
        let l = focal_loss(&mask_of(0.5), &gt(1, 1, &[(0, 0)]), 0.0).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        let l = focal_loss(&mask_of(0.9), &gt(1, 1, &[(0, 0)]), 2.0).unwrap();
        assert!((l - 0.0010536).abs() < 1e-6);
        let l = focal_loss(&mask_of(0.1), &gt(1, 1, &[]), 2.0).unwrap();
        assert!((l - 0.0010536).abs() < 1e-6);
    }

    #[test]
    fn focal_tau_zero_is_bce() {
        let p = random_tensor([1, 4, 4, 1], 4).map(|v| 0.5 + 0.45 * v);
        let y = gt(4, 4, &[(0, 1), (2, 2), (3, 0)]);
        let m = SegMask::from_abnormal(&p);
        let bce: f64 = p
            .data()
            .iter()
            .zip(y.mask().data())
            .map(|(&pv, &yv)| -(yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln()))
            .sum::<f64>()
            / 16.0;
        assert!((focal_loss(&m, &y, 0.0).unwrap() - bce).abs() < 1e-12);
    }

    #[test]
    fn focal_clamps_perfect_predictions() {
        let l = focal_loss(&mask_of(1.0), &gt(1, 1, &[(0, 0)]), 2.0).unwrap();
        assert!(l.is_finite() && l >= 0.0 && l < 1e-15);
        let l = focal_loss(&mask_of(1.0), &gt(1, 1, &[]), 2.0).unwrap();
        assert!(l.is_finite() && l > 10.0);
    }

    #[test]
    fn focal_gradient_through_softmax() {
        let logits = random_tensor([1, 3, 3, 2], 8).map(|v| 3.0 * v);
        let y = gt(3, 3, &[(1, 1), (0, 2)]);
        for tau in [0.0, 2.0] {
            let m = SegMask::from_logits(&logits);
            let (_, dp) = focal_grad(&m, &y, tau).unwrap();
            let dz = softmax_backward(&m, &dp);
            let mut z = logits.data().to_vec();
            let num = numeric_grad(&mut z, |v| {
                let mm = SegMask::from_logits(&Tensor::from_vec(logits.shape(), v.to_vec()).unwrap());
                focal_loss(&mm, &y, tau).unwrap()
            });
            assert!(max_rel_err(dz.data(), &num) < 1e-3);
            let mut pv = m.abnormal().into_vec();
            let num = numeric_grad(&mut pv, |v| {
                let mm = SegMask::from_abnormal(&Tensor::from_vec([1, 3, 3, 1], v.to_vec()).unwrap());
                focal_loss(&mm, &y, tau).unwrap()
            });
            assert!(max_rel_err(dp.data(), &num) < 1e-3);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights { lambda: 1.0, tau: 2.0 };
        assert!((total_loss(0.3, 0.2, &w) - 0.5).abs() < 1e-15);
        let w0 = LossWeights { lambda: 0.0, tau: 2.0 };
        assert_eq!(total_loss(0.3, 0.2, &w0), 0.3);
        assert_eq!(LossWeights::default().lambda, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn distillation_ignores_student_rescaling(seed in 0u64..500, scale_seed in 0u64..500) {
            let t = pyramid(seed);
            let s = pyramid(seed + 100);
            let y = gt(8, 8, &[(1, 1), (7, 3)]);
            let scales = random_tensor([1, 4, 4, 1], scale_seed);
            let mut rescaled = s.clone();
            for stage in &mut rescaled.stages {
                let c = stage.c();
                let (h, w) = (stage.h(), stage.w());
                for (i, p) in stage.data_mut().chunks_exact_mut(c).enumerate() {
                    let f = 0.1 + 5.0 * scales.data()[(i / w) * 4 / h * 4 + (i % w) * 4 / w].abs();
                    p.iter_mut().for_each(|v| *v *= f);
                }
            }
            let a = distillation_loss(&t, &s, &y).unwrap();
            let b = distillation_loss(&t, &rescaled, &y).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn focal_is_nonnegative(seed in 0u64..1000, tau in 0.0f64..4.0) {
            let p = random_tensor([1, 3, 3, 1], seed).map(|v| (v + 1.0) / 2.0);
            let y = PixelGt::new(random_tensor([1, 3, 3, 1], seed + 1).map(|v| if v > 0.0 { 1.0 } else { 0.0 })).unwrap();
            proptest::prop_assert!(focal_loss(&SegMask::from_abnormal(&p), &y, tau).unwrap() >= 0.0);
        }
    }
}
