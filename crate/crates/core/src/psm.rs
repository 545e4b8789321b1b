//! Post-segmentation decoder.
//!
//! Starting from the deepest weighted feature map, each UpBlock doubles the
//! resolution with a 2× transposed conv, concatenates the next shallower
//! weighted map and applies two conv–BN–ReLU layers. A final transposed-conv
//! stack bridges the first stage's stride back to input resolution, and a
//! 3×3 conv with a channel softmax yields the normal/abnormal mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StagePyramid;
use crate::error::{Error, Result};
use crate::nn::{param_name, relu_backward_inplace, relu_inplace, BatchNorm2d, Conv2d, ConvBlock, Module, Param, TrConv2x};
use crate::tensor::{FeatureMap, Tensor};

/// Channel index of the anomaly probability in a [`SegMask`].
pub const ABNORMAL: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsmConfig {
    /// Channels of the incoming weighted maps `C_1..C_n`.
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Output channels of UpBlock `j` (merging `C_j`), `j = 1..n-1`.
    pub upblock_channels: Vec<usize>,
    /// Channels of the final upsampling stack.
    pub head_channels: usize,
}

impl PsmConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_strides.len() != n {
            return Err(Error::config("decoder needs one stride per stage and at least one stage"));
        }
        if self.upblock_channels.len() + 1 != n {
            return Err(Error::config(format!(
                "{} stages need {} upblock widths, got {}",
                n,
                n - 1,
                self.upblock_channels.len()
            )));
        }
        if !self.stage_strides[0].is_power_of_two() {
            return Err(Error::config("first stage stride must be a power of two"));
        }
        if self.stage_strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::config(format!(
                "decoder needs strides doubling per stage, got {:?}",
                self.stage_strides
            )));
        }
        if self.head_channels == 0 || self.upblock_channels.contains(&0) {
            return Err(Error::config("decoder widths must be positive"));
        }
        Ok(())
    }

    fn head_levels(&self) -> usize {
        self.stage_strides[0].trailing_zeros() as usize
    }
}

/// Softmax-normalized two-channel mask, `n×H×W×2`; channel 1 is "abnormal".
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub probs: Tensor,
}

impl SegMask {
    pub fn from_logits(logits: &Tensor) -> Self {
        let mut probs = logits.clone();
        for p in probs.data_mut().chunks_exact_mut(2) {
            let m = p[0].max(p[1]);
            let (e0, e1) = ((p[0] - m).exp(), (p[1] - m).exp());
            let z = e0 + e1;
            p[0] = e0 / z;
            p[1] = e1 / z;
        }
        Self { probs }
    }

    /// Anomaly probability map, `n×H×W×1`.
    pub fn abnormal(&self) -> Tensor {
        self.probs.channel(ABNORMAL)
    }

    /// Builds a mask directly from anomaly probabilities.
    pub fn from_abnormal(p: &Tensor) -> Self {
        let mut data = Vec::with_capacity(p.len() * 2);
        for &v in p.data() {
            data.push(1.0 - v);
            data.push(v);
        }
        Self {
            probs: Tensor::from_vec([p.n(), p.h(), p.w(), 2], data).expect("two channels per position"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UpBlock {
    up: TrConv2x,
    conv1: ConvBlock,
    conv2: ConvBlock,
}

impl UpBlock {
    pub fn new(prev_channels: usize, skip_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            up: TrConv2x::new(prev_channels, out_channels, &mut rng),
            conv1: ConvBlock::new(out_channels + skip_channels, out_channels, 3, 1, true, true, &mut rng),
            conv2: ConvBlock::new(out_channels, out_channels, 3, 1, true, true, &mut rng),
        }
    }

    fn check(&self, prev: &Tensor, skip: &Tensor) -> Result<()> {
        if prev.n() != skip.n() || 2 * prev.h() != skip.h() || 2 * prev.w() != skip.w() {
            return Err(Error::shape(format!(
                "upblock input {:?} does not upsample onto skip {:?}",
                prev.shape(),
                skip.shape()
            )));
        }
        let expect = self.conv1.conv.in_channels() - self.up.out_channels();
        if skip.c() != expect {
            return Err(Error::shape(format!(
                "upblock skip has {} channels, expected {expect}",
                skip.c()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, prev: &Tensor, skip: &FeatureMap) -> Result<Tensor> {
        self.check(prev, skip)?;
        let up = self.up.forward(prev);
        let cat = Tensor::concat_channels(&up, skip)?;
        Ok(self.conv2.forward(&self.conv1.forward(&cat)))
    }

    pub fn forward_train(&mut self, prev: &Tensor, skip: &FeatureMap) -> Result<Tensor> {
        self.check(prev, skip)?;
        let up = self.up.forward_train(prev);
        let cat = Tensor::concat_channels(&up, skip)?;
        let h = self.conv1.forward_train(&cat);
        Ok(self.conv2.forward_train(&h))
    }

    /// Returns gradients for `(prev, skip)`.
    pub fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let dh = self.conv2.backward(dy, true).expect("input grad requested");
        let dcat = self.conv1.backward(&dh, true).expect("input grad requested");
        let (dup, dskip) = dcat.split_channels(self.up.out_channels());
        (self.up.backward(&dup), dskip)
    }
}

impl Module for UpBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit(&param_name(prefix, "up"), f);
        self.conv1.visit(&param_name(prefix, "conv1"), f);
        self.conv2.visit(&param_name(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_mut(&param_name(prefix, "up"), f);
        self.conv1.visit_mut(&param_name(prefix, "conv1"), f);
        self.conv2.visit_mut(&param_name(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
struct HeadUp {
    up: TrConv2x,
    bn: BatchNorm2d,
    relu_out: Option<Tensor>,
}

impl HeadUp {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward(&self.up.forward(x));
        relu_inplace(&mut y);
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let u = self.up.forward_train(x);
        let mut y = self.bn.forward_train(&u);
        relu_inplace(&mut y);
        self.relu_out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        relu_backward_inplace(&mut g, self.relu_out.as_ref().expect("forward_train first"));
        self.relu_out = None;
        let g = self.bn.backward(&g);
        self.up.backward(&g)
    }
}

/// The full decoder.
#[derive(Clone, Debug)]
pub struct Psm {
    cfg: PsmConfig,
    blocks: Vec<UpBlock>,
    head: Vec<HeadUp>,
    conv_f: Conv2d,
}

impl Psm {
    pub fn new(cfg: PsmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_stages();
        let blocks = (0..n.saturating_sub(1))
            .map(|j| {
                let prev = if j + 2 == n {
                    cfg.stage_channels[n - 1]
                } else {
                    cfg.upblock_channels[j + 1]
                };
                UpBlock::new(prev, cfg.stage_channels[j], cfg.upblock_channels[j], seed.wrapping_add(j as u64 + 1))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = if n > 1 {
            cfg.upblock_channels[0]
        } else {
            cfg.stage_channels[0]
        };
        let head = (0..cfg.head_levels())
            .map(|_| {
                let h = HeadUp {
                    up: TrConv2x::new(c, cfg.head_channels, &mut rng),
                    bn: BatchNorm2d::new(cfg.head_channels),
                    relu_out: None,
                };
                c = cfg.head_channels;
                h
            })
            .collect();
        let conv_f = Conv2d::new(c, 2, 3, 1, 1, &mut rng);
        Ok(Self {
            cfg,
            blocks,
            head,
            conv_f,
        })
    }

    pub fn config(&self) -> &PsmConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[UpBlock] {
        &self.blocks
    }

    fn check(&self, c: &StagePyramid) -> Result<()> {
        let n = self.cfg.num_stages();
        if c.len() != n {
            return Err(Error::shape(format!("decoder expects {n} stages, got {}", c.len())));
        }
        let (h0, w0) = (c.stages[0].h(), c.stages[0].w());
        for (j, t) in c.stages.iter().enumerate() {
            let f = self.cfg.stage_strides[j] / self.cfg.stage_strides[0];
            if t.c() != self.cfg.stage_channels[j] || t.h() * f != h0 || t.w() * f != w0 {
                return Err(Error::shape(format!(
                    "stage {} map {:?} inconsistent with decoder config",
                    j + 1,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Logits `n×H×W×2` in inference mode.
    pub fn logits(&self, c: &StagePyramid) -> Result<Tensor> {
        self.check(c)?;
        let n = c.len();
        let mut p = c.stages[n - 1].clone();
        for j in (0..n - 1).rev() {
            p = self.blocks[j].forward(&p, &c.stages[j])?;
        }
        for h in &self.head {
            p = h.forward(&p);
        }
        Ok(self.conv_f.forward(&p))
    }

    pub fn segment(&self, c: &StagePyramid) -> Result<SegMask> {
        Ok(SegMask::from_logits(&self.logits(c)?))
    }

    pub fn logits_train(&mut self, c: &StagePyramid) -> Result<Tensor> {
        self.check(c)?;
        let n = c.len();
        let mut p = c.stages[n - 1].clone();
        for j in (0..n - 1).rev() {
            p = self.blocks[j].forward_train(&p, &c.stages[j])?;
        }
        for h in &mut self.head {
            p = h.forward_train(&p);
        }
        Ok(self.conv_f.forward_train(&p))
    }

    /// Back-propagates logit gradients; returns `∂L/∂C_i` per stage.
    pub fn backward(&mut self, dlogits: &Tensor) -> Vec<Tensor> {
        let mut g = self.conv_f.backward(dlogits, true).expect("input grad requested");
        for h in self.head.iter_mut().rev() {
            g = h.backward(&g);
        }
        let n = self.cfg.num_stages();
        let mut dc = vec![Tensor::zeros([0, 0, 0, 0]); n];
        for j in 0..n - 1 {
            let (dprev, dskip) = self.blocks[j].backward(&g);
            dc[j] = dskip;
            g = dprev;
        }
        dc[n - 1] = g;
        dc
    }
}

impl Module for Psm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&param_name(prefix, &format!("up{}", j + 1)), f);
        }
        for (j, h) in self.head.iter().enumerate() {
            h.up.visit(&param_name(prefix, &format!("head{}.up", j + 1)), f);
            h.bn.visit(&param_name(prefix, &format!("head{}.bn", j + 1)), f);
        }
        self.conv_f.visit(&param_name(prefix, "conv_f"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&param_name(prefix, &format!("up{}", j + 1)), f);
        }
        for (j, h) in self.head.iter_mut().enumerate() {
            h.up.visit_mut(&param_name(prefix, &format!("head{}.up", j + 1)), f);
            h.bn.visit_mut(&param_name(prefix, &format!("head{}.bn", j + 1)), f);
        }
        self.conv_f.visit_mut(&param_name(prefix, "conv_f"), f);
    }
}

/// One decoder step on a pair of maps; see [`UpBlock`].
pub fn upblock(block: &UpBlock, prev: &Tensor, skip: &FeatureMap) -> Result<Tensor> {
    block.forward(prev, skip)
}

/// Decodes a weighted pyramid into a segmentation mask.
pub fn segment(psm: &Psm, c: &StagePyramid) -> Result<SegMask> {
    psm.segment(c)
}
