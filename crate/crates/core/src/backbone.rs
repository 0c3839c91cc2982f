//! Four-stage residual backbone and multi-resolution fusion.
//!
//! Stage geometry is what the fusion depends on: every stage exposes its
//! map, the last stage keeps stride 1, and earlier stages are max-pooled
//! down to the last stage's spatial size before channel concatenation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamStore, PoolKind};
use crate::rng::Rng;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `[H₀, W₀]`.
    pub input_hw: [usize; 2],
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Max-pool window (= stride) after the stem; 1 disables it.
    pub stem_pool: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub block: BlockKind,
}

impl BackboneConfig {
    /// ResNet-50-shaped geometry at 384×128: stage 4 is 2048×24×8.
    pub fn reference() -> Self {
        BackboneConfig {
            input_hw: [384, 128],
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: 2,
            stage_channels: [256, 512, 1024, 2048],
            stage_strides: [1, 2, 2, 1],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Bottleneck,
        }
    }

    /// Desk-scale geometry at 48×32 with cumulative strides (2, 4, 8, 8).
    pub fn mini() -> Self {
        BackboneConfig {
            input_hw: [48, 32],
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: 1,
            stage_channels: [8, 16, 32, 64],
            stage_strides: [2, 2, 2, 1],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Basic,
        }
    }

    /// Cumulative stride at the output of each stage.
    pub fn cumulative_strides(&self) -> [usize; 4] {
        let mut r = self.stem_stride * self.stem_pool;
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(self.stage_strides) {
            r *= s;
            *o = r;
        }
        out
    }

    /// `(C, H, W)` of each stage map.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let r = self.cumulative_strides();
        let [h, w] = self.input_hw;
        std::array::from_fn(|i| (self.stage_channels[i], h / r[i], w / r[i]))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.stage_strides[3] != 1 {
            return bad(format!("last stage stride must be 1, got {}", self.stage_strides[3]));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.stem_stride == 0 || self.stem_pool == 0 || self.stage_strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stem_kernel == 0 || self.stem_kernel.is_multiple_of(2) {
            return bad(format!("stem kernel must be odd, got {}", self.stem_kernel));
        }
        if self.block == BlockKind::Bottleneck && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return bad("bottleneck stage widths must be divisible by 4".into());
        }
        let total = self.cumulative_strides()[3];
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return bad(format!("input {h}×{w} not divisible by total stride {total}"));
        }
        Ok(())
    }
}

/// Per-stage maps of one forward pass, `N×Cᵢ×Hᵢ×Wᵢ`.
#[derive(Clone, Copy, Debug)]
pub struct StageMaps {
    pub maps: [Var; 4],
}

impl StageMaps {
    /// Map of 1-based stage `s`.
    pub fn stage(&self, s: usize) -> Var {
        self.maps[s - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// 1-based stage indices to fuse.
    pub stages: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            stages: vec![1, 2, 3, 4],
        }
    }
}

impl FusionConfig {
    pub fn new(stages: &[usize]) -> Self {
        FusionConfig {
            stages: stages.to_vec(),
        }
    }

    /// Stage subsets of the multi-stage ablation: each single stage, 1-2,
    /// 1-3, 2-4, and all four.
    pub fn ablation_subsets() -> Vec<FusionConfig> {
        [
            &[1][..],
            &[2],
            &[3],
            &[4],
            &[1, 2],
            &[1, 2, 3],
            &[2, 3, 4],
            &[1, 2, 3, 4],
        ]
        .iter()
        .map(|s| FusionConfig::new(s))
        .collect()
    }

    pub fn label(&self) -> String {
        let s: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        format!("stages{}", s.join(""))
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("fusion: no stages selected".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "fusion: stages must be strictly increasing, got {:?}",
                self.stages
            )));
        }
        if self.stages.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::Config(format!(
                "fusion: stage out of 1..=4 in {:?}",
                self.stages
            )));
        }
        let shapes = backbone.stage_shapes();
        let (_, h4, w4) = shapes[3];
        for &s in &self.stages {
            let (_, h, w) = shapes[s - 1];
            if h % h4 != 0 || w % w4 != 0 {
                return Err(Error::Config(format!(
                    "fusion: stage {s} map {h}×{w} is not an integer multiple of {h4}×{w4}"
                )));
            }
        }
        Ok(())
    }

    /// Channel count of the fused map.
    pub fn fused_channels(&self, backbone: &BackboneConfig) -> usize {
        self.stages.iter().map(|&s| backbone.stage_channels[s - 1]).sum()
    }
}

/// Max-pools every included stage down to stage 4's spatial size and
/// concatenates them along channels, in stage order.
pub fn fmr_fuse(cx: &mut Ctx, maps: &StageMaps, cfg: &FusionConfig) -> Result<Var> {
    let parts: Vec<Var> = cfg.stages.iter().map(|&s| maps.stage(s)).collect();
    fuse_maps(cx, &parts, maps.stage(4))
}

/// [`fmr_fuse`] over arbitrary maps, equalized to the size of `target`.
pub fn fuse_maps(cx: &mut Ctx, parts: &[Var], target: Var) -> Result<Var> {
    let (h4, w4) = {
        let s = cx.tape.shape(target);
        (s[2], s[3])
    };
    let mut pooled = Vec::with_capacity(parts.len());
    for &m in parts {
        let (h, w) = {
            let s = cx.tape.shape(m);
            (s[2], s[3])
        };
        if h % h4 != 0 || w % w4 != 0 {
            return Err(Error::invalid(
                "fmr_fuse",
                format!("map {h}×{w} is not an integer multiple of {h4}×{w4}"),
            ));
        }
        let ratio = (h / h4, w / w4);
        pooled.push(if ratio == (1, 1) {
            m
        } else {
            cx.tape.pool2d(m, PoolKind::Max, ratio, ratio)?
        });
    }
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    cx.tape.concat_channels(&pooled)
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                (k, k),
                (stride, stride),
                (k / 2, k / 2),
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if relu { cx.tape.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    body: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let body = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(store, &format!("{name}.a"), c_in, c_out, 3, stride, rng),
                ConvBn::new(store, &format!("{name}.b"), c_out, c_out, 3, 1, rng),
            ],
            BlockKind::Bottleneck => {
                let mid = c_out / 4;
                vec![
                    ConvBn::new(store, &format!("{name}.a"), c_in, mid, 1, 1, rng),
                    ConvBn::new(store, &format!("{name}.b"), mid, mid, 3, stride, rng),
                    ConvBn::new(store, &format!("{name}.c"), mid, c_out, 1, 1, rng),
                ]
            }
        };
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvBn::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, rng));
        ResidualBlock { body, shortcut }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.body.len() - 1;
        for (i, layer) in self.body.iter().enumerate() {
            y = layer.forward(cx, y, i != last)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x, false)?,
            None => x,
        };
        let sum = cx.tape.add(y, skip)?;
        Ok(cx.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBn,
    stages: [Vec<ResidualBlock>; 4],
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBn::new(
            store,
            "backbone.stem",
            3,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            rng,
        );
        let mut c_in = cfg.stem_channels;
        let stages = std::array::from_fn(|s| {
            (0..cfg.blocks_per_stage[s])
                .map(|b| {
                    let stride = if b == 0 { cfg.stage_strides[s] } else { 1 };
                    let block = ResidualBlock::new(
                        store,
                        &format!("backbone.stage{}.block{b}", s + 1),
                        cfg.block,
                        c_in,
                        cfg.stage_channels[s],
                        stride,
                        rng,
                    );
                    c_in = cfg.stage_channels[s];
                    block
                })
                .collect()
        });
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x: N×3×H₀×W₀` to the four stage maps.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<StageMaps> {
        let [h, w] = self.cfg.input_hw;
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::invalid(
                "backbone",
                format!("input must be N×3×{h}×{w}, got {s:?}"),
            ));
        }
        let mut y = self.stem.forward(cx, x, true)?;
        if self.cfg.stem_pool > 1 {
            let p = self.cfg.stem_pool;
            y = cx.tape.pool2d(y, PoolKind::Max, (p, p), (p, p))?;
        }
        let mut maps = [y; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                y = block.forward(cx, y)?;
            }
            maps[s] = y;
        }
        Ok(StageMaps { maps })
    }
}
