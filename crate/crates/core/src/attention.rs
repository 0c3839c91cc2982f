//! Spatial (SAM) and channel (CAM) attention, and their wiring around the
//! multi-stage fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{fuse_maps, BackboneConfig, FusionConfig, StageMaps};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamId, ParamStore, PoolKind};
use crate::rng::Rng;
use crate::tape::Var;

/// Spatial attention: channelwise avg and max maps → conv → sigmoid.
#[derive(Clone, Debug)]
pub struct Sam {
    pub conv: Conv2d,
}

impl Sam {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, rng: &mut Rng) -> Self {
        let pad = (kernel - 1) / 2;
        Sam {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                2,
                1,
                (kernel, kernel),
                (1, 1),
                (pad, pad),
                true,
                rng,
            ),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.conv.weight).chain(self.conv.bias).collect()
    }

    /// Returns the weighted map and the `N×1×H×W` attention map.
    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<(Var, Var)> {
        let avg = cx.tape.channel_pool(f, PoolKind::Avg)?;
        let max = cx.tape.channel_pool(f, PoolKind::Max)?;
        let stacked = cx.tape.concat_channels(&[avg, max])?;
        let logits = self.conv.forward(cx, stacked)?;
        let m = cx.tape.sigmoid(logits);
        let weighted = cx.tape.gate_spatial(f, m)?;
        Ok((weighted, m))
    }
}

/// Channel attention: one MLP shared by the avg- and max-pooled vectors.
#[derive(Clone, Debug)]
pub struct Cam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl Cam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "attention: reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Cam {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
            channels,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    fn mlp(&self, cx: &mut Ctx, v: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, v)?;
        let h = cx.tape.relu(h);
        self.fc2.forward(cx, h)
    }

    /// Returns the weighted map and the `N×C` attention vector.
    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<(Var, Var)> {
        let avg = cx.tape.global_pool(f, PoolKind::Avg)?;
        let max = cx.tape.global_pool(f, PoolKind::Max)?;
        let a = self.mlp(cx, avg)?;
        let b = self.mlp(cx, max)?;
        let s = cx.tape.add(a, b)?;
        let m = cx.tape.sigmoid(s);
        let weighted = cx.tape.gate_channel(f, m)?;
        Ok((weighted, m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Spatial,
    Channel,
}

/// Placement of SAM (S), CAM (C) and the stage concatenation (©).
/// Operations left of © run on every included stage; those right of it
/// run once on the fused map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    /// S+©+C
    #[default]
    SCatC,
    /// S+C+©
    SCCat,
    /// ©+S+C
    CatSC,
    /// C+©+S
    CCatS,
    /// C+S+©
    CSCat,
    /// ©+C+S
    CatCS,
}

impl AttentionOrder {
    pub const ALL: [AttentionOrder; 6] = [
        AttentionOrder::SCatC,
        AttentionOrder::SCCat,
        AttentionOrder::CatSC,
        AttentionOrder::CCatS,
        AttentionOrder::CSCat,
        AttentionOrder::CatCS,
    ];

    /// `(per-stage ops, post-fusion ops)`, each in application order.
    pub fn split(self) -> (&'static [AttnKind], &'static [AttnKind]) {
        use AttnKind::*;
        match self {
            AttentionOrder::SCatC => (&[Spatial], &[Channel]),
            AttentionOrder::SCCat => (&[Spatial, Channel], &[]),
            AttentionOrder::CatSC => (&[], &[Spatial, Channel]),
            AttentionOrder::CCatS => (&[Channel], &[Spatial]),
            AttentionOrder::CSCat => (&[Channel, Spatial], &[]),
            AttentionOrder::CatCS => (&[], &[Channel, Spatial]),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionOrder::SCatC => "s_cat_c",
            AttentionOrder::SCCat => "s_c_cat",
            AttentionOrder::CatSC => "cat_s_c",
            AttentionOrder::CCatS => "c_cat_s",
            AttentionOrder::CSCat => "c_s_cat",
            AttentionOrder::CatCS => "cat_c_s",
        }
    }
}

impl fmt::Display for AttentionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttentionOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention order {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub order: AttentionOrder,
    pub sam_kernel: usize,
    pub cam_reduction: usize,
}

impl AttentionConfig {
    pub fn reference() -> Self {
        AttentionConfig {
            order: AttentionOrder::SCatC,
            sam_kernel: 7,
            cam_reduction: 16,
        }
    }

    pub fn mini() -> Self {
        AttentionConfig {
            cam_reduction: 4,
            ..Self::reference()
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig, fusion: &FusionConfig) -> Result<()> {
        if self.sam_kernel == 0 || self.sam_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention: SAM kernel must be odd, got {}",
                self.sam_kernel
            )));
        }
        let (pre, post) = self.order.split();
        let r = self.cam_reduction;
        let mut widths = Vec::new();
        if pre.contains(&AttnKind::Channel) {
            widths.extend(fusion.stages.iter().map(|&s| backbone.stage_channels[s - 1]));
        }
        if post.contains(&AttnKind::Channel) {
            widths.push(fusion.fused_channels(backbone));
        }
        for c in widths {
            if r == 0 || c % r != 0 {
                return Err(Error::Config(format!(
                    "attention: reduction {r} does not divide {c} channels"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Unit {
    Spatial(Sam),
    Channel(Cam),
}

impl Unit {
    fn forward(&self, cx: &mut Ctx, f: Var) -> Result<(Var, Var)> {
        match self {
            Unit::Spatial(s) => s.forward(cx, f),
            Unit::Channel(c) => c.forward(cx, f),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Unit::Spatial(s) => s.param_ids(),
            Unit::Channel(c) => c.param_ids(),
        }
    }
}

/// One recorded attention map: where it was applied and its values
/// (`N×1×H×W` for SAM, `N×C` for CAM).
#[derive(Clone, Debug)]
pub struct AttentionMap {
    /// 1-based stage, or `None` for the fused map.
    pub stage: Option<usize>,
    pub kind: AttnKind,
    pub map: Var,
}

impl AttentionMap {
    pub fn label(&self) -> String {
        let kind = match self.kind {
            AttnKind::Spatial => "sam",
            AttnKind::Channel => "cam",
        };
        match self.stage {
            Some(s) => format!("{kind}_stage{s}"),
            None => format!("{kind}_fused"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HybridAttention {
    cfg: AttentionConfig,
    fusion: FusionConfig,
    /// Per included stage, in stage order.
    stage_units: Vec<Vec<Unit>>,
    fused_units: Vec<Unit>,
}

impl HybridAttention {
    pub fn new(
        cfg: &AttentionConfig,
        backbone: &BackboneConfig,
        fusion: &FusionConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        fusion.validate(backbone)?;
        cfg.validate(backbone, fusion)?;
        let (pre, post) = cfg.order.split();
        let mut make = |kind: AttnKind, name: String, channels: usize, rng: &mut Rng| -> Result<Unit> {
            Ok(match kind {
                AttnKind::Spatial => Unit::Spatial(Sam::new(store, &format!("{name}.sam"), cfg.sam_kernel, rng)),
                AttnKind::Channel => Unit::Channel(Cam::new(
                    store,
                    &format!("{name}.cam"),
                    channels,
                    cfg.cam_reduction,
                    rng,
                )?),
            })
        };
        let mut stage_units = Vec::new();
        for &s in &fusion.stages {
            let c = backbone.stage_channels[s - 1];
            let units = pre
                .iter()
                .map(|&k| make(k, format!("attention.stage{s}"), c, rng))
                .collect::<Result<Vec<_>>>()?;
            stage_units.push(units);
        }
        let fused_c = fusion.fused_channels(backbone);
        let fused_units = post
            .iter()
            .map(|&k| make(k, "attention.fused".into(), fused_c, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(HybridAttention {
            cfg: cfg.clone(),
            fusion: fusion.clone(),
            stage_units,
            fused_units,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stage_units
            .iter()
            .flatten()
            .chain(&self.fused_units)
            .flat_map(Unit::param_ids)
            .collect()
    }

    /// Attention around the fusion; returns the fused, weighted map and
    /// every attention map applied on the way.
    pub fn forward(&self, cx: &mut Ctx, maps: &StageMaps) -> Result<(Var, Vec<AttentionMap>)> {
        let (pre, post) = self.cfg.order.split();
        let mut record = Vec::new();
        let mut parts = Vec::with_capacity(self.fusion.stages.len());
        for (&s, units) in self.fusion.stages.iter().zip(&self.stage_units) {
            let mut f = maps.stage(s);
            for (unit, &kind) in units.iter().zip(pre) {
                let (w, m) = unit.forward(cx, f)?;
                record.push(AttentionMap {
                    stage: Some(s),
                    kind,
                    map: m,
                });
                f = w;
            }
            parts.push(f);
        }
        let mut fused = fuse_maps(cx, &parts, maps.stage(4))?;
        for (unit, &kind) in self.fused_units.iter().zip(post) {
            let (w, m) = unit.forward(cx, fused)?;
            record.push(AttentionMap {
                stage: None,
                kind,
                map: m,
            });
            fused = w;
        }
        Ok((fused, record))
    }
}
