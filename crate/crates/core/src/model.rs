//! The full network: backbone, attention-wrapped fusion, stripe branches
//! and their feature extractors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionMap, HybridAttention};
use crate::backbone::{Backbone, BackboneConfig, FusionConfig};
use crate::error::{Error, Result};
use crate::heads::{descriptor_extract, mgo_partition, BranchOutput, BranchSpec, MgoConfig, Mpfe, MpfeConfig};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_ids: usize,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub attention: AttentionConfig,
    pub mgo: MgoConfig,
    pub mpfe: MpfeConfig,
}

impl ModelConfig {
    pub fn reference(num_ids: usize) -> Self {
        ModelConfig {
            num_ids,
            backbone: BackboneConfig::reference(),
            fusion: FusionConfig::default(),
            attention: AttentionConfig::reference(),
            mgo: MgoConfig::default(),
            mpfe: MpfeConfig::reference(),
        }
    }

    pub fn mini(num_ids: usize) -> Self {
        ModelConfig {
            num_ids,
            backbone: BackboneConfig::mini(),
            fusion: FusionConfig::default(),
            attention: AttentionConfig::mini(),
            mgo: MgoConfig::default(),
            mpfe: MpfeConfig::mini(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(&self.backbone)?;
        self.attention.validate(&self.backbone, &self.fusion)?;
        self.mgo.validate(self.backbone.stage_shapes()[3].1)?;
        if self.num_ids == 0 {
            return Err(Error::Config("model: num_ids must be positive".into()));
        }
        if self.mpfe.c_red == 0 || self.mpfe.feat_dim == 0 {
            return Err(Error::Config("mpfe: widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Stable fingerprint of the architecture.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn num_branches(&self) -> usize {
        self.mgo.levels().iter().sum()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.num_branches() * self.mpfe.feat_dim
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub fused: Var,
    pub attention: Vec<AttentionMap>,
    pub branches: Vec<BranchOutput>,
}

#[derive(Clone, Debug)]
pub struct ReidModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    attention: HybridAttention,
    specs: Vec<BranchSpec>,
    heads: Vec<Mpfe>,
}

impl ReidModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, rng)?;
        let attention = HybridAttention::new(&cfg.attention, &cfg.backbone, &cfg.fusion, &mut store, rng)?;
        let (_, h4, _) = cfg.backbone.stage_shapes()[3];
        let specs = cfg.mgo.branches(h4)?;
        let channels = cfg.fusion.fused_channels(&cfg.backbone);
        let heads = specs
            .iter()
            .map(|s| {
                Mpfe::new(
                    &mut store,
                    &format!("head.{}", s.label()),
                    channels,
                    &cfg.mpfe,
                    cfg.num_ids,
                    rng,
                )
            })
            .collect();
        Ok(ReidModel {
            cfg: cfg.clone(),
            store,
            backbone,
            attention,
            specs,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn branch_specs(&self) -> &[BranchSpec] {
        &self.specs
    }

    pub fn heads(&self) -> &[Mpfe] {
        &self.heads
    }

    pub fn attention(&self) -> &HybridAttention {
        &self.attention
    }

    /// `x: N×3×H₀×W₀`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<ModelOutput> {
        let maps = self.backbone.forward(cx, x)?;
        let (fused, attention) = self.attention.forward(cx, &maps)?;
        let parts = mgo_partition(cx, fused, &self.cfg.mgo)?;
        let branches = parts
            .iter()
            .zip(&self.heads)
            .map(|((_, part), head)| head.forward(cx, *part))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            fused,
            attention,
            branches,
        })
    }

    /// Retrieval descriptors in eval mode, `N×(B·feat_dim)`, computed in
    /// chunks of `chunk` images.
    pub fn embed(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut rows = Vec::new();
        let mut lo = 0;
        while lo < n {
            let hi = (lo + chunk.max(1)).min(n);
            let x = images.slice_axis(0, lo, hi)?;
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
            let xv = cx.tape.constant(x);
            let out = self.forward(&mut cx, xv)?;
            let feats: Vec<&Tensor> = out.branches.iter().map(|b| cx.tape.value(b.f_id)).collect();
            rows.push(descriptor_extract(&feats)?);
            lo = hi;
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Eval-mode attention maps for a batch, labelled by placement.
    pub fn attention_maps(&self, images: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
        let xv = cx.tape.constant(images.clone());
        let maps = self.backbone.forward(&mut cx, xv)?;
        let (_, record) = self.attention.forward(&mut cx, &maps)?;
        Ok(record
            .iter()
            .map(|m| (m.label(), cx.tape.value(m.map).clone()))
            .collect())
    }
}
