use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::backbone::{BackboneConfig, FusionConfig};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::heads::{MgoConfig, MpfeConfig};
use crate::io::read_file;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_rank: usize,
    /// Images per forward pass when embedding.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_rank: 10,
            batch: 32,
        }
    }
}

/// Everything a run needs. The identity count is taken from the training
/// split at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub attention: AttentionConfig,
    pub mgo: MgoConfig,
    pub mpfe: MpfeConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub normalization: Normalization,
}

impl RunConfig {
    pub fn mini() -> Self {
        let m = ModelConfig::mini(1);
        RunConfig {
            seed: 0,
            output_dir: "runs/mini".into(),
            backbone: m.backbone,
            fusion: m.fusion,
            attention: m.attention,
            mgo: m.mgo,
            mpfe: m.mpfe,
            training: TrainConfig {
                epochs: 200,
                p: 8,
                k: 4,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            normalization: Normalization::default(),
        }
    }

    pub fn reference() -> Self {
        let m = ModelConfig::reference(1);
        RunConfig {
            seed: 0,
            output_dir: "runs/reference".into(),
            backbone: m.backbone,
            fusion: m.fusion,
            attention: m.attention,
            mgo: m.mgo,
            mpfe: m.mpfe,
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
            normalization: Normalization::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mini" => Ok(Self::mini()),
            "reference" => Ok(Self::reference()),
            other => Err(Error::Config(format!("unknown preset {other:?} (mini, reference)"))),
        }
    }

    pub fn model_config(&self, num_ids: usize) -> ModelConfig {
        ModelConfig {
            num_ids,
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
            attention: self.attention.clone(),
            mgo: self.mgo.clone(),
            mpfe: self.mpfe.clone(),
        }
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        self.training.validate()?;
        self.normalization.validate()?;
        if self.eval.max_rank == 0 || self.eval.batch == 0 {
            return Err(Error::Config("eval: max_rank and batch must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
