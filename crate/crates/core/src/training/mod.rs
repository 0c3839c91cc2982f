//! Losses, schedule, augmentation, sampling, optimizer and the loop that
//! ties them together.

mod augment;
mod run;
mod sampler;
mod sgd;

pub use augment::{random_erase, ErasingConfig, Rect};
pub use run::{id_cross_entropy, loss_grad_check, mini_loss_grad_check, train_loop, EpochMetrics, TrainReport};
pub use sampler::{pk_sample, PkBatch};
pub use sgd::Sgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BranchOutput;
use crate::tape::{Distance, Tape, TripletStats, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletDistance {
    Euclidean,
    Squared,
}

impl From<TripletDistance> for Distance {
    fn from(d: TripletDistance) -> Self {
        match d {
            TripletDistance::Euclidean => Distance::Euclidean,
            TripletDistance::Squared => Distance::SquaredEuclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: TripletDistance,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 1.0,
            distance: TripletDistance::Euclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub label_smoothing: f64,
    pub triplet: TripletConfig,
    pub erasing: ErasingConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            p: 16,
            k: 4,
            label_smoothing: 0.1,
            triplet: TripletConfig::default(),
            erasing: ErasingConfig::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.p < 2 || self.k < 2 {
            return bad(format!(
                "batch-hard mining needs p ≥ 2 and k ≥ 2, got p={} k={}",
                self.p, self.k
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if self.triplet.margin.is_nan() || self.triplet.margin < 0.0 {
            return bad(format!("triplet margin must be ≥ 0, got {}", self.triplet.margin));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay ≥ 0".into());
        }
        self.erasing.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Learning rate for 1-based epoch `e`: linear warm-up to 3e-4 over ten
/// epochs, then 0.01 halved at epochs 61, 91 and 121; held at 0.00125 from
/// epoch 121 on, including past 150.
pub fn warmup_lr(e: usize) -> Result<f64> {
    Ok(match e {
        0 => return Err(Error::invalid("warmup_lr", "epochs are 1-based")),
        1..=10 => (3 * e) as f64 / 1e5,
        11..=60 => 0.01,
        61..=90 => 0.005,
        91..=120 => 0.0025,
        _ => 0.00125,
    })
}

/// Smoothed targets: `1 − ε + ε/K` on the true class, `ε/K` elsewhere.
pub fn smoothed_targets(classes: &[usize], num_classes: usize, eps: f64) -> Result<Tensor> {
    let off = eps / num_classes as f64;
    let mut t = vec![off; classes.len() * num_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::invalid(
                "id_loss",
                format!("class {c} out of range 0..{num_classes}"),
            ));
        }
        t[i * num_classes + c] = 1.0 - eps + off;
    }
    Tensor::new(&[classes.len(), num_classes], t)
}

/// Label-smoothed softmax cross-entropy, averaged over the batch.
pub fn id_loss(tape: &mut Tape, logits: Var, classes: &[usize], eps: f64) -> Result<Var> {
    let k = tape.shape(logits)[1];
    let targets = smoothed_targets(classes, k, eps)?;
    tape.softmax_cross_entropy(logits, &targets)
}

pub fn triplet_loss(tape: &mut Tape, features: Var, pids: &[i64], cfg: &TripletConfig) -> Result<(Var, TripletStats)> {
    tape.batch_hard_triplet(features, pids, cfg.margin, cfg.distance.into())
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub id: Var,
    pub triplet: Var,
    pub triplet_stats: TripletStats,
}

/// Mean ID loss over branches plus mean triplet loss over branches. ID
/// terms use the logits, triplet terms the pre-BN features.
pub fn total_loss(
    tape: &mut Tape,
    branches: &[BranchOutput],
    classes: &[usize],
    pids: &[i64],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let mut ids = Vec::with_capacity(branches.len());
    let mut tps = Vec::with_capacity(branches.len());
    let mut stats = TripletStats::default();
    for b in branches {
        ids.push(id_loss(tape, b.logits, classes, cfg.label_smoothing)?);
        let (t, s) = triplet_loss(tape, b.f_tri, pids, &cfg.triplet)?;
        stats.anchors += s.anchors;
        stats.skipped += s.skipped;
        stats.active += s.active;
        tps.push(t);
    }
    let id = tape.mean_of(&ids)?;
    let triplet = tape.mean_of(&tps)?;
    let total = tape.add(id, triplet)?;
    Ok(LossTerms {
        total,
        id,
        triplet,
        triplet_stats: stats,
    })
}
