use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{ImageSet, Normalization};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::io::{checkpoint, write_file};
use crate::model::{ModelConfig, ReidModel};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{pk_sample, random_erase, total_loss, warmup_lr, Sgd, TrainConfig};

const INIT_STREAM: u64 = 10;
const SAMPLER_STREAM: u64 = 11;
const ERASE_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub id_loss: f64,
    pub tp_loss: f64,
    pub total: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Training identity for each classifier output.
    pub classes: Vec<i64>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,id_loss,tp_loss,total,wall_ms\n");
        for m in &self.epochs {
            writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{}",
                m.epoch, m.lr, m.id_loss, m.tp_loss, m.total, m.wall_ms
            )
            .unwrap();
        }
        s
    }
}

/// Normalized batch for `indices`, with random erasing keyed by
/// `(epoch, batch, slot)`.
fn assemble(
    data: &ImageSet,
    indices: &[usize],
    cfg: &TrainConfig,
    norm: &Normalization,
    seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<Tensor> {
    let mut imgs = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let mut rng = Rng::keyed(seed, &[ERASE_STREAM, epoch as u64, batch as u64, slot as u64]);
        let (erased, _) = random_erase(&data.images[i], &cfg.erasing, &mut rng)?;
        imgs.push(norm.apply(&erased)?);
    }
    let refs: Vec<&Tensor> = imgs.iter().collect();
    Tensor::stack(&refs)
}

/// Builds a model for `data`'s identities and trains it. With `out_dir`,
/// writes `metrics.csv` every epoch, periodic checkpoints under
/// `checkpoints/`, and `model.ckpt` at the end.
pub fn train_loop(
    run: &ModelConfig,
    cfg: &TrainConfig,
    norm: &Normalization,
    data: &ImageSet,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(ReidModel, TrainReport)> {
    cfg.validate()?;
    let classes: Vec<i64> = data
        .pids
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_of: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let model_cfg = ModelConfig {
        num_ids: classes.len(),
        ..run.clone()
    };
    let mut model = ReidModel::new(&model_cfg, &mut Rng::keyed(seed, &[INIT_STREAM]))?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let batches = (data.len() / cfg.batch_size()).max(1);
    let mut report = TrainReport {
        epochs: Vec::new(),
        classes: classes.clone(),
    };
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = warmup_lr(epoch)?;
        let (mut id_sum, mut tp_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for b in 0..batches {
            let mut rng = Rng::keyed(seed, &[SAMPLER_STREAM, epoch as u64, b as u64]);
            let pk = pk_sample(&data.pids, cfg.p, cfg.k, &mut rng)?;
            let x = assemble(data, &pk.indices, cfg, norm, seed, epoch, b)?;
            let cls: Vec<usize> = pk.pids.iter().map(|p| class_of[p]).collect();
            let snapshot = model.store.clone();
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &snapshot, Mode::Train, true);
            let xv = cx.tape.constant(x);
            let out = model.forward(&mut cx, xv)?;
            let terms = total_loss(cx.tape, &out.branches, &cls, &pk.pids, cfg)?;
            let total = cx.tape.value(terms.total).item();
            if !total.is_finite() {
                if let Some(dir) = out_dir {
                    let msg = format!("seed={seed}\nepoch={epoch}\nbatch={b}\nindices={:?}\n", pk.indices);
                    write_file(&dir.join("nan_batch.txt"), msg.as_bytes())?;
                }
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            id_sum += cx.tape.value(terms.id).item();
            tp_sum += cx.tape.value(terms.triplet).item();
            total_sum += total;
            let grads = cx.tape.backward(terms.total)?;
            let bound = cx.bound();
            let updates = std::mem::take(&mut cx.bn_updates);
            sgd.step(&mut model.store, &bound, &grads, lr);
            model.store.apply_bn_updates(&updates);
        }
        let nb = batches as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            lr,
            id_loss: id_sum / nb,
            tp_loss: tp_sum / nb,
            total: total_sum / nb,
            wall_ms: start.elapsed().as_millis(),
        });
        log::info!("epoch {epoch} lr={lr} id={:.4} tp={:.4}", id_sum / nb, tp_sum / nb);
        if let Some(dir) = out_dir {
            write_file(&dir.join("metrics.csv"), report.metrics_csv().as_bytes())?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("checkpoints/epoch_{epoch:04}.ckpt")), &model)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("model.ckpt"), &model)?;
    }
    Ok((model, report))
}

/// Central-difference check of the full training loss (train-mode batch
/// norm, ε-smoothed ID terms, triplet terms) on `x` with labels `pids`.
/// Samples `per_tensor` coordinates of every trainable tensor plus
/// `input_coords` input pixels; returns the largest relative error.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad_check(
    model: &ReidModel,
    cfg: &TrainConfig,
    x: &Tensor,
    pids: &[i64],
    per_tensor: usize,
    input_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let classes: BTreeMap<i64, usize> = pids
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, i))
        .collect();
    let cls: Vec<usize> = pids.iter().map(|p| classes[p]).collect();
    let loss_at = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, Mode::Train, false);
        let xv = cx.tape.constant(x.clone());
        let out = model.forward(&mut cx, xv)?;
        let t = total_loss(cx.tape, &out.branches, &cls, pids, cfg)?;
        Ok(cx.tape.value(t.total).item())
    };

    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.store, Mode::Train, true);
    let xv = cx.tape.leaf(x.clone());
    let out = model.forward(&mut cx, xv)?;
    let t = total_loss(cx.tape, &out.branches, &cls, pids, cfg)?;
    let grads = cx.tape.backward(t.total)?;
    let bound = cx.bound();

    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut store = model.store.clone();
    for (id, var) in bound {
        let n = store.get(id).len();
        let g = grads.get(var);
        for _ in 0..per_tensor.min(n) {
            let i = rng.below(n);
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_at(&store, x)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_at(&store, x)?;
            store.get_mut(id).data_mut()[i] = orig;
            let analytic = g.map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
        }
    }
    let gx = grads.get(xv);
    let mut xp = x.clone();
    for _ in 0..input_coords {
        let i = rng.below(x.len());
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let up = loss_at(&model.store, &xp)?;
        xp.data_mut()[i] = orig - eps;
        let down = loss_at(&model.store, &xp)?;
        xp.data_mut()[i] = orig;
        let analytic = gx.map_or(0.0, |g| g.data()[i]);
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// `(plain, smoothed)` cross-entropy of the classifier on `x` in eval
/// mode, averaged over branches. `classes[i]` is the classifier index of
/// image `i`.
pub fn id_cross_entropy(model: &ReidModel, x: &Tensor, classes: &[usize], eps: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.store, Mode::Eval, false);
    let xv = cx.tape.constant(x.clone());
    let out = model.forward(&mut cx, xv)?;
    let (mut plain, mut smooth) = (0.0, 0.0);
    for b in &out.branches {
        let p = crate::training::id_loss(cx.tape, b.logits, classes, 0.0)?;
        let s = crate::training::id_loss(cx.tape, b.logits, classes, eps)?;
        plain += cx.tape.value(p).item();
        smooth += cx.tape.value(s).item();
    }
    let n = out.branches.len() as f64;
    Ok((plain / n, smooth / n))
}

/// [`loss_grad_check`] on a freshly initialised mini model with a
/// 2-identity × 2-image random microbatch.
pub fn mini_loss_grad_check(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::mini(2);
    let model = ReidModel::new(&cfg, &mut Rng::keyed(seed, &[INIT_STREAM]))?;
    let [h, w] = cfg.backbone.input_hw;
    let x = Tensor::randn(&[4, 3, h, w], 1.0, &mut Rng::keyed(seed, &[ERASE_STREAM]));
    let train = TrainConfig {
        p: 2,
        k: 2,
        ..TrainConfig::default()
    };
    loss_grad_check(&model, &train, &x, &[0, 0, 1, 1], 2, 16, 1e-5, seed)
}
