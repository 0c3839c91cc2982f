//! Whole-model gradients, optimizer and training-loop contracts.

use reid_core::attention::{AttentionConfig, AttentionOrder, HybridAttention};
use reid_core::backbone::{BackboneConfig, FusionConfig, StageMaps};
use reid_core::data::{ImageSet, Normalization};
use reid_core::gradcheck::grad_check;
use reid_core::model::{ModelConfig, ReidModel};
use reid_core::nn::{Ctx, Mode, ParamKind, ParamStore};
use reid_core::training::{mini_loss_grad_check, total_loss, train_loop, Sgd, TrainConfig};
use reid_core::{Error, Rng, Tape, Tensor};

fn tiny_data(ids: usize, per_id: usize, seed: u64) -> ImageSet {
    let mut rng = Rng::new(seed);
    let mut set = ImageSet::default();
    for pid in 0..ids {
        for j in 0..per_id {
            set.push(
                Tensor::rand_uniform(&[3, 48, 32], 0.0, 1.0, &mut rng),
                pid as i64 * 10,
                (j % 2) as i64,
            );
        }
    }
    set
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        p: 2,
        k: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn hybrid_attention_gradients() {
    let b = BackboneConfig::mini();
    let fusion = FusionConfig::default();
    for order in [AttentionOrder::SCatC, AttentionOrder::CatCS, AttentionOrder::CSCat] {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let cfg = AttentionConfig {
            order,
            ..AttentionConfig::mini()
        };
        let att = HybridAttention::new(&cfg, &b, &fusion, &mut store, &mut rng).unwrap();
        let shapes = b.stage_shapes();
        let fixed: Vec<Tensor> = shapes
            .iter()
            .map(|&(c, h, w)| Tensor::randn(&[1, c, h, w], 1.0, &mut rng))
            .collect();
        let (c1, h1, w1) = shapes[0];
        let out_shape = [1, fusion.fused_channels(&b), shapes[3].1, shapes[3].2];
        let proj = Tensor::randn(&out_shape, 1.0, &mut rng);
        let point = Tensor::randn(&[1, c1, h1, w1], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let mut cx = Ctx::new(tape, &store, Mode::Eval, false);
                let others: Vec<_> = fixed[1..].iter().map(|t| cx.tape.constant(t.clone())).collect();
                let maps = StageMaps {
                    maps: [x, others[0], others[1], others[2]],
                };
                let (y, _) = att.forward(&mut cx, &maps)?;
                let p = cx.tape.constant(proj.clone());
                let yp = cx.tape.mul(y, p)?;
                Ok(cx.tape.sum(yp))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{order}: {err}");
    }
}

#[test]
fn full_loss_gradient_check() {
    let err = mini_loss_grad_check(0).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn every_branch_receives_gradient() {
    let model = ReidModel::new(&ModelConfig::mini(2), &mut Rng::new(1)).unwrap();
    let x = Tensor::randn(&[4, 3, 48, 32], 1.0, &mut Rng::new(2));
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.store, Mode::Train, true);
    let xv = cx.tape.constant(x);
    let out = model.forward(&mut cx, xv).unwrap();
    let t = total_loss(cx.tape, &out.branches, &[0, 0, 1, 1], &[0, 0, 1, 1], &tiny_train()).unwrap();
    let grads = cx.tape.backward(t.total).unwrap();
    assert_eq!(model.heads().len(), 21);
    for head in model.heads() {
        for id in head.param_ids() {
            if model.store.kind(id) == ParamKind::Buffer {
                continue;
            }
            let g = grads.get(cx.param(id)).expect("gradient reaches every head");
            assert!(g.norm() > 0.0, "{} has a zero gradient", model.store.name(id));
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = ReidModel::new(&ModelConfig::mini(2), &mut Rng::new(1)).unwrap();
    let before = model.store.clone();
    let x = Tensor::randn(&[4, 3, 48, 32], 1.0, &mut Rng::new(2));
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &before, Mode::Train, true);
    let xv = cx.tape.constant(x);
    let out = model.forward(&mut cx, xv).unwrap();
    let t = total_loss(cx.tape, &out.branches, &[0, 0, 1, 1], &[0, 0, 1, 1], &tiny_train()).unwrap();
    let grads = cx.tape.backward(t.total).unwrap();
    Sgd::new(0.9, 5e-4).step(&mut model.store, &cx.bound(), &grads, 0.0);
    for id in before.ids() {
        let same = before
            .get(id)
            .data()
            .iter()
            .zip(model.store.get(id).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} moved", before.name(id));
    }
}

#[test]
fn training_is_deterministic_and_uses_the_schedule() {
    let data = tiny_data(2, 2, 5);
    let run = |seed| {
        let (_, r) = train_loop(
            &ModelConfig::mini(1),
            &tiny_train(),
            &Normalization::default(),
            &data,
            seed,
            None,
        )
        .unwrap();
        r
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert_eq!(a.epochs[0].lr, 3e-5);
    assert_eq!(a.epochs[1].lr, 6e-5);
    assert_eq!(a.epochs[0].total.to_bits(), b.epochs[0].total.to_bits());
    assert_eq!(a.epochs[1].total.to_bits(), b.epochs[1].total.to_bits());
    assert_ne!(a.epochs[0].total, c.epochs[0].total);
    assert_eq!(a.classes, vec![0, 10]);
}

#[test]
fn non_finite_loss_aborts_with_replay_file() {
    let mut data = tiny_data(2, 2, 6);
    data.images[0].data_mut()[0] = f64::NAN;
    let mut cfg = tiny_train();
    cfg.erasing.probability = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let err = train_loop(
        &ModelConfig::mini(1),
        &cfg,
        &Normalization::default(),
        &data,
        0,
        Some(dir.path()),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
    let replay = std::fs::read_to_string(dir.path().join("nan_batch.txt")).unwrap();
    assert!(replay.contains("epoch=1") && replay.contains("indices="));
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let data = tiny_data(2, 2, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..tiny_train()
    };
    train_loop(
        &ModelConfig::mini(1),
        &cfg,
        &Normalization::default(),
        &data,
        1,
        Some(dir.path()),
    )
    .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,id_loss,tp_loss,total,wall_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,0.00003,"));
    for f in [
        "checkpoints/epoch_0001.ckpt",
        "checkpoints/epoch_0002.ckpt",
        "model.ckpt",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
