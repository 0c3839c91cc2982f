//! Acceptance criteria, one PASS/FAIL line each. Positional numbers select
//! a subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use reid_core::attention::{AttentionConfig, AttentionOrder, HybridAttention};
use reid_core::backbone::{fmr_fuse, Backbone, BackboneConfig, FusionConfig};
use reid_core::data::ImageSet;
use reid_core::eval::{evaluate, EmbeddingSet};
use reid_core::gradcheck::primitive_suite;
use reid_core::heads::MgoConfig;
use reid_core::io::config::RunConfig;
use reid_core::io::manifest::Split;
use reid_core::io::synth::{synth_generate, SynthConfig};
use reid_core::model::ReidModel;
use reid_core::nn::{functional, Ctx, Mode, ParamStore, PoolKind};
use reid_core::pipeline::evaluate_manifest;
use reid_core::training::{id_cross_entropy, mini_loss_grad_check, train_loop, triplet_loss, warmup_lr, TripletConfig};
use reid_core::{oracle, Rng, Tape, Tensor};

type BoxResult<T> = Result<T, Box<dyn std::error::Error>>;
type Outcome = BoxResult<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn gradients() -> Outcome {
    let start = Instant::now();
    let worst_primitive = primitive_suite(0, 1e-6)?
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let model = mini_loss_grad_check(0)?;
    let took = start.elapsed();
    let pass = worst_primitive < 1e-4 && model < 1e-3 && took < Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "primitives {worst_primitive:.2e}, model {model:.2e}, {:.1}s",
            took.as_secs_f64()
        ),
    ))
}

fn lr_table() -> Outcome {
    let mut bad = Vec::new();
    for e in 1..=150usize {
        let want: f64 = match e {
            1..=10 => format!("{}e-5", 3 * e).parse()?,
            11..=60 => 0.01,
            61..=90 => 0.005,
            91..=120 => 0.0025,
            _ => 0.00125,
        };
        if warmup_lr(e)? != want {
            bad.push(e);
        }
    }
    let spot = [(5, 1.5e-4), (10, 3e-4), (61, 0.005), (121, 0.00125)];
    let spot_ok = spot.iter().all(|&(e, v)| warmup_lr(e).ok() == Some(v));
    Ok((bad.is_empty() && spot_ok, format!("150 epochs, mismatches {bad:?}")))
}

fn geometry() -> Outcome {
    let branches = MgoConfig::default().branches(24)?;
    let rows: Vec<(usize, usize)> = branches
        .iter()
        .filter(|b| b.part == 2)
        .map(|b| (b.row_lo, b.row_hi))
        .collect();
    let mut ok = branches.len() == 21 && rows == [(0, 20), (4, 24)];
    let mini = BackboneConfig::mini();
    for f in FusionConfig::ablation_subsets() {
        ok &= f.fused_channels(&mini) == f.stages.iter().map(|&s| mini.stage_channels[s - 1]).sum::<usize>();
    }
    let cfg = BackboneConfig::reference();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let bb = Backbone::new(&cfg, &mut store, &mut rng)?;
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
    let x = cx.tape.constant(Tensor::randn(&[1, 3, 384, 128], 1.0, &mut rng));
    let maps = bb.forward(&mut cx, x)?;
    let stage4 = cx.tape.shape(maps.stage(4)).to_vec();
    let fused = fmr_fuse(&mut cx, &maps, &FusionConfig::default())?;
    let fused = cx.tape.shape(fused).to_vec();
    ok &= stage4 == [1, 2048, 24, 8] && fused == [1, 3840, 24, 8];
    Ok((
        ok,
        format!(
            "{} branches, part 2 rows {rows:?}, stage 4 {stage4:?}, fused {fused:?}",
            branches.len()
        ),
    ))
}

fn oracles() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst_kernel = 0.0f64;
    let mut worst_triplet = 0.0f64;
    let mut ranking_mismatches = 0;
    for _ in 0..50 {
        let (n, c, o) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let (h, w, k) = (3 + rng.below(5), 3 + rng.below(5), 1 + rng.below(3));
        let (s, p) = (1 + rng.below(2), rng.below(2));
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[o, c, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[o], 1.0, &mut rng);
        let got = functional::conv2d(&x, &wt, Some(&b), (s, s), (p, p))?;
        worst_kernel = worst_kernel.max(got.max_abs_diff(&oracle::conv2d(&x, &wt, &b, (s, s), (p, p))));
        let img = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        for (kind, max) in [(PoolKind::Max, true), (PoolKind::Avg, false)] {
            let got = functional::pool2d(&img, kind, (k, k), (s, s))?;
            worst_kernel = worst_kernel.max(got.max_abs_diff(&oracle::pool2d(&img, max, (k, k), (s, s))));
        }
        let lx = Tensor::randn(&[n + 2, h], 1.0, &mut rng);
        let lw = Tensor::randn(&[w, h], 1.0, &mut rng);
        let lb = Tensor::randn(&[w], 1.0, &mut rng);
        worst_kernel =
            worst_kernel.max(functional::linear(&lx, &lw, Some(&lb))?.max_abs_diff(&oracle::linear(&lx, &lw, &lb)));

        let batch = 2 + rng.below(7);
        let f = Tensor::randn(&[batch, 4], 1.0, &mut rng);
        let pids: Vec<i64> = (0..batch).map(|_| rng.below(3) as i64).collect();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let (l, _) = triplet_loss(&mut tape, fv, &pids, &TripletConfig::default())?;
        worst_triplet =
            worst_triplet.max((tape.value(l).item() - oracle::batch_hard_triplet(&f, &pids, 1.0, false)).abs());

        let set = |rng: &mut Rng, n: usize, junk: bool| {
            let desc = Tensor::from_fn(&[n, 3], |_| rng.below(3) as f64);
            let pids = (0..n)
                .map(|_| {
                    if junk && rng.below(6) == 0 {
                        -1
                    } else {
                        rng.below(4) as i64
                    }
                })
                .collect();
            let cams = (0..n).map(|_| rng.below(2) as i64).collect();
            EmbeddingSet::new(desc, pids, cams, (0..n).map(|i| i.to_string()).collect())
        };
        let (nq, ng) = (1 + rng.below(20), 1 + rng.below(20));
        let q = set(&mut rng, nq, false)?;
        let g = set(&mut rng, ng, true)?;
        let agree = match (evaluate(&q, &g, 10), oracle::ranking(&q, &g, 10)) {
            (Ok(r), Some(o)) => r.cmc == o.cmc && r.map == o.map && r.num_valid == o.valid,
            (Err(_), None) => true,
            _ => false,
        };
        ranking_mismatches += usize::from(!agree);
    }
    let q = EmbeddingSet::new(Tensor::new(&[1, 1], vec![0.0])?, vec![1], vec![0], vec!["q".into()])?;
    let g = EmbeddingSet::new(
        Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0])?,
        vec![1, 2, 1, 3],
        vec![1; 4],
        (0..4).map(|i| i.to_string()).collect(),
    )?;
    let ap = evaluate(&q, &g, 4)?.map;
    let pass = worst_kernel < 1e-12 && worst_triplet < 1e-12 && ranking_mismatches == 0 && (ap - 0.8333).abs() < 5e-5;
    Ok((
        pass,
        format!("kernels {worst_kernel:.1e}, triplet {worst_triplet:.1e}, ranking mismatches {ranking_mismatches}/50, hand AP {ap:.4}"),
    ))
}

fn attention_bounds() -> Outcome {
    let backbone = BackboneConfig::mini();
    let mut worst_scale = 0.0f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for order in AttentionOrder::ALL {
        for fusion in FusionConfig::ablation_subsets() {
            let cfg = AttentionConfig {
                order,
                ..AttentionConfig::mini()
            };
            let mut store = ParamStore::new();
            let mut rng = Rng::new(5);
            let bb = Backbone::new(&backbone, &mut store, &mut rng)?;
            let att = HybridAttention::new(&cfg, &backbone, &fusion, &mut store, &mut rng)?;
            let x = Tensor::randn(&[2, 3, 48, 32], 1.0, &mut rng);
            for zero in [false, true] {
                if zero {
                    for id in att.param_ids() {
                        store.get_mut(id).data_mut().fill(0.0);
                    }
                }
                let mut tape = Tape::new();
                let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
                let xv = cx.tape.constant(x.clone());
                let maps = bb.forward(&mut cx, xv)?;
                let plain = fmr_fuse(&mut cx, &maps, &fusion)?;
                let (out, attn) = att.forward(&mut cx, &maps)?;
                for a in &attn {
                    for &v in cx.tape.value(a.map).data() {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if zero {
                    let scaled = cx.tape.value(plain).map(|v| 0.25 * v);
                    worst_scale = worst_scale.max(cx.tape.value(out).max_abs_diff(&scaled));
                }
            }
        }
    }
    let pass = lo > 0.0 && hi < 1.0 && worst_scale == 0.0;
    Ok((
        pass,
        format!(
            "maps in [{lo:.3e}, 1 - {:.3e}], zero-weight deviation from 0.25x {worst_scale:.1e}",
            1.0 - hi
        ),
    ))
}

fn embedding_set(
    model: &ReidModel,
    data: &ImageSet,
    idx: &[usize],
    run: &RunConfig,
) -> reid_core::Result<EmbeddingSet> {
    let sub = data.subset(idx);
    let desc = model.embed(&sub.normalized_batch(&run.normalization)?, run.eval.batch)?;
    EmbeddingSet::new(desc, sub.pids, sub.camids, idx.iter().map(|i| i.to_string()).collect())
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir()?;
    let synth = SynthConfig {
        train_ids: Some(8),
        ..SynthConfig::new(8, 4, 2, [48, 32], 1)
    };
    let manifest = synth_generate(&synth, dir.path())?;
    let mut run = RunConfig::mini();
    run.training.epochs = 200;
    let data = manifest.load_images(Split::Train, run.backbone.input_hw)?;
    let start = Instant::now();
    let (model, report) = train_loop(&run.model_config(1), &run.training, &run.normalization, &data, 0, None)?;
    let took = start.elapsed();
    let classes: Vec<usize> = data
        .pids
        .iter()
        .map(|p| report.classes.iter().position(|c| c == p).expect("trained class"))
        .collect();
    let (plain, smoothed) = id_cross_entropy(
        &model,
        &data.normalized_batch(&run.normalization)?,
        &classes,
        run.training.label_smoothing,
    )?;
    let q: Vec<usize> = (0..data.len()).filter(|&i| data.camids[i] == 0).collect();
    let g: Vec<usize> = (0..data.len()).filter(|&i| data.camids[i] != 0).collect();
    let r = evaluate(
        &embedding_set(&model, &data, &q, &run)?,
        &embedding_set(&model, &data, &g, &run)?,
        10,
    )?;
    let last = report.epochs.last().expect("trained");
    let pass = plain < 0.3 && r.rank(1) == 1.0 && took < Duration::from_secs(600);
    Ok((
        pass,
        format!(
            "ID cross-entropy {plain:.4} (smoothed {smoothed:.4}, last epoch {:.4}), rank-1 {:.4}, {:.0}s",
            last.id_loss,
            r.rank(1),
            took.as_secs_f64()
        ),
    ))
}

fn generalization() -> Outcome {
    let dir = tempfile::tempdir()?;
    let manifest = synth_generate(&SynthConfig::new(16, 8, 2, [48, 32], 1), dir.path())?;
    let runs: Vec<reid_core::Result<(f64, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = [vec![1, 2, 3, 4], vec![4]]
            .into_iter()
            .map(|stages| {
                let manifest = &manifest;
                s.spawn(move || {
                    let mut run = RunConfig::mini();
                    run.training.epochs = 300;
                    run.fusion = FusionConfig::new(&stages);
                    let data = manifest.load_images(Split::Train, run.backbone.input_hw)?;
                    let (model, _) =
                        train_loop(&run.model_config(1), &run.training, &run.normalization, &data, 0, None)?;
                    let (_, _, r) = evaluate_manifest(&model, manifest, &run.normalization, run.eval.batch, 10)?;
                    Ok((r.rank(1), r.map))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread"))
            .collect()
    });
    let (all_r1, all_map) = runs[0].as_ref().map_err(|e| e.to_string())?;
    let (s4_r1, s4_map) = runs[1].as_ref().map_err(|e| e.to_string())?;
    let pass = *all_r1 >= 0.9 && *all_map >= 0.8 && all_map >= s4_map;
    Ok((
        pass,
        format!("all stages rank-1 {all_r1:.4} mAP {all_map:.4}; stage 4 only rank-1 {s4_r1:.4} mAP {s4_map:.4}"),
    ))
}

fn reid(args: &[&str]) -> BoxResult<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_reid")).args(args).output()?;
    if !out.status.success() {
        return Err(format!("reid {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(String::from_utf8(out.stdout)?)
}

/// Runs the whole pipeline through the binary and returns the artifacts
/// that must be reproducible.
fn pipeline(root: &Path) -> BoxResult<Vec<(String, Vec<u8>)>> {
    let p = |s: &str| root.join(s).display().to_string();
    reid(&[
        "synth",
        "--out",
        &p("data"),
        "--ids",
        "16",
        "--imgs",
        "4",
        "--seed",
        "3",
    ])?;
    let manifest = p("data/manifest.csv");
    reid(&[
        "train",
        "--preset",
        "mini",
        "--seed",
        "0",
        "--epochs",
        "5",
        "--manifest",
        &manifest,
        "--out",
        &p("run"),
    ])?;
    for split in ["query", "gallery"] {
        reid(&[
            "embed",
            "--checkpoint",
            &p("run/model.ckpt"),
            "--config",
            &p("run/config.toml"),
            "--manifest",
            &manifest,
            "--split",
            split,
            "--out",
            &p(&format!("{split}.emb")),
        ])?;
    }
    let stdout = reid(&[
        "eval",
        "--query",
        &p("query.emb"),
        "--gallery",
        &p("gallery.emb"),
        "--out",
        &p("report"),
    ])?;
    let metrics = std::fs::read_to_string(root.join("run/metrics.csv"))?;
    let without_wall: String = metrics
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
        .collect();
    let mut out = vec![
        ("eval stdout".to_string(), stdout.into_bytes()),
        ("metrics.csv without wall_ms".to_string(), without_wall.into_bytes()),
    ];
    for f in [
        "report/cmc.csv",
        "report/summary.txt",
        "report/ranked_list.csv",
        "query.emb",
        "gallery.emb",
        "run/model.ckpt",
    ] {
        out.push((f.to_string(), std::fs::read(root.join(f))?));
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Ok((
        differing.is_empty(),
        format!("{} artifacts compared, differing {differing:?}", first.len()),
    ))
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir()?;
    let manifest = synth_generate(&SynthConfig::new(8, 4, 2, [48, 32], 2), dir.path())?;
    let mut cases: Vec<(AttentionOrder, FusionConfig)> = AttentionOrder::ALL
        .iter()
        .map(|&o| (o, FusionConfig::default()))
        .collect();
    cases.extend(
        FusionConfig::ablation_subsets()
            .into_iter()
            .map(|f| (AttentionOrder::default(), f)),
    );
    let mut failures = Vec::new();
    let start = Instant::now();
    for (order, fusion) in &cases {
        let label = format!("{order}/{}", fusion.label());
        let result = (|| -> reid_core::Result<()> {
            let mut run = RunConfig::mini();
            run.attention.order = *order;
            run.fusion = fusion.clone();
            run.training.epochs = 2;
            run.training.p = 4;
            run.training.k = 2;
            run.validate()?;
            let data = manifest.load_images(Split::Train, run.backbone.input_hw)?;
            let (model, report) = train_loop(&run.model_config(1), &run.training, &run.normalization, &data, 0, None)?;
            let (_, g, r) = evaluate_manifest(&model, &manifest, &run.normalization, run.eval.batch, 10)?;
            let maps = model.attention_maps(&data.subset(&[0]).normalized_batch(&run.normalization)?)?;
            let finite = report.epochs.iter().all(|e| e.total.is_finite()) && r.map.is_finite();
            if !finite || g.dim() != 21 * 512 || maps.is_empty() {
                return Err(reid_core::Error::Config(format!("unexpected output for {label}")));
            }
            Ok(())
        })();
        if let Err(e) = result {
            failures.push(format!("{label}: {e}"));
        }
    }
    let took = start.elapsed();
    let pass = failures.is_empty() && took < Duration::from_secs(900);
    Ok((
        pass,
        format!(
            "{} configurations, {:.0}s, failures {failures:?}",
            cases.len(),
            took.as_secs_f64()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradients),
        ("learning-rate table", lr_table),
        ("geometry", geometry),
        ("oracle equivalence", oracles),
        ("attention bounds", attention_bounds),
        ("overfit run", overfit),
        ("generalization run", generalization),
        ("determinism", determinism),
        ("ablation matrix", ablation),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "{} {n}. {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
