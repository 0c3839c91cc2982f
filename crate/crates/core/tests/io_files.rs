//! Manifests, synthetic data, checkpoints and embedding dumps on disk.

use std::fs;

use reid_core::eval::EmbeddingSet;
use reid_core::io::checkpoint;
use reid_core::io::embeddings::{read_embeddings, sidecar_path, write_embeddings};
use reid_core::io::image::load_image;
use reid_core::io::manifest::{load_manifest, Split};
use reid_core::io::synth::{synth_generate, SynthConfig};
use reid_core::model::{ModelConfig, ReidModel};
use reid_core::{Error, Rng, Tensor};

fn write_manifest(dir: &std::path::Path, rows: &str) -> std::path::PathBuf {
    for name in ["a.png", "b.png", "c.png", "d.png"] {
        fs::write(dir.join(name), b"").unwrap();
    }
    let p = dir.join("m.csv");
    fs::write(&p, format!("path,pid,camid,split\n{rows}")).unwrap();
    p
}

#[test]
fn manifest_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_manifest(
        dir.path(),
        "a.png,1,0,train\nb.png,1,1,train\nc.png,2,0,query\nd.png,-1,1,gallery\n",
    );
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.rows.len(), 4);
    assert_eq!(m.split(Split::Gallery)[0].pid, -1);

    let p = write_manifest(dir.path(), "a.png,1,0,train\nb.png,1,1,foo\n");
    match load_manifest(&p).unwrap_err() {
        Error::Parse { line, msg, .. } => {
            assert_eq!(line, 3);
            assert!(msg.contains("foo"));
        }
        e => panic!("{e}"),
    }
    let p = write_manifest(dir.path(), "a.png,-1,0,train\n");
    assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
    let p = write_manifest(dir.path(), "a.png,1,0,train\na.png,2,0,train\n");
    assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));
    let p = write_manifest(dir.path(), "zzz.png,1,0,train\n");
    assert!(load_manifest(&p).unwrap_err().to_string().contains("does not exist"));
    let p = write_manifest(dir.path(), "a.png,x,0,train\n");
    assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(
        load_manifest(&dir.path().join("missing.csv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn synth_small_case_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(2, 2, 2, [48, 32], 9);
    let m = synth_generate(&cfg, a.path()).unwrap();
    synth_generate(&cfg, b.path()).unwrap();
    assert_eq!(m.rows.len(), 4);
    let q = m.split(Split::Query);
    let g = m.split(Split::Gallery);
    assert_eq!((q.len(), g.len()), (1, 1));
    assert_ne!(q[0].camid, g[0].camid);
    assert_eq!(q[0].pid, g[0].pid);
    for r in &m.rows {
        assert_eq!(
            fs::read(a.path().join(&r.path)).unwrap(),
            fs::read(b.path().join(&r.path)).unwrap()
        );
    }
    assert_eq!(
        fs::read(a.path().join("manifest.csv")).unwrap(),
        fs::read(b.path().join("manifest.csv")).unwrap()
    );
    let reloaded = load_manifest(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.to_csv(), m.to_csv());
    let img = load_image(&reloaded.rows[0].resolved, [48, 32]).unwrap();
    assert_eq!(img.shape(), &[3, 48, 32]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(
        load_image(&reloaded.rows[0].resolved, [24, 16]).unwrap().shape(),
        &[3, 24, 16]
    );
}

#[test]
fn raw_pixel_nearest_neighbour_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_ids: Some(0),
        ..SynthConfig::new(16, 8, 2, [48, 32], 1)
    };
    let m = synth_generate(&cfg, dir.path()).unwrap();
    let q = m.load_images(Split::Query, [48, 32]).unwrap();
    let g = m.load_images(Split::Gallery, [48, 32]).unwrap();
    let mut correct = 0;
    for (qi, qimg) in q.images.iter().enumerate() {
        let best = g
            .images
            .iter()
            .enumerate()
            .map(|(j, gimg)| {
                let d: f64 = qimg.data().iter().zip(gimg.data()).map(|(a, b)| (a - b).powi(2)).sum();
                (d, j)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        correct += usize::from(g.pids[best] == q.pids[qi]);
    }
    let rate = correct as f64 / q.len() as f64;
    assert!(rate > 2.0 / 16.0, "raw-pixel rank-1 {rate}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = ReidModel::new(&ModelConfig::mini(3), &mut Rng::new(2)).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let back = checkpoint::load(&path).unwrap().into_model().unwrap();
    let x = Tensor::randn(&[2, 3, 48, 32], 1.0, &mut Rng::new(3));
    assert_eq!(model.embed(&x, 2).unwrap(), back.embed(&x, 2).unwrap());
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn embedding_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = EmbeddingSet::new(
        Tensor::randn(&[3, 5], 1.0, &mut Rng::new(4)),
        vec![1, 2, -1],
        vec![0, 1, 1],
        vec!["a.png".into(), "b,c.png".into(), "d.png".into()],
    )
    .unwrap();
    let p = dir.path().join("q.emb");
    write_embeddings(&p, &set).unwrap();
    assert!(sidecar_path(&p).exists());
    let back = read_embeddings(&p).unwrap();
    assert_eq!(back.descriptors, set.descriptors);
    assert_eq!((back.pids, back.camids, back.paths), (set.pids, set.camids, set.paths));
}
