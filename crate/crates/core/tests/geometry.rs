//! Shapes of the reference and mini configurations.

use reid_core::backbone::{fmr_fuse, Backbone, BackboneConfig, FusionConfig};
use reid_core::heads::{mgo_partition, MgoConfig};
use reid_core::nn::{Ctx, Mode, ParamStore};
use reid_core::{Rng, Tape, Tensor};

#[test]
fn reference_backbone_forward() {
    let cfg = BackboneConfig::reference();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let bb = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 3, 384, 128], 1.0, &mut rng);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
    let xv = cx.tape.constant(x);
    let maps = bb.forward(&mut cx, xv).unwrap();
    let shapes: Vec<Vec<usize>> = maps.maps.iter().map(|&m| cx.tape.shape(m).to_vec()).collect();
    assert_eq!(shapes[0], vec![1, 256, 96, 32]);
    assert_eq!(shapes[3], vec![1, 2048, 24, 8]);
    let fused = fmr_fuse(&mut cx, &maps, &FusionConfig::default()).unwrap();
    assert_eq!(cx.tape.shape(fused), &[1, 3840, 24, 8]);
    let parts = mgo_partition(&mut cx, fused, &MgoConfig::default()).unwrap();
    assert_eq!(parts.len(), 21);
    let (p2a, p2b) = (parts[1], parts[2]);
    assert_eq!((p2a.0.row_lo, p2a.0.row_hi, p2b.0.row_lo, p2b.0.row_hi), (0, 20, 4, 24));
    assert_eq!(cx.tape.shape(p2b.1), &[1, 3840, 20, 8]);
}

#[test]
fn fused_channels_are_stage_sums() {
    let cfg = BackboneConfig::mini();
    for f in FusionConfig::ablation_subsets() {
        let want: usize = f.stages.iter().map(|&s| cfg.stage_channels[s - 1]).sum();
        assert_eq!(f.fused_channels(&cfg), want);
    }
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    let bb = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
    let xv = cx.tape.constant(Tensor::randn(&[2, 3, 48, 32], 1.0, &mut rng));
    let maps = bb.forward(&mut cx, xv).unwrap();
    for f in FusionConfig::ablation_subsets() {
        let fused = fmr_fuse(&mut cx, &maps, &f).unwrap();
        assert_eq!(cx.tape.shape(fused), &[2, f.fused_channels(&cfg), 6, 4]);
    }
}

#[test]
fn max_pool_equalization_keeps_the_largest_activation() {
    // fusing only stage 1 pools 4×4 windows of the 24×16 map
    let cfg = BackboneConfig::mini();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(2);
    let bb = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
    let xv = cx.tape.constant(Tensor::randn(&[1, 3, 48, 32], 1.0, &mut rng));
    let maps = bb.forward(&mut cx, xv).unwrap();
    let fused = fmr_fuse(&mut cx, &maps, &FusionConfig::new(&[1])).unwrap();
    let s1 = cx.tape.value(maps.stage(1)).clone();
    let f = cx.tape.value(fused);
    for c in 0..8 {
        for y in 0..6 {
            for x in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..4 {
                    for dx in 0..4 {
                        m = m.max(s1.at(&[0, c, 4 * y + dy, 4 * x + dx]));
                    }
                }
                assert_eq!(f.at(&[0, c, y, x]), m);
            }
        }
    }
}
