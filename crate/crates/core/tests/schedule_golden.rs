//! Learning-rate table at every epoch 1..=150.

use reid_core::training::warmup_lr;

fn expected(e: usize) -> f64 {
    let text = match e {
        1..=10 => format!("{}e-5", 3 * e),
        11..=60 => "0.01".into(),
        61..=90 => "0.005".into(),
        91..=120 => "0.0025".into(),
        _ => "0.00125".into(),
    };
    text.parse().unwrap()
}

#[test]
fn golden_table() {
    for e in 1..=150 {
        assert_eq!(warmup_lr(e).unwrap(), expected(e), "epoch {e}");
    }
    for (e, lr) in [
        (1, 3e-5),
        (5, 1.5e-4),
        (10, 3e-4),
        (11, 0.01),
        (61, 0.005),
        (100, 0.0025),
        (121, 0.00125),
        (150, 0.00125),
    ] {
        assert_eq!(warmup_lr(e).unwrap(), lr);
    }
}

#[test]
fn positive_and_nonincreasing_after_warmup() {
    let lrs: Vec<f64> = (1..=200).map(|e| warmup_lr(e).unwrap()).collect();
    assert!(lrs.iter().all(|&l| l > 0.0));
    assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs[..10].windows(2).all(|w| w[1] > w[0]));
    assert!(warmup_lr(0).is_err());
}
