//! Brute-force retrieval protocol oracle.

use proptest::prelude::*;
use reid_core::eval::{evaluate, pairwise_distances, EmbeddingSet};
use reid_core::oracle;
use reid_core::{Rng, Tensor};

fn random_set(rng: &mut Rng, n: usize, d: usize, ids: usize, junk: bool) -> EmbeddingSet {
    // Small integer coordinates produce plenty of exact distance ties.
    let desc = Tensor::from_fn(&[n, d], |_| rng.below(3) as f64);
    let pids = (0..n)
        .map(|_| {
            if junk && rng.below(6) == 0 {
                -1
            } else {
                rng.below(ids) as i64
            }
        })
        .collect();
    let cams = (0..n).map(|_| rng.below(2) as i64).collect();
    EmbeddingSet::new(desc, pids, cams, (0..n).map(|i| i.to_string()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force(seed in any::<u64>(), nq in 1usize..=20, ng in 1usize..=20, ids in 1usize..5, max_rank in 1usize..12) {
        let mut rng = Rng::new(seed);
        let q = random_set(&mut rng, nq, 3, ids, false);
        let g = random_set(&mut rng, ng, 3, ids, true);
        match (evaluate(&q, &g, max_rank), oracle::ranking(&q, &g, max_rank)) {
            (Ok(r), Some(o)) => {
                prop_assert_eq!(&r.cmc, &o.cmc);
                prop_assert_eq!(r.map, o.map);
                prop_assert_eq!(r.num_valid, o.valid);
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!((0.0..=1.0).contains(&r.map));
            }
            (Err(_), None) => {}
            (r, o) => prop_assert!(false, "disagree: {:?} vs {}", r.map(|r| r.map), o.is_some()),
        }
    }

    #[test]
    fn gallery_permutation_invariance(seed in any::<u64>(), nq in 1usize..=10, ng in 2usize..=20) {
        let mut rng = Rng::new(seed);
        // Real-valued descriptors, so no ties depend on the gallery order.
        let q = EmbeddingSet { descriptors: Tensor::randn(&[nq, 4], 1.0, &mut rng), ..random_set(&mut rng, nq, 4, 3, false) };
        let g = EmbeddingSet { descriptors: Tensor::randn(&[ng, 4], 1.0, &mut rng), ..random_set(&mut rng, ng, 4, 3, false) };
        let mut perm: Vec<usize> = (0..ng).collect();
        rng.shuffle(&mut perm);
        let rows: Vec<Tensor> = perm.iter().map(|&i| g.descriptors.select(i).unwrap()).collect();
        let gp = EmbeddingSet::new(
            Tensor::stack(&rows.iter().collect::<Vec<_>>()).unwrap(),
            perm.iter().map(|&i| g.pids[i]).collect(),
            perm.iter().map(|&i| g.camids[i]).collect(),
            perm.iter().map(|&i| g.paths[i].clone()).collect(),
        ).unwrap();
        if let (Ok(a), Ok(b)) = (evaluate(&q, &g, 10), evaluate(&q, &gp, 10)) {
            prop_assert_eq!(a.cmc, b.cmc);
            prop_assert!((a.map - b.map).abs() < 1e-12);
        }
    }

    #[test]
    fn far_irrelevant_item_changes_nothing(seed in any::<u64>(), nq in 1usize..=10, ng in 1usize..=15) {
        let mut rng = Rng::new(seed);
        let q = random_set(&mut rng, nq, 3, 3, false);
        let g = random_set(&mut rng, ng, 3, 3, false);
        let far = Tensor::new(&[1, 3], vec![1e6; 3]).unwrap();
        let g2 = EmbeddingSet::new(
            Tensor::concat(&[&g.descriptors, &far], 0).unwrap(),
            g.pids.iter().copied().chain([99]).collect(),
            g.camids.iter().copied().chain([1]).collect(),
            g.paths.iter().cloned().chain(["far".to_string()]).collect(),
        ).unwrap();
        if let (Ok(a), Ok(b)) = (evaluate(&q, &g, ng), evaluate(&q, &g2, ng)) {
            prop_assert_eq!(a.cmc, b.cmc);
            prop_assert_eq!(a.map, b.map);
        }
    }
}

#[test]
fn naive_distance_loop() {
    let mut rng = Rng::new(11);
    let q = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let g = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let d = pairwise_distances(&q, &g).unwrap();
    for i in 0..5 {
        for j in 0..4 {
            let s: f64 = (0..3).map(|k| (q.at(&[i, k]) - g.at(&[j, k])).powi(2)).sum();
            assert!((d.at(&[i, j]) - s.sqrt()).abs() < 1e-10);
        }
    }
}
