mod support;

use proptest::prelude::*;
use rand::Rng;
use splatseg::codebook::{build_two_level, kmeans, CodebookConfig, Samples, Seeding};
use splatseg::Feature;

fn random_samples(seed: u64, n: usize, dim: usize) -> Samples {
    let mut rng = support::rng(seed);
    let clusters = rng.random_range(1..8);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let data = (0..n)
        .flat_map(|i| {
            let c = &centers[i % clusters];
            c.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect::<Vec<_>>()
        })
        .collect();
    Samples::new(dim, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distortion_never_increases(seed in any::<u64>(), n in 1usize..300, k in 1usize..40, dim in 1usize..10, pp in any::<bool>()) {
        let s = random_samples(seed, n, dim);
        let seeding = if pp { Seeding::PlusPlus } else { Seeding::Uniform };
        let run = kmeans(&s, k, seed, seeding, 50);
        for w in run.history.windows(2) {
            prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn every_point_lands_in_exactly_one_instance(seed in any::<u64>(), n in 1usize..200, coarse in 1usize..12, fine in 1usize..6) {
        let mut rng = support::rng(seed);
        let features: Vec<Feature> = support::random_features(&mut rng, n);
        let positions: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let cfg = CodebookConfig { coarse_k: coarse, fine_k: fine, restarts: 2, ..Default::default() };
        let cb = build_two_level(&features, &positions, &cfg, seed).unwrap();
        let total: usize = cb.instances().values().map(|m| m.len()).sum();
        prop_assert_eq!(total, n);
        let q = cb.quantize();
        for i in 0..n {
            let id = cb.instance_of(i);
            prop_assert_eq!(q[i], cb.fine_entries()[id.coarse as usize][id.fine as usize]);
        }
    }
}

#[test]
fn same_seed_same_codebook() {
    let mut rng = support::rng(8);
    let features = support::random_features(&mut rng, 500);
    let positions: Vec<[f64; 3]> = (0..500).map(|i| [i as f64, 0.0, 0.0]).collect();
    let cfg = CodebookConfig { coarse_k: 16, ..Default::default() };
    let a = build_two_level(&features, &positions, &cfg, 3).unwrap();
    let b = build_two_level(&features, &positions, &cfg, 3).unwrap();
    assert_eq!(a, b);
}
