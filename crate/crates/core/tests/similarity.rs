mod common;

use proptest::prelude::*;
use ttabench::numcore::{Matrix, Rng};
use ttabench::similarity::{median_bandwidth, mmd_squared, similarity_score, Estimator, MmdConfig};

use common::{mmd_oracle_worst, offset_scores, random_matrix, self_split_score};

#[test]
fn production_mmd_matches_brute_force() {
    let worst = mmd_oracle_worst(200);
    assert!(worst < 1e-10, "worst deviation {worst:e}");
}

#[test]
fn identical_sets_score_exactly_one() {
    let mut rng = Rng::new(3);
    let x = random_matrix(&mut rng, 120, 5, 2.0);
    for estimator in [Estimator::Biased, Estimator::Unbiased] {
        let cfg = MmdConfig {
            estimator,
            ..MmdConfig::default()
        };
        let r = similarity_score(&x, &x, &cfg).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.mmd, 0.0);
    }
}

fn mean_kernel(a: &Matrix, b: &Matrix, sigma: f64) -> f64 {
    let mut total = 0.0;
    for u in a.row_iter() {
        for v in b.row_iter() {
            let d2: f64 = u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
            total += (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

#[test]
fn far_apart_clusters_lose_the_cross_term() {
    let mut rng = Rng::new(4);
    let x = random_matrix(&mut rng, 30, 2, 0.5);
    let y = random_matrix(&mut rng, 30, 2, 0.5).map(|v| v + 100.0);
    let cfg = MmdConfig::fixed(1.0);
    let expected = mean_kernel(&x, &x, 1.0) + mean_kernel(&y, &y, 1.0);
    assert!(mean_kernel(&x, &y, 1.0) < 1e-300);
    assert!((mmd_squared(&x, &y, &cfg).unwrap() - expected).abs() < 1e-12);
    assert!(similarity_score(&x, &y, &cfg).unwrap().score < 1.0);
}

#[test]
fn median_bandwidth_examples() {
    // pooled {a, b, a, b} with ‖a − b‖ = 2: squared distances 0, 0, 4, 4, 4, 4
    let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let s = median_bandwidth(&two, &two, 100).unwrap();
    assert!((s * s - 4.0).abs() < 1e-12);

    let same = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(median_bandwidth(&same, &same, 100).is_err());

    let mut rows: Vec<Vec<f64>> = (0..10).map(|i| vec![(i % 2) as f64]).collect();
    let base = Matrix::from_rows(&rows).unwrap();
    rows.push(vec![1e6]);
    let with_outlier = Matrix::from_rows(&rows).unwrap();
    let a = median_bandwidth(&base, &base, 100).unwrap();
    let b = median_bandwidth(&with_outlier, &with_outlier, 100).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn median_bandwidth_is_stable_across_draws() {
    let values: Vec<f64> = (0..5)
        .map(|s| {
            let mut rng = Rng::new(50 + s);
            let x = random_matrix(&mut rng, 500, 4, 1.0);
            let y = random_matrix(&mut rng, 500, 4, 1.0);
            median_bandwidth(&x, &y, 2000).unwrap().powi(2)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in values {
        assert!((v - mean).abs() < 0.05 * mean, "{v} vs {mean}");
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut rng = Rng::new(1);
    let a = random_matrix(&mut rng, 5, 3, 1.0);
    let b = random_matrix(&mut rng, 5, 4, 1.0);
    let single = random_matrix(&mut rng, 1, 3, 1.0);
    assert!(mmd_squared(&a, &b, &MmdConfig::default()).is_err());
    assert!(mmd_squared(&a, &single, &MmdConfig::default()).is_err());
    assert!(mmd_squared(&a, &a, &MmdConfig::fixed(0.0)).is_err());
    assert!(mmd_squared(&a, &a, &MmdConfig::fixed(f64::NAN)).is_err());
}

#[test]
fn score_falls_strictly_with_offset() {
    for seed in 0..3 {
        let s = offset_scores(&[0.0, 1.0, 2.0, 3.0, 5.0], 2000, seed);
        assert!(s.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {s:?}");
    }
}

#[test]
fn random_halves_of_one_sample_look_alike() {
    for seed in 0..3 {
        let s = self_split_score(1000, seed);
        assert!(s >= 0.98, "seed {seed}: {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_is_symmetric_and_in_unit_interval(seed in 0u64..10_000, m in 2usize..30, n in 2usize..30, shift in 0.0f64..4.0) {
        let mut rng = Rng::new(seed);
        let x = random_matrix(&mut rng, m, 3, 1.0);
        let y = random_matrix(&mut rng, n, 3, 1.0).map(|v| v + shift);
        for estimator in [Estimator::Biased, Estimator::Unbiased] {
            let cfg = MmdConfig { estimator, ..MmdConfig::default() };
            let ab = similarity_score(&x, &y, &cfg).unwrap();
            let ba = similarity_score(&y, &x, &cfg).unwrap();
            prop_assert!(ab.score > 0.0 && ab.score <= 1.0);
            prop_assert_eq!(ab.score, ba.score);
            prop_assert_eq!(ab.score, (-ab.mmd).exp());
            if estimator == Estimator::Biased {
                prop_assert!(ab.mmd_squared >= -1e-12);
            }
        }
    }
}
