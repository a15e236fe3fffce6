mod common;

use advpatch::composer::make_mask;
use advpatch::explain::{activation_map, mean_pair_distance, pca_project, Group};
use advpatch::Error;
use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{covariance, jacobi_eigenvalues};

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(6..30);
    let d = rng.random_range(2..8);
    // anisotropic columns so the spectrum is spread out
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
    (0..n)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn explained_variance_matches_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let x = random_matrix(&mut rng);
        let d = x[0].len();
        let k = rng.random_range(1..=d.min(x.len() - 1));
        let groups = vec![Group::Source; x.len()];
        let p = pca_project(&x, &groups, k).unwrap();
        let reference = jacobi_eigenvalues(covariance(&x));
        for i in 0..k {
            assert!(
                (p.explained_variance[i] - reference[i]).abs() < 1e-8,
                "trial {trial} component {i}: {} vs {}",
                p.explained_variance[i],
                reference[i]
            );
        }
        let total: f64 = reference.iter().sum();
        assert!((p.explained_ratio[0] - reference[0] / total).abs() < 1e-8);
    }
}

#[test]
fn components_are_orthonormal_and_sign_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(&mut rng);
    let d = x[0].len();
    let p = pca_project(&x, &vec![Group::Attacked; x.len()], d.min(x.len() - 1)).unwrap();
    for (i, a) in p.components.iter().enumerate() {
        for (j, b) in p.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-9);
        }
        let pivot = a.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0);
    }
    // projected coordinates have zero mean and the reported variance
    for c in 0..p.components.len() {
        let col: Vec<f64> = p.coords.iter().map(|r| r[c]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| v * v).sum::<f64>() / (col.len() - 1) as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - p.explained_variance[c]).abs() < 1e-8);
    }
}

#[test]
fn pca_rejects_too_few_samples() {
    let x = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    assert!(matches!(pca_project(&x, &[Group::Source; 2], 2), Err(Error::Rank { .. })));
    assert!(matches!(pca_project(&x, &[Group::Source; 2], 0), Err(Error::Rank { .. })));
}

#[test]
fn pair_distance_example() {
    let coords = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 0.0]];
    assert!((mean_pair_distance(&coords, &[(0, 1), (0, 2)]) - 3.0).abs() < 1e-12);
    assert_eq!(mean_pair_distance(&coords, &[]), 0.0);
}

#[test]
fn activation_map_sums_squares() {
    let f = Tensor::new(&[[[1.0f32, -2.0]], [[3.0, 0.5]]], &Device::Cpu).unwrap();
    let a = activation_map(&f, "s").unwrap();
    assert_eq!((a.height, a.width), (1, 2));
    assert!((a.at(0, 0) - 10.0).abs() < 1e-9);
    assert!((a.at(0, 1) - 4.25).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_invariant_to_translation_and_row_order(seed in any::<u64>(), shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng);
        let groups = vec![Group::CleanSameId; x.len()];
        let p = pca_project(&x, &groups, 1).unwrap();
        let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let mut reversed = x.clone();
        reversed.reverse();
        let ps = pca_project(&shifted, &groups, 1).unwrap();
        let pr = pca_project(&reversed, &groups, 1).unwrap();
        prop_assert!((p.explained_variance[0] - ps.explained_variance[0]).abs() < 1e-8);
        prop_assert!((p.explained_variance[0] - pr.explained_variance[0]).abs() < 1e-8);
    }

    #[test]
    fn window_mass_is_a_fraction(seed in any::<u64>(), h in 1usize..16, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fh, fw) = (rng.random_range(1..9), rng.random_range(1..5));
        let v: Vec<f32> = (0..4 * fh * fw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = activation_map(&Tensor::from_vec(v, (4, fh, fw), &Device::Cpu).unwrap(), "s").unwrap();
        let x = rng.random_range(0..=8 - w);
        let y = rng.random_range(0..=16 - h);
        let mask = make_mask(16, 8, h, w, x, y).unwrap();
        let frac = map.window_mass_fraction(&mask);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&frac));
        let full = make_mask(16, 8, 16, 8, 0, 0).unwrap();
        prop_assert!((map.window_mass_fraction(&full) - 1.0).abs() < 1e-9);
        // uniform map: mass fraction equals area fraction
        let flat = activation_map(&Tensor::ones((1, 4, 2), candle_core::DType::F32, &Device::Cpu).unwrap(), "u").unwrap();
        prop_assert!((flat.window_mass_fraction(&mask) - mask.area_fraction()).abs() < 1e-9);
    }
}
