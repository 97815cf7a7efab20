//! Generation-level properties of the synthetic tasks, including the two
//! behavioral controls: an identity transform leaves a source-trained
//! classifier's accuracy unchanged across domains, and a 180-degree rotation
//! of a two-class symmetric mixture flips its labels.

use dtr_core::datagen::{make_gaussian_shift, BaseDistribution, ring_means, ShiftSpec};
use dtr_core::eval::median;
use dtr_core::trainer::{train, Mode, TrainConfig};
use proptest::prelude::*;

fn mixture_spec(cov: f64, rotation: f64) -> ShiftSpec {
    ShiftSpec {
        base: BaseDistribution::GaussianMixture { means: ring_means(3, 2.0, 2), cov_scale: cov },
        rotation_deg: rotation,
        translation: vec![],
        axis_scale: vec![],
        label_noise: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_pure_function_of_spec_and_seed(
        seed in 0u64..1_000_000,
        cov in 0.2f64..1.0,
        rotation in -180.0f64..180.0,
    ) {
        let spec = mixture_spec(cov, rotation);
        let (s1, t1) = make_gaussian_shift(&spec, 50, 50, seed).unwrap();
        let (s2, t2) = make_gaussian_shift(&spec, 50, 50, seed).unwrap();
        prop_assert_eq!(s1.features(), s2.features());
        prop_assert_eq!(t1.features(), t2.features());
        prop_assert_eq!(s1.labels().unwrap(), s2.labels().unwrap());
        prop_assert!(s1.labels().unwrap().iter().all(|&l| l < 3));
    }

    #[test]
    fn source_is_standardized(seed in 0u64..10_000) {
        let spec = mixture_spec(0.6, 30.0);
        let (source, _) = make_gaussian_shift(&spec, 400, 50, seed).unwrap();
        let d = source.input_dim;
        let n = source.len() as f64;
        for axis in 0..d {
            let mean: f64 =
                (0..source.len()).map(|i| source.feature_row(i)[axis]).sum::<f64>() / n;
            let var: f64 = (0..source.len())
                .map(|i| {
                    let v = source.feature_row(i)[axis] - mean;
                    v * v
                })
                .sum::<f64>()
                / n;
            prop_assert!(mean.abs() < 1e-9, "axis {} mean {}", axis, mean);
            prop_assert!((var - 1.0).abs() < 1e-6, "axis {} var {}", axis, var);
        }
    }
}

fn short_source_only(seed: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::SourceOnly,
        iterations: 600,
        seed,
        ..TrainConfig::default()
    }
}

/// No shift at all: source and target accuracy agree within two points in
/// median over five seeds.
#[test]
fn identity_transform_is_a_no_shift_control() {
    let spec = mixture_spec(0.6, 0.0);
    let mut gaps = vec![];
    for seed in [1, 2, 3, 4, 5] {
        let (source, target) = make_gaussian_shift(&spec, 400, 400, seed).unwrap();
        let outcome = train(&short_source_only(seed), &source, &target).unwrap();
        let last = outcome.evals.last().unwrap();
        gaps.push((last.acc_c_di_src - last.acc_c_di_tgt.unwrap()).abs());
    }
    let m = median(&gaps);
    assert!(m <= 0.02, "median accuracy gap {m} under the identity transform");
}

/// Rotating a two-class symmetric mixture by 180 degrees swaps the clusters:
/// a source-trained classifier's target accuracy lands near one minus its
/// source accuracy.
#[test]
fn half_turn_on_symmetric_two_class_mixture_flips_labels() {
    let spec = ShiftSpec {
        base: BaseDistribution::GaussianMixture {
            means: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            cov_scale: 0.4,
        },
        rotation_deg: 180.0,
        translation: vec![],
        axis_scale: vec![],
        label_noise: 0.0,
    };
    let mut residuals = vec![];
    for seed in [1, 2, 3] {
        let (source, target) = make_gaussian_shift(&spec, 400, 400, seed).unwrap();
        let outcome = train(&short_source_only(seed), &source, &target).unwrap();
        let last = outcome.evals.last().unwrap();
        let src = last.acc_c_di_src;
        let tgt = last.acc_c_di_tgt.unwrap();
        assert!(src > 0.95, "source should separate cleanly, got {src}");
        residuals.push((tgt - (1.0 - src)).abs());
    }
    let m = median(&residuals);
    assert!(m <= 0.1, "median |target - (1 - source)| = {m}");
}
