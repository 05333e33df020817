use std::collections::BTreeSet;

use proptest::prelude::*;
use qatlab_core::data::{gen_classification, gen_regression, make_calibration, ClassMode, Split, Teacher};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_are_disjoint_and_calibration_is_inside_train(seed in any::<u64>(), n in 1usize..400, frac in 0.01f64..1.0) {
        let d = gen_regression(seed, n, 3, &Teacher::Identity, 0.0).unwrap();
        let d = make_calibration(&d, frac, seed ^ 1).unwrap();
        d.check_splits().unwrap();
        let train: BTreeSet<_> = d.indices(Split::Train).iter().collect();
        let eval: BTreeSet<_> = d.indices(Split::Eval).iter().collect();
        prop_assert_eq!(train.len() + eval.len(), n);
        prop_assert!(train.is_disjoint(&eval));
        let calib = d.indices(Split::Calibration);
        if !train.is_empty() {
            prop_assert!(!calib.is_empty());
        }
        prop_assert!(calib.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn classification_is_balanced_and_reproducible(seed in any::<u64>(), n in 2usize..300, classes in 2usize..6) {
        let mode = ClassMode::Spirals { noise: 0.05 };
        let d = gen_classification(seed, n, classes, mode).unwrap();
        prop_assert_eq!(&d, &gen_classification(seed, n, classes, mode).unwrap());
        let counts = d.class_counts().unwrap();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }
}

#[test]
fn different_seeds_give_different_data() {
    let a = gen_classification(1, 100, 3, ClassMode::Blobs { dim: 4, noise: 0.1 }).unwrap();
    let b = gen_classification(2, 100, 3, ClassMode::Blobs { dim: 4, noise: 0.1 }).unwrap();
    assert_ne!(a.inputs, b.inputs);
}

#[test]
fn reshaping_samples_keeps_values() {
    let d = gen_classification(1, 10, 2, ClassMode::Blobs { dim: 16, noise: 0.1 }).unwrap();
    let r = d.clone().reshape_samples(&[1, 4, 4]).unwrap();
    assert_eq!(r.sample_shape(), &[1, 4, 4]);
    assert_eq!(r.inputs.data(), d.inputs.data());
    assert!(d.reshape_samples(&[3, 5]).is_err());
}
