//! Fixed-value checks: published settings first, then hand-derived cases.

use nodule_core::aggregate::noisy_or;
use nodule_core::blocks::{stochastic_depth, Ctx, ForwardOptions, ParamStore, StochasticDepthConfig};
use nodule_core::evaluate::{confusion_at_threshold, delong_test, mann_whitney_auc, roc_curve};
use nodule_core::mixup::mix_pair;
use nodule_core::model::{build_model, ModelConfig, ModelVariant};
use nodule_core::optim::SgdConfig;
use nodule_core::preprocess::{
    augment_27, clip_normalize, rotate_patch, AugmentConfig, HuVolume, NoduleCrop, View, ViewPatch,
    CLASSIFICATION_WINDOW, DETECTION_WINDOW,
};
use nodule_core::rng::seeded;
use nodule_core::synth::{aggregate_rater_median, RaterLabel, RaterScores};
use nodule_core::{Tape, Tensor};

#[test]
fn learning_rate_decays_by_a_tenth() {
    let sgd = SgdConfig {
        learning_rate: 0.1,
        step_decay_factor: 0.1,
        decay_every_epochs: Some(50),
    };
    assert!((sgd.learning_rate_at(60) - 0.01).abs() < 1e-15);
    let sgd = SgdConfig { learning_rate: 0.01, ..sgd };
    assert!((sgd.learning_rate_at(60) - 0.001).abs() < 1e-15);
    assert_eq!(sgd.learning_rate_at(49), 0.01);
}

#[test]
fn stochastic_depth_eval_scales_by_survival() {
    let store = ParamStore::new();
    let mut stats = store.stats.clone();
    let mut tape = Tape::new();
    let mut rng = seeded(0);
    let branch = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let skip = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let mut ctx = Ctx::new(&mut tape, &[], &mut stats, ForwardOptions::eval(), &mut rng);
    let y = stochastic_depth(&mut ctx, &StochasticDepthConfig { survival: 0.8 }, branch, skip).unwrap();
    assert_eq!(tape.value(y).data(), &[0.8]);
}

#[test]
fn larger_baseline_outweighs_final_model() {
    let count = |v| build_model(&ModelConfig::new(v, 0)).unwrap().param_count();
    assert!(count(ModelVariant::MaxoutA) > count(ModelVariant::MaxoutLocalGlobal));
    assert!(count(ModelVariant::ResnetA) > count(ModelVariant::LocalGlobalLinear));
}

#[test]
fn hounsfield_windows_map_midpoints() {
    let v = HuVolume::new([1, 1, 1], vec![-300.0]).unwrap();
    for (lo, hi) in [CLASSIFICATION_WINDOW, DETECTION_WINDOW] {
        assert_eq!(clip_normalize(&v, lo, hi).unwrap().values, vec![0.5]);
    }
    assert_eq!(CLASSIFICATION_WINDOW, (-1000.0, 400.0));
    assert_eq!(DETECTION_WINDOW, (-1200.0, 600.0));
    let ends = HuVolume::new([1, 1, 2], vec![-5000.0, 5000.0]).unwrap();
    assert_eq!(clip_normalize(&ends, -1000.0, 400.0).unwrap().values, vec![0.0, 1.0]);
}

#[test]
fn twenty_seven_crops_per_nodule() {
    let crop = NoduleCrop::new(8, (0..512).map(|i| (i % 7) as f64 / 6.0).collect(), 0, 0).unwrap();
    let patches = augment_27(&crop, &AugmentConfig::default(), &mut seeded(5)).unwrap();
    assert_eq!(patches.len(), 27);
    for view in View::ALL {
        assert_eq!(patches.iter().filter(|p| p.view == view).count(), 9);
    }
    for p in &patches {
        let a = p.augmentation.angle.unwrap();
        assert!((-180.0..=180.0).contains(&a));
    }
}

#[test]
fn median_of_three_is_excluded() {
    assert_eq!(aggregate_rater_median(RaterScores([2, 3, 3, 4])), RaterLabel::Excluded);
    assert_eq!(aggregate_rater_median(RaterScores([1, 2, 2, 5])), RaterLabel::Label(0));
    assert_eq!(aggregate_rater_median(RaterScores([3, 4, 4, 5])), RaterLabel::Label(1));
    // middle pair 2 and 4 averages to exactly 3
    assert_eq!(aggregate_rater_median(RaterScores([1, 2, 4, 5])), RaterLabel::Excluded);
}

#[test]
fn noisy_or_hand_values() {
    assert_eq!(noisy_or(&[0.2, 0.5]).unwrap(), 0.6);
    assert_eq!(noisy_or(&[0.0]).unwrap(), 0.0);
    assert_eq!(noisy_or(&[1.0, 0.3]).unwrap(), 1.0);
    assert!((noisy_or(&[0.1, 0.1, 0.1]).unwrap() - 0.271).abs() < 1e-15);
    assert!(noisy_or(&[1.2]).is_err());
}

#[test]
fn mix_pair_hand_values() {
    let a = Tensor::from_vec(vec![1.0, 0.0]);
    let b = Tensor::from_vec(vec![0.0, 1.0]);
    let m = mix_pair(&a, 1.0, &b, 0.0, 0.25).unwrap();
    assert_eq!(m.x.data(), &[0.25, 0.75]);
    assert_eq!(m.y, 0.25);
    assert_eq!(mix_pair(&a, 1.0, &b, 0.0, 1.0).unwrap().x, a);
    assert_eq!(mix_pair(&a, 1.0, &b, 0.0, 0.0).unwrap().x, b);
}

#[test]
fn roc_hand_case() {
    let scores = [0.9, 0.8, 0.7, 0.6];
    let labels = [1, 0, 1, 0];
    let roc = roc_curve(&scores, &labels).unwrap();
    assert_eq!(roc.auc, 0.75);
    assert_eq!(roc.points, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    assert_eq!(mann_whitney_auc(&scores, &labels).unwrap(), 0.75);
    let c = confusion_at_threshold(&scores, &labels, 0.75).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 1, 1));
    assert_eq!(c.specificity() + c.false_positive_rate(), 1.0);
}

#[test]
fn delong_hand_case() {
    let labels = [1, 1, 0, 0];
    let same = delong_test(&[0.9, 0.4, 0.5, 0.1], &[0.9, 0.4, 0.5, 0.1], &labels).unwrap();
    assert_eq!(same.p_value, 1.0);
    let ab = delong_test(&[0.9, 0.8, 0.2, 0.1], &[0.9, 0.1, 0.5, 0.2], &labels).unwrap();
    let ba = delong_test(&[0.9, 0.1, 0.5, 0.2], &[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
    assert_eq!(ab.auc_a, 1.0);
    assert_eq!(ab.auc_b, 0.5);
    assert_eq!(ab.z, -ba.z);
    assert_eq!(ab.p_value, ba.p_value);
}

#[test]
fn quarter_turn_rotation() {
    let patch = ViewPatch {
        size: 3,
        data: (0..9).map(|i| i as f64 / 8.0).collect(),
        view: View::Axial,
        augmentation: Default::default(),
    };
    let r = rotate_patch(&patch, 90.0).unwrap();
    for y in 0..3 {
        for x in 0..3 {
            assert_eq!(r.at(y, x), patch.at(2 - x, y));
        }
    }
}
