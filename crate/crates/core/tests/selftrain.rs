use nodule_core::mixup::MixupConfig;
use nodule_core::model::{build_model, ModelConfig, ModelVariant};
use nodule_core::optim::SgdConfig;
use nodule_core::preprocess::AugmentConfig;
use nodule_core::rng::{derive_seed, seeded, stream};
use nodule_core::selftrain::{
    infer_pseudo_labels, self_train_loop, train_supervised, NoiseToggles, SelfTrainConfig, TrainConfig, TrainingSet,
};
use nodule_core::synth::{gen_labeled_dataset, gen_patient_cohort, SynthConfig};

fn synth(difficulty: f64) -> SynthConfig {
    SynthConfig {
        n_labeled_nodules: 48,
        n_patients: 24,
        crop_size: 8,
        difficulty,
        seed: 11,
        ..SynthConfig::default()
    }
}

fn small_model(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        base_channels: 4,
        ..ModelConfig::new(variant, 3)
    }
}

fn labeled(difficulty: f64) -> TrainingSet {
    let d = gen_labeled_dataset(&synth(difficulty)).unwrap();
    TrainingSet::from_labels(d.crops, &d.labels).unwrap()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        sgd: SgdConfig {
            learning_rate: 0.05,
            ..SgdConfig::default()
        },
    }
}

fn fit(epochs: usize, seed: u64) -> (nodule_core::model::ModelState, Vec<f64>) {
    let mut model = build_model(&small_model(ModelVariant::MaxoutLocalGlobal)).unwrap();
    let out = train_supervised(
        &mut model,
        &labeled(0.0),
        &train_config(epochs),
        &NoiseToggles::none(),
        &MixupConfig::disabled(),
        &AugmentConfig::default(),
        &mut seeded(seed),
    )
    .unwrap();
    (model, out.loss_trace)
}

#[test]
fn zero_epochs_leaves_parameters() {
    let fresh = build_model(&small_model(ModelVariant::MaxoutLocalGlobal)).unwrap();
    let (trained, trace) = fit(0, 1);
    assert!(trace.is_empty());
    assert_eq!(trained.store, fresh.store);
    assert_eq!(trained.epoch, 0);
}

#[test]
fn separable_toy_halves_the_loss() {
    let (_, trace) = fit(30, 2);
    assert_eq!(trace.len(), 30);
    let last = *trace.last().unwrap();
    assert!(last <= 0.5 * trace[0], "loss {} -> {last}", trace[0]);
}

#[test]
fn training_is_bit_identical_per_seed() {
    let (a, ta) = fit(3, 4);
    let (b, tb) = fit(3, 4);
    assert_eq!(a.store, b.store);
    assert_eq!(ta, tb);
    let (c, _) = fit(3, 5);
    assert_ne!(a.store, c.store);
}

#[test]
fn pseudo_label_inference_modes() {
    let teacher = build_model(&small_model(ModelVariant::MaxoutLocalGlobal)).unwrap();
    let crops = gen_patient_cohort(&synth(0.5)).unwrap().crops();
    let eval = |s| infer_pseudo_labels(&teacher, &crops, false, 1, &mut seeded(s)).unwrap();
    assert_eq!(eval(1), eval(2));
    assert!(eval(1).labels().iter().all(|p| (0.0..=1.0).contains(p)));
    let noised = |s| infer_pseudo_labels(&teacher, &crops, true, 1, &mut seeded(s)).unwrap();
    assert_ne!(noised(1).labels(), noised(2).labels());
    assert_eq!(noised(3), noised(3));
}

fn loop_config(iterations: usize, epochs: usize) -> SelfTrainConfig {
    SelfTrainConfig {
        iterations,
        model: small_model(ModelVariant::LocalGlobalLinear),
        student_variants: vec![ModelVariant::MaxoutLocalGlobal],
        train: train_config(epochs),
        seed: 21,
        ..SelfTrainConfig::default()
    }
}

#[test]
fn single_round_is_supervised_training() {
    let config = loop_config(1, 2);
    let set = labeled(0.5);
    let out = self_train_loop(&config, &set, &[], None).unwrap();
    assert_eq!(out.records.len(), 1);

    let seed = derive_seed(config.seed, 0);
    let mut model = build_model(&ModelConfig {
        seed: derive_seed(seed, 0),
        ..config.model.clone()
    })
    .unwrap();
    train_supervised(
        &mut model,
        &set,
        &config.train,
        &config.teacher_noise,
        &MixupConfig::disabled(),
        &config.augment,
        &mut stream(seed, 1),
    )
    .unwrap();
    assert_eq!(model.store, out.model.store);
}

#[test]
fn near_chance_teacher_with_strict_threshold_warns() {
    let config = SelfTrainConfig {
        confidence_threshold: 0.49,
        ..loop_config(2, 0)
    };
    let unlabeled = gen_patient_cohort(&synth(0.5)).unwrap().crops();
    let out = self_train_loop(&config, &labeled(0.5), &unlabeled, None).unwrap();
    let round = &out.records[1];
    assert_eq!(round.pseudo_kept, 0, "{round:?}");
    assert_eq!(round.train_size, labeled(0.5).len());
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("0.49"));
}

#[test]
fn loop_is_deterministic_and_records_every_round() {
    let config = loop_config(3, 2);
    let cohort = gen_patient_cohort(&synth(0.5)).unwrap();
    let set = labeled(0.5);
    let a = self_train_loop(&config, &set, &cohort.crops(), None).unwrap();
    let b = self_train_loop(&config, &set, &cohort.crops(), None).unwrap();
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.records, b.records);
    let variants: Vec<_> = a.records.iter().map(|r| r.variant).collect();
    assert_eq!(
        variants,
        vec![ModelVariant::LocalGlobalLinear, ModelVariant::MaxoutLocalGlobal, ModelVariant::MaxoutLocalGlobal]
    );
    assert!(a.records[1..].iter().all(|r| r.train_size == set.len() + r.pseudo_kept));
}

#[test]
fn warm_start_requires_matching_variants() {
    let config = SelfTrainConfig {
        warm_start: true,
        ..loop_config(2, 2)
    };
    let crops = gen_patient_cohort(&synth(0.5)).unwrap().crops();
    assert!(self_train_loop(&config, &labeled(0.5), &crops, None).is_err());
    let same = SelfTrainConfig {
        student_variants: Vec::new(),
        student_noise: NoiseToggles::full(),
        ..config
    };
    let out = self_train_loop(&same, &labeled(0.5), &crops, None).unwrap();
    assert_eq!(out.records.len(), 2);
}
