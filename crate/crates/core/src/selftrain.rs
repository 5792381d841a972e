//! Noisy-student self-training: teacher training, pseudo-labeling,
//! confidence filtering and noised student rounds.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::aggregate::{predict_cohort, PatientCase};
use crate::blocks::ForwardOptions;
use crate::error::{Error, Result};
use crate::evaluate::roc_curve;
use crate::mixup::{mixup_batch, MixupConfig};
use crate::model::{build_model, clone_model, view_tensor, ActiveNoise, ModelConfig, ModelState, ModelVariant};
use crate::optim::SgdConfig;
use crate::preprocess::{augment_27, extract_views, AugmentConfig, NoduleCrop};
use crate::rng::{derive_seed, seeded, stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseToggles {
    pub augmentation: bool,
    pub stochastic_depth: bool,
    pub dropout: bool,
    pub noised_teacher: bool,
}

impl Default for NoiseToggles {
    /// Dropout only.
    fn default() -> Self {
        NoiseToggles {
            augmentation: false,
            stochastic_depth: false,
            dropout: true,
            noised_teacher: false,
        }
    }
}

impl NoiseToggles {
    pub fn none() -> Self {
        NoiseToggles {
            augmentation: false,
            stochastic_depth: false,
            dropout: false,
            noised_teacher: false,
        }
    }

    /// Augmentation, stochastic depth and dropout; un-noised teacher.
    pub fn full() -> Self {
        NoiseToggles {
            augmentation: true,
            stochastic_depth: true,
            dropout: true,
            noised_teacher: false,
        }
    }

    pub fn active(&self) -> ActiveNoise {
        ActiveNoise {
            dropout: self.dropout,
            stochastic_depth: self.stochastic_depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixupStage {
    FinalIteration,
    AllStudentIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        self.sgd.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainConfig {
    /// Total rounds including the teacher round.
    pub iterations: usize,
    pub label_mode: LabelMode,
    /// Keep pseudo labels with `|p − 0.5| ≥ τ`.
    pub confidence_threshold: f64,
    pub warm_start: bool,
    /// Architecture and seed of the teacher; students copy its sizes.
    pub model: ModelConfig,
    /// Student variant per student round; the last entry repeats. Empty means
    /// the teacher's variant.
    pub student_variants: Vec<ModelVariant>,
    pub teacher_noise: NoiseToggles,
    pub student_noise: NoiseToggles,
    pub mixup: MixupConfig,
    pub mixup_stage: MixupStage,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            iterations: 3,
            label_mode: LabelMode::Soft,
            confidence_threshold: 0.3,
            warm_start: false,
            model: ModelConfig::default(),
            student_variants: Vec::new(),
            teacher_noise: NoiseToggles::default(),
            student_noise: NoiseToggles::default(),
            mixup: MixupConfig::disabled(),
            mixup_stage: MixupStage::FinalIteration,
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.confidence_threshold) {
            return Err(Error::invalid(format!(
                "confidence threshold {} outside [0, 0.5)",
                self.confidence_threshold
            )));
        }
        self.model.validate()?;
        self.mixup.validate()?;
        self.train.validate()
    }

    /// Variant trained in round `t` (0 is the teacher).
    pub fn variant_at(&self, t: usize) -> ModelVariant {
        if t == 0 || self.student_variants.is_empty() {
            return self.model.variant;
        }
        let i = (t - 1).min(self.student_variants.len() - 1);
        self.student_variants[i]
    }

    fn mixup_at(&self, t: usize) -> MixupConfig {
        let on = match self.mixup_stage {
            MixupStage::FinalIteration => t + 1 == self.iterations,
            MixupStage::AllStudentIterations => t > 0,
        };
        if on && t > 0 {
            self.mixup
        } else {
            MixupConfig::disabled()
        }
    }
}

/// Labeled crops with `[0, 1]` targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub crops: Vec<NoduleCrop>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(crops: Vec<NoduleCrop>, targets: Vec<f64>) -> Result<Self> {
        if crops.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} crops but {} targets",
                crops.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("target {t} outside [0, 1]")));
        }
        Ok(TrainingSet { crops, targets })
    }

    pub fn from_labels(crops: Vec<NoduleCrop>, labels: &[u8]) -> Result<Self> {
        Self::new(crops, labels.iter().map(|&l| l as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Copy of the model after `snapshot_epoch` epochs, when requested.
    pub snapshot: Option<ModelState>,
}

/// Candidate input patches per crop: the 3 clean views, or the 27
/// augmented patches.
fn patch_pool(set: &TrainingSet, augmentation: bool, augment: &AugmentConfig, rng: &mut Rng) -> Result<Vec<Vec<Vec<f64>>>> {
    set.crops
        .iter()
        .map(|crop| {
            Ok(if augmentation {
                augment_27(crop, augment, rng)?.into_iter().map(|p| p.data).collect()
            } else {
                extract_views(crop).into_iter().map(|p| p.data).collect()
            })
        })
        .collect()
}

/// SGD over shuffled batches. Each epoch visits every crop once through one
/// patch drawn from its pool. Trailing batches of a single example are
/// skipped since batch normalization needs two.
pub fn train_supervised(
    model: &mut ModelState,
    set: &TrainingSet,
    train: &TrainConfig,
    noise: &NoiseToggles,
    mixup: &MixupConfig,
    augment: &AugmentConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    train_with_snapshot(model, set, train, noise, mixup, augment, None, rng)
}

#[allow(clippy::too_many_arguments)]
fn train_with_snapshot(
    model: &mut ModelState,
    set: &TrainingSet,
    train: &TrainConfig,
    noise: &NoiseToggles,
    mixup: &MixupConfig,
    augment: &AugmentConfig,
    snapshot_epoch: Option<usize>,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    train.validate()?;
    mixup.validate()?;
    let s = model.config.input_size;
    if let Some(c) = set.crops.iter().find(|c| c.size != s) {
        return Err(Error::invalid(format!("crop size {} does not match input size {s}", c.size)));
    }
    model.set_noise(noise.active());
    let pool = patch_pool(set, noise.augmentation, augment, rng)?;
    let mut outcome = TrainOutcome::default();
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..train.epochs {
        if snapshot_epoch == Some(epoch) {
            outcome.snapshot = Some(clone_model(model));
        }
        order.shuffle(rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(train.batch_size).filter(|b| b.len() >= 2) {
            let mut data = Vec::with_capacity(batch.len() * s * s);
            for &i in batch {
                let choice = rng.random_range(0..pool[i].len());
                data.extend_from_slice(&pool[i][choice]);
            }
            let inputs = Tensor::new(vec![batch.len(), 1, s, s], data)?;
            let targets = Tensor::from_vec(batch.iter().map(|&i| set.targets[i]).collect());
            let mixed = mixup_batch(&inputs, &targets, mixup, rng)?;
            total += model.train_step(&mixed.inputs, &mixed.targets, &train.sgd, rng)?;
            batches += 1;
        }
        outcome.loss_trace.push(if batches == 0 { f64::NAN } else { total / batches as f64 });
        model.epoch += 1;
    }
    if snapshot_epoch == Some(train.epochs) {
        outcome.snapshot = Some(clone_model(model));
    }
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Index into the unlabeled crop list.
    pub crop: usize,
    pub label: f64,
    /// `|p − 0.5| · 2`.
    pub confidence: f64,
    pub iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabeledSet {
    pub fn from_probabilities(probs: &[f64], iteration: usize) -> Self {
        PseudoLabeledSet {
            entries: probs
                .iter()
                .enumerate()
                .map(|(crop, &p)| PseudoLabel {
                    crop,
                    label: p,
                    confidence: (p - 0.5).abs() * 2.0,
                    iteration,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Mean per-crop probability over the three center views, either in eval
/// mode or with the teacher's noise layers active.
pub fn infer_pseudo_labels(
    teacher: &ModelState,
    crops: &[NoduleCrop],
    noised_teacher: bool,
    iteration: usize,
    rng: &mut Rng,
) -> Result<PseudoLabeledSet> {
    if crops.is_empty() {
        return Ok(PseudoLabeledSet::default());
    }
    let s = teacher.config.input_size;
    let mut data = Vec::with_capacity(crops.len() * 3 * s * s);
    for crop in crops {
        crop.check_normalized()?;
        data.extend(view_tensor(crop)?.into_data());
    }
    let views = Tensor::new(vec![3 * crops.len(), 1, s, s], data)?;
    let opts = if noised_teacher {
        ForwardOptions::noised_inference()
    } else {
        ForwardOptions::eval()
    };
    let probs = teacher.infer(&views, opts, rng)?;
    let per_crop: Vec<f64> = probs.data().chunks(3).map(|c| c.iter().sum::<f64>() / 3.0).collect();
    Ok(PseudoLabeledSet::from_probabilities(&per_crop, iteration))
}

/// Keeps entries with `|p − 0.5| ≥ τ`, preserving order.
pub fn filter_confident(pseudo: &PseudoLabeledSet, threshold: f64) -> Result<PseudoLabeledSet> {
    if !(0.0..0.5).contains(&threshold) {
        return Err(Error::invalid(format!("confidence threshold {threshold} outside [0, 0.5)")));
    }
    Ok(PseudoLabeledSet {
        entries: pseudo
            .entries
            .iter()
            .filter(|e| (e.label - 0.5).abs() >= threshold)
            .copied()
            .collect(),
    })
}

/// `p ← 1` if `p ≥ 0.5`, else 0.
pub fn harden_labels(pseudo: &PseudoLabeledSet) -> PseudoLabeledSet {
    PseudoLabeledSet {
        entries: pseudo
            .entries
            .iter()
            .map(|e| PseudoLabel {
                label: if e.label >= 0.5 { 1.0 } else { 0.0 },
                ..*e
            })
            .collect(),
    }
}

/// Patient cohort used to score each round.
#[derive(Clone, Copy, Debug)]
pub struct EvalCohort<'a> {
    pub cases: &'a [PatientCase],
    pub labels: &'a [u8],
}

pub fn patient_auc(model: &ModelState, cohort: &EvalCohort) -> Result<f64> {
    let scores = predict_cohort(model, cohort.cases)?;
    Ok(roc_curve(&scores, cohort.labels)?.auc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub variant: ModelVariant,
    pub pseudo_total: usize,
    pub pseudo_kept: usize,
    pub train_size: usize,
    pub final_loss: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub model: ModelState,
    pub records: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// A trained teacher plus what later rounds need from it.
#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub model: ModelState,
    /// Partially trained copy, kept when warm starting.
    pub snapshot: Option<ModelState>,
    pub record: IterationRecord,
}

fn round_seed(config: &SelfTrainConfig, t: usize) -> u64 {
    derive_seed(config.seed, t as u64)
}

fn snapshot_epoch(config: &SelfTrainConfig) -> Option<usize> {
    config.warm_start.then_some(config.train.epochs / 2)
}

/// Round 0: the teacher on labeled data only.
pub fn train_teacher(config: &SelfTrainConfig, labeled: &TrainingSet, eval: Option<&EvalCohort>) -> Result<TeacherRun> {
    config.validate()?;
    let seed = round_seed(config, 0);
    let mut model = build_model(&ModelConfig {
        seed: derive_seed(seed, 0),
        ..config.model.clone()
    })?;
    let mut rng = stream(seed, 1);
    let outcome = train_with_snapshot(
        &mut model,
        labeled,
        &config.train,
        &config.teacher_noise,
        &MixupConfig::disabled(),
        &config.augment,
        snapshot_epoch(config),
        &mut rng,
    )?;
    let auc = eval.map(|e| patient_auc(&model, e)).transpose()?;
    Ok(TeacherRun {
        record: IterationRecord {
            iteration: 0,
            variant: model.config.variant,
            pseudo_total: 0,
            pseudo_kept: 0,
            train_size: labeled.len(),
            final_loss: outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
            auc,
        },
        model,
        snapshot: outcome.snapshot,
    })
}

/// Student rounds `1..iterations`, starting from a trained teacher.
pub fn continue_from_teacher(
    config: &SelfTrainConfig,
    teacher: &TeacherRun,
    labeled: &TrainingSet,
    unlabeled: &[NoduleCrop],
    eval: Option<&EvalCohort>,
) -> Result<SelfTrainOutcome> {
    config.validate()?;
    let mut records = vec![teacher.record.clone()];
    let mut warnings = Vec::new();
    let mut current = teacher.model.clone();
    let mut snapshot = teacher.snapshot.clone();
    for t in 1..config.iterations {
        let seed = round_seed(config, t);
        let mut rng = stream(seed, 1);
        let pseudo = infer_pseudo_labels(&current, unlabeled, config.student_noise.noised_teacher, t, &mut rng)?;
        let mut kept = filter_confident(&pseudo, config.confidence_threshold)?;
        if config.label_mode == LabelMode::Hard {
            kept = harden_labels(&kept);
        }
        if kept.is_empty() {
            let msg = format!(
                "round {t}: no pseudo label passed the confidence threshold {}; training on labeled data only",
                config.confidence_threshold
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut union = labeled.clone();
        for e in &kept.entries {
            union.crops.push(unlabeled[e.crop].clone());
            union.targets.push(e.label);
        }

        let variant = config.variant_at(t);
        let mut student = if config.warm_start {
            let warm = snapshot
                .take()
                .ok_or_else(|| Error::invalid("warm start requested without a teacher snapshot"))?;
            if warm.config.variant != variant {
                return Err(Error::invalid(format!(
                    "warm start needs matching variants, teacher is {} and student {variant}",
                    warm.config.variant
                )));
            }
            warm
        } else {
            build_model(&ModelConfig {
                variant,
                seed: derive_seed(seed, 0),
                ..config.model.clone()
            })?
        };
        let outcome = train_with_snapshot(
            &mut student,
            &union,
            &config.train,
            &config.student_noise,
            &config.mixup_at(t),
            &config.augment,
            snapshot_epoch(config),
            &mut rng,
        )?;
        snapshot = outcome.snapshot;
        let auc = eval.map(|e| patient_auc(&student, e)).transpose()?;
        records.push(IterationRecord {
            iteration: t,
            variant,
            pseudo_total: pseudo.len(),
            pseudo_kept: kept.len(),
            train_size: union.len(),
            final_loss: outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
            auc,
        });
        current = student;
    }
    Ok(SelfTrainOutcome {
        model: current,
        records,
        warnings,
    })
}

/// Teacher round followed by `iterations − 1` noised student rounds, each
/// student becoming the next teacher.
pub fn self_train_loop(
    config: &SelfTrainConfig,
    labeled: &TrainingSet,
    unlabeled: &[NoduleCrop],
    eval: Option<&EvalCohort>,
) -> Result<SelfTrainOutcome> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    if unlabeled.is_empty() && config.iterations > 1 {
        return Err(Error::Empty("unlabeled set"));
    }
    let teacher = train_teacher(config, labeled, eval)?;
    continue_from_teacher(config, &teacher, labeled, unlabeled, eval)
}

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (j, i) in idx.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    Ok(folds)
}
