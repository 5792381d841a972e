//! Synthetic nodule crops, simulated rater panels and patient cohorts.
//!
//! Benign nodules are smooth blobs. Malignant nodules carry an angular
//! radius modulation (shape), interior high-frequency texture, or both.
//! Difficulty shrinks the malignant cues and leaks weaker versions of them
//! into benign nodules.

use std::f64::consts::PI;

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::aggregate::{select_top_k, PatientCase, ScoredCrop, MAX_NODULES_PER_PATIENT};
use crate::error::{Error, Result};
use crate::preprocess::NoduleCrop;
use crate::rng::{derive_seed, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoduleClass {
    Benign,
    Malignant,
}

impl NoduleClass {
    pub fn label(self) -> u8 {
        match self {
            NoduleClass::Benign => 0,
            NoduleClass::Malignant => 1,
        }
    }
}

/// Patient strata: benign nodule, abnormal without cancer, normal, cancer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stratum {
    BenignNodule,
    AbnormalNoCancer,
    Normal,
    Cancer,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [
        Stratum::BenignNodule,
        Stratum::AbnormalNoCancer,
        Stratum::Normal,
        Stratum::Cancer,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_labeled_nodules: usize,
    pub n_patients: usize,
    /// Relative weights of 1..=5 nodules per patient.
    pub nodules_per_patient: [f64; MAX_NODULES_PER_PATIENT],
    /// Relative sizes of the four strata, in [`Stratum::ALL`] order.
    pub strata: [f64; 4],
    /// Chance that each additional nodule of a cancer patient is malignant.
    pub extra_malignant_rate: f64,
    pub difficulty: f64,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_labeled_nodules: 200,
            n_patients: 400,
            nodules_per_patient: [0.3, 0.25, 0.2, 0.15, 0.1],
            strata: [500.0, 500.0, 402.0, 603.0],
            extra_malignant_rate: 0.25,
            difficulty: 0.5,
            crop_size: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_labeled_nodules == 0 || self.n_patients == 0 {
            return Err(Error::invalid("synthetic counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::invalid(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if self.crop_size < 8 {
            return Err(Error::invalid("crop_size must be at least 8"));
        }
        if !(0.0..=1.0).contains(&self.extra_malignant_rate) {
            return Err(Error::invalid("extra_malignant_rate outside [0, 1]"));
        }
        for (name, w) in [("nodules_per_patient", &self.nodules_per_patient[..]), ("strata", &self.strata[..])] {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!("{name} weights must be non-negative with a positive sum")));
            }
        }
        Ok(())
    }
}

/// Largest cue amplitudes at difficulty 0.
const SPICULE_AMPLITUDE: f64 = 0.45;
const TEXTURE_AMPLITUDE: f64 = 0.35;
const PARENCHYMA_LEVEL: f64 = 0.04;
const PARENCHYMA_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct Cues {
    spicule: f64,
    texture: f64,
}

fn cues(class: NoduleClass, difficulty: f64, rng: &mut Rng) -> Cues {
    match class {
        NoduleClass::Malignant => {
            let strength = 1.0 - difficulty * rng.random::<f64>();
            // shape only, texture only, or both
            let (s, t) = match rng.random_range(0..3) {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                _ => (0.7, 0.7),
            };
            Cues {
                spicule: strength * s * SPICULE_AMPLITUDE,
                texture: strength * t * TEXTURE_AMPLITUDE,
            }
        }
        NoduleClass::Benign => {
            let leak = difficulty;
            Cues {
                spicule: leak * rng.random::<f64>() * SPICULE_AMPLITUDE,
                texture: leak * rng.random::<f64>() * TEXTURE_AMPLITUDE,
            }
        }
    }
}

/// One synthetic crop with values in `[0, 1]`.
pub fn gen_nodule_volume(class: NoduleClass, difficulty: f64, size: usize, rng: &mut Rng) -> NoduleCrop {
    let cue = cues(class, difficulty, rng);
    let radius = rng.random_range(2.5..4.5);
    let amplitude = rng.random_range(0.6..0.85);
    let edge = rng.random_range(0.5..0.9);
    let lobes = rng.random_range(5..8) as f64;
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let half = (size / 2) as f64;
    let center: [f64; 3] = std::array::from_fn(|_| half + rng.random_range(-0.5..0.5));
    let texture = Normal::new(0.0, 1.0).expect("unit normal");
    let background = Normal::new(PARENCHYMA_LEVEL, PARENCHYMA_NOISE).expect("positive std");

    let mut data = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let (dz, dy, dx) = (z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]);
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                let modulation = ((lobes * dy.atan2(dx) + phases[0]).sin()
                    + (lobes * dz.atan2(dx) + phases[1]).sin()
                    + (lobes * dz.atan2(dy) + phases[2]).sin())
                    / 3.0;
                let boundary = radius * (1.0 + cue.spicule * modulation);
                let occupancy = 1.0 / (1.0 + ((r - boundary) / edge).exp());
                let grain = 1.0 + cue.texture * texture.sample(rng);
                let value = background.sample(rng) + amplitude * occupancy * grain;
                data.push(value.clamp(0.0, 1.0));
            }
        }
    }
    NoduleCrop {
        size,
        data,
        patient_id: 0,
        rank: 0,
    }
}

/// Four ratings on the 1..=5 malignancy scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RaterScores(pub [u8; 4]);

const BENIGN_RATINGS: [f64; 5] = [0.2, 0.5, 0.2, 0.1, 0.0];
const MALIGNANT_RATINGS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 0.2];

pub fn gen_rater_scores(class: NoduleClass, rng: &mut Rng) -> RaterScores {
    let weights = match class {
        NoduleClass::Benign => BENIGN_RATINGS,
        NoduleClass::Malignant => MALIGNANT_RATINGS,
    };
    let dist = WeightedIndex::new(weights).expect("valid rating weights");
    RaterScores(std::array::from_fn(|_| dist.sample(rng) as u8 + 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaterLabel {
    Label(u8),
    Excluded,
}

/// Median of four ratings (mean of the middle two): below 3 is benign,
/// above 3 malignant, exactly 3 excluded.
pub fn aggregate_rater_median(scores: RaterScores) -> RaterLabel {
    let mut s = scores.0;
    s.sort_unstable();
    let twice_median = s[1] as u32 + s[2] as u32;
    match twice_median.cmp(&6) {
        std::cmp::Ordering::Less => RaterLabel::Label(0),
        std::cmp::Ordering::Greater => RaterLabel::Label(1),
        std::cmp::Ordering::Equal => RaterLabel::Excluded,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub crops: Vec<NoduleCrop>,
    pub labels: Vec<u8>,
    pub true_classes: Vec<NoduleClass>,
    pub excluded: usize,
}

const LABELED_STREAM: u64 = 1;
const COHORT_STREAM: u64 = 2;

/// Balanced draw of `n_labeled_nodules` crops, labeled by rater median with
/// median-3 nodules dropped.
pub fn gen_labeled_dataset(config: &SynthConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let base = derive_seed(config.seed, LABELED_STREAM);
    let mut out = LabeledDataset {
        crops: Vec::new(),
        labels: Vec::new(),
        true_classes: Vec::new(),
        excluded: 0,
    };
    for i in 0..config.n_labeled_nodules {
        let mut rng = stream(base, i as u64);
        let class = if i % 2 == 0 { NoduleClass::Benign } else { NoduleClass::Malignant };
        let mut crop = gen_nodule_volume(class, config.difficulty, config.crop_size, &mut rng);
        match aggregate_rater_median(gen_rater_scores(class, &mut rng)) {
            RaterLabel::Excluded => out.excluded += 1,
            RaterLabel::Label(label) => {
                crop.patient_id = i as u64;
                out.crops.push(crop);
                out.labels.push(label);
                out.true_classes.push(class);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortPatient {
    pub case: PatientCase,
    pub stratum: Stratum,
    /// Detection score per crop, aligned with `case.crops`.
    pub detection_scores: Vec<f64>,
    /// Hidden nodule truth, for diagnostics only.
    pub nodule_truth: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patients: Vec<CohortPatient>,
}

impl Cohort {
    pub fn cases(&self) -> Vec<PatientCase> {
        self.patients.iter().map(|p| p.case.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.patients.iter().map(|p| p.case.label.unwrap_or(0)).collect()
    }

    pub fn crops(&self) -> Vec<NoduleCrop> {
        self.patients.iter().flat_map(|p| p.case.crops.iter().cloned()).collect()
    }
}

/// Splits `total` by `weights` with the largest-remainder rule.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Patients with 1..=5 nodules each; cancer patients hold at least one
/// malignant nodule, all others only benign ones.
pub fn gen_patient_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let base = derive_seed(config.seed, COHORT_STREAM);
    let counts = apportion(config.n_patients, &config.strata);
    let count_dist = WeightedIndex::new(config.nodules_per_patient).map_err(|e| Error::invalid(e.to_string()))?;
    let mut patients = Vec::with_capacity(config.n_patients);
    let strata = Stratum::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&s, &n)| std::iter::repeat_n(s, n));
    for (pid, stratum) in strata.enumerate() {
        let mut rng = stream(base, pid as u64);
        let n = count_dist.sample(&mut rng) + 1;
        let cancer = stratum == Stratum::Cancer;
        let mut detections = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        let primary = rng.random_range(0..n);
        for j in 0..n {
            let malignant = cancer && (j == primary || rng.random::<f64>() < config.extra_malignant_rate);
            let class = if malignant { NoduleClass::Malignant } else { NoduleClass::Benign };
            let mut crop = gen_nodule_volume(class, config.difficulty, config.crop_size, &mut rng);
            crop.patient_id = pid as u64;
            crop.rank = j;
            detections.push(ScoredCrop {
                crop,
                score: rng.random_range(0.5..1.0),
            });
            truth.push(class.label());
        }
        let ranked = select_top_k(&detections, MAX_NODULES_PER_PATIENT)?;
        let mut crops = Vec::with_capacity(ranked.len());
        let mut scores = Vec::with_capacity(ranked.len());
        let mut nodule_truth = Vec::with_capacity(ranked.len());
        for (rank, det) in ranked.into_iter().enumerate() {
            // before ranking, `rank` holds the detection index
            nodule_truth.push(truth[det.crop.rank]);
            scores.push(det.score);
            crops.push(NoduleCrop { rank, ..det.crop });
        }
        patients.push(CohortPatient {
            case: PatientCase::new(pid as u64, crops, Some(cancer as u8))?,
            stratum,
            detection_scores: scores,
            nodule_truth,
        });
    }
    Ok(Cohort { patients })
}

/// Labeled set, unlabeled cohort and held-out test cohort from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub labeled: LabeledDataset,
    pub unlabeled: Cohort,
    pub test: Cohort,
}

const TEST_STREAM: u64 = 3;

/// The test cohort reuses `config` with `n_test_patients` patients and an
/// independent seed.
pub fn gen_benchmark(config: &SynthConfig, n_test_patients: usize) -> Result<Benchmark> {
    let test_config = SynthConfig {
        n_patients: n_test_patients,
        seed: derive_seed(config.seed, TEST_STREAM),
        ..config.clone()
    };
    Ok(Benchmark {
        labeled: gen_labeled_dataset(config)?,
        unlabeled: gen_patient_cohort(config)?,
        test: gen_patient_cohort(&test_config)?,
    })
}

/// Hand-written malignancy score: high-frequency energy of the three
/// central slices, normalized by their intensity mass.
pub fn boundary_gradient_energy(crop: &NoduleCrop) -> f64 {
    let views = crate::preprocess::extract_views(crop);
    let s = crop.size;
    let (mut energy, mut mass) = (0.0, 0.0);
    for v in &views {
        for y in 1..s - 1 {
            for x in 1..s - 1 {
                let lap = 4.0 * v.at(y, x) - v.at(y - 1, x) - v.at(y + 1, x) - v.at(y, x - 1) - v.at(y, x + 1);
                energy += lap * lap;
                mass += v.at(y, x) * v.at(y, x);
            }
        }
    }
    energy / mass.max(1e-12)
}
