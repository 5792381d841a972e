//! Patient-level fusion of nodule probabilities by noisy-or.

use crate::error::{Error, Result};
use crate::model::{predict_nodules, ModelState};
use crate::preprocess::NoduleCrop;

pub const MAX_NODULES_PER_PATIENT: usize = 5;

/// Above this, products switch to log space.
const LOG_SPACE_THRESHOLD: f64 = 0.999;

/// A crop with its detector confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCrop {
    pub crop: NoduleCrop,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub patient_id: u64,
    /// Ranked by detection score, highest first.
    pub crops: Vec<NoduleCrop>,
    pub label: Option<u8>,
}

impl PatientCase {
    pub fn new(patient_id: u64, crops: Vec<NoduleCrop>, label: Option<u8>) -> Result<Self> {
        if crops.is_empty() || crops.len() > MAX_NODULES_PER_PATIENT {
            return Err(Error::invalid(format!(
                "patient {patient_id} has {} crops, expected 1 to {MAX_NODULES_PER_PATIENT}",
                crops.len()
            )));
        }
        if matches!(label, Some(l) if l > 1) {
            return Err(Error::invalid(format!("patient {patient_id} label must be 0 or 1")));
        }
        Ok(PatientCase {
            patient_id,
            crops,
            label,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodulePrediction {
    pub probability: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrediction {
    pub patient_id: u64,
    pub probability: f64,
    pub nodules: Vec<NodulePrediction>,
}

/// The `k` highest-scored detections, stable on ties.
pub fn select_top_k(detections: &[ScoredCrop], k: usize) -> Result<Vec<ScoredCrop>> {
    if detections.is_empty() {
        return Err(Error::Empty("detections"));
    }
    if detections.iter().any(|d| d.score.is_nan()) {
        return Err(Error::invalid("detection score is NaN"));
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    Ok(ranked)
}

/// `1 − ∏(1 − p_i)`.
pub fn noisy_or(probabilities: &[f64]) -> Result<f64> {
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    if probabilities.iter().any(|&p| p > LOG_SPACE_THRESHOLD) {
        let log_survival: f64 = probabilities.iter().map(|&p| (-p).ln_1p()).sum();
        return Ok(-log_survival.exp_m1());
    }
    Ok(1.0 - probabilities.iter().map(|p| 1.0 - p).product::<f64>())
}

pub fn predict_patient(model: &ModelState, case: &PatientCase) -> Result<PatientPrediction> {
    let probs = predict_nodules(model, &case.crops)?;
    let nodules = probs
        .iter()
        .zip(&case.crops)
        .enumerate()
        .map(|(i, (&probability, _))| NodulePrediction { probability, rank: i })
        .collect();
    Ok(PatientPrediction {
        patient_id: case.patient_id,
        probability: noisy_or(&probs)?,
        nodules,
    })
}

/// Patient probabilities for a cohort, batching all crops into one pass.
pub fn predict_cohort(model: &ModelState, cases: &[PatientCase]) -> Result<Vec<f64>> {
    let crops: Vec<NoduleCrop> = cases.iter().flat_map(|c| c.crops.iter().cloned()).collect();
    let probs = predict_nodules(model, &crops)?;
    let mut out = Vec::with_capacity(cases.len());
    let mut offset = 0;
    for case in cases {
        out.push(noisy_or(&probs[offset..offset + case.crops.len()])?);
        offset += case.crops.len();
    }
    Ok(out)
}
