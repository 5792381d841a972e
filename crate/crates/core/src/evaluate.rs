//! Threshold metrics, ROC/AUC and DeLong's paired AUC test.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// True positive rate, `TP / (TP + FN)`.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// False positive rate, `FP / (FP + TN)`.
    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            expected: vec![labels.len()],
            got: vec![scores.len()],
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {s} is not finite")));
    }
    Ok(())
}

fn check_both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(f_pr, t_pr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold producing each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Sweeps every distinct score as a threshold, highest first, and integrates
/// by the trapezoid rule. Tied scores move the curve in one diagonal step.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let (pos, neg) = check_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalized once at the end
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(t);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc: area / (pos as f64 * neg as f64),
    })
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = check_both_classes(labels)?;
    let mut twice = 0u64;
    for (&sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (&sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            twice += if sp > sn {
                2
            } else if sp == sn {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    /// Set when the difference is nonzero but its variance vanishes.
    pub degenerate: bool,
}

/// 1-based mid-ranks.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

/// Placement values `(V10 over positives, V01 over negatives)` and the AUC.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let rz = mid_ranks(&all);
    let rx = mid_ranks(pos);
    let ry = mid_ranks(neg);
    let v10: Vec<f64> = (0..pos.len()).map(|i| (rz[i] - rx[i]) / n).collect();
    let v01: Vec<f64> = (0..neg.len())
        .map(|j| 1.0 - (rz[pos.len() + j] - ry[j]) / m)
        .collect();
    let auc = v10.iter().sum::<f64>() / m;
    (v10, v01, auc)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / k, b.iter().sum::<f64>() / k);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1.0)
}

/// Paired DeLong test of `AUC_a − AUC_b` on the same cases.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLongResult> {
    check_inputs(scores_a, labels)?;
    check_inputs(scores_b, labels)?;
    let (m, n) = check_both_classes(labels)?;
    let split = |s: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pos = s.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&v, _)| v).collect();
        let neg = s.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&v, _)| v).collect();
        (pos, neg)
    };
    let (pa, na) = split(scores_a);
    let (pb, nb) = split(scores_b);
    let (v10a, v01a, auc_a) = placements(&pa, &na);
    let (v10b, v01b, auc_b) = placements(&pb, &nb);

    let s10 = covariance(&v10a, &v10a) + covariance(&v10b, &v10b) - 2.0 * covariance(&v10a, &v10b);
    let s01 = covariance(&v01a, &v01a) + covariance(&v01b, &v01b) - 2.0 * covariance(&v01a, &v01b);
    let variance = (s10 / m as f64 + s01 / n as f64).max(0.0);
    let diff = auc_a - auc_b;

    let (z, p_value, degenerate) = if diff == 0.0 {
        (0.0, 1.0, false)
    } else if variance == 0.0 {
        (f64::INFINITY.copysign(diff), 0.0, true)
    } else {
        let z = diff / variance.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0), false)
    };
    Ok(DeLongResult {
        auc_a,
        auc_b,
        variance,
        z,
        p_value,
        degenerate,
    })
}
