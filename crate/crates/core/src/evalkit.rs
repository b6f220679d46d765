//! Classification metrics and concept-detection summaries.
//!
//! Conventions: balanced accuracy averages recall over classes that occur in
//! the ground truth; macro precision averages over classes that were
//! predicted at least once; macro F1 averages over classes that occur in
//! either truth or prediction; multiclass MCC uses the Gorodkin
//! generalisation and is 0 when its denominator vanishes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square count matrix; entry `(i, j)` counts samples of true class `i`
/// predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Invalid(format!("label ({t}, {p}) outside {n_classes} classes")));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    (0..cm.n_classes).map(|i| cm.get(i, i)).sum::<u64>() as f64 / total as f64
}

/// Mean recall over classes with nonzero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = (0..cm.n_classes)
        .filter_map(|i| {
            let support = cm.row_sum(i);
            (support > 0).then(|| cm.get(i, i) as f64 / support as f64)
        })
        .collect();
    mean_or_zero(&recalls)
}

pub fn macro_precision(cm: &ConfusionMatrix) -> f64 {
    let values: Vec<f64> = (0..cm.n_classes)
        .filter_map(|j| {
            let predicted = cm.col_sum(j);
            (predicted > 0).then(|| cm.get(j, j) as f64 / predicted as f64)
        })
        .collect();
    mean_or_zero(&values)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let values: Vec<f64> = (0..cm.n_classes)
        .filter_map(|k| {
            let tp = cm.get(k, k) as f64;
            let denom = cm.row_sum(k) as f64 + cm.col_sum(k) as f64;
            (denom > 0.0).then(|| 2.0 * tp / denom)
        })
        .collect();
    mean_or_zero(&values)
}

/// Gorodkin's multiclass Matthews correlation coefficient.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c: f64 = (0..cm.n_classes).map(|k| cm.get(k, k) as f64).sum();
    let p: Vec<f64> = (0..cm.n_classes).map(|k| cm.col_sum(k) as f64).collect();
    let t: Vec<f64> = (0..cm.n_classes).map(|k| cm.row_sum(k) as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (c * s - pt) / denom
    }
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The grading metrics reported for one model or run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub precision: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_accuracy: Option<ConceptAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_fractions: Option<PresenceTable>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Invalid("confusion matrix is empty".into()));
    }
    Ok(MetricsReport {
        n,
        confusion: cm.rows(),
        accuracy: accuracy(cm),
        balanced_accuracy: balanced_accuracy(cm),
        f1: macro_f1(cm),
        mcc: mcc(cm),
        precision: macro_precision(cm),
        concept_accuracy: None,
        presence_fractions: None,
    })
}

/// Shorthand for `metrics(confusion(..))`.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    metrics(&confusion(y_true, y_pred, n_classes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAccuracy {
    pub overall: f64,
    pub per_concept: Vec<f64>,
    /// Mean of sensitivity and specificity per concept.
    pub per_concept_balanced: Vec<f64>,
}

fn check_concept_shapes(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<usize> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape(format!("{} truth rows vs {} prediction rows", truth.len(), pred.len())));
    }
    let m = truth[0].len();
    if truth.iter().chain(pred).any(|r| r.len() != m) {
        return Err(Error::Shape("concept rows differ in length".into()));
    }
    Ok(m)
}

/// Fraction of matching binary concept entries, overall and per concept.
pub fn concept_detection_accuracy(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<ConceptAccuracy> {
    let m = check_concept_shapes(truth, pred)?;
    let n = truth.len() as f64;
    let mut per_concept = vec![0.0; m];
    let mut per_concept_balanced = vec![0.0; m];
    for c in 0..m {
        let (mut tp, mut tn, mut pos, mut neg) = (0u64, 0u64, 0u64, 0u64);
        for (t, p) in truth.iter().zip(pred) {
            if t[c] {
                pos += 1;
                tp += u64::from(p[c]);
            } else {
                neg += 1;
                tn += u64::from(!p[c]);
            }
        }
        per_concept[c] = (tp + tn) as f64 / n;
        let mut rates = Vec::new();
        if pos > 0 {
            rates.push(tp as f64 / pos as f64);
        }
        if neg > 0 {
            rates.push(tn as f64 / neg as f64);
        }
        per_concept_balanced[c] = mean_or_zero(&rates);
    }
    let overall = per_concept.iter().sum::<f64>() / m.max(1) as f64;
    Ok(ConceptAccuracy {
        overall,
        per_concept,
        per_concept_balanced,
    })
}

/// Per grade level, the fraction of images with each concept predicted
/// present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceTable {
    pub concepts: Vec<String>,
    pub levels: BTreeMap<usize, Vec<f64>>,
}

impl PresenceTable {
    /// `level,<concept>...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level");
        for c in &self.concepts {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (level, fr) in &self.levels {
            let _ = write!(out, "{level}");
            for f in fr {
                let _ = write!(out, ",{f:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Levels without images are omitted with a warning.
pub fn presence_fractions(
    pred: &[Vec<bool>],
    grades: &[usize],
    concepts: &[String],
    n_levels: usize,
) -> Result<PresenceTable> {
    if pred.len() != grades.len() {
        return Err(Error::Shape(format!("{} predictions vs {} grades", pred.len(), grades.len())));
    }
    if pred.iter().any(|r| r.len() != concepts.len()) {
        return Err(Error::Shape("prediction rows do not match concept list".into()));
    }
    let mut levels = BTreeMap::new();
    for level in 0..n_levels {
        let rows: Vec<&Vec<bool>> = pred.iter().zip(grades).filter(|(_, &g)| g == level).map(|(p, _)| p).collect();
        if rows.is_empty() {
            log::warn!("no images at level {level}; omitted from presence fractions");
            continue;
        }
        let fr = (0..concepts.len())
            .map(|c| rows.iter().filter(|r| r[c]).count() as f64 / rows.len() as f64)
            .collect();
        levels.insert(level, fr);
    }
    Ok(PresenceTable {
        concepts: concepts.to_vec(),
        levels,
    })
}
