//! Percentile surrogates, test-time intervention, concept ranking and
//! incremental intervention curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::head::GradeHead;
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsReport};
use crate::synthgen::Concept;

/// Probability threshold separating "present" from "absent".
pub const THRESHOLD: f64 = 0.5;

/// Nearest-rank percentile of sorted values: element `ceil(p/100 * n)`
/// (1-based), clamped to the first element.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Low and high replacement values per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogates {
    pub concepts: Vec<Concept>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Surrogates {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.concepts.iter().enumerate() {
            if !(self.low[i] < self.high[i]) {
                return Err(Error::DegenerateSurrogate(c.to_string()));
            }
        }
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<Concept, [f64; 2]> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, [self.low[i], self.high[i]]))
            .collect()
    }

    pub fn from_map(concepts: &[Concept], map: &BTreeMap<Concept, [f64; 2]>) -> Result<Self> {
        let mut low = Vec::new();
        let mut high = Vec::new();
        for c in concepts {
            let [l, h] = map
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("no surrogate values for concept {c}")))?;
            low.push(*l);
            high.push(*h);
        }
        let s = Self {
            concepts: concepts.to_vec(),
            low,
            high,
        };
        s.validate()?;
        Ok(s)
    }

    /// Surrogate encoding of a true concept vector.
    pub fn of_truth(&self, truth: &[bool]) -> Vec<f64> {
        truth
            .iter()
            .enumerate()
            .map(|(i, &t)| if t { self.high[i] } else { self.low[i] })
            .collect()
    }
}

/// 1st and 99th nearest-rank percentiles of the training predictions.
pub fn fit_surrogates(predictions: &[Vec<f64>], concepts: &[Concept]) -> Result<Surrogates> {
    if predictions.is_empty() {
        return Err(Error::Invalid("cannot fit surrogates on zero predictions".into()));
    }
    if predictions.len() < 100 {
        log::warn!(
            "fitting surrogates on only {} predictions; extreme percentiles are coarse",
            predictions.len()
        );
    }
    if predictions.iter().any(|p| p.len() != concepts.len()) {
        return Err(Error::Shape(format!("prediction rows must have {} entries", concepts.len())));
    }
    let mut low = Vec::with_capacity(concepts.len());
    let mut high = Vec::with_capacity(concepts.len());
    for j in 0..concepts.len() {
        let mut col: Vec<f64> = predictions.iter().map(|p| p[j]).collect();
        col.sort_by(f64::total_cmp);
        low.push(nearest_rank(&col, 1.0));
        high.push(nearest_rank(&col, 99.0));
    }
    let s = Surrogates {
        concepts: concepts.to_vec(),
        low,
        high,
    };
    s.validate()?;
    Ok(s)
}

/// Replaces wrongly binarised predictions inside `subset` (concept
/// positions) with the surrogate of the true value.
pub fn intervene(pred: &[f64], truth: &[bool], surrogates: &Surrogates, subset: &[usize]) -> Result<Vec<f64>> {
    let m = surrogates.concepts.len();
    if pred.len() != m || truth.len() != m {
        return Err(Error::Shape(format!(
            "{} predictions and {} truth values for {m} concepts",
            pred.len(),
            truth.len()
        )));
    }
    let mut out = pred.to_vec();
    for &j in subset {
        if j >= m {
            return Err(Error::Invalid(format!("concept position {j} out of range for {m} concepts")));
        }
        if !(surrogates.low[j] < surrogates.high[j]) {
            return Err(Error::DegenerateSurrogate(surrogates.concepts[j].to_string()));
        }
        if (pred[j] > THRESHOLD) != truth[j] {
            out[j] = if truth[j] { surrogates.high[j] } else { surrogates.low[j] };
        }
    }
    Ok(out)
}

/// One evaluation image reduced to what intervention needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub probs: Vec<f64>,
    pub truth: Vec<bool>,
    pub grade: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub id: String,
    pub predicted: Vec<f64>,
    pub binarized: Vec<bool>,
    pub truth: Vec<bool>,
    pub corrected: Vec<f64>,
    pub grade_before: usize,
    pub grade_after: usize,
    pub true_grade: usize,
    pub subset: Vec<Concept>,
}

pub fn intervention_record(
    case: &EvalCase,
    head: &GradeHead,
    surrogates: &Surrogates,
    subset: &[usize],
) -> Result<InterventionRecord> {
    head.check_input(&case.probs)?;
    let corrected = intervene(&case.probs, &case.truth, surrogates, subset)?;
    Ok(InterventionRecord {
        id: case.id.clone(),
        predicted: case.probs.clone(),
        binarized: case.probs.iter().map(|&p| p > THRESHOLD).collect(),
        truth: case.truth.clone(),
        grade_before: head.predict(&case.probs),
        grade_after: head.predict(&corrected),
        corrected,
        true_grade: case.grade,
        subset: subset.iter().map(|&j| surrogates.concepts[j]).collect(),
    })
}

fn graded_metrics(
    head: &GradeHead,
    surrogates: &Surrogates,
    cases: &[EvalCase],
    subset: &[usize],
    n_classes: usize,
) -> Result<MetricsReport> {
    let mut truth = Vec::with_capacity(cases.len());
    let mut pred = Vec::with_capacity(cases.len());
    for c in cases {
        let v = intervene(&c.probs, &c.truth, surrogates, subset)?;
        truth.push(c.grade);
        pred.push(head.predict(&v));
    }
    evalkit::evaluate(&truth, &pred, n_classes)
}

/// Concepts ordered by the balanced accuracy reached when intervening on
/// each alone; ties keep the fixed concept order.
pub fn rank_concepts(
    head: &GradeHead,
    surrogates: &Surrogates,
    cases: &[EvalCase],
    n_classes: usize,
) -> Result<Vec<(Concept, f64)>> {
    let mut scored = Vec::with_capacity(surrogates.concepts.len());
    for (j, &c) in surrogates.concepts.iter().enumerate() {
        scored.push((c, graded_metrics(head, surrogates, cases, &[j], n_classes)?.balanced_accuracy));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    /// Only images graded wrongly without intervention.
    Misclassified,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Scope::Full),
            "misclassified" => Ok(Scope::Misclassified),
            _ => Err(Error::Invalid(format!("unknown scope `{s}` (expected full|misclassified)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStep {
    pub k: usize,
    pub intervened: Vec<Concept>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub scope: Scope,
    pub ordering: Vec<Concept>,
    pub case_ids: Vec<String>,
    pub steps: Vec<CurveStep>,
}

/// Cases whose un-intervened grade is wrong.
pub fn misclassified(head: &GradeHead, cases: &[EvalCase]) -> Vec<EvalCase> {
    cases
        .iter()
        .filter(|c| head.predict(&c.probs) != c.grade)
        .cloned()
        .collect()
}

/// Metrics after intervening on each prefix of `ordering`, k = 0..=n.
pub fn incremental_curve(
    head: &GradeHead,
    surrogates: &Surrogates,
    cases: &[EvalCase],
    ordering: &[Concept],
    scope: Scope,
    n_classes: usize,
) -> Result<Curve> {
    let mut sorted = ordering.to_vec();
    sorted.sort();
    let mut expected = surrogates.concepts.clone();
    expected.sort();
    if sorted != expected {
        return Err(Error::Invalid(format!(
            "ordering {ordering:?} is not a permutation of {:?}",
            surrogates.concepts
        )));
    }
    let selected: Vec<EvalCase> = match scope {
        Scope::Full => cases.to_vec(),
        Scope::Misclassified => misclassified(head, cases),
    };
    if selected.is_empty() {
        return Err(Error::Invalid(format!("no evaluation cases in scope {scope:?}")));
    }
    let positions: Vec<usize> = ordering
        .iter()
        .map(|c| surrogates.concepts.iter().position(|x| x == c).expect("checked permutation"))
        .collect();
    let steps = (0..=ordering.len())
        .map(|k| {
            Ok(CurveStep {
                k,
                intervened: ordering[..k].to_vec(),
                metrics: graded_metrics(head, surrogates, &selected, &positions[..k], n_classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Curve {
        scope,
        ordering: ordering.to_vec(),
        case_ids: selected.into_iter().map(|c| c.id).collect(),
        steps,
    })
}
