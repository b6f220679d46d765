//! Sequential concept bottleneck: a concept network fine-tuned from the
//! grader, a logistic-regression grade head over its concept probabilities,
//! and test-time intervention with percentile surrogates.

mod head;
mod intervention;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use head::{train_grade_head, GradeHead, HeadConfig};
pub use intervention::{
    fit_surrogates, incremental_curve, intervene, intervention_record, misclassified, nearest_rank, rank_concepts,
    Curve, CurveStep, EvalCase, InterventionRecord, Scope, Surrogates, THRESHOLD,
};

use crate::error::{Error, Result};
use crate::evalkit;
use crate::synthgen::{Concept, ConceptVector};
use crate::tinynet::{sigmoid, train_network, Augmenter, Checkpoint, Network, Targets, Tensor3, TrainConfig, TrainOutcome};

pub fn concept_set(count: usize) -> Result<&'static [Concept]> {
    Concept::set_of(count)
        .ok_or_else(|| Error::Config(format!("a bottleneck predicts 4 or 6 concepts, not {count}")))
}

/// Sigmoid concept probabilities of one image.
pub fn predict_concepts(model: &Network, input: &Tensor3) -> Result<Vec<f64>> {
    Ok(model.logits(input)?.into_iter().map(sigmoid).collect())
}

/// Mean per-concept balanced accuracy of thresholded predictions.
pub fn concept_score(model: &Network, inputs: &[Tensor3], truth: &[Vec<bool>]) -> Result<f64> {
    let pred = inputs
        .iter()
        .map(|x| Ok(predict_concepts(model, x)?.into_iter().map(|p| p > THRESHOLD).collect()))
        .collect::<Result<Vec<Vec<bool>>>>()?;
    let acc = evalkit::concept_detection_accuracy(truth, &pred)?;
    Ok(acc.per_concept_balanced.iter().sum::<f64>() / acc.per_concept_balanced.len() as f64)
}

/// Fine-tunes a concept network whose trunk starts from `grader`.
///
/// Training uses BCE with logits, grade-balanced sampling, and keeps the
/// epoch with the best validation mean per-concept balanced accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_bottleneck(
    grader: &Network,
    concepts: &[Concept],
    train_inputs: &[Tensor3],
    train_truth: &[ConceptVector],
    train_grades: &[usize],
    val_inputs: &[Tensor3],
    val_truth: &[ConceptVector],
    config: &TrainConfig,
    augment: Option<Augmenter<'_>>,
) -> Result<TrainOutcome> {
    concept_set(concepts.len())?;
    let spec = grader.spec().clone().with_outputs(concepts.len());
    let mut net = Network::init(spec, crate::rng::derive(config.seed, "cbm/head-init"))?;
    net.copy_trunk_from(grader)?;
    let targets = Targets::MultiLabel(
        train_truth
            .iter()
            .map(|v| v.select(concepts).into_iter().map(|b| f64::from(u8::from(b))).collect())
            .collect(),
    );
    let val: Vec<Vec<bool>> = val_truth.iter().map(|v| v.select(concepts)).collect();
    let mut select = |n: &Network| -> Result<f64> {
        if val_inputs.is_empty() {
            return Ok(0.0);
        }
        concept_score(n, val_inputs, &val)
    };
    let n_strata = train_grades.iter().max().map_or(1, |m| m + 1);
    train_network(
        net,
        train_inputs,
        &targets,
        train_grades,
        n_strata,
        config,
        augment,
        &mut select,
    )
}

/// Concept network plus grade head and surrogate table.
#[derive(Debug, Clone)]
pub struct BottleneckModel {
    pub network: Network,
    pub concepts: Vec<Concept>,
    pub head: GradeHead,
    pub surrogates: Surrogates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub concepts: Vec<Concept>,
    pub lr_weights: Vec<Vec<f64>>,
    pub lr_bias: Vec<f64>,
    pub surrogates: BTreeMap<Concept, [f64; 2]>,
}

impl BottleneckModel {
    /// Fits the grade head and surrogates on the network's training-set
    /// predictions.
    pub fn fit(
        network: Network,
        concepts: &[Concept],
        train_inputs: &[Tensor3],
        train_grades: &[usize],
        head_config: &HeadConfig,
    ) -> Result<Self> {
        concept_set(concepts.len())?;
        if network.spec().n_outputs != concepts.len() {
            return Err(Error::Shape(format!(
                "network has {} outputs for {} concepts",
                network.spec().n_outputs,
                concepts.len()
            )));
        }
        let preds = train_inputs
            .iter()
            .map(|x| predict_concepts(&network, x))
            .collect::<Result<Vec<_>>>()?;
        let surrogates = fit_surrogates(&preds, concepts)?;
        let head = train_grade_head(&preds, train_grades, head_config)?;
        Ok(Self {
            network,
            concepts: concepts.to_vec(),
            head,
            surrogates,
        })
    }

    pub fn predict_concepts(&self, input: &Tensor3) -> Result<Vec<f64>> {
        predict_concepts(&self.network, input)
    }

    pub fn grade(&self, concept_probs: &[f64]) -> Result<usize> {
        self.head.check_input(concept_probs)?;
        Ok(self.head.predict(concept_probs))
    }

    pub fn eval_case(&self, id: &str, input: &Tensor3, truth: &ConceptVector, grade: usize) -> Result<EvalCase> {
        Ok(EvalCase {
            id: id.to_string(),
            probs: self.predict_concepts(input)?,
            truth: truth.select(&self.concepts),
            grade,
        })
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            concepts: self.concepts.clone(),
            lr_weights: self.head.weights.clone(),
            lr_bias: self.head.bias.clone(),
            surrogates: self.surrogates.as_map(),
        }
    }

    pub fn from_parts(network: Network, sidecar: Sidecar) -> Result<Self> {
        concept_set(sidecar.concepts.len())?;
        if network.spec().n_outputs != sidecar.concepts.len() {
            return Err(Error::Shape(format!(
                "network has {} outputs, sidecar lists {} concepts",
                network.spec().n_outputs,
                sidecar.concepts.len()
            )));
        }
        let head = GradeHead {
            weights: sidecar.lr_weights,
            bias: sidecar.lr_bias,
        };
        if head.weights.len() != head.bias.len() || head.n_inputs() != sidecar.concepts.len() {
            return Err(Error::Shape("grade head weights do not match the concept list".into()));
        }
        let surrogates = Surrogates::from_map(&sidecar.concepts, &sidecar.surrogates)?;
        Ok(Self {
            network,
            concepts: sidecar.concepts,
            head,
            surrogates,
        })
    }

    /// Writes `<stem>.tnet` and `<stem>.json`.
    pub fn save(&self, checkpoint: &Checkpoint, stem: &Path) -> Result<()> {
        checkpoint.save(&stem.with_extension("tnet"))?;
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let network = Checkpoint::load(&stem.with_extension("tnet"))?.network()?;
        let path = stem.with_extension("json");
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_parts(network, sidecar)
    }
}
