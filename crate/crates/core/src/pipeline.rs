//! End-to-end stages shared by the command-line driver and the acceptance
//! suite: preprocessing, grader training, CAV construction, TCAV reporting
//! and the concept bottleneck.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cavlib::Cav;
use crate::cbm::{self, BottleneckModel, EvalCase, HeadConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsReport};
use crate::synthgen::{
    assemble_concept_sets, augment_tensor, materialize, preprocess, split_by_patient, ClaheParams, Concept,
    ConceptSetConfig, DatasetSpec, LabeledImage, SetMode, Split,
};
use crate::tcav::{self, TcavConfig, TcavReport};
use crate::tinynet::{argmax, train_grader, Network, NetworkSpec, Tensor3, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: [f64; 3],
    pub clahe: ClaheParams,
    pub network: NetworkSpec,
    pub grader: TrainConfig,
    pub cbm: TrainConfig,
    pub head: HeadConfig,
    pub concept_sets: ConceptSetConfig,
    pub tcav: TcavConfig,
    /// 4 or 6.
    pub n_concepts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        // a short budget compensated by a larger step than Adam's default
        let train = TrainConfig {
            epochs: 15,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            split: [0.8, 0.1, 0.1],
            clahe: ClaheParams::default(),
            network: NetworkSpec::default(),
            grader: train.clone(),
            cbm: TrainConfig { epochs: 30, ..train },
            head: HeadConfig::default(),
            concept_sets: ConceptSetConfig::default(),
            tcav: TcavConfig::default(),
            n_concepts: 6,
        }
    }
}

impl PipelineConfig {
    /// Propagates the run seed into every stage that carries its own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = crate::rng::derive(seed, "pipeline/dataset");
        self.grader.seed = crate::rng::derive(seed, "pipeline/grader");
        self.cbm.seed = crate::rng::derive(seed, "pipeline/cbm");
        self.tcav.seed = crate::rng::derive(seed, "pipeline/tcav");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        self.grader.validate()?;
        self.cbm.validate()?;
        self.tcav.validate()?;
        self.network.tap_index(&self.tcav.tap)?;
        cbm::concept_set(self.n_concepts)?;
        if self.network.input_height != self.dataset.image_size || self.network.input_width != self.dataset.image_size {
            return Err(Error::Config(format!(
                "network input {}x{} does not match image size {}",
                self.network.input_height, self.network.input_width, self.dataset.image_size
            )));
        }
        Ok(())
    }

    pub fn concepts(&self) -> Result<&'static [Concept]> {
        cbm::concept_set(self.n_concepts)
    }
}

/// Dataset with its split and preprocessed network inputs.
pub struct Prepared {
    pub images: Vec<LabeledImage>,
    pub split: Split,
    pub inputs: Vec<Tensor3>,
}

impl Prepared {
    pub fn new(images: Vec<LabeledImage>, config: &PipelineConfig) -> Result<Self> {
        let pids: Vec<&str> = images.iter().map(|i| i.patient_id.as_str()).collect();
        let split = split_by_patient(&pids, config.split, crate::rng::derive(config.seed, "pipeline/split"))?;
        let inputs = images
            .iter()
            .map(|i| preprocess(&i.image, &config.clahe))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, split, inputs })
    }

    pub fn subset_inputs(&self, idx: &[usize]) -> Vec<Tensor3> {
        idx.iter().map(|&i| self.inputs[i].clone()).collect()
    }

    pub fn subset_grades(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| usize::from(self.images[i].grade)).collect()
    }

    pub fn subset_images(&self, idx: &[usize]) -> Vec<LabeledImage> {
        idx.iter().map(|&i| self.images[i].clone()).collect()
    }
}

fn augmenter(t: &Tensor3, seed: u64) -> Tensor3 {
    augment_tensor(t, seed)
}

pub fn train_grader_stage(data: &Prepared, config: &PipelineConfig) -> Result<TrainOutcome> {
    let net = Network::init(config.network.clone(), crate::rng::derive(config.grader.seed, "grader/init"))?;
    train_grader(
        net,
        &data.subset_inputs(&data.split.train),
        &data.subset_grades(&data.split.train),
        &data.subset_inputs(&data.split.val),
        &data.subset_grades(&data.split.val),
        &config.grader,
        Some(&augmenter),
    )
}

/// Grading metrics of a classifier network on the given indices.
pub fn grader_metrics(net: &Network, data: &Prepared, idx: &[usize]) -> Result<MetricsReport> {
    let pred = idx
        .iter()
        .map(|&i| Ok(argmax(&net.logits(&data.inputs[i])?)))
        .collect::<Result<Vec<_>>>()?;
    evalkit::evaluate(&data.subset_grades(idx), &pred, net.spec().n_outputs)
}

/// CAV ensembles for every concept, probing the training split.
pub fn build_cavs(
    grader: &Network,
    data: &Prepared,
    concepts: &[Concept],
    mode: SetMode,
    config: &PipelineConfig,
) -> Result<BTreeMap<Concept, Vec<Cav>>> {
    let pool = data.subset_images(&data.split.train);
    let sets_config = ConceptSetConfig {
        n_negative_sets: config.tcav.n_negative_sets,
        ..config.concept_sets
    };
    let mut out = BTreeMap::new();
    for &c in concepts {
        let sets = assemble_concept_sets(&pool, c, mode, &sets_config, crate::rng::derive(config.seed, "pipeline/sets"))?;
        let (pos, negs) = materialize(&pool, &sets, sets_config.mask_floor)?;
        let to_inputs = |imgs: &[image::RgbImage]| -> Result<Vec<Tensor3>> {
            imgs.iter().map(|i| preprocess(i, &config.clahe)).collect()
        };
        let pos = to_inputs(&pos)?;
        let negs = negs.iter().map(|s| to_inputs(s)).collect::<Result<Vec<_>>>()?;
        let cavs = tcav::train_cavs(grader, c, &pos, &negs, &config.tcav)?;
        let low = cavs.iter().filter(|c| c.accuracy < crate::cavlib::LOW_ACCURACY).count();
        log::info!(
            "{c}: {} CAVs, mean held-out accuracy {:.3}, {low} flagged",
            cavs.len(),
            cavs.iter().map(|c| c.accuracy).sum::<f64>() / cavs.len() as f64
        );
        out.insert(c, cavs);
    }
    Ok(out)
}

/// Test images of levels 1 to 4, at most `per_level` each.
pub fn tcav_level_images(data: &Prepared, config: &PipelineConfig) -> BTreeMap<u8, Vec<Tensor3>> {
    let grades: Vec<u8> = data.split.test.iter().map(|&i| data.images[i].grade).collect();
    tcav::sample_per_level(&grades, &[1, 2, 3, 4], config.tcav.per_level, config.tcav.seed)
        .into_iter()
        .map(|(l, idx)| (l, idx.iter().map(|&j| data.inputs[data.split.test[j]].clone()).collect()))
        .collect()
}

pub fn tcav_stage(
    grader: &Network,
    data: &Prepared,
    cavs: &BTreeMap<Concept, Vec<Cav>>,
    config: &PipelineConfig,
) -> Result<TcavReport> {
    let concepts: Vec<Concept> = cavs.keys().copied().collect();
    tcav::level_report(grader, &tcav_level_images(data, config), cavs, &concepts, &config.tcav)
}

pub fn train_cbm_stage(grader: &Network, data: &Prepared, config: &PipelineConfig) -> Result<(TrainOutcome, BottleneckModel)> {
    let concepts = config.concepts()?;
    let train = &data.split.train;
    let val = &data.split.val;
    let truth = |idx: &[usize]| idx.iter().map(|&i| data.images[i].concepts).collect::<Vec<_>>();
    let outcome = cbm::train_bottleneck(
        grader,
        concepts,
        &data.subset_inputs(train),
        &truth(train),
        &data.subset_grades(train),
        &data.subset_inputs(val),
        &truth(val),
        &config.cbm,
        Some(&augmenter),
    )?;
    let model = BottleneckModel::fit(
        outcome.network.clone(),
        concepts,
        &data.subset_inputs(train),
        &data.subset_grades(train),
        &config.head,
    )?;
    Ok((outcome, model))
}

pub fn eval_cases(model: &BottleneckModel, data: &Prepared, idx: &[usize]) -> Result<Vec<EvalCase>> {
    idx.iter()
        .map(|&i| {
            let img = &data.images[i];
            model.eval_case(&img.id, &data.inputs[i], &img.concepts, usize::from(img.grade))
        })
        .collect()
}

/// Grade metrics of the bottleneck plus concept accuracy and per-level
/// presence fractions.
pub fn cbm_metrics(model: &BottleneckModel, cases: &[EvalCase]) -> Result<MetricsReport> {
    let truth: Vec<usize> = cases.iter().map(|c| c.grade).collect();
    let pred: Vec<usize> = cases.iter().map(|c| model.head.predict(&c.probs)).collect();
    let mut report = evalkit::evaluate(&truth, &pred, model.head.bias.len())?;
    let bin: Vec<Vec<bool>> = cases
        .iter()
        .map(|c| c.probs.iter().map(|&p| p > cbm::THRESHOLD).collect())
        .collect();
    let true_concepts: Vec<Vec<bool>> = cases.iter().map(|c| c.truth.clone()).collect();
    report.concept_accuracy = Some(evalkit::concept_detection_accuracy(&true_concepts, &bin)?);
    let names: Vec<String> = model.concepts.iter().map(|c| c.to_string()).collect();
    report.presence_fractions = Some(evalkit::presence_fractions(&bin, &truth, &names, 5)?);
    Ok(report)
}
