//! Testing with concept activation vectors.
//!
//! The TCAV score of a concept for class `k` is the fraction of images whose
//! logit-`k` gradient at the tap has a strictly positive inner product with
//! the concept's CAV. Each concept gets one CAV per negative set; the
//! resulting score distribution is compared with that of random unit
//! directions at the same tap by a paired two-sided t-test.

pub mod stats;

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cavlib::{self, Cav, ProbeConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::Concept;
use crate::tinynet::{Network, Tensor3};

pub use stats::{paired_ttest, t_cdf, TTest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcavConfig {
    pub tap: String,
    pub alpha: f64,
    pub n_negative_sets: usize,
    /// Images scored per grade level.
    pub per_level: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
}

impl Default for TcavConfig {
    fn default() -> Self {
        Self {
            tap: "block3.out".into(),
            alpha: 0.05,
            n_negative_sets: 20,
            per_level: 50,
            seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

impl TcavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_negative_sets < 2 {
            return Err(Error::Config(format!(
                "at least 2 negative sets are needed for the t-test, got {}",
                self.n_negative_sets
            )));
        }
        if self.per_level == 0 {
            return Err(Error::Config("per_level must be positive".into()));
        }
        Ok(())
    }
}

pub fn directional_derivative(grad: &[f64], cav: &[f64]) -> Result<f64> {
    if grad.len() != cav.len() {
        return Err(Error::Shape(format!("gradient of length {} and CAV of length {}", grad.len(), cav.len())));
    }
    Ok(grad.iter().zip(cav).map(|(g, v)| g * v).sum())
}

/// Fraction of strictly positive derivatives; zeros count as negative.
pub fn score_from_derivatives(derivs: &[f64]) -> Result<f64> {
    if derivs.is_empty() {
        return Err(Error::Invalid("TCAV score of an empty image list".into()));
    }
    Ok(derivs.iter().filter(|&&d| d > 0.0).count() as f64 / derivs.len() as f64)
}

/// Logit-`class_k` gradients at `tap`, one row per image.
pub fn tap_gradients(model: &Network, images: &[Tensor3], tap: &str, class_k: usize) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| model.grad_wrt_tap(x, tap, class_k)).collect()
}

pub fn score_gradients(grads: &[Vec<f64>], direction: &[f64]) -> Result<f64> {
    let d = grads
        .iter()
        .map(|g| directional_derivative(g, direction))
        .collect::<Result<Vec<_>>>()?;
    score_from_derivatives(&d)
}

pub fn tcav_score(model: &Network, images: &[Tensor3], class_k: usize, cav: &Cav) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Invalid("TCAV score of an empty image list".into()));
    }
    score_gradients(&tap_gradients(model, images, &cav.tap, class_k)?, &cav.direction)
}

/// One CAV per negative set; probe seeds are derived from `seed`, the
/// concept and the set index.
pub fn train_cavs(
    model: &Network,
    concept: Concept,
    positives: &[Tensor3],
    negative_sets: &[Vec<Tensor3>],
    config: &TcavConfig,
) -> Result<Vec<Cav>> {
    let pos = cavlib::extract_activations(model, positives, &config.tap)?;
    negative_sets
        .iter()
        .enumerate()
        .map(|(i, neg_imgs)| {
            let neg = cavlib::extract_activations(model, neg_imgs, &config.tap)?;
            let seed = rng::derive_index(config.seed, &format!("cav/{concept}"), i as u64);
            let probe = cavlib::train_probe(&pos, &neg, seed, &config.probe)?;
            cavlib::cav_of(&probe, concept.name(), &config.tap, i)
        })
        .collect()
}

/// Scores of every CAV on one set of images.
pub fn tcav_ensemble(model: &Network, level_images: &[Tensor3], class_k: usize, cavs: &[Cav]) -> Result<Vec<f64>> {
    let Some(first) = cavs.first() else {
        return Err(Error::Invalid("empty CAV ensemble".into()));
    };
    let grads = tap_gradients(model, level_images, &first.tap, class_k)?;
    cavs.iter().map(|c| score_gradients(&grads, &c.direction)).collect()
}

/// `n` random unit directions of dimension `dim`.
pub fn random_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(rng::derive(seed, "tcav/random-directions"));
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub baseline_scores: Vec<f64>,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

impl ConceptScore {
    pub fn compare(scores: Vec<f64>, baseline_scores: Vec<f64>, alpha: f64) -> Result<Self> {
        let test = paired_ttest(&scores, &baseline_scores)?;
        Ok(Self {
            mean: stats::mean(&scores),
            std: stats::sample_std(&scores),
            scores,
            baseline_scores,
            t: test.t,
            p: test.p,
            significant: test.p < alpha,
        })
    }
}

/// Per grade level, per concept ensemble results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcavReport {
    pub levels: BTreeMap<u8, BTreeMap<Concept, ConceptScore>>,
}

impl TcavReport {
    pub fn get(&self, level: u8, concept: Concept) -> Option<&ConceptScore> {
        self.levels.get(&level)?.get(&concept)
    }

    /// Concept with the highest mean among the significant ones at `level`.
    pub fn top_significant(&self, level: u8) -> Option<Concept> {
        let mut best: Option<(Concept, f64)> = None;
        for (&c, s) in self.levels.get(&level)? {
            if s.significant && best.is_none_or(|(_, m)| s.mean > m) {
                best = Some((c, s.mean));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,concept,mean,std,t,p,significant\n");
        for (level, row) in &self.levels {
            for (c, s) in row {
                out.push_str(&format!(
                    "{level},{c},{:.6},{:.6},{:.6},{:.6e},{}\n",
                    s.mean, s.std, s.t, s.p, s.significant
                ));
            }
        }
        out
    }
}

/// Picks up to `per_level` indices of each level in `levels`, seeded.
pub fn sample_per_level(grades: &[u8], levels: &[u8], per_level: usize, seed: u64) -> BTreeMap<u8, Vec<usize>> {
    use rand::seq::SliceRandom;
    levels
        .iter()
        .map(|&l| {
            let mut idx: Vec<usize> = (0..grades.len()).filter(|&i| grades[i] == l).collect();
            idx.shuffle(&mut rng::seeded(rng::derive_index(seed, "tcav/level-subset", u64::from(l))));
            idx.truncate(per_level);
            idx.sort_unstable();
            (l, idx)
        })
        .collect()
}

/// Scores every concept's CAV ensemble at every level against the
/// random-direction baseline.
pub fn level_report(
    model: &Network,
    level_images: &BTreeMap<u8, Vec<Tensor3>>,
    cavs: &BTreeMap<Concept, Vec<Cav>>,
    concepts: &[Concept],
    config: &TcavConfig,
) -> Result<TcavReport> {
    config.validate()?;
    for c in concepts {
        match cavs.get(c) {
            None => return Err(Error::Config(format!("no concept sets or CAVs for concept {c}"))),
            Some(v) if v.len() != config.n_negative_sets => {
                return Err(Error::Config(format!(
                    "concept {c} has {} CAVs, expected {}",
                    v.len(),
                    config.n_negative_sets
                )))
            }
            Some(_) => {}
        }
    }
    let block = model.spec().tap_index(&config.tap)?;
    let baseline = random_directions(model.spec().tap_len(block), config.n_negative_sets, config.seed);
    let mut report = TcavReport::default();
    for (&level, images) in level_images {
        if images.is_empty() {
            log::warn!("no test images at level {level}; level omitted from the report");
            continue;
        }
        let grads = tap_gradients(model, images, &config.tap, usize::from(level))?;
        let base_scores = baseline
            .iter()
            .map(|d| score_gradients(&grads, d))
            .collect::<Result<Vec<_>>>()?;
        let mut row = BTreeMap::new();
        for &c in concepts {
            let scores = cavs[&c]
                .iter()
                .map(|cav| score_gradients(&grads, &cav.direction))
                .collect::<Result<Vec<_>>>()?;
            row.insert(c, ConceptScore::compare(scores, base_scores.clone(), config.alpha)?);
        }
        report.levels.insert(level, row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::NetworkSpec;
    use proptest::prelude::*;

    #[test]
    fn derivative_examples() {
        assert_eq!(directional_derivative(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(directional_derivative(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((directional_derivative(&[3.0, 4.0], &[0.6, 0.8]).unwrap() - 5.0).abs() < 1e-12);
        assert!(directional_derivative(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_derivatives(&[0.5, -0.2, 0.1, 0.3]).unwrap(), 0.75);
        assert_eq!(score_from_derivatives(&[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(score_from_derivatives(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(score_from_derivatives(&[]).is_err());
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            block_channels: vec![4, 6],
            n_outputs: 5,
        }
    }

    fn images(n: usize, seed: u64) -> Vec<Tensor3> {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| Tensor3::from_vec(3, 16, 16, (0..3 * 256).map(|_| r.random::<f64>()).collect()))
            .collect()
    }

    #[test]
    fn zero_model_scores_zero_and_is_insignificant() {
        let model = Network::zeros(small_spec()).unwrap();
        let cfg = TcavConfig {
            tap: "block2.out".into(),
            n_negative_sets: 4,
            ..TcavConfig::default()
        };
        let imgs = images(12, 1);
        let negs: Vec<Vec<Tensor3>> = (0..4).map(|i| images(6, 10 + i)).collect();
        // the zero model has identical (zero) activations everywhere, so the
        // probe is degenerate; use random directions as stand-in CAVs
        assert!(train_cavs(&model, Concept::Ma, &imgs[..6], &negs, &cfg).is_err());
        let dirs = random_directions(6 * 16, 4, 3);
        let cavs: Vec<Cav> = dirs
            .into_iter()
            .enumerate()
            .map(|(i, d)| Cav {
                concept: "MA".into(),
                tap: cfg.tap.clone(),
                neg_set_index: i,
                accuracy: 0.5,
                direction: d,
            })
            .collect();
        assert_eq!(tcav_ensemble(&model, &imgs, 1, &cavs).unwrap(), vec![0.0; 4]);
        let levels = BTreeMap::from([(1u8, imgs.clone())]);
        let report = level_report(&model, &levels, &BTreeMap::from([(Concept::Ma, cavs)]), &[Concept::Ma], &cfg).unwrap();
        let s = report.get(1, Concept::Ma).unwrap();
        assert_eq!((s.t, s.p, s.significant), (0.0, 1.0, false));
    }

    #[test]
    fn ensemble_is_reproducible_and_report_has_full_shape() {
        let model = Network::init(small_spec(), 5).unwrap();
        let cfg = TcavConfig {
            tap: "block2.out".into(),
            n_negative_sets: 3,
            ..TcavConfig::default()
        };
        let pos = images(9, 2);
        let negs: Vec<Vec<Tensor3>> = (0..3).map(|i| images(9, 20 + i)).collect();
        let mut cavs = BTreeMap::new();
        for c in Concept::ALL {
            cavs.insert(c, train_cavs(&model, c, &pos, &negs, &cfg).unwrap());
        }
        let levels: BTreeMap<u8, Vec<Tensor3>> = (1..=4).map(|l| (l, images(5, 100 + u64::from(l)))).collect();
        let a = level_report(&model, &levels, &cavs, &Concept::ALL, &cfg).unwrap();
        let b = level_report(&model, &levels, &cavs, &Concept::ALL, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.levels.len(), 4);
        assert!(a.levels.values().all(|r| r.len() == 6));
        for row in a.levels.values() {
            for s in row.values() {
                assert!(s.scores.iter().all(|x| (0.0..=1.0).contains(x)));
                assert!(s.std >= 0.0 && (0.0..=1.0).contains(&s.mean));
                assert_eq!(s.significant, s.p < cfg.alpha);
            }
        }
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 1 + 24);
        let json = serde_json::to_value(&a).unwrap();
        assert!(json["1"]["MA"]["scores"].is_array());
        let back: TcavReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.levels.len(), 4);
    }

    #[test]
    fn missing_concept_is_named() {
        let model = Network::init(small_spec(), 5).unwrap();
        let cfg = TcavConfig {
            tap: "block2.out".into(),
            ..TcavConfig::default()
        };
        let err = level_report(&model, &BTreeMap::new(), &BTreeMap::new(), &[Concept::Nv], &cfg).unwrap_err();
        assert!(err.to_string().contains("NV"));
    }

    #[test]
    fn per_level_sampling() {
        let grades: Vec<u8> = (0..300).map(|i| (i % 5) as u8).collect();
        let s = sample_per_level(&grades, &[1, 2, 3, 4], 50, 0);
        assert!(s.values().all(|v| v.len() == 50));
        assert!(s[&3].iter().all(|&i| grades[i] == 3));
        assert_eq!(s, sample_per_level(&grades, &[1, 2, 3, 4], 50, 0));
    }

    proptest! {
        #[test]
        fn negated_direction_complements_score(
            grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 1..20),
            seed in any::<u64>(),
        ) {
            let d = &random_directions(8, 1, seed)[0];
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            let derivs: Vec<f64> = grads.iter().map(|g| directional_derivative(g, d).unwrap()).collect();
            prop_assume!(derivs.iter().all(|&x| x != 0.0));
            let s = score_gradients(&grads, d).unwrap();
            let sn = score_gradients(&grads, &neg).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s + sn - 1.0).abs() < 1e-12);
        }
    }
}
