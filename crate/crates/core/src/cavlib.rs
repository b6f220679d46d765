//! Linear concept probes and concept activation vectors (CAVs).
//!
//! A probe is an L2-regularised logistic regression separating the tap
//! activations of concept images from those of a negative set. Its unit
//! weight vector, oriented toward the concept, is the CAV.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tinynet::{sigmoid, Network, Tensor3};

/// Held-out accuracy below which a probe is flagged.
pub const LOW_ACCURACY: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

impl Probe {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias + self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub concept: String,
    pub tap: String,
    pub neg_set_index: usize,
    pub accuracy: f64,
    /// Unit-norm direction over the flattened tap.
    pub direction: Vec<f64>,
}

/// Row `i` is the flattened tap activation of `images[i]`.
pub fn extract_activations(model: &Network, images: &[Tensor3], tap: &str) -> Result<Vec<Vec<f64>>> {
    model.spec().tap_index(tap)?;
    images.iter().map(|x| model.tap_activation(x, tap)).collect()
}

fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(rng::derive_index(seed, "probe/split", n as u64)));
    let held = n / 3;
    let train = idx.split_off(held);
    (train, idx)
}

fn accuracy(probe: &Probe, rows: &[(&[f64], f64)]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let hits = rows
        .iter()
        .filter(|(x, y)| (probe.decision(x) > 0.0) == (*y > 0.5))
        .count();
    hits as f64 / rows.len() as f64
}

/// Trains a logistic probe with full-batch gradient descent from zero.
///
/// Each class is split 2/3 train, 1/3 held out with a permutation that
/// depends only on the seed and the class size, so swapping the two sets
/// swaps the splits as well.
pub fn train_probe(pos: &[Vec<f64>], neg: &[Vec<f64>], seed: u64, config: &ProbeConfig) -> Result<Probe> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("probe needs nonempty positive and negative sets".into()));
    }
    let dim = pos[0].len();
    if let Some(bad) = pos.iter().chain(neg).find(|r| r.len() != dim) {
        return Err(Error::Shape(format!("activation rows of length {dim} and {}", bad.len())));
    }
    let (pos_train, pos_held) = split_indices(pos.len(), seed);
    let (neg_train, neg_held) = split_indices(neg.len(), seed);
    let rows = |p: &[usize], n: &[usize]| -> Vec<(&[f64], f64)> {
        p.iter()
            .map(|&i| (pos[i].as_slice(), 1.0))
            .chain(n.iter().map(|&i| (neg[i].as_slice(), 0.0)))
            .collect()
    };
    let train = rows(&pos_train, &neg_train);
    let held = rows(&pos_held, &neg_held);

    let mut probe = Probe {
        weight: vec![0.0; dim],
        bias: 0.0,
        train_accuracy: 0.0,
        heldout_accuracy: 0.0,
    };
    let m = train.len() as f64;
    let mut gw = vec![0.0; dim];
    for _ in 0..config.steps {
        gw.iter_mut().zip(&probe.weight).for_each(|(g, w)| *g = config.l2 * w);
        let mut gb = 0.0;
        for (x, y) in &train {
            let r = sigmoid(probe.decision(x)) - y;
            gb += r / m;
            gw.iter_mut().zip(x.iter()).for_each(|(g, v)| *g += r * v / m);
        }
        probe.weight.iter_mut().zip(&gw).for_each(|(w, g)| *w -= config.lr * g);
        probe.bias -= config.lr * gb;
    }
    probe.train_accuracy = accuracy(&probe, &train);
    probe.heldout_accuracy = if held.is_empty() {
        probe.train_accuracy
    } else {
        accuracy(&probe, &held)
    };
    if probe.heldout_accuracy < LOW_ACCURACY {
        log::warn!(
            "probe held-out accuracy {:.3} is below {LOW_ACCURACY}; the concept may not be linearly decodable at this tap",
            probe.heldout_accuracy
        );
    }
    Ok(probe)
}

/// Unit direction of the probe weight, pointing toward the positive class.
pub fn cav_of(probe: &Probe, concept: &str, tap: &str, neg_set_index: usize) -> Result<Cav> {
    let norm = probe.weight.iter().map(|w| w * w).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateProbe);
    }
    Ok(Cav {
        concept: concept.to_string(),
        tap: tap.to_string(),
        neg_set_index,
        accuracy: probe.heldout_accuracy,
        direction: probe.weight.iter().map(|w| w / norm).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct CavRecord {
    concept: String,
    tap: String,
    neg_set_index: usize,
    accuracy: f64,
    direction: String,
}

pub fn encode_direction(direction: &[f64]) -> String {
    let bytes: Vec<u8> = direction.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_direction(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Invalid(format!("bad base64 direction: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!("direction has {} bytes, not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn bundle_to_json(cavs: &[Cav]) -> Result<String> {
    let records: Vec<CavRecord> = cavs
        .iter()
        .map(|c| CavRecord {
            concept: c.concept.clone(),
            tap: c.tap.clone(),
            neg_set_index: c.neg_set_index,
            accuracy: c.accuracy,
            direction: encode_direction(&c.direction),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn bundle_from_json(text: &str) -> Result<Vec<Cav>> {
    let records: Vec<CavRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .map(|r| {
            Ok(Cav {
                direction: decode_direction(&r.direction)?,
                concept: r.concept,
                tap: r.tap,
                neg_set_index: r.neg_set_index,
                accuracy: r.accuracy,
            })
        })
        .collect()
}

pub fn load_bundle(path: &Path) -> Result<Vec<Cav>> {
    let text = fs::read_to_string(path)?;
    bundle_from_json(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::NetworkSpec;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn clusters(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut r = rng::seeded(seed);
        let n = Normal::new(0.0, 0.5).unwrap();
        let mut draw = |cx: f64| (0..45).map(|_| vec![cx + n.sample(&mut r), n.sample(&mut r)]).collect::<Vec<_>>();
        (draw(3.0), draw(-3.0))
    }

    #[test]
    fn separable_clusters_are_perfectly_probed() {
        let (pos, neg) = clusters(1);
        let p = train_probe(&pos, &neg, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(p.heldout_accuracy, 1.0);
        let cav = cav_of(&p, "X", "t", 0).unwrap();
        assert!(cav.direction[0] > 0.9);
    }

    #[test]
    fn identical_sets_are_at_chance() {
        let (pos, _) = clusters(2);
        for seed in 0..5 {
            let p = train_probe(&pos, &pos, seed, &ProbeConfig::default()).unwrap();
            assert!(p.heldout_accuracy <= 0.65);
            assert!(p.weight.iter().all(|w| w.abs() < 1e-9));
        }
    }

    #[test]
    fn label_swap_negates_the_cav() {
        let (pos, neg) = clusters(3);
        let a = cav_of(&train_probe(&pos, &neg, 9, &ProbeConfig::default()).unwrap(), "X", "t", 0).unwrap();
        let b = cav_of(&train_probe(&neg, &pos, 9, &ProbeConfig::default()).unwrap(), "X", "t", 0).unwrap();
        let cos: f64 = a.direction.iter().zip(&b.direction).map(|(x, y)| x * y).sum();
        assert!(cos <= -0.999, "{cos}");
    }

    #[test]
    fn normalisation_and_zero_weight() {
        let mut p = Probe {
            weight: vec![3.0, 4.0],
            bias: 0.0,
            train_accuracy: 1.0,
            heldout_accuracy: 1.0,
        };
        assert_eq!(cav_of(&p, "X", "t", 0).unwrap().direction, vec![0.6, 0.8]);
        p.weight = vec![-3.0, -4.0];
        assert_eq!(cav_of(&p, "X", "t", 0).unwrap().direction, vec![-0.6, -0.8]);
        p.weight = vec![0.0, 0.0];
        assert!(matches!(cav_of(&p, "X", "t", 0), Err(Error::DegenerateProbe)));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(train_probe(&[vec![1.0, 2.0]], &[vec![1.0]], 0, &ProbeConfig::default()).is_err());
        assert!(train_probe(&[], &[vec![1.0]], 0, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn activations_have_tap_shape() {
        let spec = NetworkSpec::default();
        let net = Network::init(spec.clone(), 4).unwrap();
        let imgs: Vec<Tensor3> = (0..45).map(|i| Tensor3::from_vec(3, 64, 64, vec![i as f64 / 45.0; 3 * 64 * 64])).collect();
        let acts = extract_activations(&net, &imgs, "block3.out").unwrap();
        assert_eq!((acts.len(), acts[0].len()), (45, 2048));
        let fwd = net.forward(&imgs[..3]).unwrap();
        assert_eq!(&fwd.taps["block3.out"][..], &acts[..3]);
        let zero = Network::zeros(spec).unwrap();
        assert!(extract_activations(&zero, &imgs[..2], "block2.out").unwrap().iter().flatten().all(|&v| v == 0.0));
        assert!(matches!(extract_activations(&net, &imgs[..1], "nope"), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let cav = Cav {
            concept: "MA".into(),
            tap: "block3.out".into(),
            neg_set_index: 3,
            accuracy: 0.9,
            direction: vec![0.6, -0.8],
        };
        let back = bundle_from_json(&bundle_to_json(std::slice::from_ref(&cav)).unwrap()).unwrap();
        assert_eq!(back[0].concept, "MA");
        assert_eq!(back[0].direction, vec![0.6f32 as f64, -0.8f32 as f64]);
        assert!(decode_direction("AAA").is_err());
    }

    proptest! {
        #[test]
        fn cavs_have_unit_norm(w in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            prop_assume!(w.iter().any(|v| v.abs() > 1e-6));
            let p = Probe { weight: w, bias: 0.0, train_accuracy: 1.0, heldout_accuracy: 1.0 };
            let c = cav_of(&p, "X", "t", 0).unwrap();
            let n: f64 = c.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
