//! Positive and balanced negative example sets for concept probing.

use std::collections::{BTreeMap, HashSet};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::concepts::Concept;
use super::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    /// Whole images.
    Full,
    /// Crops around the concept's annotation mask, resized to the input size.
    Masked,
}

impl std::str::FromStr for SetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(SetMode::Full),
            "masked" => Ok(SetMode::Masked),
            _ => Err(Error::Invalid(format!("unknown set mode `{s}` (expected full|masked)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConceptSetConfig {
    pub set_size: usize,
    pub n_negative_sets: usize,
    /// Largest allowed gap between positive and negative presence of any
    /// other concept.
    pub balance_tolerance: f64,
    /// Minimum crop side in masked mode, in pixels.
    pub mask_floor: u32,
}

impl Default for ConceptSetConfig {
    fn default() -> Self {
        Self {
            set_size: 45,
            n_negative_sets: 20,
            balance_tolerance: 0.10,
            mask_floor: 24,
        }
    }
}

/// Indices into the dataset slice the sets were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExampleSets {
    pub concept: Concept,
    pub mode: SetMode,
    pub positives: Vec<usize>,
    pub negative_sets: Vec<Vec<usize>>,
}

fn hamming(a: u8, b: u8) -> u32 {
    (a ^ b).count_ones()
}

/// Draws `set_size` distinct positives and `n_negative_sets` negative sets.
///
/// Each negative is matched to a positive with the same presence pattern of
/// the other five concepts when possible, else the nearest pattern by
/// Hamming distance, which keeps co-occurring findings balanced.
pub fn assemble_concept_sets(
    dataset: &[LabeledImage],
    concept: Concept,
    mode: SetMode,
    config: &ConceptSetConfig,
    seed: u64,
) -> Result<ConceptExampleSets> {
    let n = config.set_size;
    let mut pos: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].concepts.has(concept))
        .filter(|&i| mode == SetMode::Full || dataset[i].mask(concept).is_some_and(mask_nonempty))
        .collect();
    if pos.len() < n {
        return Err(Error::DataScarcity {
            concept: concept.to_string(),
            detail: format!("{} positive images available, {n} required", pos.len()),
        });
    }
    pos.shuffle(&mut rng::seeded(rng::derive_index(seed, "positives", concept.index() as u64)));
    pos.truncate(n);

    let mut by_pattern: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, img) in dataset.iter().enumerate() {
        if !img.concepts.has(concept) {
            by_pattern.entry(img.concepts.others_pattern(concept)).or_default().push(i);
        }
    }
    let n_neg: usize = by_pattern.values().map(Vec::len).sum();
    if n_neg < n {
        return Err(Error::DataScarcity {
            concept: concept.to_string(),
            detail: format!("{n_neg} negative images available, {n} required"),
        });
    }

    let mut negative_sets = Vec::with_capacity(config.n_negative_sets);
    for s in 0..config.n_negative_sets {
        let mut r = rng::seeded(rng::derive_index(seed, &format!("negatives/{concept}"), s as u64));
        let mut used = HashSet::new();
        let mut set = Vec::with_capacity(n);
        for &p in &pos {
            let target = dataset[p].concepts.others_pattern(concept);
            let mut patterns: Vec<u8> = by_pattern.keys().copied().collect();
            patterns.sort_by_key(|&q| (hamming(q, target), q));
            let pick = patterns.into_iter().find_map(|q| {
                let free: Vec<usize> = by_pattern[&q].iter().copied().filter(|i| !used.contains(i)).collect();
                (!free.is_empty()).then(|| free[r.random_range(0..free.len())])
            });
            let i = pick.expect("enough negatives were checked above");
            used.insert(i);
            set.push(i);
        }
        rebalance(dataset, concept, &pos, &mut set, &by_pattern, config.balance_tolerance, &mut r);
        check_balance(dataset, concept, &pos, &set, config.balance_tolerance)?;
        negative_sets.push(set);
    }
    Ok(ConceptExampleSets {
        concept,
        mode,
        positives: pos,
        negative_sets,
    })
}

fn gaps(dataset: &[LabeledImage], concept: Concept, pos: &[usize], neg: &[usize]) -> Vec<f64> {
    Concept::ALL
        .into_iter()
        .filter(|&o| o != concept)
        .map(|o| presence(dataset, pos, o) - presence(dataset, neg, o))
        .collect()
}

/// Swaps negatives for unused ones while that shrinks the squared presence
/// gaps, until every gap is within `tol`.
fn rebalance(
    dataset: &[LabeledImage],
    concept: Concept,
    pos: &[usize],
    set: &mut [usize],
    by_pattern: &BTreeMap<u8, Vec<usize>>,
    tol: f64,
    r: &mut rng::Rng,
) {
    let cost = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
    for _ in 0..4 * set.len() {
        let current = gaps(dataset, concept, pos, set);
        if current.iter().all(|g| g.abs() <= tol) {
            return;
        }
        let used: HashSet<usize> = set.iter().copied().collect();
        let reps: Vec<usize> = by_pattern
            .values()
            .filter_map(|g| {
                let free: Vec<usize> = g.iter().copied().filter(|i| !used.contains(i)).collect();
                (!free.is_empty()).then(|| free[r.random_range(0..free.len())])
            })
            .collect();
        let mut best = (cost(&current), None);
        for j in 0..set.len() {
            let old = set[j];
            for &cand in &reps {
                set[j] = cand;
                let c = cost(&gaps(dataset, concept, pos, set));
                if c < best.0 - 1e-12 {
                    best = (c, Some((j, cand)));
                }
            }
            set[j] = old;
        }
        match best.1 {
            Some((j, cand)) => set[j] = cand,
            None => return,
        }
    }
}

fn presence(dataset: &[LabeledImage], idx: &[usize], c: Concept) -> f64 {
    idx.iter().filter(|&&i| dataset[i].concepts.has(c)).count() as f64 / idx.len() as f64
}

fn check_balance(dataset: &[LabeledImage], concept: Concept, pos: &[usize], neg: &[usize], tol: f64) -> Result<()> {
    for other in Concept::ALL.into_iter().filter(|&o| o != concept) {
        let (a, b) = (presence(dataset, pos, other), presence(dataset, neg, other));
        if (a - b).abs() > tol + 1e-12 {
            return Err(Error::Infeasible(format!(
                "cannot balance {other} between {concept} positives ({a:.2}) and negatives ({b:.2})"
            )));
        }
    }
    Ok(())
}

/// Largest presence gap of any other concept over all negative sets.
pub fn max_imbalance(dataset: &[LabeledImage], sets: &ConceptExampleSets) -> f64 {
    let mut worst: f64 = 0.0;
    for neg in &sets.negative_sets {
        for other in Concept::ALL.into_iter().filter(|&o| o != sets.concept) {
            let gap = presence(dataset, &sets.positives, other) - presence(dataset, neg, other);
            worst = worst.max(gap.abs());
        }
    }
    worst
}

fn mask_nonempty(m: &GrayImage) -> bool {
    m.pixels().any(|p| p.0[0] > 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Tight box around the mask, widened to at least `floor` pixels per side
/// around the mask centroid and clamped to the image.
pub fn crop_box(mask: &GrayImage, floor: u32) -> Option<CropBox> {
    let (w, h) = mask.dimensions();
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] > 0 {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            sx += f64::from(x);
            sy += f64::from(y);
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let (cx, cy) = (sx / count as f64, sy / count as f64);
    let axis = |lo: u32, hi: u32, centre: f64, len: u32| -> (u32, u32) {
        let tight = hi - lo + 1;
        if tight >= floor.min(len) {
            return (lo, tight);
        }
        let side = floor.min(len);
        let start = (centre + 0.5 - f64::from(side) / 2.0).floor();
        let start = start.clamp(0.0, f64::from(len - side)) as u32;
        (start, side)
    };
    let (x, width) = axis(x0, x1, cx, w);
    let (y, height) = axis(y0, y1, cy, h);
    Some(CropBox { x, y, width, height })
}

fn crop_resize(img: &RgbImage, b: &CropBox, size: u32) -> RgbImage {
    let view = imageops::crop_imm(img, b.x, b.y, b.width, b.height).to_image();
    imageops::resize(&view, size, size, FilterType::Triangle)
}

/// Example images for the sets: `(positives, negative_sets)`.
///
/// In masked mode every negative is cropped with the box of the positive it
/// was paired with.
pub fn materialize(
    dataset: &[LabeledImage],
    sets: &ConceptExampleSets,
    mask_floor: u32,
) -> Result<(Vec<RgbImage>, Vec<Vec<RgbImage>>)> {
    match sets.mode {
        SetMode::Full => {
            let get = |idx: &[usize]| idx.iter().map(|&i| dataset[i].image.clone()).collect::<Vec<_>>();
            Ok((get(&sets.positives), sets.negative_sets.iter().map(|s| get(s)).collect()))
        }
        SetMode::Masked => {
            let boxes = sets
                .positives
                .iter()
                .map(|&i| {
                    dataset[i]
                        .mask(sets.concept)
                        .and_then(|m| crop_box(m, mask_floor))
                        .ok_or_else(|| Error::Invalid(format!("{} has no {} mask", dataset[i].id, sets.concept)))
                })
                .collect::<Result<Vec<_>>>()?;
            let size = dataset[sets.positives[0]].image.width();
            let pos = sets
                .positives
                .iter()
                .zip(&boxes)
                .map(|(&i, b)| crop_resize(&dataset[i].image, b, size))
                .collect();
            let neg = sets
                .negative_sets
                .iter()
                .map(|s| s.iter().zip(&boxes).map(|(&i, b)| crop_resize(&dataset[i].image, b, size)).collect())
                .collect();
            Ok((pos, neg))
        }
    }
}
