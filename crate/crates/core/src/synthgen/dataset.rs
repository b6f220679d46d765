use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::concepts::{grade_of, Concept, ConceptVector};
use super::render::{render, GlyphStyle};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub image_size: usize,
    /// Fraction of images per grade level 0..=4.
    pub level_proportions: [f64; 5],
    /// Patients own between 1 and this many images.
    pub max_images_per_patient: usize,
    /// Plants IRMA into 10% of level-2 images without changing their grade.
    pub irma_label_noise: bool,
    pub glyphs: BTreeMap<Concept, GlyphStyle>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_images: 2500,
            image_size: 64,
            level_proportions: [0.40, 0.15, 0.20, 0.13, 0.12],
            max_images_per_patient: 3,
            irma_label_noise: false,
            glyphs: Concept::ALL.into_iter().map(|c| (c, GlyphStyle::default_for(c))).collect(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.level_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.level_proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config(format!("level proportions must be in [0,1] and sum to 1 (sum {sum})")));
        }
        if self.n_images < 50 {
            return Err(Error::Config(format!("n_images must be at least 50, got {}", self.n_images)));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.max_images_per_patient == 0 {
            return Err(Error::Config("max_images_per_patient must be at least 1".into()));
        }
        for (c, s) in &self.glyphs {
            if s.count[0] == 0 || s.count[0] > s.count[1] || !(s.size[0] > 0.0) || s.size[0] > s.size[1] {
                return Err(Error::Config(format!("invalid glyph style for {c}")));
            }
        }
        Ok(())
    }

    /// Exact per-level image counts by largest remainder.
    pub fn level_counts(&self) -> Result<[usize; 5]> {
        self.validate()?;
        let n = self.n_images as f64;
        let mut counts = [0usize; 5];
        let mut rema: Vec<(f64, usize)> = Vec::new();
        for (l, &p) in self.level_proportions.iter().enumerate() {
            let exact = p * n;
            counts[l] = exact.floor() as usize;
            rema.push((exact - exact.floor(), l));
        }
        let mut left = self.n_images - counts.iter().sum::<usize>();
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, l) in rema {
            if left == 0 {
                break;
            }
            if self.level_proportions[l] > 0.0 {
                counts[l] += 1;
                left -= 1;
            }
        }
        for l in 0..5 {
            if self.level_proportions[l] > 0.0 && counts[l] == 0 {
                return Err(Error::Config(format!(
                    "level {l} requested with proportion {} but {} images leave it empty",
                    self.level_proportions[l], self.n_images
                )));
            }
        }
        Ok(counts)
    }

    fn style(&self, c: Concept) -> GlyphStyle {
        self.glyphs.get(&c).copied().unwrap_or_else(|| GlyphStyle::default_for(c))
    }
}

/// One generated fundus-like image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub patient_id: String,
    pub grade: u8,
    pub concepts: ConceptVector,
    pub image: RgbImage,
    pub masks: BTreeMap<Concept, GrayImage>,
}

impl LabeledImage {
    pub fn mask(&self, c: Concept) -> Option<&GrayImage> {
        self.masks.get(&c)
    }
}

/// Draws a concept set consistent with `level`.
fn concepts_for_level(level: u8, rng: &mut rng::Rng) -> ConceptVector {
    let mut v = ConceptVector::empty();
    match level {
        0 => {}
        1 => v.set(Concept::Ma, true),
        2 => {
            loop {
                for c in [Concept::He, Concept::Ex, Concept::Se] {
                    v.set(c, rng.random_bool(0.5));
                }
                if !v.is_empty() {
                    break;
                }
            }
            v.set(Concept::Ma, rng.random_bool(0.7));
        }
        3 | 4 => {
            for c in Concept::FOUR {
                v.set(c, rng.random_bool(0.6));
            }
            if level == 3 {
                v.set(Concept::Irma, true);
            } else {
                v.set(Concept::Irma, rng.random_bool(0.4));
                v.set(Concept::Nv, true);
            }
        }
        _ => unreachable!("grades are 0..=4"),
    }
    v
}

/// Generates the full synthetic dataset. Deterministic in `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    let counts = spec.level_counts()?;
    let mut rng = rng::seeded(rng::derive(spec.seed, "dataset/levels"));
    let mut levels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| std::iter::repeat_n(l as u8, n))
        .collect();
    levels.shuffle(&mut rng);

    let mut patients = Vec::with_capacity(levels.len());
    let mut pid = 0usize;
    while patients.len() < levels.len() {
        let k = rng.random_range(1..=spec.max_images_per_patient);
        for _ in 0..k.min(levels.len() - patients.len()) {
            patients.push(format!("P{pid:05}"));
        }
        pid += 1;
    }

    let styles = |c: Concept| spec.style(c);
    let mut out = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let mut r = rng::seeded(rng::derive_index(spec.seed, "dataset/image", i as u64));
        let mut concepts = concepts_for_level(level, &mut r);
        let grade = grade_of(&concepts);
        debug_assert_eq!(grade, level);
        if spec.irma_label_noise && level == 2 && r.random_bool(0.1) {
            concepts.set(Concept::Irma, true);
        }
        let rendered = render(spec.image_size, &concepts, &styles, &mut r);
        out.push(LabeledImage {
            id: format!("img{i:05}"),
            patient_id: patients[i].clone(),
            grade,
            concepts,
            image: rendered.image,
            masks: rendered.masks.into_iter().collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub patient_id: String,
    pub grade: u8,
    #[serde(rename = "MA")]
    pub ma: bool,
    #[serde(rename = "HE")]
    pub he: bool,
    #[serde(rename = "EX")]
    pub ex: bool,
    #[serde(rename = "SE")]
    pub se: bool,
    #[serde(rename = "IRMA")]
    pub irma: bool,
    #[serde(rename = "NV")]
    pub nv: bool,
}

impl LabelRecord {
    pub fn of(img: &LabeledImage) -> Self {
        let c = &img.concepts;
        Self {
            id: img.id.clone(),
            patient_id: img.patient_id.clone(),
            grade: img.grade,
            ma: c.has(Concept::Ma),
            he: c.has(Concept::He),
            ex: c.has(Concept::Ex),
            se: c.has(Concept::Se),
            irma: c.has(Concept::Irma),
            nv: c.has(Concept::Nv),
        }
    }

    pub fn concepts(&self) -> ConceptVector {
        ConceptVector([self.ma, self.he, self.ex, self.se, self.irma, self.nv])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    seed: u64,
    n_images: usize,
}

fn write_pnm(path: &Path, raw: &[u8], (w, h): (u32, u32), subtype: PnmSubtype) -> Result<()> {
    let color = match subtype {
        PnmSubtype::Graymap(_) => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf).with_subtype(subtype).write_image(raw, w, h, color)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes `images/{id}.ppm`, `masks/{id}.{concept}.pgm`, `labels.jsonl` and
/// `dataset.json` under `dir`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, images: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut labels = Vec::new();
    for img in images {
        write_pnm(
            &dir.join("images").join(format!("{}.ppm", img.id)),
            img.image.as_raw(),
            img.image.dimensions(),
            PnmSubtype::Pixmap(SampleEncoding::Binary),
        )?;
        for (c, m) in &img.masks {
            write_pnm(
                &dir.join("masks").join(format!("{}.{}.pgm", img.id, c.name())),
                m.as_raw(),
                m.dimensions(),
                PnmSubtype::Graymap(SampleEncoding::Binary),
            )?;
        }
        serde_json::to_writer(&mut labels, &LabelRecord::of(img))?;
        labels.push(b'\n');
    }
    fs::write(dir.join("labels.jsonl"), labels)?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        n_images: images.len(),
    };
    let mut f = fs::File::create(dir.join("dataset.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<LabeledImage>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    let file = fs::File::open(dir.join("labels.jsonl"))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: format!("{}:{}", dir.join("labels.jsonl").display(), lineno + 1),
            detail: e.to_string(),
        })?;
        let image = image::open(dir.join("images").join(format!("{}.ppm", rec.id)))?.to_rgb8();
        let concepts = rec.concepts();
        let mut masks = BTreeMap::new();
        for c in concepts.present() {
            let m = image::open(dir.join("masks").join(format!("{}.{}.pgm", rec.id, c.name())))?.to_luma8();
            masks.insert(c, m);
        }
        out.push(LabeledImage {
            id: rec.id,
            patient_id: rec.patient_id,
            grade: rec.grade,
            concepts,
            image,
            masks,
        });
    }
    Ok((manifest.spec, out))
}
