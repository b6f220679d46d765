//! Synthetic fundus-like images with planted lesion concepts, plus the data
//! utilities built on them: contrast enhancement, augmentation,
//! patient-grouped splits and concept example sets.

pub mod augment;
pub mod clahe;
pub mod concept_sets;
pub mod concepts;
pub mod dataset;
pub mod render;
pub mod split;

pub use augment::{augment, augment_tensor, AugmentDraw};
pub use clahe::{clahe, ClaheParams};
pub use concept_sets::{assemble_concept_sets, crop_box, materialize, ConceptExampleSets, ConceptSetConfig, CropBox, SetMode};
pub use concepts::{grade_of, Concept, ConceptVector};
pub use dataset::{generate_dataset, load_dataset, save_dataset, DatasetSpec, LabelRecord, LabeledImage};
pub use render::GlyphStyle;
pub use split::{split_by_patient, Split};

use image::RgbImage;

use crate::error::Result;
use crate::tinynet::Tensor3;

/// Contrast enhancement followed by conversion to a `[0, 1]` CHW tensor.
pub fn preprocess(image: &RgbImage, params: &ClaheParams) -> Result<Tensor3> {
    let enhanced = clahe(image, params)?;
    Ok(Tensor3::from_rgb8(enhanced.width() as usize, enhanced.height() as usize, enhanced.as_raw()))
}
