//! Label-preserving augmentation: random flips and a Gaussian blur.

use image::{GrayImage, RgbImage};
use rand::Rng;

use super::dataset::LabeledImage;
use crate::rng;
use crate::tinynet::Tensor3;

pub const MAX_BLUR_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub sigma: f64,
}

impl AugmentDraw {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::seeded(rng::derive(seed, "augment"));
        Self {
            flip_h: r.random_bool(0.5),
            flip_v: r.random_bool(0.5),
            sigma: r.random_range(0.0..=MAX_BLUR_SIGMA),
        }
    }
}

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of a single `width` x `height` plane, edges replicated.
fn blur_plane(plane: &mut [f64], width: usize, height: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - r).clamp(0, width as i64 - 1) as usize;
                acc += k * plane[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - r).clamp(0, height as i64 - 1) as usize;
                acc += k * tmp[yy * width + x];
            }
            plane[y * width + x] = acc;
        }
    }
}

fn flip_index(x: usize, y: usize, w: usize, h: usize, d: &AugmentDraw) -> (usize, usize) {
    (
        if d.flip_h { w - 1 - x } else { x },
        if d.flip_v { h - 1 - y } else { y },
    )
}

pub fn apply_to_rgb(img: &RgbImage, d: &AugmentDraw) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![vec![0.0; w * h]; 3];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = flip_index(x, y, w, h, d);
            let p = img.get_pixel(sx as u32, sy as u32).0;
            for c in 0..3 {
                planes[c][y * w + x] = f64::from(p[c]);
            }
        }
    }
    let kernel = gaussian_kernel(d.sigma);
    for p in &mut planes {
        blur_plane(p, w, h, &kernel);
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

/// Masks follow the geometric part of the draw only.
pub fn apply_to_mask(mask: &GrayImage, d: &AugmentDraw) -> GrayImage {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (sx, sy) = flip_index(x as usize, y as usize, w, h, d);
        *mask.get_pixel(sx as u32, sy as u32)
    })
}

pub fn augment(img: &LabeledImage, seed: u64) -> LabeledImage {
    let d = AugmentDraw::from_seed(seed);
    LabeledImage {
        image: apply_to_rgb(&img.image, &d),
        masks: img.masks.iter().map(|(c, m)| (*c, apply_to_mask(m, &d))).collect(),
        ..img.clone()
    }
}

/// Same draw applied to a CHW float tensor (no rounding).
pub fn augment_tensor(t: &Tensor3, seed: u64) -> Tensor3 {
    let d = AugmentDraw::from_seed(seed);
    let (w, h) = (t.width, t.height);
    let kernel = gaussian_kernel(d.sigma);
    let mut data = vec![0.0; t.data.len()];
    for c in 0..t.channels {
        let src = &t.data[c * w * h..(c + 1) * w * h];
        let dst = &mut data[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = flip_index(x, y, w, h, &d);
                dst[y * w + x] = src[sy * w + sx];
            }
        }
        blur_plane(dst, w, h, &kernel);
    }
    Tensor3 {
        channels: t.channels,
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, DatasetSpec};

    fn sample() -> LabeledImage {
        let spec = DatasetSpec {
            n_images: 60,
            level_proportions: [0.0, 0.0, 0.0, 0.5, 0.5],
            ..DatasetSpec::default()
        };
        generate_dataset(&spec).unwrap().remove(0)
    }

    fn seed_where(pred: impl Fn(&AugmentDraw) -> bool) -> u64 {
        (0..10_000).find(|&s| pred(&AugmentDraw::from_seed(s))).expect("seed exists")
    }

    #[test]
    fn kernel_is_normalised() {
        for s in [0.0, 0.3, 1.0, 1.5] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn no_op_draw_is_identity() {
        let img = sample();
        let seed = seed_where(|d| !d.flip_h && !d.flip_v && d.sigma < 0.2);
        let out = augment(&img, seed);
        assert_eq!(out.image, img.image);
        assert_eq!(out.masks, img.masks);
    }

    #[test]
    fn labels_and_shapes_are_preserved() {
        let img = sample();
        for seed in 0..8 {
            let out = augment(&img, seed);
            assert_eq!(out.grade, img.grade);
            assert_eq!(out.concepts, img.concepts);
            assert_eq!(out.image.dimensions(), img.image.dimensions());
            assert_eq!(out.masks.keys().collect::<Vec<_>>(), img.masks.keys().collect::<Vec<_>>());
        }
    }

    #[test]
    fn masks_flip_with_the_image() {
        let img = sample();
        let seed = seed_where(|d| d.flip_h && !d.flip_v);
        let out = augment(&img, seed);
        let w = img.image.width();
        for (c, m) in &img.masks {
            let om = &out.masks[c];
            for (x, y, p) in m.enumerate_pixels() {
                assert_eq!(om.get_pixel(w - 1 - x, y), p);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let img = sample();
        assert_eq!(augment(&img, 42).image, augment(&img, 42).image);
    }

    #[test]
    fn tensor_version_matches_image_version() {
        let img = sample();
        let t = Tensor3::from_rgb8(img.image.width() as usize, img.image.height() as usize, img.image.as_raw());
        for seed in 0..4 {
            let a = augment_tensor(&t, seed);
            let b = augment(&img, seed);
            let bt = Tensor3::from_rgb8(64, 64, b.image.as_raw());
            let max = a.data.iter().zip(&bt.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(max <= 0.5 / 255.0 + 1e-12, "seed {seed}: {max}");
        }
    }
}
