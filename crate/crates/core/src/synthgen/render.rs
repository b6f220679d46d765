//! Rasterisation of the retina-like background and the lesion glyphs.

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::concepts::{Concept, ConceptVector};
use crate::rng::Rng as SeededRng;

/// Count and size range for one concept's glyphs, in pixels at 64x64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub count: [u32; 2],
    pub size: [f64; 2],
}

impl GlyphStyle {
    pub fn default_for(c: Concept) -> Self {
        let (count, size) = match c {
            Concept::Ma => ([4, 8], [1.5, 2.0]),
            Concept::He => ([1, 3], [1.8, 3.0]),
            Concept::Ex => ([5, 10], [0.8, 1.3]),
            Concept::Se => ([1, 3], [2.5, 4.0]),
            Concept::Irma => ([1, 2], [10.0, 13.0]),
            Concept::Nv => ([1, 2], [4.0, 6.0]),
        };
        Self { count, size }
    }
}

const MA_COLOR: [f64; 3] = [95.0, 20.0, 70.0];
const HE_COLOR: [f64; 3] = [120.0, 20.0, 15.0];
const EX_COLOR: [f64; 3] = [255.0, 240.0, 110.0];
const SE_COLOR: [f64; 3] = [240.0, 240.0, 225.0];
const IRMA_COLOR: [f64; 3] = [40.0, 90.0, 40.0];
const NV_COLOR: [f64; 3] = [35.0, 35.0, 130.0];

/// Float RGB canvas with per-concept coverage masks.
struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
    masks: [Vec<bool>; 6],
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let px = &mut self.rgb[y * self.size + x];
        for c in 0..3 {
            px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn mark(&mut self, concept: Concept, x: usize, y: usize) {
        self.masks[concept.index()][y * self.size + x] = true;
    }

    /// Anti-aliased filled disk.
    fn disk(&mut self, concept: Concept, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        let (x0, x1, y0, y1) = self.bbox(cx, cy, r + 1.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let cov = (r + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(x, y, color, cov);
                    if cov >= 0.5 {
                        self.mark(concept, x, y);
                    }
                }
            }
        }
    }

    /// Gaussian-profile translucent blob.
    fn soft_blob(&mut self, concept: Concept, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        let (x0, x1, y0, y1) = self.bbox(cx, cy, 2.0 * r);
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let alpha = 0.9 * (-1.5 * d2 / (r * r)).exp();
                if alpha > 0.02 {
                    self.blend(x, y, color, alpha);
                    if alpha >= 0.3 {
                        self.mark(concept, x, y);
                    }
                }
            }
        }
    }

    /// Anti-aliased segment of unit thickness.
    fn segment(&mut self, concept: Concept, a: (f64, f64), b: (f64, f64), color: [f64; 3]) {
        let half = 0.6;
        let minx = a.0.min(b.0) - 2.0;
        let maxx = a.0.max(b.0) + 2.0;
        let miny = a.1.min(b.1) - 2.0;
        let maxy = a.1.max(b.1) + 2.0;
        let size = self.size as f64;
        let clampi = |v: f64| v.clamp(0.0, size) as usize;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in clampi(miny)..clampi(maxy + 1.0) {
            for x in clampi(minx)..clampi(maxx + 1.0) {
                let (px, py) = (x as f64 - a.0, y as f64 - a.1);
                let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
                let cov = (half + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.blend(x, y, color, cov);
                    if cov >= 0.5 {
                        self.mark(concept, x, y);
                    }
                }
            }
        }
    }

    fn bbox(&self, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
        let lo = |v: f64| (v - r).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + r).ceil() + 1.0).min(self.size as f64) as usize;
        (lo(cx), hi(cx), lo(cy), hi(cy))
    }
}

/// A rendered image and one mask per present concept.
pub struct Rendered {
    pub image: RgbImage,
    pub masks: Vec<(Concept, GrayImage)>,
}

/// Draws a fundus-like disc with glyphs for every present concept.
///
/// The disc touches all four borders, so its bounding box is the full
/// raster; corners stay black.
pub fn render(
    size: usize,
    concepts: &ConceptVector,
    styles: &dyn Fn(Concept) -> GlyphStyle,
    rng: &mut SeededRng,
) -> Rendered {
    let center = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 2.0;
    let scale = size as f64 / 64.0;
    let brightness = rng.random_range(0.85..1.1);
    let base = [190.0 * brightness, 85.0 * brightness, 35.0 * brightness];
    let mut canvas = Canvas {
        size,
        rgb: vec![[0.0; 3]; size * size],
        masks: Default::default(),
    };
    for m in &mut canvas.masks {
        *m = vec![false; size * size];
    }
    let inside = |x: usize, y: usize| {
        let d = ((x as f64 - center).powi(2) + (y as f64 - center).powi(2)).sqrt();
        (d <= radius).then_some(d)
    };
    for y in 0..size {
        for x in 0..size {
            if let Some(d) = inside(x, y) {
                let shade = 1.0 - 0.35 * (d / radius).powi(2);
                canvas.rgb[y * size + x] = [base[0] * shade, base[1] * shade, base[2] * shade];
            }
        }
    }
    // optic disc on a random side
    let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let od = (center + side * 13.0 * scale, center + rng.random_range(-3.0..3.0) * scale);
    let od_r = 4.0 * scale;
    let (x0, x1, y0, y1) = canvas.bbox(od.0, od.1, 2.0 * od_r);
    for y in y0..y1 {
        for x in x0..x1 {
            let d2 = (x as f64 - od.0).powi(2) + (y as f64 - od.1).powi(2);
            let a = 0.8 * (-d2 / (od_r * od_r)).exp();
            if a > 0.02 && inside(x, y).is_some() {
                canvas.blend(x, y, [235.0, 190.0, 130.0], a);
            }
        }
    }

    let lesion_radius = 24.0 * scale;
    let place = |rng: &mut SeededRng| -> (f64, f64) {
        let r = lesion_radius * rng.random::<f64>().sqrt();
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        (center + r * t.cos(), center + r * t.sin())
    };

    let order = [Concept::Se, Concept::He, Concept::Ex, Concept::Irma, Concept::Nv, Concept::Ma];
    for c in order {
        if !concepts.has(c) {
            continue;
        }
        let style = styles(c);
        let count = rng.random_range(style.count[0]..=style.count[1].max(style.count[0]));
        let size_of = |rng: &mut SeededRng| scale * rng.random_range(style.size[0]..=style.size[1].max(style.size[0]));
        for _ in 0..count.max(1) {
            let (cx, cy) = place(rng);
            match c {
                Concept::Ma => {
                    let r = size_of(rng);
                    canvas.disk(c, cx, cy, r, MA_COLOR);
                }
                Concept::He => {
                    for _ in 0..3 {
                        let r = size_of(rng);
                        let ox = rng.random_range(-2.5..2.5) * scale;
                        let oy = rng.random_range(-2.5..2.5) * scale;
                        canvas.disk(c, cx + ox, cy + oy, r, HE_COLOR);
                    }
                }
                Concept::Ex => {
                    let r = size_of(rng);
                    canvas.disk(c, cx, cy, r, EX_COLOR);
                }
                Concept::Se => {
                    let r = size_of(rng);
                    canvas.soft_blob(c, cx, cy, r, SE_COLOR);
                }
                Concept::Irma => {
                    // random-walk squiggle; `size` is the number of steps
                    let steps = size_of(rng).round() as usize;
                    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
                    let mut p = (cx, cy);
                    for _ in 0..steps {
                        heading += rng.random_range(-0.9..0.9);
                        let q = (p.0 + 2.0 * scale * heading.cos(), p.1 + 2.0 * scale * heading.sin());
                        canvas.segment(c, p, q, IRMA_COLOR);
                        p = q;
                    }
                }
                Concept::Nv => {
                    // root with 3-4 branches, each forking once; `size` is
                    // the branch length
                    let branches = rng.random_range(3..=4);
                    for _ in 0..branches {
                        let t = rng.random_range(0.0..std::f64::consts::TAU);
                        let len = size_of(rng);
                        let mid = (cx + len * t.cos(), cy + len * t.sin());
                        canvas.segment(c, (cx, cy), mid, NV_COLOR);
                        for fork in [-0.6, 0.6] {
                            let t2 = t + fork + rng.random_range(-0.2..0.2);
                            let l2 = 0.6 * len;
                            canvas.segment(c, mid, (mid.0 + l2 * t2.cos(), mid.1 + l2 * t2.sin()), NV_COLOR);
                        }
                    }
                }
            }
            // a glyph must leave a mask footprint even if it is tiny
            let (ix, iy) = (cx.round() as usize, cy.round() as usize);
            canvas.mark(c, ix.min(size - 1), iy.min(size - 1));
        }
    }

    let noise = Normal::new(0.0, 3.0).expect("finite");
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = canvas.rgb[y * size + x];
            let is_in = inside(x, y).is_some();
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = if is_in { px[c] + noise.sample(rng) } else { 0.0 };
                out[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(x as u32, y as u32, image::Rgb(out));
        }
    }
    let masks = concepts
        .present()
        .map(|c| {
            let m = &canvas.masks[c.index()];
            let mut g = GrayImage::new(size as u32, size as u32);
            for (i, &on) in m.iter().enumerate() {
                if on {
                    g.put_pixel((i % size) as u32, (i / size) as u32, image::Luma([255]));
                }
            }
            (c, g)
        })
        .collect();
    Rendered { image, masks }
}
