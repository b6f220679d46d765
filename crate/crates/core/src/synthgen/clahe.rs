//! Contrast-limited adaptive histogram equalisation on the luminance
//! channel.
//!
//! Each tile's 256-bin luminance histogram is clipped at `clip` times the
//! uniform bin height and the excess is spread evenly over all bins. The
//! tile mapping uses the mid-bin cumulative mass, rescaled so that levels 0
//! and 255 are fixed points; a flat histogram therefore maps to the
//! identity. Mappings of the four nearest tile centres are blended
//! bilinearly, and the luminance change is added to every RGB channel
//! (which leaves BT.601 chroma untouched).

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub clip: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 4,
            tiles_y: 4,
            clip: 2.0,
        }
    }
}

pub fn luminance(px: [u8; 3]) -> f64 {
    0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2])
}

/// Histogram of `levels` after clipping at `clip` x uniform height and even
/// redistribution of the excess.
pub fn clipped_histogram(levels: &[u8], clip: f64) -> Vec<f64> {
    let mut hist = vec![0.0f64; 256];
    for &l in levels {
        hist[l as usize] += 1.0;
    }
    let limit = clip * levels.len() as f64 / 256.0;
    let mut excess = 0.0;
    for h in &mut hist {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / 256.0;
    hist.iter_mut().for_each(|h| *h += share);
    hist
}

/// Tone curve of one tile.
fn tile_mapping(hist: &[f64]) -> [f64; 256] {
    let mut mid = [0.0; 256];
    let mut acc = 0.0;
    for (g, &h) in hist.iter().enumerate() {
        mid[g] = acc + h / 2.0;
        acc += h;
    }
    let (lo, hi) = (mid[0], mid[255]);
    let mut map = [0.0; 256];
    for g in 0..256 {
        map[g] = 255.0 * (mid[g] - lo) / (hi - lo);
    }
    map
}

fn tile_bounds(len: usize, tiles: usize, i: usize) -> (usize, usize) {
    (i * len / tiles, (i + 1) * len / tiles)
}

/// Luminance levels of every tile, row-major over the tile grid.
pub fn tile_levels(image: &RgbImage, params: &ClaheParams) -> Vec<Vec<u8>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = Vec::with_capacity(params.tiles_x * params.tiles_y);
    for ty in 0..params.tiles_y {
        let (y0, y1) = tile_bounds(h, params.tiles_y, ty);
        for tx in 0..params.tiles_x {
            let (x0, x1) = tile_bounds(w, params.tiles_x, tx);
            let mut levels = Vec::with_capacity((y1 - y0) * (x1 - x0));
            for y in y0..y1 {
                for x in x0..x1 {
                    levels.push(luminance(image.get_pixel(x as u32, y as u32).0).round() as u8);
                }
            }
            out.push(levels);
        }
    }
    out
}

pub fn clahe(image: &RgbImage, params: &ClaheParams) -> Result<RgbImage> {
    if params.tiles_x < 2 || params.tiles_y < 2 {
        return Err(Error::Config("CLAHE needs at least a 2x2 tile grid".into()));
    }
    if !(params.clip >= 1.0) {
        return Err(Error::Config(format!("CLAHE clip limit must be >= 1, got {}", params.clip)));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < params.tiles_x || h < params.tiles_y {
        return Err(Error::Config(format!(
            "image {w}x{h} is smaller than the {}x{} tile grid",
            params.tiles_x, params.tiles_y
        )));
    }
    let maps: Vec<[f64; 256]> = tile_levels(image, params)
        .iter()
        .map(|levels| tile_mapping(&clipped_histogram(levels, params.clip)))
        .collect();

    let tile_w = w as f64 / params.tiles_x as f64;
    let tile_h = h as f64 / params.tiles_y as f64;
    let locate = |pos: usize, size: f64, n: usize| -> (usize, usize, f64) {
        let f = (pos as f64 + 0.5) / size - 0.5;
        let i0 = f.floor().clamp(0.0, (n - 1) as f64) as usize;
        let i1 = (i0 + 1).min(n - 1);
        let a = (f - i0 as f64).clamp(0.0, 1.0);
        (i0, i1, a)
    };

    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let (ty0, ty1, ay) = locate(y, tile_h, params.tiles_y);
        for x in 0..w {
            let (tx0, tx1, ax) = locate(x, tile_w, params.tiles_x);
            let px = image.get_pixel(x as u32, y as u32).0;
            let lum = luminance(px);
            let g = lum.round() as usize;
            let m = |ty: usize, tx: usize| maps[ty * params.tiles_x + tx][g];
            let top = m(ty0, tx0) * (1.0 - ax) + m(ty0, tx1) * ax;
            let bottom = m(ty1, tx0) * (1.0 - ax) + m(ty1, tx1) * ax;
            let mapped = top * (1.0 - ay) + bottom * ay;
            let delta = mapped - lum;
            let mut o = [0u8; 3];
            for c in 0..3 {
                o[c] = (f64::from(px[c]) + delta).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(o));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = f(x, y);
            image::Rgb([v, v, v])
        })
    }

    fn lum_std(img: &RgbImage) -> f64 {
        let v: Vec<f64> = img.pixels().map(|p| luminance(p.0)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn constant_gray_is_unchanged() {
        let img = gray(64, 64, |_, _| 128);
        assert_eq!(clahe(&img, &ClaheParams::default()).unwrap(), img);
    }

    #[test]
    fn extremes_are_fixed() {
        let img = gray(64, 64, |x, y| if (x / 5 + y / 7) % 2 == 0 { 0 } else { 255 });
        assert_eq!(clahe(&img, &ClaheParams::default()).unwrap(), img);
    }

    #[test]
    fn low_contrast_ramp_gains_contrast() {
        let img = gray(64, 64, |x, _| 100 + (x / 4) as u8);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        let (a, b) = (lum_std(&img), lum_std(&out));
        assert!(b > a, "std {a} -> {b}");
    }

    #[test]
    fn flat_tile_histograms_map_to_identity() {
        // 4x4 tiles of 16x16 pixels, each tile holding every level once
        let img = gray(64, 64, |x, y| (((y % 16) * 16 + (x % 16)) as u32 * 7 % 256) as u8);
        for levels in tile_levels(&img, &ClaheParams::default()) {
            let mut seen = [false; 256];
            levels.iter().for_each(|&l| seen[l as usize] = true);
            assert!(seen.iter().all(|&s| s));
        }
        assert_eq!(clahe(&img, &ClaheParams::default()).unwrap(), img);
    }

    #[test]
    fn clipped_bins_stay_below_limit_plus_share() {
        let img = gray(64, 64, |x, y| ((x * y) % 40 + 90) as u8);
        let params = ClaheParams::default();
        for levels in tile_levels(&img, &params) {
            let n = levels.len() as f64;
            let hist = clipped_histogram(&levels, params.clip);
            let mut raw = vec![0.0; 256];
            levels.iter().for_each(|&l| raw[l as usize] += 1.0);
            let limit = params.clip * n / 256.0;
            let excess: f64 = raw.iter().map(|&h: &f64| (h - limit).max(0.0)).sum();
            let max = hist.iter().cloned().fold(0.0, f64::max);
            assert!(max <= limit + excess / 256.0 + 1e-9);
            assert!((hist.iter().sum::<f64>() - n).abs() < 1e-9);
        }
    }

    #[test]
    fn output_stays_in_range_for_colour_images() {
        let img = RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 250]));
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        assert_eq!(out.dimensions(), (32, 32));
    }

    #[test]
    fn rejects_bad_parameters() {
        let img = gray(8, 8, |_, _| 3);
        let p = |tx, ty, clip| ClaheParams {
            tiles_x: tx,
            tiles_y: ty,
            clip,
        };
        assert!(clahe(&img, &p(1, 4, 2.0)).is_err());
        assert!(clahe(&img, &p(4, 4, 0.5)).is_err());
        assert!(clahe(&gray(3, 3, |_, _| 0), &p(4, 4, 2.0)).is_err());
    }
}
