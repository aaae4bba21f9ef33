//! Guidance-map extraction: canny edges, depth, sketch and color blocks.
//!
//! The canny pipeline runs in exact integer arithmetic: the 5x5 Gaussian is
//! the integer σ = 1.4 kernel over 159, gradients are 3x3 Sobel on the
//! unnormalized blur, and thresholds compare squared magnitudes. Borders
//! replicate the edge pixel.
//!
//! Thresholds are on gradient magnitude scaled to `[0, 255]` by the frame's
//! strongest gradient, so `255` always marks the maximum edge response.

use crate::raster::DepthMap;
use crate::render::RenderOutput;
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CANNY_LOW: f64 = 50.0;
pub const CANNY_HIGH: f64 = 150.0;
pub const SKETCH_LOW: f64 = 30.0;
pub const SKETCH_HIGH: f64 = 90.0;
pub const SKETCH_DOWNSAMPLE: u32 = 4;
pub const DEFAULT_COLOR_BLOCK: u32 = 64;

/// Integer 5x5 Gaussian, σ = 1.4; weights sum to [`GAUSSIAN_SUM`].
pub const GAUSSIAN_5X5: [[i64; 5]; 5] = [
    [2, 4, 5, 4, 2],
    [4, 9, 12, 9, 4],
    [5, 12, 15, 12, 5],
    [4, 9, 12, 9, 4],
    [2, 4, 5, 4, 2],
];
pub const GAUSSIAN_SUM: i64 = 159;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid canny thresholds: need 0 <= low ({low}) <= high ({high})")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("block size must be >= 1")]
    InvalidBlock,
    #[error("depth must be finite and > 0 everywhere")]
    InvalidDepth,
    #[error("empty image")]
    EmptyImage,
}

/// Integer Rec. 601 luma, rounded.
pub fn to_gray(rgb: &RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let Rgb([r, g, b]) = *rgb.get_pixel(x, y);
        let l = (299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000;
        Luma([l as u8])
    })
}

fn clamp_idx(v: i64, n: u32) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Which pair of neighbors non-maximum suppression compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sector {
    Horizontal,
    Diagonal,
    Vertical,
    AntiDiagonal,
}

impl Sector {
    /// Exact sector test against tan(22.5°) = √2 − 1, rearranged as
    /// `(a + b)^2 < 2 a^2` so no irrational constant is needed.
    fn of(gx: i64, gy: i64) -> Self {
        let (ax, ay) = (gx.abs(), gy.abs());
        if (ax + ay) * (ax + ay) < 2 * ax * ax {
            Sector::Horizontal
        } else if (ax + ay) * (ax + ay) < 2 * ay * ay {
            Sector::Vertical
        } else if (gx > 0) == (gy > 0) {
            Sector::Diagonal
        } else {
            Sector::AntiDiagonal
        }
    }

    /// `(minus, plus)` neighbor offsets; a maximum must be strictly greater
    /// than `minus` and at least `plus`, which thins plateaus to one pixel.
    fn offsets(self) -> ((i64, i64), (i64, i64)) {
        match self {
            Sector::Horizontal => ((-1, 0), (1, 0)),
            Sector::Vertical => ((0, -1), (0, 1)),
            Sector::Diagonal => ((-1, -1), (1, 1)),
            Sector::AntiDiagonal => ((1, -1), (-1, 1)),
        }
    }
}

struct Gradients {
    w: u32,
    h: u32,
    gx: Vec<i64>,
    gy: Vec<i64>,
    mag2: Vec<i64>,
}

impl Gradients {
    fn compute(gray: &GrayImage) -> Self {
        let (w, h) = gray.dimensions();
        let src = gray.as_raw();
        let at = |x: i64, y: i64| src[clamp_idx(y, h) * w as usize + clamp_idx(x, w)] as i64;
        let mut blur = vec![0i64; (w * h) as usize];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0;
                for (ky, row) in GAUSSIAN_5X5.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        acc += k * at(x + kx as i64 - 2, y + ky as i64 - 2);
                    }
                }
                blur[(y * w as i64 + x) as usize] = acc;
            }
        }
        let b = |x: i64, y: i64| blur[clamp_idx(y, h) * w as usize + clamp_idx(x, w)];
        let n = (w * h) as usize;
        let (mut gx, mut gy, mut mag2) = (vec![0; n], vec![0; n], vec![0; n]);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = (y * w as i64 + x) as usize;
                gx[i] = (b(x + 1, y - 1) + 2 * b(x + 1, y) + b(x + 1, y + 1))
                    - (b(x - 1, y - 1) + 2 * b(x - 1, y) + b(x - 1, y + 1));
                gy[i] = (b(x - 1, y + 1) + 2 * b(x, y + 1) + b(x + 1, y + 1))
                    - (b(x - 1, y - 1) + 2 * b(x, y - 1) + b(x + 1, y - 1));
                mag2[i] = gx[i] * gx[i] + gy[i] * gy[i];
            }
        }
        Self { w, h, gx, gy, mag2 }
    }

    fn mag2_at(&self, x: i64, y: i64) -> i64 {
        self.mag2[clamp_idx(y, self.h) * self.w as usize + clamp_idx(x, self.w)]
    }
}

/// Classic canny: Gaussian blur, Sobel, non-maximum suppression, double
/// threshold, 8-connected hysteresis. Output pixels are 0 or 255.
pub fn canny_edges(gray: &GrayImage, low: f64, high: f64) -> Result<GrayImage, ControlError> {
    if !(low >= 0.0 && low <= high) {
        return Err(ControlError::InvalidThresholds { low, high });
    }
    let (w, h) = gray.dimensions();
    let mut out = GrayImage::new(w, h);
    if w == 0 || h == 0 {
        return Ok(out);
    }
    let g = Gradients::compute(gray);
    let max2 = g.mag2.iter().copied().max().unwrap_or(0);
    if max2 == 0 {
        return Ok(out);
    }
    let max2 = max2 as f64;
    let (low2, high2) = (low * low * max2, high * high * max2);

    // 0 = none, 1 = weak, 2 = strong
    let mut class = vec![0u8; (w * h) as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = (y * w as i64 + x) as usize;
            let m = g.mag2[i];
            let ((mx, my), (px, py)) = Sector::of(g.gx[i], g.gy[i]).offsets();
            if !(m > g.mag2_at(x + mx, y + my) && m >= g.mag2_at(x + px, y + py)) {
                continue;
            }
            let scaled = m as f64 * 65025.0;
            class[i] = if scaled >= high2 {
                2
            } else if scaled >= low2 {
                1
            } else {
                0
            };
        }
    }

    let mut stack: Vec<usize> = (0..class.len()).filter(|&i| class[i] == 2).collect();
    let mut edge = vec![false; class.len()];
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w as usize) as i64, (i / w as usize) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = (ny * w as i64 + nx) as usize;
                if class[j] > 0 && !edge[j] {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    for (p, e) in out.pixels_mut().zip(edge) {
        *p = Luma([if e { 255 } else { 0 }]);
    }
    Ok(out)
}

/// `round(255 (d_max - d) / (d_max - d_min))`: near is bright. A constant
/// frame maps to 255.
pub fn depth_to_control(depth: &DepthMap) -> Result<GrayImage, ControlError> {
    if depth.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(ControlError::InvalidDepth);
    }
    let lo = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(GrayImage::from_fn(depth.width(), depth.height(), |x, y| {
        if range <= 0.0 {
            return Luma([255]);
        }
        let v = (255.0 * (hi - depth.get(x, y)) / range).round();
        Luma([v.clamp(0.0, 255.0) as u8])
    }))
}

/// Pixels at or above `threshold` become 255, the rest 0.
pub fn binarize(img: &GrayImage, threshold: u8) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([if img.get_pixel(x, y)[0] >= threshold { 255 } else { 0 }])
    })
}

/// Mean over `factor x factor` tiles (edge tiles truncated), rounded half up.
pub fn box_downsample(gray: &GrayImage, factor: u32) -> GrayImage {
    let (w, h) = gray.dimensions();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    GrayImage::from_fn(ow, oh, |ox, oy| {
        let (mut sum, mut n) = (0u64, 0u64);
        for y in oy * factor..((oy + 1) * factor).min(h) {
            for x in ox * factor..((ox + 1) * factor).min(w) {
                sum += gray.get_pixel(x, y)[0] as u64;
                n += 1;
            }
        }
        Luma([((2 * sum + n) / (2 * n)) as u8])
    })
}

/// 3x3 square dilation of a binary image.
pub fn dilate(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let hit = (-1i64..=1).any(|dy| {
            (-1i64..=1).any(|dx| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0
                    && ny >= 0
                    && nx < w as i64
                    && ny < h as i64
                    && img.get_pixel(nx as u32, ny as u32)[0] > 0
            })
        });
        Luma([if hit { 255 } else { 0 }])
    })
}

/// Coarse outline drawing: the ×4-downsampled luma's canny edges, dilated
/// by one pixel and returned at coarse resolution.
pub fn sketch_coarse(rgb: &RgbImage) -> GrayImage {
    let small = box_downsample(&to_gray(rgb), SKETCH_DOWNSAMPLE);
    let edges = canny_edges(&small, SKETCH_LOW, SKETCH_HIGH).expect("fixed thresholds are valid");
    dilate(&edges)
}

/// Full-resolution `edges` kept only where [`sketch_coarse`] also marks an
/// outline, so fine texture drops out and the result is a subset of `edges`.
pub fn sketch_from_edges(rgb: &RgbImage, edges: &GrayImage) -> GrayImage {
    let coarse = sketch_coarse(rgb);
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let keep = edges.get_pixel(x, y)[0] > 0
            && coarse.get_pixel(x / SKETCH_DOWNSAMPLE, y / SKETCH_DOWNSAMPLE)[0] > 0;
        Luma([if keep { 255 } else { 0 }])
    })
}

/// [`sketch_from_edges`] over canny edges at the default thresholds.
pub fn sketch_map(rgb: &RgbImage) -> GrayImage {
    let edges = canny_edges(&to_gray(rgb), CANNY_LOW, CANNY_HIGH).expect("fixed thresholds are valid");
    sketch_from_edges(rgb, &edges)
}

/// Replaces each `block x block` tile by its mean color, rounded half up;
/// edge tiles are truncated.
pub fn color_block_map(rgb: &RgbImage, block: u32) -> Result<RgbImage, ControlError> {
    if block == 0 {
        return Err(ControlError::InvalidBlock);
    }
    let (w, h) = rgb.dimensions();
    let mut out = RgbImage::new(w, h);
    for ty in (0..h).step_by(block as usize) {
        for tx in (0..w).step_by(block as usize) {
            let (x1, y1) = ((tx + block).min(w), (ty + block).min(h));
            let mut sum = [0u64; 3];
            let mut n = 0u64;
            for y in ty..y1 {
                for x in tx..x1 {
                    let p = rgb.get_pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u64;
                    }
                    n += 1;
                }
            }
            let mean = Rgb(sum.map(|s| ((2 * s + n) / (2 * n)) as u8));
            for y in ty..y1 {
                for x in tx..x1 {
                    out.put_pixel(x, y, mean);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Render,
    ReferencePhoto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorParams {
    pub canny_low: f64,
    pub canny_high: f64,
    pub color_block: u32,
    /// Extraction resolution; `None` keeps the render resolution.
    pub extract_px: Option<u32>,
}

impl Default for ExtractorParams {
    fn default() -> Self {
        Self {
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
            color_block: DEFAULT_COLOR_BLOCK,
            extract_px: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlBundle {
    pub canny: GrayImage,
    pub depth8: GrayImage,
    pub sketch: GrayImage,
    pub color_blocks: RgbImage,
    /// Origin of the canny, depth and sketch maps.
    pub source_tag: SourceTag,
    /// Origin of the color-block map.
    pub color_source: SourceTag,
    pub params: ExtractorParams,
}

fn resize_depth(depth: &DepthMap, px: u32) -> DepthMap {
    let (w, h) = depth.dimensions();
    let mut out = DepthMap::filled(px, px, 0.0);
    for y in 0..px {
        for x in 0..px {
            let sx = ((x as u64 * w as u64) / px as u64) as u32;
            let sy = ((y as u64 * h as u64) / px as u64) as u32;
            out.set(x, y, depth.get(sx, sy));
        }
    }
    out
}

impl ControlBundle {
    /// All four maps from a structural render.
    pub fn from_render(render: &RenderOutput, params: &ExtractorParams) -> Result<Self, ControlError> {
        if render.rgb.width() == 0 || render.rgb.height() == 0 {
            return Err(ControlError::EmptyImage);
        }
        let (rgb, depth) = match params.extract_px {
            Some(px) if px != render.rgb.width() || px != render.rgb.height() => (
                imageops::resize(&render.rgb, px, px, FilterType::Triangle),
                resize_depth(&render.depth, px),
            ),
            _ => (render.rgb.clone(), render.depth.clone()),
        };
        let canny = canny_edges(&to_gray(&rgb), params.canny_low, params.canny_high)?;
        Ok(Self {
            sketch: sketch_from_edges(&rgb, &canny),
            canny,
            depth8: depth_to_control(&depth)?,
            color_blocks: color_block_map(&rgb, params.color_block)?,
            source_tag: SourceTag::Render,
            color_source: SourceTag::Render,
            params: *params,
        })
    }

    /// Replaces the color map with one taken from a reference photograph,
    /// resized to the bundle's resolution.
    pub fn with_reference_color(mut self, photo: &RgbImage) -> Result<Self, ControlError> {
        if photo.width() == 0 || photo.height() == 0 {
            return Err(ControlError::EmptyImage);
        }
        let (w, h) = self.canny.dimensions();
        let resized = imageops::resize(photo, w, h, FilterType::Triangle);
        self.color_blocks = color_block_map(&resized, self.params.color_block)?;
        self.color_source = SourceTag::ReferencePhoto;
        Ok(self)
    }

    pub fn resolution(&self) -> (u32, u32) {
        self.canny.dimensions()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn step(w: u32, h: u32, at: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, _| Luma([if x < at { 0 } else { 255 }]))
    }

    #[test]
    fn uniform_has_no_edges() {
        let img = GrayImage::from_pixel(64, 64, Luma([77]));
        let e = canny_edges(&img, CANNY_LOW, CANNY_HIGH).unwrap();
        assert!(e.pixels().all(|p| p[0] == 0));
    }

    #[test]
    fn vertical_step_gives_one_pixel_line() {
        let e = canny_edges(&step(64, 64, 32), CANNY_LOW, CANNY_HIGH).unwrap();
        for y in 0..64 {
            let cols: Vec<u32> = (0..64).filter(|&x| e.get_pixel(x, y)[0] == 255).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!(cols[0] == 31 || cols[0] == 32);
        }
        assert!(e.pixels().all(|p| p[0] == 0 || p[0] == 255));
    }

    #[test]
    fn horizontal_step_gives_one_pixel_line() {
        let img = GrayImage::from_fn(40, 40, |_, y| Luma([if y < 17 { 10 } else { 200 }]));
        let e = canny_edges(&img, CANNY_LOW, CANNY_HIGH).unwrap();
        for x in 0..40 {
            let rows = (0..40).filter(|&y| e.get_pixel(x, y)[0] == 255).count();
            assert_eq!(rows, 1);
        }
    }

    #[test]
    fn thresholds_validated() {
        let img = GrayImage::new(8, 8);
        assert!(canny_edges(&img, 100.0, 50.0).is_err());
        assert!(canny_edges(&img, -1.0, 50.0).is_err());
        assert!(canny_edges(&img, 10.0, 10.0).is_ok());
    }

    #[test]
    fn sector_boundaries() {
        assert_eq!(Sector::of(10, 0), Sector::Horizontal);
        assert_eq!(Sector::of(10, 4), Sector::Horizontal);
        assert_eq!(Sector::of(10, 5), Sector::Diagonal);
        assert_eq!(Sector::of(-10, 5), Sector::AntiDiagonal);
        assert_eq!(Sector::of(0, -3), Sector::Vertical);
        assert_eq!(Sector::of(4, 10), Sector::Vertical);
        assert_eq!(Sector::of(-7, -7), Sector::Diagonal);
    }

    #[test]
    fn depth_control_endpoints_and_degenerate() {
        let d = Raster::from_vec(3, 1, vec![10.0, 15.0, 20.0]).unwrap();
        let c = depth_to_control(&d).unwrap();
        assert_eq!(c.as_raw(), &vec![255, 128, 0]);
        let flat = Raster::filled(4, 4, 7.0);
        assert!(depth_to_control(&flat).unwrap().pixels().all(|p| p[0] == 255));
        let bad = Raster::filled(2, 2, 0.0);
        assert!(depth_to_control(&bad).is_err());
    }

    #[test]
    fn sketch_uniform_empty_and_binary() {
        let rgb = RgbImage::from_pixel(64, 48, Rgb([90, 120, 30]));
        assert!(sketch_map(&rgb).pixels().all(|p| p[0] == 0));
        let img = RgbImage::from_fn(64, 64, |x, y| {
            if (16..48).contains(&x) && (16..48).contains(&y) {
                Rgb([230, 230, 230])
            } else {
                Rgb([20, 20, 20])
            }
        });
        let s = sketch_map(&img);
        assert_eq!(s.dimensions(), (64, 64));
        assert!(s.pixels().any(|p| p[0] == 255));
        assert_eq!(binarize(&s, 128), s);
        assert_eq!(binarize(&binarize(&s, 128), 128), binarize(&s, 128));
    }

    #[test]
    fn color_blocks() {
        let uni = RgbImage::from_pixel(10, 10, Rgb([4, 5, 6]));
        assert_eq!(color_block_map(&uni, 4).unwrap(), uni);
        let half = RgbImage::from_fn(8, 4, |x, _| if x < 4 { Rgb([0; 3]) } else { Rgb([255; 3]) });
        let m = color_block_map(&half, 8).unwrap();
        assert!(m.pixels().all(|p| *p == Rgb([128, 128, 128])));
        let noise = RgbImage::from_fn(13, 7, |x, y| Rgb([(x * 19 + y * 7) as u8, (x * y) as u8, 3]));
        assert_eq!(color_block_map(&noise, 1).unwrap(), noise);
        assert_eq!(color_block_map(&noise, 0), Err(ControlError::InvalidBlock));
    }

    #[test]
    fn downsample_rounds_half_up() {
        let img = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        assert_eq!(box_downsample(&img, 2).as_raw(), &vec![128]);
    }
}
