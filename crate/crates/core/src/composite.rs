//! Detail reinsertion, procedural clouds, mood blending and sensor
//! degradation.
//!
//! Every stage has a floating-point form on [`FloatImage`] so a full recipe
//! rounds to 8 bits exactly once; the `RgbImage` wrappers round immediately.

use crate::acquisition::TimeOfDay;
use crate::noise::fbm_field;
use crate::raster::AlphaMap;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

pub const CLOUD_OCTAVES: u32 = 5;
pub const CLOUD_PERSISTENCE: f64 = 0.5;
/// Width of the alpha ramp above the threshold, in noise units.
pub const CLOUD_SOFTNESS: f64 = 0.06;
pub const COVERAGE_TOLERANCE: f64 = 0.03;
/// Gaussian kernels are truncated at this many σ.
pub const KERNEL_RADIUS_SIGMAS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositeError {
    #[error("layer resolution {got:?} does not match base {expected:?}")]
    ResolutionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("target GSD {target} must be finite and >= native GSD {native} > 0")]
    InvalidGsd { native: f64, target: f64 },
    #[error("PSF sigma must be finite and >= 0, got {0}")]
    InvalidSigma(f64),
    #[error("blend weight must be in [0, 1], got {0}")]
    InvalidWeight(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0.map(f64::from)).collect(),
        }
    }

    /// Rounds half away from zero and clamps to `[0, 255]`.
    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for (p, v) in out.pixels_mut().zip(&self.data) {
            *p = Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
        out
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.data.len().max(1) as f64;
        let mut s = [0.0; 3];
        for v in &self.data {
            for c in 0..3 {
                s[c] += v[c];
            }
        }
        s.map(|x| x / n)
    }
}

/// A straight (non-premultiplied) color layer with per-pixel opacity.
#[derive(Clone, Copy, Debug)]
pub struct LayerRef<'a> {
    pub rgb: &'a RgbImage,
    pub alpha: &'a AlphaMap,
}

/// Floating-point layer, the result of merging layers before they meet the
/// base image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatLayer {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl FloatLayer {
    pub fn from_ref(l: LayerRef<'_>) -> Self {
        Self {
            width: l.rgb.width(),
            height: l.rgb.height(),
            rgb: l.rgb.pixels().map(|p| p.0.map(f64::from)).collect(),
            alpha: l.alpha.iter().map(|a| a.clamp(0.0, 1.0)).collect(),
        }
    }
}

fn check_dims(expected: (u32, u32), got: (u32, u32)) -> Result<(), CompositeError> {
    if expected == got {
        Ok(())
    } else {
        Err(CompositeError::ResolutionMismatch { expected, got })
    }
}

/// `upper` over `lower` as a single layer, so that
/// `over_layer(A, B)` over C equals A over (B over C).
pub fn over_layer(upper: &FloatLayer, lower: &FloatLayer) -> Result<FloatLayer, CompositeError> {
    check_dims((lower.width, lower.height), (upper.width, upper.height))?;
    let mut rgb = Vec::with_capacity(upper.rgb.len());
    let mut alpha = Vec::with_capacity(upper.alpha.len());
    for i in 0..upper.rgb.len() {
        let (au, al) = (upper.alpha[i], lower.alpha[i]);
        let a = au + al * (1.0 - au);
        let c = if a > 0.0 {
            let (u, l) = (upper.rgb[i], lower.rgb[i]);
            [0, 1, 2].map(|k| (au * u[k] + (1.0 - au) * al * l[k]) / a)
        } else {
            [0.0; 3]
        };
        rgb.push(c);
        alpha.push(a);
    }
    Ok(FloatLayer { width: upper.width, height: upper.height, rgb, alpha })
}

/// `out = α·layer + (1 − α)·below` for one layer, in place.
pub fn over_into(base: &mut FloatImage, layer: &FloatLayer) -> Result<(), CompositeError> {
    check_dims(base.dimensions(), (layer.width, layer.height))?;
    for ((b, c), &a) in base.data.iter_mut().zip(&layer.rgb).zip(&layer.alpha) {
        for k in 0..3 {
            b[k] = a * c[k] + (1.0 - a) * b[k];
        }
    }
    Ok(())
}

/// Stacks `layers` (bottom first) over `base` without intermediate rounding.
pub fn composite_f64(base: &RgbImage, layers: &[LayerRef<'_>]) -> Result<FloatImage, CompositeError> {
    let mut out = FloatImage::from_rgb(base);
    for l in layers {
        check_dims(base.dimensions(), l.rgb.dimensions())?;
        check_dims(base.dimensions(), l.alpha.dimensions())?;
        over_into(&mut out, &FloatLayer::from_ref(*l))?;
    }
    Ok(out)
}

pub fn composite(base: &RgbImage, layers: &[LayerRef<'_>]) -> Result<RgbImage, CompositeError> {
    Ok(composite_f64(base, layers)?.to_rgb())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageLevel {
    Low,
    Medium,
    High,
    Extreme,
}

impl CoverageLevel {
    pub const ALL: [CoverageLevel; 4] =
        [CoverageLevel::Low, CoverageLevel::Medium, CoverageLevel::High, CoverageLevel::Extreme];

    /// Fraction of pixels with alpha > 0.5.
    pub fn target(self) -> f64 {
        match self {
            CoverageLevel::Low => 0.10,
            CoverageLevel::Medium => 0.30,
            CoverageLevel::High => 0.55,
            CoverageLevel::Extreme => 0.80,
        }
    }
}

impl FromStr for CoverageLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "low" => Ok(CoverageLevel::Low),
            "medium" => Ok(CoverageLevel::Medium),
            "high" => Ok(CoverageLevel::High),
            "extreme" => Ok(CoverageLevel::Extreme),
            _ => Err(format!("unknown cloud coverage {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudLayer {
    pub rgb: RgbImage,
    pub alpha: AlphaMap,
    pub level: CoverageLevel,
    pub measured_coverage: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl CloudLayer {
    pub fn as_layer(&self) -> LayerRef<'_> {
        LayerRef { rgb: &self.rgb, alpha: &self.alpha }
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn cloud_alpha(n: f64, threshold: f64) -> f64 {
    smoothstep((n - threshold) / CLOUD_SOFTNESS)
}

/// Thresholded fractal value noise. The threshold is bisected on the
/// realized field until the share of pixels with alpha > 0.5 is as close to
/// the level's target as the pixel count allows.
pub fn generate_clouds(level: CoverageLevel, seed: u64, px: u32) -> CloudLayer {
    let field = fbm_field(seed, px, px, (px as f64 / 4.0).max(1.0), CLOUD_OCTAVES, CLOUD_PERSISTENCE);
    let mut sorted: Vec<f64> = field.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let target = level.target();
    // alpha > 0.5 exactly when n > threshold + softness / 2
    let covered = |t: f64| (n - sorted.partition_point(|&v| v <= t + CLOUD_SOFTNESS / 2.0)) as f64 / n as f64;
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if covered(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let threshold = if (covered(lo) - target).abs() < (covered(hi) - target).abs() { lo } else { hi };

    let alpha = field.map(|v| cloud_alpha(v, threshold));
    let rgb = RgbImage::from_fn(px, px, |x, y| {
        let a = alpha.get(x, y);
        let g = 196.0 + 52.0 * a;
        Rgb([g.round() as u8, g.round() as u8, (g + 6.0).min(255.0).round() as u8])
    });
    let measured_coverage = alpha.iter().filter(|&&a| a > 0.5).count() as f64 / n.max(1) as f64;
    CloudLayer { rgb, alpha, level, measured_coverage, seed, threshold }
}

/// Per-channel multiplier and offset of a time-of-day mood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mood {
    pub multiplier: [f64; 3],
    pub offset: [f64; 3],
}

pub fn mood_for(tag: TimeOfDay) -> Mood {
    match tag {
        TimeOfDay::Morning => Mood { multiplier: [1.05, 0.95, 0.85], offset: [10.0, 5.0, 0.0] },
        TimeOfDay::Day => Mood { multiplier: [1.0, 1.0, 1.0], offset: [0.0, 0.0, 0.0] },
        TimeOfDay::Evening => Mood { multiplier: [1.1, 0.8, 0.6], offset: [15.0, 0.0, 0.0] },
        TimeOfDay::Night => Mood { multiplier: [0.25, 0.3, 0.45], offset: [0.0, 0.0, 5.0] },
    }
}

fn check_weight(w: f64) -> Result<(), CompositeError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(CompositeError::InvalidWeight(w))
    }
}

/// `(1 − w)·I + w·(I ⊙ multiplier + offset)`.
pub fn mood_blend_f64(img: &mut FloatImage, tag: TimeOfDay, w: f64) -> Result<(), CompositeError> {
    check_weight(w)?;
    let m = mood_for(tag);
    for p in &mut img.data {
        for k in 0..3 {
            p[k] = (1.0 - w) * p[k] + w * (p[k] * m.multiplier[k] + m.offset[k]);
        }
    }
    Ok(())
}

pub fn mood_blend(img: &RgbImage, tag: TimeOfDay, w: f64) -> Result<RgbImage, CompositeError> {
    let mut f = FloatImage::from_rgb(img);
    mood_blend_f64(&mut f, tag, w)?;
    Ok(f.to_rgb())
}

/// Normalized sampled Gaussian, truncated at [`KERNEL_RADIUS_SIGMAS`].
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (KERNEL_RADIUS_SIGMAS * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric extension, repeated for any offset.
fn mirror(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn blur_axis(img: &FloatImage, kernel: &[f64], horizontal: bool) -> FloatImage {
    let (w, h) = (img.width as i64, img.height as i64);
    let r = (kernel.len() / 2) as i64;
    let mut data = vec![[0.0; 3]; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (j, k) in kernel.iter().enumerate() {
                let o = j as i64 - r;
                let idx = if horizontal {
                    (y * w) as usize + mirror(x + o, w)
                } else {
                    mirror(y + o, h) * w as usize + x as usize
                };
                let v = img.data[idx];
                for c in 0..3 {
                    acc[c] += k * v[c];
                }
            }
            data[(y * w + x) as usize] = acc;
        }
    }
    FloatImage { width: img.width, height: img.height, data }
}

/// Separable Gaussian blur with mirror boundaries.
pub fn gaussian_blur_f64(img: &FloatImage, sigma: f64) -> FloatImage {
    if sigma <= 0.0 || img.data.is_empty() {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    blur_axis(&blur_axis(img, &k, true), &k, false)
}

/// Output size for a reduction by `factor`: `max(1, floor(n / factor))`.
pub fn reduced_size(n: u32, factor: f64) -> u32 {
    ((n as f64 / factor + 1e-9).floor() as u32).max(1)
}

/// Area-weighted resampling to `(ow, oh)`; each output pixel averages the
/// source area it covers, including fractional edge pixels.
pub fn area_resample_f64(img: &FloatImage, ow: u32, oh: u32) -> FloatImage {
    let weights = |n: u32, on: u32| -> Vec<Vec<(usize, f64)>> {
        let step = n as f64 / on as f64;
        (0..on)
            .map(|i| {
                let (a, b) = (i as f64 * step, (i + 1) as f64 * step);
                let mut v = Vec::new();
                let mut s = a.floor() as usize;
                while (s as f64) < b && s < n as usize {
                    let cover = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                    if cover > 0.0 {
                        v.push((s, cover / step));
                    }
                    s += 1;
                }
                v
            })
            .collect()
    };
    let (wx, wy) = (weights(img.width, ow), weights(img.height, oh));
    let mut data = Vec::with_capacity((ow * oh) as usize);
    for ry in &wy {
        for rx in &wx {
            let mut acc = [0.0; 3];
            for &(sy, fy) in ry {
                for &(sx, fx) in rx {
                    let v = img.data[sy * img.width as usize + sx];
                    for c in 0..3 {
                        acc[c] += fx * fy * v[c];
                    }
                }
            }
            data.push(acc);
        }
    }
    FloatImage { width: ow, height: oh, data }
}

/// Gaussian PSF with `σ = psf_sigma_px · target / native` (in native
/// pixels), then area downsampling by `target / native`.
pub fn degrade_resolution_f64(
    img: &FloatImage,
    native_gsd: f64,
    target_gsd: f64,
    psf_sigma_px: f64,
) -> Result<FloatImage, CompositeError> {
    if !(native_gsd.is_finite() && native_gsd > 0.0 && target_gsd.is_finite() && target_gsd >= native_gsd) {
        return Err(CompositeError::InvalidGsd { native: native_gsd, target: target_gsd });
    }
    if !(psf_sigma_px.is_finite() && psf_sigma_px >= 0.0) {
        return Err(CompositeError::InvalidSigma(psf_sigma_px));
    }
    let factor = target_gsd / native_gsd;
    let blurred = gaussian_blur_f64(img, psf_sigma_px * factor);
    let (ow, oh) = (reduced_size(img.width, factor), reduced_size(img.height, factor));
    if (ow, oh) == img.dimensions() {
        return Ok(blurred);
    }
    Ok(area_resample_f64(&blurred, ow, oh))
}

pub fn degrade_resolution(
    img: &RgbImage,
    native_gsd: f64,
    target_gsd: f64,
    psf_sigma_px: f64,
) -> Result<RgbImage, CompositeError> {
    Ok(degrade_resolution_f64(&FloatImage::from_rgb(img), native_gsd, target_gsd, psf_sigma_px)?.to_rgb())
}

/// Where mood blending sits relative to the cloud layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoodPlacement {
    BeforeClouds,
    #[default]
    AfterClouds,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoodSpec {
    pub tag: TimeOfDay,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct CompositeRecipe<'a> {
    /// Bottom layer.
    pub synthesized: &'a RgbImage,
    /// Detail layers, bottom first (cars, then steam).
    pub details: Vec<LayerRef<'a>>,
    pub clouds: Option<LayerRef<'a>>,
    pub mood: Option<MoodSpec>,
    pub mood_placement: MoodPlacement,
    pub psf_sigma_px: f64,
    pub native_gsd: f64,
    /// `None` keeps the native resolution.
    pub target_gsd: Option<f64>,
}

/// synthesized → details → clouds → mood → degrade (mood may move before
/// clouds), rounded to 8 bits once at the end.
pub fn apply_recipe(r: &CompositeRecipe<'_>) -> Result<RgbImage, CompositeError> {
    if let Some(m) = r.mood {
        check_weight(m.weight)?;
    }
    let mut img = composite_f64(r.synthesized, &r.details)?;
    let blend = |img: &mut FloatImage| match r.mood {
        Some(m) => mood_blend_f64(img, m.tag, m.weight),
        None => Ok(()),
    };
    if r.mood_placement == MoodPlacement::BeforeClouds {
        blend(&mut img)?;
    }
    if let Some(c) = r.clouds {
        check_dims(img.dimensions(), c.rgb.dimensions())?;
        check_dims(img.dimensions(), c.alpha.dimensions())?;
        over_into(&mut img, &FloatLayer::from_ref(c))?;
    }
    if r.mood_placement == MoodPlacement::AfterClouds {
        blend(&mut img)?;
    }
    if let Some(t) = r.target_gsd {
        img = degrade_resolution_f64(&img, r.native_gsd, t, r.psf_sigma_px)?;
    } else if r.psf_sigma_px > 0.0 {
        img = degrade_resolution_f64(&img, r.native_gsd, r.native_gsd, r.psf_sigma_px)?;
    }
    Ok(img.to_rgb())
}
