//! Deterministic stand-in for a generative backend.
//!
//! The output is a pure function of the request digest and maps:
//!
//! 1. A 4-octave value-noise field (persistence 0.5, base lattice of
//!    `output_px / 8` pixels) seeded by the first 16 hex digits of the
//!    request digest gives terrain `c = (40 + 150 n, 55 + 140 n, 35 + 110 n)`.
//! 2. With strength `s = min(1, weight / 2)` per modality, applied in order:
//!    depth darkens far pixels, `c *= 1 - 0.6 s (1 - d / 255)`; sketch and
//!    canny pixels `>= 128` blend toward 235 gray, `c = (1 - s) c + 235 s`;
//!    color blends toward the block color, `c = (1 - s) c + s b`.
//! 3. Channels are rounded once and clamped to `[0, 255]`.
//!
//! Maps are sampled nearest-neighbor at `(x w / px, y h / px)`.

use super::{ControlImage, Modality, SynthesisRequest};
use crate::noise::fbm_field;
use image::{Rgb, RgbImage};

pub const MOCK_BACKEND_ID: &str = "synthsat-mock";
pub const MOCK_MODEL_NAME: &str = "value-noise-v1";

fn sample<'a>(req: &'a SynthesisRequest, m: Modality) -> Option<(&'a ControlImage, f64)> {
    let img = req.maps.get(&m)?;
    Some((img, (req.weight(m) / 2.0).min(1.0)))
}

/// Renders the mock image for a request that has already been validated.
pub fn mock_image(req: &SynthesisRequest) -> RgbImage {
    let digest = req.digest();
    let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    let px = req.output_px;
    let noise = fbm_field(seed, px, px, (px as f64 / 8.0).max(1.0), 4, 0.5);
    let (mw, mh) = req.maps.values().next().map(ControlImage::dimensions).unwrap_or((px, px));
    let src = |x: u32, y: u32| {
        (((x as u64 * mw as u64) / px as u64) as u32, ((y as u64 * mh as u64) / px as u64) as u32)
    };
    let depth = sample(req, Modality::Depth);
    let lines = [sample(req, Modality::Sketch), sample(req, Modality::Canny)];
    let color = sample(req, Modality::Color);

    RgbImage::from_fn(px, px, |x, y| {
        let n = noise.get(x, y);
        let mut c = [40.0 + 150.0 * n, 55.0 + 140.0 * n, 35.0 + 110.0 * n];
        let (sx, sy) = src(x, y);
        if let Some((img, s)) = depth {
            let d = img.gray_at(sx, sy) as f64 / 255.0;
            let f = 1.0 - 0.6 * s * (1.0 - d);
            c = c.map(|v| v * f);
        }
        for (img, s) in lines.iter().flatten() {
            if img.gray_at(sx, sy) >= 128 {
                c = c.map(|v| (1.0 - s) * v + s * 235.0);
            }
        }
        if let Some((img, s)) = color {
            let b = img.rgb_at(sx, sy);
            for (v, b) in c.iter_mut().zip(b) {
                *v = (1.0 - s) * *v + s * b as f64;
            }
        }
        Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}
