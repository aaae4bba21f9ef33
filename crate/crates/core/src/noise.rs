//! Seeded lattice value noise.

use crate::raster::Raster;
use crate::seed::hash_unit;

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Single-octave value noise in `[0, 1)`: hashed lattice values blended with
/// a smoothstep bilinear interpolant. `octave` selects an independent lattice.
pub fn value_noise(seed: u64, octave: i64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ix, iy) = (x0 as i64, y0 as i64);
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let v = |dx: i64, dy: i64| hash_unit(seed, ix + dx, iy + dy, octave);
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
    let bot = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
    top + (bot - top) * ty
}

/// Fractal sum of `octaves` value-noise layers, frequency doubling and
/// amplitude scaled by `persistence` each octave, normalized to `[0, 1)`.
pub fn fbm(seed: u64, x: f64, y: f64, octaves: u32, persistence: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed, o as i64, x * freq, y * freq);
        norm += amp;
        amp *= persistence;
        freq *= 2.0;
    }
    if norm > 0.0 {
        sum / norm
    } else {
        0.0
    }
}

/// Samples [`fbm`] at pixel centers; `feature_px` is the base-octave lattice
/// spacing in pixels.
pub fn fbm_field(
    seed: u64,
    width: u32,
    height: u32,
    feature_px: f64,
    octaves: u32,
    persistence: f64,
) -> Raster<f64> {
    let mut out = Raster::filled(width, height, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / feature_px, (y as f64 + 0.5) / feature_px);
            out.set(x, y, fbm(seed, u, v, octaves, persistence));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_hit_hash() {
        assert_eq!(value_noise(9, 0, 3.0, -2.0), hash_unit(9, 3, -2, 0));
    }

    #[test]
    fn range_and_continuity() {
        for i in 0..2000 {
            let x = i as f64 * 0.013;
            let a = fbm(4, x, 1.7, 5, 0.5);
            let b = fbm(4, x + 1e-7, 1.7, 5, 0.5);
            assert!((0.0..1.0).contains(&a));
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn seeds_differ_and_repeat() {
        let a = fbm_field(1, 16, 16, 4.0, 3, 0.5);
        assert_eq!(a, fbm_field(1, 16, 16, 4.0, 3, 0.5));
        assert_ne!(a, fbm_field(2, 16, 16, 4.0, 3, 0.5));
    }
}
