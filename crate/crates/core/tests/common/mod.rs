//! Independent reference implementations used as test oracles.
//!
//! None of these call the code they check. They trade speed for obviousness.

#![allow(dead_code)]

use image::GrayImage;
use synthsat_core::acquisition::{CameraPose, Constellation};
use synthsat_core::render::Primitive;
use synthsat_core::vec3::Vec3;

// ---------------------------------------------------------------------------
// Ray casting

/// Unit ray through the center of pixel `(col, row)`, rebuilt from the pose
/// vectors and the field of view.
pub fn pixel_ray(pose: &CameraPose, col: u32, row: u32, px: u32) -> Vec3 {
    let half = (pose.fov_deg.to_radians() * 0.5).tan();
    let u = (2.0 * col as f64 + 1.0) / px as f64 - 1.0;
    let v = 1.0 - (2.0 * row as f64 + 1.0) / px as f64;
    let right = pose.look_dir.cross(pose.up_dir);
    let d = pose.look_dir + right * (u * half) + pose.up_dir * (v * half);
    d * (1.0 / d.dot(d).sqrt())
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a.abs() < 1e-300 {
        return if b != 0.0 { vec![-c / b] } else { vec![] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let s = disc.sqrt();
    vec![(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
}

/// Nearest positive hit with a horizontal disk of `radius` at height `z`.
fn disk_t(o: Vec3, d: Vec3, cx: f64, cy: f64, radius: f64, z: f64) -> Option<f64> {
    if d.z == 0.0 {
        return None;
    }
    let t = (z - o.z) / d.z;
    let (x, y) = (o.x + t * d.x - cx, o.y + t * d.y - cy);
    (t > 0.0 && x * x + y * y <= radius * radius).then_some(t)
}

/// Hits with each of the six faces of an axis-aligned box `[lo, hi]`.
fn box_faces(o: Vec3, d: Vec3, lo: [f64; 3], hi: [f64; 3]) -> Vec<f64> {
    let oa = [o.x, o.y, o.z];
    let da = [d.x, d.y, d.z];
    let mut out = Vec::new();
    for axis in 0..3 {
        if da[axis] == 0.0 {
            continue;
        }
        for plane in [lo[axis], hi[axis]] {
            let t = (plane - oa[axis]) / da[axis];
            if t <= 0.0 {
                continue;
            }
            let inside = (0..3).filter(|&k| k != axis).all(|k| {
                let p = oa[k] + t * da[k];
                p >= lo[k] - 1e-9 && p <= hi[k] + 1e-9
            });
            if inside {
                out.push(t);
            }
        }
    }
    out
}

/// Every positive ray parameter at which the ray meets the primitive's surface.
pub fn surface_hits(p: &Primitive, o: Vec3, d: Vec3) -> Vec<f64> {
    match *p {
        Primitive::Aabb { min, max } => box_faces(o, d, [min.x, min.y, min.z], [max.x, max.y, max.z]),
        Primitive::OrientedBox { base_center, half, heading } => {
            // Express the ray in the box frame: the box x axis points along
            // (cos h, sin h) in world coordinates.
            let (ex, ey) = (Vec3::new(heading.cos(), heading.sin(), 0.0), Vec3::new(-heading.sin(), heading.cos(), 0.0));
            let rel = o - base_center;
            let lo_ = Vec3::new(rel.dot(ex), rel.dot(ey), rel.z);
            let ld = Vec3::new(d.dot(ex), d.dot(ey), d.z);
            box_faces(lo_, ld, [-half.x, -half.y, 0.0], [half.x, half.y, 2.0 * half.z])
        }
        Primitive::Cylinder { center, radius, z0, z1 } => {
            let (ox, oy) = (o.x - center[0], o.y - center[1]);
            let mut out: Vec<f64> = quadratic_roots(
                d.x * d.x + d.y * d.y,
                2.0 * (ox * d.x + oy * d.y),
                ox * ox + oy * oy - radius * radius,
            )
            .into_iter()
            .filter(|&t| t > 0.0 && (z0..=z1).contains(&(o.z + t * d.z)))
            .collect();
            out.extend(disk_t(o, d, center[0], center[1], radius, z0));
            out.extend(disk_t(o, d, center[0], center[1], radius, z1));
            out
        }
        Primitive::Frustum { center, r0, r1, z0, z1 } => {
            // Points with radial distance r(z) = r0 + (r1 - r0)(z - z0)/(z1 - z0).
            let k = (r1 - r0) / (z1 - z0);
            let (ox, oy) = (o.x - center[0], o.y - center[1]);
            let w = r0 + k * (o.z - z0);
            quadratic_roots(
                d.x * d.x + d.y * d.y - k * k * d.z * d.z,
                2.0 * (ox * d.x + oy * d.y) - 2.0 * k * w * d.z,
                ox * ox + oy * oy - w * w,
            )
            .into_iter()
            .filter(|&t| {
                let z = o.z + t * d.z;
                t > 0.0 && (z0..=z1).contains(&z) && r0 + k * (z - z0) >= 0.0
            })
            .collect()
        }
        Primitive::Disk { center, radius } => disk_t(o, d, center.x, center.y, radius, center.z).into_iter().collect(),
        Primitive::Dome { center, radius } => {
            let oc = o - center;
            quadratic_roots(d.dot(d), 2.0 * oc.dot(d), oc.dot(oc) - radius * radius)
                .into_iter()
                .filter(|&t| t > 0.0 && o.z + t * d.z >= center.z)
                .collect()
        }
    }
}

/// Distance from `o` along unit `d` to the first surface among `prims` or the
/// ground plane `z = 0`, testing every primitive.
pub fn brute_depth(prims: &[Primitive], o: Vec3, d: Vec3) -> f64 {
    let mut best = -o.z / d.z;
    for p in prims {
        for t in surface_hits(p, o, d) {
            best = best.min(t);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Canny

const GAUSS: [[i64; 5]; 5] = [
    [2, 4, 5, 4, 2],
    [4, 9, 12, 9, 4],
    [5, 12, 15, 12, 5],
    [4, 9, 12, 9, 4],
    [2, 4, 5, 4, 2],
];
const SOBEL_X: [[i64; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_Y: [[i64; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// Replicate-pads a row-major grid by `r` cells on every side.
fn pad(src: &[i64], w: usize, h: usize, r: usize) -> (Vec<i64>, usize) {
    let pw = w + 2 * r;
    let mut out = vec![0; pw * (h + 2 * r)];
    for py in 0..h + 2 * r {
        for px in 0..pw {
            let x = (px as i64 - r as i64).clamp(0, w as i64 - 1) as usize;
            let y = (py as i64 - r as i64).clamp(0, h as i64 - 1) as usize;
            out[py * pw + px] = src[y * w + x];
        }
    }
    (out, pw)
}

fn correlate<const K: usize>(src: &[i64], w: usize, h: usize, k: &[[i64; K]; K]) -> Vec<i64> {
    let r = K / 2;
    let (p, pw) = pad(src, w, h, r);
    let mut out = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for (j, row) in k.iter().enumerate() {
                for (i, c) in row.iter().enumerate() {
                    acc += c * p[(y + j) * pw + x + i];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Reference canny. The blur is kept as an integer multiple of the
/// normalized blur, which leaves every relative threshold unchanged.
/// Thresholds are on a 0..255 scale relative to the frame's peak gradient.
pub fn reference_canny(img: &GrayImage, low: u64, high: u64) -> Vec<bool> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src: Vec<i64> = img.as_raw().iter().map(|&v| v as i64).collect();
    let blur = correlate(&src, w, h, &GAUSS);
    let gx = correlate(&blur, w, h, &SOBEL_X);
    let gy = correlate(&blur, w, h, &SOBEL_Y);
    let mag: Vec<i128> = gx.iter().zip(&gy).map(|(&a, &b)| (a * a + b * b) as i128).collect();
    let peak = *mag.iter().max().unwrap_or(&0);
    if peak == 0 {
        return vec![false; w * h];
    }
    let at = |x: i64, y: i64| mag[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];

    // 0 none, 1 weak, 2 strong
    let mut class = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let mut angle = (gy[i] as f64).atan2(gx[i] as f64).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Neighbors behind and ahead along the gradient (image y points down).
            let (behind, ahead) = if !(22.5..157.5).contains(&angle) {
                ((-1, 0), (1, 0))
            } else if angle < 67.5 {
                ((-1, -1), (1, 1))
            } else if angle < 112.5 {
                ((0, -1), (0, 1))
            } else {
                ((1, -1), (-1, 1))
            };
            let m = mag[i];
            if !(m > at(x + behind.0, y + behind.1) && m >= at(x + ahead.0, y + ahead.1)) {
                continue;
            }
            let scaled = m * 255 * 255;
            class[i] = if scaled >= (high * high) as i128 * peak {
                2
            } else if scaled >= (low * low) as i128 * peak {
                1
            } else {
                0
            };
        }
    }
    // Grow strong pixels into 8-connected weak ones until nothing changes.
    let mut edge: Vec<bool> = class.iter().map(|&c| c == 2).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if edge[i] || class[i] == 0 {
                    continue;
                }
                let touches = (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|ny| (x.saturating_sub(1)..(x + 2).min(w)).any(|nx| edge[ny * w + nx]));
                if touches {
                    edge[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    edge
}

// ---------------------------------------------------------------------------
// Constellation passes

/// Off-nadir angle (degrees) of satellite `i` at `t`, minimized over every
/// pass rather than only the nearest one.
pub fn off_nadir_any_pass(c: &Constellation, i: usize, t: f64) -> f64 {
    let s = &c.satellites[i];
    let k_mid = (t / s.period_s - s.phase_offset).round() as i64;
    (k_mid - 2..=k_mid + 2)
        .map(|k| {
            let t_k = (k as f64 + s.phase_offset) * s.period_s;
            let along = s.ground_speed_mps * (t - t_k);
            let cross = c.cross_track_offset(i, k);
            ((along * along + cross * cross).sqrt() / s.altitude_m).atan().to_degrees()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Times of in-limit off-nadir minima found by stepping every `step` seconds.
/// Minima at the window edges count when the pass is clipped there.
pub fn brute_pass_times(c: &Constellation, step: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let n = ((c.t1 - c.t0) / step).floor() as usize;
    for (i, s) in c.satellites.iter().enumerate() {
        let ts: Vec<f64> = (0..=n).map(|k| c.t0 + k as f64 * step).collect();
        let th: Vec<f64> = ts.iter().map(|&t| off_nadir_any_pass(c, i, t)).collect();
        for j in 0..ts.len() {
            let left = j == 0 || th[j] <= th[j - 1];
            let right = j + 1 == ts.len() || th[j] < th[j + 1];
            if left && right && th[j] <= s.max_off_nadir_deg {
                out.push((i, ts[j]));
            }
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

// ---------------------------------------------------------------------------
// Gaussian fit

/// Least-squares fit of `a * exp(-r^2 / (2 s^2)) + b` to `values` sampled at
/// integer pixel centers around the known center `(cx, cy)`. Returns `s`.
/// For each trial `s`, `a` and `b` have a closed-form solution; `s` itself is
/// found by golden-section search over `[lo, hi]`.
pub fn fit_gaussian_sigma(values: &[f64], w: usize, cx: f64, cy: f64, lo: f64, hi: f64) -> f64 {
    let rss = |s: f64| {
        let g: Vec<f64> = (0..values.len())
            .map(|i| {
                let (x, y) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
                (-(x * x + y * y) / (2.0 * s * s)).exp()
            })
            .collect();
        let n = values.len() as f64;
        let (sg, sv) = (g.iter().sum::<f64>(), values.iter().sum::<f64>());
        let sgg = g.iter().map(|v| v * v).sum::<f64>();
        let sgv = g.iter().zip(values).map(|(a, b)| a * b).sum::<f64>();
        let det = n * sgg - sg * sg;
        let a = (n * sgv - sg * sv) / det;
        let b = (sv - a * sg) / n;
        g.iter().zip(values).map(|(gi, vi)| (a * gi + b - vi).powi(2)).sum::<f64>()
    };
    let (mut a, mut b) = (lo, hi);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-6 {
        let (c, d) = (b - r * (b - a), a + r * (b - a));
        if rss(c) < rss(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}
