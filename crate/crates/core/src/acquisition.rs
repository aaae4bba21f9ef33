//! Acquisition geometry: camera poses, ground sampling distance, sun state
//! and constellation pass scheduling.
//!
//! Azimuths are compass bearings in degrees, clockwise from north (`+y`).
//! The off-nadir angle is measured at the target between the local vertical
//! and the line to the satellite.

use crate::seed::hash_unit;
use crate::vec3::Vec3;
use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Off-nadir angles every pose resolver must support.
pub const OFF_NADIR_PRESETS_DEG: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];
pub const MAX_OFF_NADIR_DEG: f64 = 60.0;
pub const MAX_FOV_DEG: f64 = 60.0;
pub const DEFAULT_COARSE_STEP_S: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid acquisition parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),
    #[error("unknown time-of-day tag {0:?} (expected morning, day, evening or night)")]
    UnknownTimeTag(String),
    #[error("empty acquisition window: t1 ({t1}) must be greater than t0 ({t0})")]
    EmptyWindow { t0: f64, t1: f64 },
    #[error("invalid constellation: {0}")]
    InvalidConstellation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub altitude_m: f64,
    pub off_nadir_deg: f64,
    pub azimuth_deg: f64,
    pub fov_deg: f64,
    pub image_px: u32,
}

impl AcquisitionParams {
    /// Every violated range, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.altitude_m.is_finite() && self.altitude_m > 0.0) {
            v.push(format!("altitude_m must be > 0, got {}", self.altitude_m));
        }
        if !(0.0..MAX_OFF_NADIR_DEG).contains(&self.off_nadir_deg) {
            v.push(format!(
                "off_nadir_deg must be in [0, 60), got {}",
                self.off_nadir_deg
            ));
        }
        if !(0.0..360.0).contains(&self.azimuth_deg) {
            v.push(format!(
                "azimuth_deg must be in [0, 360), got {}",
                self.azimuth_deg
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < MAX_FOV_DEG) {
            v.push(format!("fov_deg must be in (0, 60), got {}", self.fov_deg));
        }
        if self.image_px == 0 {
            v.push("image_px must be positive".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(GeometryError::InvalidParams(v))
        }
    }

    pub fn slant_range_m(&self) -> f64 {
        self.altitude_m / self.off_nadir_deg.to_radians().cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_dir: Vec3,
    pub up_dir: Vec3,
    pub fov_deg: f64,
}

impl CameraPose {
    /// Image-right axis; east at nadir with north up.
    pub fn right_dir(&self) -> Vec3 {
        self.look_dir.cross(self.up_dir)
    }

    fn half_extent(&self) -> f64 {
        (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Unit ray direction through image-plane coordinates `(u, v)` in
    /// `[-1, 1]`, `u` to the right and `v` up.
    pub fn ray_dir_ndc(&self, u: f64, v: f64) -> Vec3 {
        let t = self.half_extent();
        (self.look_dir + self.right_dir() * (u * t) + self.up_dir * (v * t)).normalized()
    }

    /// Ray through the center of pixel `(col, row)` of a square `px`-sized
    /// image; row 0 is the top.
    pub fn pixel_ray(&self, col: u32, row: u32, px: u32) -> Vec3 {
        let n = px as f64;
        let u = (col as f64 + 0.5) / n * 2.0 - 1.0;
        let v = 1.0 - (row as f64 + 0.5) / n * 2.0;
        self.ray_dir_ndc(u, v)
    }

    /// Continuous pixel coordinates `(col, row)` of a world point, or `None`
    /// when it is behind the camera.
    pub fn project(&self, p: Vec3, px: u32) -> Option<(f64, f64)> {
        let d = p - self.position;
        let z = d.dot(self.look_dir);
        if z <= 0.0 {
            return None;
        }
        let t = self.half_extent();
        let u = d.dot(self.right_dir()) / z / t;
        let v = d.dot(self.up_dir) / z / t;
        let n = px as f64;
        Some(((u + 1.0) / 2.0 * n, (1.0 - v) / 2.0 * n))
    }
}

fn horizontal(azimuth_deg: f64) -> Vec3 {
    let az = azimuth_deg.to_radians();
    Vec3::new(az.sin(), az.cos(), 0.0)
}

/// Places the camera on the cone of half-angle `off_nadir_deg` about the
/// target's vertical, on the `azimuth_deg` side, at slant range
/// `altitude / cos(off_nadir)`, looking at the target with north projected as
/// image-up.
pub fn resolve_pose(params: &AcquisitionParams, target: Vec3) -> Result<CameraPose, GeometryError> {
    params.validate()?;
    let theta = params.off_nadir_deg.to_radians();
    let to_sat = horizontal(params.azimuth_deg) * theta.sin() + Vec3::Z * theta.cos();
    let position = target + to_sat * params.slant_range_m();
    let look_dir = -to_sat;
    let north = Vec3::new(0.0, 1.0, 0.0);
    let up_dir = (north - look_dir * north.dot(look_dir)).normalized();
    Ok(CameraPose {
        position,
        look_dir,
        up_dir,
        fov_deg: params.fov_deg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gsd {
    pub along_m: f64,
    pub across_m: f64,
}

/// Pinhole approximation of ground sampling distance at the image center.
pub fn ground_sampling_distance(params: &AcquisitionParams) -> Result<Gsd, GeometryError> {
    params.validate()?;
    let cos_t = params.off_nadir_deg.to_radians().cos();
    let across = 2.0 * params.slant_range_m() * (params.fov_deg.to_radians() / 2.0).tan()
        / params.image_px as f64;
    Ok(Gsd {
        along_m: across / cos_t,
        across_m: across,
    })
}

/// Ground-plane intersections of the four image-corner rays, in the order
/// top-left, top-right, bottom-right, bottom-left.
pub fn ground_footprint(pose: &CameraPose, ground_z: f64) -> [Vec3; 4] {
    [(-1.0, 1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)].map(|(u, v)| {
        let d = pose.ray_dir_ndc(u, v);
        let t = (ground_z - pose.position.z) / d.z;
        pose.position + d * t
    })
}

/// Along-look extent over across-look extent of the projected corners.
pub fn footprint_elongation(params: &AcquisitionParams) -> Result<f64, GeometryError> {
    let pose = resolve_pose(params, Vec3::ZERO)?;
    let corners = ground_footprint(&pose, 0.0);
    let along = -horizontal(params.azimuth_deg);
    let across = Vec3::new(along.y, -along.x, 0.0);
    let extent = |axis: Vec3| {
        let vals = corners.map(|c| c.dot(axis));
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    Ok(extent(along) / extent(across))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Morning,
    Day,
    Evening,
    Night,
}

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 4] = [Self::Morning, Self::Day, Self::Evening, Self::Night];

    pub fn name(self) -> &'static str {
        match self {
            Self::Morning => "morning",
            Self::Day => "day",
            Self::Evening => "evening",
            Self::Night => "night",
        }
    }

    /// Local-hour buckets: morning [5, 10), day [10, 16), evening [16, 20),
    /// night otherwise.
    pub fn from_local_hour(hour: f64) -> Self {
        let h = hour.rem_euclid(24.0);
        if (5.0..10.0).contains(&h) {
            Self::Morning
        } else if (10.0..16.0).contains(&h) {
            Self::Day
        } else if (16.0..20.0).contains(&h) {
            Self::Evening
        } else {
            Self::Night
        }
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TimeOfDay {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self, GeometryError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| GeometryError::UnknownTimeTag(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunState {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub ambient: f64,
    pub color_temperature_tag: TimeOfDay,
}

impl SunState {
    /// Unit vector from the scene toward the sun.
    pub fn direction(&self) -> Vec3 {
        let el = self.elevation_deg.to_radians();
        horizontal(self.azimuth_deg) * el.cos() + Vec3::Z * el.sin()
    }

    pub fn is_night(&self) -> bool {
        self.elevation_deg < 0.0
    }

    /// Per-channel tint of direct sunlight; ambient light is untinted.
    pub fn direct_tint(&self) -> [f64; 3] {
        match self.color_temperature_tag {
            TimeOfDay::Morning => [1.0, 0.92, 0.8],
            TimeOfDay::Day => [1.0, 1.0, 1.0],
            TimeOfDay::Evening => [1.0, 0.8, 0.62],
            TimeOfDay::Night => [0.7, 0.8, 1.0],
        }
    }
}

/// Fixed lighting table: morning (15°, az 90°), day (60°, az 180°), evening
/// (10°, az 270°), night (-30°), ambient 0.25/0.35/0.25/0.08.
pub fn sun_for_time(tag: TimeOfDay) -> SunState {
    let (elevation_deg, azimuth_deg, ambient) = match tag {
        TimeOfDay::Morning => (15.0, 90.0, 0.25),
        TimeOfDay::Day => (60.0, 180.0, 0.35),
        TimeOfDay::Evening => (10.0, 270.0, 0.25),
        TimeOfDay::Night => (-30.0, 0.0, 0.08),
    };
    SunState {
        elevation_deg,
        azimuth_deg,
        ambient,
        color_temperature_tag: tag,
    }
}

pub fn sun_for_tag(tag: &str) -> Result<SunState, GeometryError> {
    Ok(sun_for_time(tag.parse()?))
}

fn default_altitude() -> f64 {
    500_000.0
}
fn default_ground_speed() -> f64 {
    7_000.0
}
fn default_cross_track() -> f64 {
    400_000.0
}

/// One satellite of the flat-Earth overflight model.
///
/// The ground track crosses the target's along-track coordinate at
/// `(k + phase_offset) * period_s` for every integer `k`, moving at
/// `ground_speed_mps` on bearing `track_heading_deg`, offset cross-track by a
/// per-pass seeded distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Satellite {
    pub period_s: f64,
    #[serde(default)]
    pub phase_offset: f64,
    pub max_off_nadir_deg: f64,
    #[serde(default = "default_altitude")]
    pub altitude_m: f64,
    #[serde(default = "default_ground_speed")]
    pub ground_speed_mps: f64,
    #[serde(default)]
    pub track_heading_deg: f64,
}

impl Satellite {
    pub fn new(period_s: f64, phase_offset: f64, max_off_nadir_deg: f64) -> Self {
        Self {
            period_s,
            phase_offset,
            max_off_nadir_deg,
            altitude_m: default_altitude(),
            ground_speed_mps: default_ground_speed(),
            track_heading_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub satellites: Vec<Satellite>,
    pub t0: f64,
    pub t1: f64,
    /// Seeds the per-pass cross-track offsets.
    pub seed: u64,
    /// Cross-track offsets are uniform in `[-max_cross_track_m, max_cross_track_m]`.
    pub max_cross_track_m: f64,
}

impl Constellation {
    pub fn new(satellites: Vec<Satellite>, t0: f64, t1: f64, seed: u64) -> Self {
        Self {
            satellites,
            t0,
            t1,
            seed,
            max_cross_track_m: default_cross_track(),
        }
    }

    /// `n` identical satellites with phases `i / n`.
    pub fn evenly_phased(n: usize, template: &Satellite, t0: f64, t1: f64, seed: u64) -> Self {
        let satellites = (0..n)
            .map(|i| Satellite {
                phase_offset: i as f64 / n as f64,
                ..template.clone()
            })
            .collect();
        Self::new(satellites, t0, t1, seed)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.t1 > self.t0) {
            v.push(format!(
                "window end ({}) must be greater than start ({})",
                self.t1, self.t0
            ));
        }
        if !(self.max_cross_track_m >= 0.0) {
            v.push("max_cross_track_m must be >= 0".into());
        }
        for (i, s) in self.satellites.iter().enumerate() {
            if !(s.period_s > 0.0) {
                v.push(format!("satellite {i}: period_s must be > 0, got {}", s.period_s));
            }
            if !(0.0..1.0).contains(&s.phase_offset) {
                v.push(format!(
                    "satellite {i}: phase_offset must be in [0, 1), got {}",
                    s.phase_offset
                ));
            }
            if !(0.0..MAX_OFF_NADIR_DEG).contains(&s.max_off_nadir_deg) {
                v.push(format!(
                    "satellite {i}: max_off_nadir_deg must be in [0, 60), got {}",
                    s.max_off_nadir_deg
                ));
            }
            if !(s.altitude_m > 0.0) {
                v.push(format!("satellite {i}: altitude_m must be > 0"));
            }
            if !(s.ground_speed_mps > 0.0) {
                v.push(format!("satellite {i}: ground_speed_mps must be > 0"));
            }
        }
        v
    }

    /// Seeded cross-track offset of pass `k` of satellite `index`.
    pub fn cross_track_offset(&self, index: usize, k: i64) -> f64 {
        let u = hash_unit(self.seed, index as i64, k, 0x0C7);
        (2.0 * u - 1.0) * self.max_cross_track_m
    }

    /// Nearest pass index of a satellite at time `t`.
    pub fn pass_index(&self, index: usize, t: f64) -> i64 {
        let s = &self.satellites[index];
        (t / s.period_s - s.phase_offset).round() as i64
    }

    /// Off-nadir angle (degrees) and azimuth of the satellite seen from the
    /// target at time `t`.
    pub fn look_angles(&self, index: usize, t: f64) -> (f64, f64) {
        let s = &self.satellites[index];
        let k = self.pass_index(index, t);
        let t_k = (k as f64 + s.phase_offset) * s.period_s;
        let along = s.ground_speed_mps * (t - t_k);
        let cross = self.cross_track_offset(index, k);
        let track = horizontal(s.track_heading_deg);
        let right = Vec3::new(track.y, -track.x, 0.0);
        let ground = track * along + right * cross;
        let dist = along.hypot(cross);
        let off_nadir = (dist / s.altitude_m).atan().to_degrees();
        let azimuth = ground.x.atan2(ground.y).to_degrees().rem_euclid(360.0);
        (off_nadir, azimuth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionEvent {
    pub time_s: f64,
    /// `None` for explicitly tasked acquisitions.
    pub satellite_index: Option<usize>,
    pub off_nadir_deg: f64,
    pub azimuth_deg: f64,
    pub altitude_m: f64,
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - (b - a) * inv_phi;
    let mut d = a + (b - a) * inv_phi;
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * inv_phi;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * inv_phi;
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Acquisition opportunities of `c` over the target inside `[t0, t1]`.
///
/// Off-nadir is sampled every `coarse_step` seconds; each sampled local
/// minimum is refined by golden-section search within one step on either
/// side, and kept when it is within the satellite's off-nadir limit. A pass
/// clipped by the window edge is reported at the edge. Events are sorted by
/// time, then satellite.
pub fn schedule_acquisitions(
    c: &Constellation,
    coarse_step: f64,
) -> Result<Vec<AcquisitionEvent>, GeometryError> {
    if !(c.t1 > c.t0) {
        return Err(GeometryError::EmptyWindow { t0: c.t0, t1: c.t1 });
    }
    if !(coarse_step > 0.0) {
        return Err(GeometryError::InvalidParams(vec![format!(
            "coarse_step must be > 0, got {coarse_step}"
        )]));
    }
    let problems = c.violations();
    if !problems.is_empty() {
        return Err(GeometryError::InvalidConstellation(problems.join("; ")));
    }

    let mut events = Vec::new();
    let n_steps = ((c.t1 - c.t0) / coarse_step).ceil() as usize;
    for (i, sat) in c.satellites.iter().enumerate() {
        let times: Vec<f64> = (0..=n_steps)
            .map(|k| (c.t0 + k as f64 * coarse_step).min(c.t1))
            .collect();
        let theta: Vec<f64> = times.iter().map(|&t| c.look_angles(i, t).0).collect();
        let mut last_pass = None;
        for j in 0..times.len() {
            let left_ok = j == 0 || theta[j] <= theta[j - 1];
            let right_ok = j + 1 == times.len() || theta[j] < theta[j + 1];
            if !(left_ok && right_ok) {
                continue;
            }
            let lo = (times[j] - coarse_step).max(c.t0);
            let hi = (times[j] + coarse_step).min(c.t1);
            let t = golden_min(|t| c.look_angles(i, t).0, lo, hi, 1e-3);
            let t = [lo, t, hi]
                .into_iter()
                .min_by(|a, b| c.look_angles(i, *a).0.total_cmp(&c.look_angles(i, *b).0))
                .unwrap_or(t);
            let (off_nadir, azimuth) = c.look_angles(i, t);
            let pass = c.pass_index(i, t);
            if off_nadir <= sat.max_off_nadir_deg && last_pass != Some(pass) {
                last_pass = Some(pass);
                events.push(AcquisitionEvent {
                    time_s: t,
                    satellite_index: Some(i),
                    off_nadir_deg: off_nadir,
                    azimuth_deg: azimuth,
                    altitude_m: sat.altitude_m,
                });
            }
        }
    }
    events.sort_by(|a, b| {
        a.time_s
            .total_cmp(&b.time_s)
            .then(a.satellite_index.cmp(&b.satellite_index))
    });
    Ok(events)
}

/// Mean gap between consecutive event times; `None` with fewer than two.
pub fn mean_revisit_s(events: &[AcquisitionEvent]) -> Option<f64> {
    if events.len() < 2 {
        return None;
    }
    let span = events[events.len() - 1].time_s - events[0].time_s;
    Some(span / (events.len() - 1) as f64)
}

/// ISO-8601 UTC timestamp of `epoch + t` with millisecond precision.
pub fn format_event_time(epoch: DateTime<Utc>, t: f64) -> String {
    let ms = (t * 1000.0).round() as i64;
    (epoch + Duration::milliseconds(ms)).to_rfc3339_opts(SecondsFormat::Millis, true)
}
