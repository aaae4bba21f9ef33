//! Deterministic CPU raycaster.
//!
//! Structures are modelled with exact analytic primitives: boxes for
//! buildings, a cylinder with a hemispherical dome for the reactor, an open
//! frustum around a dark basin for cooling towers and a thin capped cylinder
//! for stacks. Every pixel casts one primary ray; the nearest hit wins. Cars
//! and steam are traced in separate passes so they can be composited later.

use crate::acquisition::{CameraPose, SunState};
use crate::raster::{AlphaMap, DepthMap, InstanceMask, Raster};
use crate::scene::{
    FacilityLayout, GridSpec, StructureClass, StructureKind, CAR_HEIGHT_M, CAR_LENGTH_M,
    CAR_WIDTH_M, DEFAULT_CELL_SIZE_M,
};
use crate::seed::{self, STEAM_STREAM};
use crate::vec3::Vec3;
use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const MIN_IMAGE_PX: u32 = 16;
const EPS: f64 = 1e-7;
/// Peak opacity of a steam puff at intensity 1 along its full diameter.
pub const STEAM_OPACITY: f64 = 0.6;

const GROUND_COLOR: [f64; 3] = [118.0, 124.0, 108.0];
const PARKING_COLOR: [f64; 3] = [68.0, 68.0, 72.0];
const REACTOR_COLOR: [f64; 3] = [198.0, 198.0, 194.0];
const DOME_COLOR: [f64; 3] = [216.0, 216.0, 212.0];
const TOWER_COLOR: [f64; 3] = [182.0, 180.0, 174.0];
const BASIN_COLOR: [f64; 3] = [58.0, 60.0, 62.0];
const STACK_COLOR: [f64; 3] = [150.0, 150.0, 150.0];
const BUILDING_COLOR: [f64; 3] = [188.0, 188.0, 188.0];
const STEAM_COLOR: [f64; 3] = [240.0, 240.0, 240.0];

pub const CAR_PALETTE: [[u8; 3]; 8] = [
    [236, 236, 232],
    [24, 24, 26],
    [168, 170, 174],
    [170, 30, 28],
    [30, 60, 150],
    [96, 98, 100],
    [30, 80, 44],
    [200, 184, 150],
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("degenerate camera pose: look direction is parallel to up direction")]
    DegeneratePose,
    #[error("camera pose sees the horizon; every ray must hit the ground plane")]
    HorizonInView,
    #[error("image size {0} is below the minimum of {MIN_IMAGE_PX} px")]
    ImageTooSmall(u32),
    #[error("unknown detail layer {0:?} (expected cars, steam or clouds)")]
    UnknownLayer(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailLayer {
    Cars,
    Steam,
    /// Clouds are generated by the compositor; this layer renders empty.
    Clouds,
}

impl DetailLayer {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cars => "cars",
            Self::Steam => "steam",
            Self::Clouds => "clouds",
        }
    }
}

impl fmt::Display for DetailLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetailLayer {
    type Err = RenderError;
    fn from_str(s: &str) -> Result<Self, RenderError> {
        match s {
            "cars" => Ok(Self::Cars),
            "steam" => Ok(Self::Steam),
            "clouds" | "clouds-placeholder" => Ok(Self::Clouds),
            other => Err(RenderError::UnknownLayer(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned box.
    Aabb { min: Vec3, max: Vec3 },
    /// Box rotated about the vertical axis through `base_center`, spanning
    /// `base_center.z .. base_center.z + 2 * half.z`.
    OrientedBox {
        base_center: Vec3,
        half: Vec3,
        heading: f64,
    },
    /// Vertical cylinder with both caps.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z0: f64,
        z1: f64,
    },
    /// Lateral surface of a vertical truncated cone, open at both ends.
    Frustum {
        center: [f64; 2],
        r0: f64,
        r1: f64,
        z0: f64,
        z1: f64,
    },
    /// Horizontal disk facing up.
    Disk { center: Vec3, radius: f64 },
    /// Upper hemisphere of a sphere centered at `center`.
    Dome { center: Vec3, radius: f64 },
}

fn axis(v: Vec3, i: usize) -> f64 {
    match i {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    }
}

fn unit_axis(i: usize, sign: f64) -> Vec3 {
    match i {
        0 => Vec3::new(sign, 0.0, 0.0),
        1 => Vec3::new(0.0, sign, 0.0),
        _ => Vec3::new(0.0, 0.0, sign),
    }
}

/// Roots of `a t^2 + b t + c = 0` in ascending order, using the
/// cancellation-free form.
fn solve_quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a == 0.0 {
        if b == 0.0 {
            return None;
        }
        let t = -c / b;
        return Some((t, t));
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (t0, t1) = if q == 0.0 {
        let r = (-c / a).sqrt();
        (-r, r)
    } else {
        (q / a, c / q)
    };
    Some(if t0 <= t1 { (t0, t1) } else { (t1, t0) })
}

/// Slab test; returns `(t_enter, t_exit, entry normal)`.
fn slab(o: Vec3, d: Vec3, min: Vec3, max: Vec3) -> Option<(f64, f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut normal = Vec3::Z;
    for i in 0..3 {
        let (oi, di, lo, hi) = (axis(o, i), axis(d, i), axis(min, i), axis(max, i));
        if di == 0.0 {
            if oi < lo || oi > hi {
                return None;
            }
            continue;
        }
        let t1 = (lo - oi) / di;
        let t2 = (hi - oi) / di;
        let (near, far, sign) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if near > t_near {
            t_near = near;
            normal = unit_axis(i, sign);
        }
        t_far = t_far.min(far);
    }
    (t_near <= t_far).then_some((t_near, t_far, normal))
}

fn nearest(a: Option<Hit>, b: Option<Hit>) -> Option<Hit> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.t < x.t { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

fn cap_hit(o: Vec3, d: Vec3, center: [f64; 2], radius: f64, z: f64, normal: Vec3) -> Option<Hit> {
    if d.z == 0.0 {
        return None;
    }
    let t = (z - o.z) / d.z;
    if t <= EPS {
        return None;
    }
    let px = o.x + t * d.x - center[0];
    let py = o.y + t * d.y - center[1];
    (px * px + py * py <= radius * radius).then_some(Hit { t, normal })
}

impl Primitive {
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        match *self {
            Primitive::Aabb { min, max } => {
                let (t0, _, normal) = slab(o, d, min, max)?;
                (t0 > EPS).then_some(Hit { t: t0, normal })
            }
            Primitive::OrientedBox {
                base_center,
                half,
                heading,
            } => {
                let (s, c) = heading.sin_cos();
                let rel = o - base_center;
                let lo = Vec3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                let ld = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let min = Vec3::new(-half.x, -half.y, 0.0);
                let max = Vec3::new(half.x, half.y, 2.0 * half.z);
                let (t0, _, n) = slab(lo, ld, min, max)?;
                if t0 <= EPS {
                    return None;
                }
                let normal = Vec3::new(c * n.x - s * n.y, s * n.x + c * n.y, n.z);
                Some(Hit { t: t0, normal })
            }
            Primitive::Cylinder {
                center,
                radius,
                z0,
                z1,
            } => {
                let ox = o.x - center[0];
                let oy = o.y - center[1];
                let a = d.x * d.x + d.y * d.y;
                let b = 2.0 * (ox * d.x + oy * d.y);
                let c = ox * ox + oy * oy - radius * radius;
                let mut side = None;
                if a > 0.0 {
                    if let Some((t0, t1)) = solve_quadratic(a, b, c) {
                        for t in [t0, t1] {
                            let z = o.z + t * d.z;
                            if t > EPS && z >= z0 && z <= z1 {
                                let n = Vec3::new(ox + t * d.x, oy + t * d.y, 0.0) * (1.0 / radius);
                                side = Some(Hit { t, normal: n });
                                break;
                            }
                        }
                    }
                }
                let top = cap_hit(o, d, center, radius, z1, Vec3::Z);
                let bottom = cap_hit(o, d, center, radius, z0, -Vec3::Z);
                nearest(nearest(side, top), bottom)
            }
            Primitive::Frustum {
                center,
                r0,
                r1,
                z0,
                z1,
            } => {
                let k = (r1 - r0) / (z1 - z0);
                let ox = o.x - center[0];
                let oy = o.y - center[1];
                let w0 = r0 + k * (o.z - z0);
                let a = d.x * d.x + d.y * d.y - k * k * d.z * d.z;
                let b = 2.0 * (ox * d.x + oy * d.y - k * w0 * d.z);
                let c = ox * ox + oy * oy - w0 * w0;
                let (t0, t1) = solve_quadratic(a, b, c)?;
                for t in [t0, t1] {
                    let z = o.z + t * d.z;
                    if t > EPS && z >= z0 && z <= z1 {
                        let w = r0 + k * (z - z0);
                        let n = Vec3::new(ox + t * d.x, oy + t * d.y, -w * k).normalized();
                        return Some(Hit { t, normal: n });
                    }
                }
                None
            }
            Primitive::Disk { center, radius } => {
                cap_hit(o, d, [center.x, center.y], radius, center.z, Vec3::Z)
            }
            Primitive::Dome { center, radius } => {
                let oc = o - center;
                let (t0, t1) =
                    solve_quadratic(d.dot(d), 2.0 * oc.dot(d), oc.dot(oc) - radius * radius)?;
                for t in [t0, t1] {
                    let p = o + d * t;
                    if t > EPS && p.z >= center.z {
                        return Some(Hit {
                            t,
                            normal: (p - center) * (1.0 / radius),
                        });
                    }
                }
                None
            }
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Primitive::Aabb { min, max } => (min, max),
            Primitive::OrientedBox {
                base_center,
                half,
                ..
            } => {
                let r = half.x.hypot(half.y);
                (
                    Vec3::new(base_center.x - r, base_center.y - r, base_center.z),
                    Vec3::new(base_center.x + r, base_center.y + r, base_center.z + 2.0 * half.z),
                )
            }
            Primitive::Cylinder {
                center,
                radius,
                z0,
                z1,
            } => (
                Vec3::new(center[0] - radius, center[1] - radius, z0),
                Vec3::new(center[0] + radius, center[1] + radius, z1),
            ),
            Primitive::Frustum {
                center,
                r0,
                r1,
                z0,
                z1,
            } => {
                let r = r0.max(r1);
                (
                    Vec3::new(center[0] - r, center[1] - r, z0),
                    Vec3::new(center[0] + r, center[1] + r, z1),
                )
            }
            Primitive::Disk { center, radius } => (
                Vec3::new(center.x - radius, center.y - radius, center.z),
                Vec3::new(center.x + radius, center.y + radius, center.z),
            ),
            Primitive::Dome { center, radius } => (
                Vec3::new(center.x - radius, center.y - radius, center.z),
                Vec3::new(center.x + radius, center.y + radius, center.z + radius),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub primitive: Primitive,
    pub color: [f64; 3],
}

fn union_bounds(shapes: &[Shape]) -> (Vec3, Vec3) {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in shapes {
        let (a, b) = s.primitive.bounds();
        lo = Vec3::new(lo.x.min(a.x), lo.y.min(a.y), lo.z.min(a.z));
        hi = Vec3::new(hi.x.max(b.x), hi.y.max(b.y), hi.z.max(b.z));
    }
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureGroup {
    pub instance_id: u32,
    pub class: StructureClass,
    pub shapes: Vec<Shape>,
    pub bounds: (Vec3, Vec3),
}

impl StructureGroup {
    pub fn new(instance_id: u32, class: StructureClass, shapes: Vec<Shape>) -> Self {
        let bounds = union_bounds(&shapes);
        Self {
            instance_id,
            class,
            shapes,
            bounds,
        }
    }

    fn intersect(&self, o: Vec3, d: Vec3, best: f64) -> Option<(Hit, [f64; 3])> {
        let (t_in, t_out, _) = slab(o, d, self.bounds.0, self.bounds.1)?;
        if t_out <= EPS || t_in >= best {
            return None;
        }
        let mut found: Option<(Hit, [f64; 3])> = None;
        for s in &self.shapes {
            if let Some(h) = s.primitive.intersect(o, d) {
                if h.t < best && found.is_none_or(|(f, _)| h.t < f.t) {
                    found = Some((h, s.color));
                }
            }
        }
        found
    }
}

/// Ellipsoidal steam puff with opacity already scaled by intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteamPuff {
    pub tower_instance_id: u32,
    pub center: Vec3,
    pub radii: Vec3,
    pub opacity: f64,
}

impl SteamPuff {
    /// Chord through the puff as a fraction of its diameter, in `[0, 1]`.
    pub fn chord_fraction(&self, o: Vec3, d: Vec3) -> f64 {
        let inv = Vec3::new(1.0 / self.radii.x, 1.0 / self.radii.y, 1.0 / self.radii.z);
        let rel = o - self.center;
        let lo = Vec3::new(rel.x * inv.x, rel.y * inv.y, rel.z * inv.z);
        let ld = Vec3::new(d.x * inv.x, d.y * inv.y, d.z * inv.z);
        match solve_quadratic(ld.dot(ld), 2.0 * lo.dot(ld), lo.dot(lo) - 1.0) {
            Some((t0, t1)) if t1 > 0.0 => {
                let len = (t1 - t0.max(0.0)) * ld.length();
                (len / 2.0).clamp(0.0, 1.0)
            }
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    /// World rectangles `(x0, y0, x1, y1)` painted as asphalt.
    pub parking: Vec<(f64, f64, f64, f64)>,
}

impl Ground {
    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let in_lot = self
            .parking
            .iter()
            .any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1);
        if in_lot {
            PARKING_COLOR
        } else {
            GROUND_COLOR
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub ground: Ground,
    pub structures: Vec<StructureGroup>,
    pub cars: Vec<Shape>,
    pub steam: Vec<SteamPuff>,
}

impl SceneGeometry {
    pub fn instance_ids(&self) -> Vec<u32> {
        self.structures.iter().map(|g| g.instance_id).collect()
    }

    fn top_z(&self) -> f64 {
        let s = self.structures.iter().map(|g| g.bounds.1.z);
        let c = self.cars.iter().map(|c| c.primitive.bounds().1.z);
        let p = self.steam.iter().map(|p| p.center.z + p.radii.z);
        s.chain(c).chain(p).fold(0.0, f64::max)
    }
}

fn structure_shapes(kind: &StructureKind, grid: &GridSpec, cells: &[(f64, f64, f64, f64)], height: f64) -> Vec<Shape> {
    let s = grid.cell_size;
    let (x0, y0, x1, y1) = cells[0];
    let center = [(x0 + x1) / 2.0, (y0 + y1) / 2.0];
    match kind {
        StructureKind::Reactor => {
            let r = (0.4 * s).min(height / 2.0);
            vec![
                Shape {
                    primitive: Primitive::Cylinder {
                        center,
                        radius: r,
                        z0: 0.0,
                        z1: height - r,
                    },
                    color: REACTOR_COLOR,
                },
                Shape {
                    primitive: Primitive::Dome {
                        center: Vec3::new(center[0], center[1], height - r),
                        radius: r,
                    },
                    color: DOME_COLOR,
                },
            ]
        }
        StructureKind::CoolingTower => {
            let r0 = 0.45 * s;
            let r1 = 0.3 * s;
            let basin_z = 0.1 * height;
            let basin_r = r0 + (r1 - r0) * basin_z / height;
            vec![
                Shape {
                    primitive: Primitive::Frustum {
                        center,
                        r0,
                        r1,
                        z0: 0.0,
                        z1: height,
                    },
                    color: TOWER_COLOR,
                },
                Shape {
                    primitive: Primitive::Disk {
                        center: Vec3::new(center[0], center[1], basin_z),
                        radius: basin_r,
                    },
                    color: BASIN_COLOR,
                },
            ]
        }
        StructureKind::Stack => vec![Shape {
            primitive: Primitive::Cylinder {
                center,
                radius: (0.08 * s).max(0.5),
                z0: 0.0,
                z1: height,
            },
            color: STACK_COLOR,
        }],
        StructureKind::TetrominoBuilding { .. } => cells
            .iter()
            .map(|&(x0, y0, x1, y1)| Shape {
                primitive: Primitive::Aabb {
                    min: Vec3::new(x0, y0, 0.0),
                    max: Vec3::new(x1, y1, height),
                },
                color: BUILDING_COLOR,
            })
            .collect(),
    }
}

fn steam_puffs(layout: &FacilityLayout, tower_id: u32, intensity: f64) -> Vec<SteamPuff> {
    let Some(tower) = layout.structure(tower_id) else {
        return Vec::new();
    };
    let anchor = *tower.footprint_cells.iter().next().expect("non-empty footprint");
    let (cx, cy) = layout.grid.cell_center(anchor);
    let s = layout.grid.cell_size;
    let drift_angle: f64 = seed::stream(layout.seed, STEAM_STREAM).random_range(0.0..std::f64::consts::TAU);
    let drift = Vec3::new(drift_angle.cos(), drift_angle.sin(), 0.0);
    let mut rng = seed::stream(
        layout.seed ^ (tower_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        STEAM_STREAM,
    );
    let n = rng.random_range(3..=7);
    (0..n)
        .map(|j| {
            let j = j as f64;
            let grow = 0.8 + 0.3 * j;
            let jitter = Vec3::new(
                rng.random_range(-0.1..0.1) * s,
                rng.random_range(-0.1..0.1) * s,
                rng.random_range(0.0..0.1) * s,
            );
            SteamPuff {
                tower_instance_id: tower_id,
                center: Vec3::new(cx, cy, tower.height + 0.15 * s) + drift * (0.35 * s * j) + jitter,
                radii: Vec3::new(0.3 * s * grow, 0.3 * s * grow, 0.18 * s * grow),
                opacity: STEAM_OPACITY * intensity,
            }
        })
        .collect()
}

/// One primitive group per placed structure, plus cars, steam and the
/// painted ground. Footprints in world meters are the layout's cells scaled
/// by `cell_size`.
pub fn build_geometry(layout: &FacilityLayout) -> SceneGeometry {
    let grid = &layout.grid;
    let structures = layout
        .structures
        .iter()
        .map(|st| {
            let cells: Vec<_> = st.footprint_cells.iter().map(|&c| grid.cell_bounds(c)).collect();
            StructureGroup::new(
                st.instance_id,
                st.kind.class(),
                structure_shapes(&st.kind, grid, &cells, st.height),
            )
        })
        .collect();
    let scale = (grid.cell_size / DEFAULT_CELL_SIZE_M).min(1.0);
    let cars = layout
        .details
        .cars
        .iter()
        .map(|car| Shape {
            primitive: Primitive::OrientedBox {
                base_center: Vec3::new(car.position[0], car.position[1], 0.0),
                half: Vec3::new(
                    CAR_LENGTH_M * scale / 2.0,
                    CAR_WIDTH_M * scale / 2.0,
                    CAR_HEIGHT_M * scale / 2.0,
                ),
                heading: car.heading,
            },
            color: CAR_PALETTE[car.color_index as usize % CAR_PALETTE.len()].map(f64::from),
        })
        .collect();
    let steam = layout
        .details
        .steam_sources
        .iter()
        .flat_map(|s| steam_puffs(layout, s.tower_instance_id, s.intensity))
        .collect();
    let ground = Ground {
        parking: layout.parking_cells.iter().map(|&c| grid.cell_bounds(c)).collect(),
    };
    SceneGeometry {
        ground,
        structures,
        cars,
        steam,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Cast one hard shadow ray per primary hit.
    pub shadows: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerImage {
    pub rgb: RgbImage,
    pub alpha: AlphaMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub instance_mask: InstanceMask,
    pub detail_layers: BTreeMap<DetailLayer, LayerImage>,
}

fn to_u8(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn shade(base: [f64; 3], normal: Vec3, view: Vec3, sun: &SunState, lit: bool) -> [f64; 3] {
    let n = if normal.dot(view) > 0.0 { -normal } else { normal };
    let diffuse = if sun.is_night() || !lit {
        0.0
    } else {
        n.dot(sun.direction()).max(0.0)
    };
    let tint = sun.direct_tint();
    let amb = sun.ambient;
    [0, 1, 2].map(|c| base[c] * (amb + (1.0 - amb) * diffuse * tint[c]))
}

struct Tracer<'a> {
    geom: &'a SceneGeometry,
    pose: &'a CameraPose,
    sun: &'a SunState,
    px: u32,
    top: f64,
    opts: RenderOptions,
}

struct PrimarySample {
    rgb: Rgb<u8>,
    depth: f64,
    id: u32,
}

impl<'a> Tracer<'a> {
    fn new(
        geom: &'a SceneGeometry,
        pose: &'a CameraPose,
        sun: &'a SunState,
        px: u32,
        opts: RenderOptions,
    ) -> Result<Self, RenderError> {
        if px < MIN_IMAGE_PX {
            return Err(RenderError::ImageTooSmall(px));
        }
        if pose.look_dir.cross(pose.up_dir).length() < 1e-9 {
            return Err(RenderError::DegeneratePose);
        }
        for (u, v) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            if pose.ray_dir_ndc(u, v).z >= 0.0 || pose.position.z <= 0.0 {
                return Err(RenderError::HorizonInView);
            }
        }
        Ok(Self {
            geom,
            pose,
            sun,
            px,
            top: geom.top_z() + 1.0,
            opts,
        })
    }

    /// Ray for a pixel with its origin advanced to just above the scene; the
    /// returned offset is added back to every hit distance.
    fn ray(&self, i: usize) -> (Vec3, Vec3, f64) {
        let col = (i % self.px as usize) as u32;
        let row = (i / self.px as usize) as u32;
        let d = self.pose.pixel_ray(col, row, self.px);
        let p = self.pose.position;
        let shift = if p.z > self.top { (p.z - self.top) / -d.z } else { 0.0 };
        (p + d * shift, d, shift)
    }

    fn occluded(&self, p: Vec3) -> bool {
        let s = self.sun.direction();
        self.geom
            .structures
            .iter()
            .any(|g| g.intersect(p, s, f64::INFINITY).is_some())
    }

    fn primary(&self, i: usize) -> PrimarySample {
        let (o, d, shift) = self.ray(i);
        let t_ground = -o.z / d.z;
        let mut best = t_ground;
        let mut hit: Option<(Hit, [f64; 3], u32)> = None;
        for g in &self.geom.structures {
            if let Some((h, color)) = g.intersect(o, d, best) {
                best = h.t;
                hit = Some((h, color, g.instance_id));
            }
        }
        let (normal, base, id) = match hit {
            Some((h, color, id)) => (h.normal, color, id),
            None => {
                let p = o + d * t_ground;
                (Vec3::Z, self.geom.ground.color_at(p.x, p.y), 0)
            }
        };
        let lit = if self.opts.shadows && !self.sun.is_night() {
            let n = if normal.dot(d) > 0.0 { -normal } else { normal };
            !self.occluded(o + d * best + n * 1e-3)
        } else {
            true
        };
        PrimarySample {
            rgb: to_u8(shade(base, normal, d, self.sun, lit)),
            depth: shift + best,
            id,
        }
    }

    fn cars(&self, i: usize) -> (Rgb<u8>, f64) {
        let (o, d, _) = self.ray(i);
        let mut found: Option<(Hit, [f64; 3])> = None;
        for car in &self.geom.cars {
            if let Some(h) = car.primitive.intersect(o, d) {
                if found.is_none_or(|(f, _)| h.t < f.t) {
                    found = Some((h, car.color));
                }
            }
        }
        match found {
            Some((h, color)) => (to_u8(shade(color, h.normal, d, self.sun, true)), 1.0),
            None => (Rgb([0, 0, 0]), 0.0),
        }
    }

    fn steam(&self, i: usize) -> (Rgb<u8>, f64) {
        let (o, d, _) = self.ray(i);
        let mut transmit = 1.0;
        for puff in &self.geom.steam {
            let a = (puff.opacity * puff.chord_fraction(o, d)).clamp(0.0, 1.0);
            transmit *= 1.0 - a;
        }
        let alpha = (1.0 - transmit).clamp(0.0, 1.0);
        if alpha > 0.0 {
            (to_u8(shade(STEAM_COLOR, Vec3::Z, -Vec3::Z, self.sun, true)), alpha)
        } else {
            (Rgb([0, 0, 0]), 0.0)
        }
    }

    fn layer(&self, layer: DetailLayer) -> LayerImage {
        let n = (self.px * self.px) as usize;
        let samples: Vec<(Rgb<u8>, f64)> = match layer {
            DetailLayer::Cars => (0..n).into_par_iter().map(|i| self.cars(i)).collect(),
            DetailLayer::Steam => (0..n).into_par_iter().map(|i| self.steam(i)).collect(),
            DetailLayer::Clouds => vec![(Rgb([0, 0, 0]), 0.0); n],
        };
        let mut rgb = RgbImage::new(self.px, self.px);
        let mut alpha = Raster::filled(self.px, self.px, 0.0);
        for (i, (c, a)) in samples.into_iter().enumerate() {
            let (x, y) = ((i % self.px as usize) as u32, (i / self.px as usize) as u32);
            rgb.put_pixel(x, y, c);
            alpha.set(x, y, a);
        }
        LayerImage { rgb, alpha }
    }
}

pub fn render(
    geom: &SceneGeometry,
    pose: &CameraPose,
    sun: &SunState,
    image_px: u32,
) -> Result<RenderOutput, RenderError> {
    render_with(geom, pose, sun, image_px, RenderOptions::default())
}

/// Structural render plus the cars and steam detail layers, all from the same
/// pose so they register pixel for pixel.
pub fn render_with(
    geom: &SceneGeometry,
    pose: &CameraPose,
    sun: &SunState,
    image_px: u32,
    opts: RenderOptions,
) -> Result<RenderOutput, RenderError> {
    let tracer = Tracer::new(geom, pose, sun, image_px, opts)?;
    let n = (image_px * image_px) as usize;
    let samples: Vec<PrimarySample> = (0..n).into_par_iter().map(|i| tracer.primary(i)).collect();
    let mut rgb = RgbImage::new(image_px, image_px);
    let mut depth = Raster::filled(image_px, image_px, 0.0);
    let mut mask = Raster::filled(image_px, image_px, 0u32);
    for (i, s) in samples.into_iter().enumerate() {
        let (x, y) = ((i % image_px as usize) as u32, (i / image_px as usize) as u32);
        rgb.put_pixel(x, y, s.rgb);
        depth.set(x, y, s.depth);
        mask.set(x, y, s.id);
    }
    let detail_layers = [DetailLayer::Cars, DetailLayer::Steam]
        .into_iter()
        .map(|l| (l, tracer.layer(l)))
        .collect();
    Ok(RenderOutput {
        rgb,
        depth,
        instance_mask: mask,
        detail_layers,
    })
}

/// Renders one detail layer alone with straight (non-premultiplied) alpha.
pub fn render_detail_only(
    geom: &SceneGeometry,
    pose: &CameraPose,
    sun: &SunState,
    layer: DetailLayer,
    image_px: u32,
) -> Result<LayerImage, RenderError> {
    Ok(Tracer::new(geom, pose, sun, image_px, RenderOptions::default())?.layer(layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{resolve_pose, sun_for_time, AcquisitionParams, TimeOfDay};
    use crate::scene::{add_activity, generate_layout, reference_counts, Car};
    use std::collections::BTreeMap as Map;

    fn params(theta: f64, alt: f64, fov: f64, px: u32) -> AcquisitionParams {
        AcquisitionParams {
            altitude_m: alt,
            off_nadir_deg: theta,
            azimuth_deg: 0.0,
            fov_deg: fov,
            image_px: px,
        }
    }

    fn pose(theta: f64, alt: f64, fov: f64) -> CameraPose {
        resolve_pose(&params(theta, alt, fov, 64), Vec3::ZERO).unwrap()
    }

    fn day() -> SunState {
        sun_for_time(TimeOfDay::Day)
    }

    #[test]
    fn empty_scene_depth() {
        let h = 500_000.0;
        let out = render(&SceneGeometry::default(), &pose(0.0, h, 0.05), &day(), 32).unwrap();
        assert!(out.depth.iter().all(|&d| d >= h));
        let c = out.depth.get(16, 16);
        assert!((c - h).abs() <= 1e-4 * h);
        assert!(out.instance_mask.iter().all(|&id| id == 0));
    }

    #[test]
    fn cube_at_target() {
        let h = 500_000.0;
        let mut g = SceneGeometry::default();
        g.structures.push(StructureGroup::new(
            7,
            StructureClass::TetrominoBuilding,
            vec![Shape {
                primitive: Primitive::Aabb {
                    min: Vec3::new(-5.0, -5.0, 0.0),
                    max: Vec3::new(5.0, 5.0, 10.0),
                },
                color: BUILDING_COLOR,
            }],
        ));
        let out = render(&g, &pose(0.0, h, 0.01), &day(), 32).unwrap();
        let c = out.depth.get(16, 16);
        assert!((c - (h - 10.0)).abs() <= 1e-4 * h, "{c}");
        assert_eq!(out.instance_mask.get(16, 16), 7);
    }

    #[test]
    fn empty_layout_has_only_ground() {
        let layout = generate_layout(GridSpec::default(), &Map::new(), 1).unwrap();
        let g = build_geometry(&layout);
        assert!(g.structures.is_empty() && g.cars.is_empty() && g.steam.is_empty());
    }

    #[test]
    fn one_reactor_one_instance() {
        let counts = Map::from([(StructureClass::Reactor, 1)]);
        let layout = generate_layout(GridSpec::default(), &counts, 1).unwrap();
        let g = build_geometry(&layout);
        assert_eq!(g.instance_ids(), vec![1]);
    }

    #[test]
    fn cooling_tower_radius_within_cell() {
        let counts = Map::from([(StructureClass::CoolingTower, 1)]);
        let layout = generate_layout(GridSpec::default(), &counts, 1).unwrap();
        let g = build_geometry(&layout);
        let (cx, cy) = layout.grid.cell_center(layout.structures[0].anchor_cell);
        let (lo, hi) = g.structures[0].bounds;
        let corners = [(lo.x, lo.y), (hi.x, hi.y), (lo.x, hi.y), (hi.x, lo.y)];
        let r = corners
            .iter()
            .map(|&(x, y)| (x - cx).hypot(y - cy))
            .fold(0.0, f64::max);
        assert!(r <= layout.grid.cell_size * 2f64.sqrt() + 1e-9);
    }

    fn facility_scene(level: f64) -> (FacilityLayout, SceneGeometry) {
        let layout = generate_layout(GridSpec::default(), &reference_counts(), 42).unwrap();
        let layout = add_activity(&layout, level, 5).unwrap();
        let g = build_geometry(&layout);
        (layout, g)
    }

    #[test]
    fn mask_ids_and_consistency() {
        let (layout, g) = facility_scene(0.5);
        let p = pose(20.0, 500_000.0, 0.035);
        let out = render(&g, &p, &day(), 96).unwrap();
        let ids = layout.instance_ids();
        for y in 0..96 {
            for x in 0..96 {
                let id = out.instance_mask.get(x, y);
                assert!(id == 0 || ids.contains(&id));
                if id != 0 {
                    let d = p.pixel_ray(x, y, 96);
                    let ground = -p.position.z / d.z;
                    assert!(out.depth.get(x, y) < ground);
                }
                assert!(out.depth.get(x, y) > 0.0);
            }
        }
        assert!(out.instance_mask.iter().any(|&id| id != 0));
    }

    #[test]
    fn night_is_ambient_only() {
        let (_, g) = facility_scene(0.5);
        let sun = sun_for_time(TimeOfDay::Night);
        let out = render(&g, &pose(10.0, 500_000.0, 0.035), &sun, 64).unwrap();
        let max = out.rgb.as_raw().iter().copied().max().unwrap() as f64;
        assert!(max <= 255.0 * sun.ambient + 1.0);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (_, g) = facility_scene(0.7);
        let p = pose(30.0, 500_000.0, 0.035);
        let a = render(&g, &p, &day(), 64).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| render(&g, &p, &day(), 64).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut p = pose(0.0, 1000.0, 10.0);
        p.up_dir = p.look_dir;
        assert_eq!(
            render(&SceneGeometry::default(), &p, &day(), 32),
            Err(RenderError::DegeneratePose)
        );
        assert_eq!(
            render(&SceneGeometry::default(), &pose(0.0, 1000.0, 10.0), &day(), 8),
            Err(RenderError::ImageTooSmall(8))
        );
    }

    #[test]
    fn cars_layer_empty_without_activity() {
        let (_, g) = facility_scene(0.0);
        let layer =
            render_detail_only(&g, &pose(0.0, 500_000.0, 0.035), &day(), DetailLayer::Cars, 64).unwrap();
        assert!(layer.alpha.iter().all(|&a| a == 0.0));
        assert!("fog".parse::<DetailLayer>().is_err());
        assert_eq!("clouds-placeholder".parse::<DetailLayer>().unwrap(), DetailLayer::Clouds);
    }

    #[test]
    fn single_car_blob_at_center() {
        let (mut layout, _) = facility_scene(0.0);
        layout.details.activity_level = 1.0;
        layout.details.cars = vec![Car {
            position: [0.0, 0.0],
            heading: 0.3,
            color_index: 3,
        }];
        let g = build_geometry(&layout);
        let px = 64;
        let p = resolve_pose(&params(0.0, 500.0, 3.0, px), Vec3::ZERO).unwrap();
        let layer = render_detail_only(&g, &p, &day(), DetailLayer::Cars, px).unwrap();
        assert!(layer.alpha.get(32, 32) > 0.0 || layer.alpha.get(31, 31) > 0.0);
        // connected blob: flood from the center covers all lit pixels
        let start = if layer.alpha.get(32, 32) > 0.0 { (32, 32) } else { (31, 31) };
        let mut seen = std::collections::HashSet::from([start]);
        let mut stack = vec![start];
        while let Some((x, y)) = stack.pop() {
            for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                if nx < 0 || ny < 0 || nx >= px as i32 || ny >= px as i32 {
                    continue;
                }
                let n = (nx as u32, ny as u32);
                if layer.alpha.get(n.0, n.1) > 0.0 && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        let total = layer.alpha.iter().filter(|&&a| a > 0.0).count();
        assert_eq!(seen.len(), total);
        // projected car corners bound the blob
        let (s, c) = 0.3f64.sin_cos();
        let (hl, hw) = (CAR_LENGTH_M / 2.0, CAR_WIDTH_M / 2.0);
        let mut xs = vec![];
        for (a, b) in [(hl, hw), (hl, -hw), (-hl, hw), (-hl, -hw)] {
            for z in [0.0, CAR_HEIGHT_M] {
                let w = Vec3::new(c * a - s * b, s * a + c * b, z);
                xs.push(p.project(w, px).unwrap());
            }
        }
        let (minx, maxx) = xs.iter().fold((f64::MAX, f64::MIN), |m, q| (m.0.min(q.0), m.1.max(q.0)));
        for &(x, _) in &seen {
            assert!((x as f64 + 0.5) >= minx - 1e-9 && (x as f64 + 0.5) <= maxx + 1e-9);
        }
    }

    #[test]
    fn steam_alpha_monotone_in_intensity() {
        let (_, lo) = facility_scene(0.5);
        let (_, hi) = facility_scene(1.0);
        assert_eq!(lo.steam.len(), hi.steam.len());
        let p = pose(0.0, 500_000.0, 0.035);
        let a = render_detail_only(&lo, &p, &day(), DetailLayer::Steam, 64).unwrap();
        let b = render_detail_only(&hi, &p, &day(), DetailLayer::Steam, 64).unwrap();
        assert!(a.alpha.iter().zip(b.alpha.iter()).all(|(x, y)| y >= x));
        assert!(b.alpha.iter().any(|&v| v > 0.0));
        assert!(b.alpha.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn roof_and_base(theta: f64) -> ((f64, f64), (f64, f64), CameraPose) {
        let counts = Map::from([(StructureClass::Stack, 1)]);
        let layout = generate_layout(GridSpec::new(1, 1, 30.0).unwrap(), &counts, 1).unwrap();
        let g = build_geometry(&layout);
        let px = 128;
        let p = resolve_pose(&params(theta, 500_000.0, 0.02, px), Vec3::ZERO).unwrap();
        let out = render(&g, &p, &day(), px).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..px {
            for x in 0..px {
                if out.instance_mask.get(x, y) == 1 {
                    let hit = p.position + p.pixel_ray(x, y, px) * out.depth.get(x, y);
                    if hit.z > STACK_HEIGHT - 0.01 {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                        n += 1.0;
                    }
                }
            }
        }
        assert!(n > 0.0);
        let base = p.project(Vec3::ZERO, px).unwrap();
        ((sx / n, sy / n), base, p)
    }

    const STACK_HEIGHT: f64 = crate::scene::STACK_HEIGHT_M;

    #[test]
    fn nadir_roof_over_base() {
        let (roof, base, _) = roof_and_base(0.0);
        assert!((roof.0 - base.0).hypot(roof.1 - base.1) <= 1.0);
    }

    #[test]
    fn off_nadir_lean_in_look_direction() {
        let (roof, base, p) = roof_and_base(30.0);
        let look_h = Vec3::new(p.look_dir.x, p.look_dir.y, 0.0).normalized();
        let a = p.project(Vec3::ZERO, 128).unwrap();
        let b = p.project(look_h * 10.0, 128).unwrap();
        let lean = (roof.0 - base.0, roof.1 - base.1);
        let dir = (b.0 - a.0, b.1 - a.1);
        assert!(lean.0.hypot(lean.1) > 5.0);
        assert!(lean.0 * dir.0 + lean.1 * dir.1 > 0.0);
    }

    #[test]
    fn shadows_darken_ground() {
        let (_, g) = facility_scene(0.0);
        let sun = sun_for_time(TimeOfDay::Evening);
        let p = pose(0.0, 500_000.0, 0.035);
        let plain = render(&g, &p, &sun, 64).unwrap();
        let shaded = render_with(&g, &p, &sun, 64, RenderOptions { shadows: true }).unwrap();
        let sum = |img: &RgbImage| img.as_raw().iter().map(|&v| v as u64).sum::<u64>();
        assert!(sum(&shaded.rgb) < sum(&plain.rgb));
        assert_eq!(plain.depth, shaded.depth);
    }
}
