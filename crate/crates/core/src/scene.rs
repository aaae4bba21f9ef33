//! Facility scene model: grid layouts, structures and activity details.
//!
//! World coordinates are meters in a right-handed frame with z up. The grid
//! is centered on the origin; row 0 is the northern edge (`+y`) and column 0
//! the western edge (`-x`).

use crate::canonical;
use crate::digest::sha256_hex;
use crate::seed::{self, DETAIL_STREAM, LAYOUT_STREAM};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use thiserror::Error;

pub const REACTOR_HEIGHT_M: f64 = 40.0;
pub const COOLING_TOWER_HEIGHT_M: f64 = 60.0;
pub const STACK_HEIGHT_M: f64 = 80.0;
pub const STOREY_HEIGHT_M: f64 = 6.0;
pub const MAX_STOREYS: u32 = 3;
pub const DEFAULT_CELL_SIZE_M: f64 = 30.0;

/// Attempts per structure before placement gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Parking lots are `PARKING_SIDE x PARKING_SIDE` cells.
pub const PARKING_SIDE: u32 = 2;
pub const CARS_PER_PARKING_CELL: usize = 6;

pub const CAR_LENGTH_M: f64 = 4.5;
pub const CAR_WIDTH_M: f64 = 1.8;
pub const CAR_HEIGHT_M: f64 = 1.5;
pub const CAR_PALETTE_LEN: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place {class} #{ordinal} after {attempts} attempts")]
    InfeasiblePlacement {
        class: StructureClass,
        ordinal: u32,
        attempts: usize,
    },
    #[error("activity level {0} is outside [0, 1]")]
    InvalidLevel(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }

    fn is_edge_adjacent(self, other: Cell) -> bool {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr + dc == 1
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32, cell_size: f64) -> Result<Self, SceneError> {
        let g = Self {
            rows,
            cols,
            cell_size,
        };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<(), SceneError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(SceneError::InvalidConfig(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(SceneError::InvalidConfig(format!(
                "cell_size must be > 0, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.rows && cell.col < self.cols
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }

    /// World-space `(x_min, y_min, x_max, y_max)` of a cell.
    pub fn cell_bounds(&self, cell: Cell) -> (f64, f64, f64, f64) {
        let s = self.cell_size;
        let x0 = cell.col as f64 * s - self.width_m() / 2.0;
        let y1 = self.height_m() / 2.0 - cell.row as f64 * s;
        (x0, y1 - s, x0 + s, y1)
    }

    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.cell_bounds(cell);
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<Cell> {
        let cx = (x + self.width_m() / 2.0) / self.cell_size;
        let cy = (self.height_m() / 2.0 - y) / self.cell_size;
        if cx < 0.0 || cy < 0.0 {
            return None;
        }
        let cell = Cell::new(cy.floor() as u32, cx.floor() as u32);
        self.contains(cell).then_some(cell)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            cell_size: DEFAULT_CELL_SIZE_M,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TetrominoShape {
    I,
    O,
    T,
    L,
    S,
}

impl TetrominoShape {
    pub const ALL: [TetrominoShape; 5] = [Self::I, Self::O, Self::T, Self::L, Self::S];

    /// Canonical `(row, col)` offsets before rotation.
    pub fn canonical_cells(self) -> [(i32, i32); 4] {
        match self {
            Self::I => [(0, 0), (0, 1), (0, 2), (0, 3)],
            Self::O => [(0, 0), (0, 1), (1, 0), (1, 1)],
            Self::T => [(0, 0), (0, 1), (0, 2), (1, 1)],
            Self::L => [(0, 0), (1, 0), (2, 0), (2, 1)],
            Self::S => [(0, 1), (0, 2), (1, 0), (1, 1)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    pub fn quarter_turns(self) -> u8 {
        match self {
            Self::R0 => 0,
            Self::R90 => 1,
            Self::R180 => 2,
            Self::R270 => 3,
        }
    }
}

impl From<Rotation> for u16 {
    fn from(r: Rotation) -> u16 {
        r.quarter_turns() as u16 * 90
    }
}

impl TryFrom<u16> for Rotation {
    type Error = String;
    fn try_from(v: u16) -> Result<Self, String> {
        match v {
            0 => Ok(Self::R0),
            90 => Ok(Self::R90),
            180 => Ok(Self::R180),
            270 => Ok(Self::R270),
            other => Err(format!("rotation must be 0, 90, 180 or 270, got {other}")),
        }
    }
}

/// Cell offsets of a tetromino after rotation, normalized so the minimum row
/// and column are zero. Sorted for stable comparison.
pub fn tetromino_cells(shape: TetrominoShape, rotation: Rotation) -> [(u32, u32); 4] {
    let mut cells = shape.canonical_cells();
    for _ in 0..rotation.quarter_turns() {
        for c in cells.iter_mut() {
            *c = (c.1, -c.0);
        }
    }
    let min_r = cells.iter().map(|c| c.0).min().unwrap_or(0);
    let min_c = cells.iter().map(|c| c.1).min().unwrap_or(0);
    let mut out = cells.map(|(r, c)| ((r - min_r) as u32, (c - min_c) as u32));
    out.sort_unstable();
    out
}

/// Count key for [`generate_layout`]; tetromino shape and rotation are drawn
/// by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureClass {
    Reactor,
    CoolingTower,
    Stack,
    TetrominoBuilding,
}

impl StructureClass {
    pub const ALL: [StructureClass; 4] = [
        Self::Reactor,
        Self::CoolingTower,
        Self::Stack,
        Self::TetrominoBuilding,
    ];

    pub fn footprint_size(self) -> usize {
        match self {
            Self::TetrominoBuilding => 4,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Reactor => "reactor",
            Self::CoolingTower => "cooling_tower",
            Self::Stack => "stack",
            Self::TetrominoBuilding => "tetromino_building",
        }
    }
}

impl fmt::Display for StructureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StructureKind {
    Reactor,
    CoolingTower,
    Stack,
    TetrominoBuilding {
        shape: TetrominoShape,
        rotation: Rotation,
    },
}

impl StructureKind {
    pub fn class(&self) -> StructureClass {
        match self {
            Self::Reactor => StructureClass::Reactor,
            Self::CoolingTower => StructureClass::CoolingTower,
            Self::Stack => StructureClass::Stack,
            Self::TetrominoBuilding { .. } => StructureClass::TetrominoBuilding,
        }
    }

    /// Footprint for this kind anchored at `anchor`, or `None` if any cell
    /// would fall outside `grid`.
    pub fn footprint(&self, anchor: Cell, grid: &GridSpec) -> Option<BTreeSet<Cell>> {
        let offsets: Vec<(u32, u32)> = match self {
            Self::TetrominoBuilding { shape, rotation } => {
                tetromino_cells(*shape, *rotation).to_vec()
            }
            _ => vec![(0, 0)],
        };
        let mut cells = BTreeSet::new();
        for (dr, dc) in offsets {
            let c = Cell::new(anchor.row + dr, anchor.col + dc);
            if !grid.contains(c) {
                return None;
            }
            cells.insert(c);
        }
        Some(cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedStructure {
    pub instance_id: u32,
    pub kind: StructureKind,
    pub anchor_cell: Cell,
    pub footprint_cells: BTreeSet<Cell>,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Car {
    /// Ground-plane center `(x, y)` in meters.
    pub position: [f64; 2],
    /// Radians counter-clockwise from `+x`.
    pub heading: f64,
    pub color_index: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteamSource {
    pub tower_instance_id: u32,
    pub intensity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivityDetails {
    pub activity_level: f64,
    pub cars: Vec<Car>,
    pub steam_sources: Vec<SteamSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacilityLayout {
    pub grid: GridSpec,
    pub structures: Vec<PlacedStructure>,
    pub parking_cells: BTreeSet<Cell>,
    pub details: ActivityDetails,
    pub seed: u64,
}

impl FacilityLayout {
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("layouts always serialize")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical().as_bytes())
    }

    pub fn parking_capacity(&self) -> usize {
        self.parking_cells.len() * CARS_PER_PARKING_CELL
    }

    pub fn structure(&self, instance_id: u32) -> Option<&PlacedStructure> {
        self.structures.iter().find(|s| s.instance_id == instance_id)
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.structures.iter().map(|s| s.instance_id).collect()
    }

    pub fn count(&self, class: StructureClass) -> usize {
        self.structures
            .iter()
            .filter(|s| s.kind.class() == class)
            .count()
    }
}

pub type StructureCounts = BTreeMap<StructureClass, u32>;

/// The component mix of the reference facility: one reactor, two cooling
/// towers, one stack and four tetromino buildings.
pub fn reference_counts() -> StructureCounts {
    BTreeMap::from([
        (StructureClass::Reactor, 1),
        (StructureClass::CoolingTower, 2),
        (StructureClass::Stack, 1),
        (StructureClass::TetrominoBuilding, 4),
    ])
}

fn height_for(class: StructureClass, rng: &mut impl Rng) -> f64 {
    match class {
        StructureClass::Reactor => REACTOR_HEIGHT_M,
        StructureClass::CoolingTower => COOLING_TOWER_HEIGHT_M,
        StructureClass::Stack => STACK_HEIGHT_M,
        StructureClass::TetrominoBuilding => {
            STOREY_HEIGHT_M * rng.random_range(1..=MAX_STOREYS) as f64
        }
    }
}

fn parking_block(anchor: Cell, grid: &GridSpec) -> Option<BTreeSet<Cell>> {
    let mut cells = BTreeSet::new();
    for dr in 0..PARKING_SIDE {
        for dc in 0..PARKING_SIDE {
            let c = Cell::new(anchor.row + dr, anchor.col + dc);
            if !grid.contains(c) {
                return None;
            }
            cells.insert(c);
        }
    }
    Some(cells)
}

struct Occupancy<'a> {
    grid: &'a GridSpec,
    taken: Vec<bool>,
}

impl Occupancy<'_> {
    fn idx(&self, c: Cell) -> usize {
        c.row as usize * self.grid.cols as usize + c.col as usize
    }

    fn is_free(&self, cells: &BTreeSet<Cell>) -> bool {
        cells.iter().all(|&c| !self.taken[self.idx(c)])
    }

    fn take(&mut self, cells: &BTreeSet<Cell>) {
        for &c in cells {
            let i = self.idx(c);
            self.taken[i] = true;
        }
    }
}

/// Places the requested structures on the grid by seeded rejection sampling.
///
/// Structures are placed largest footprint first. For each one, all anchor
/// cells are shuffled (and, for tetrominoes, all shape/rotation pairs) and
/// tried in order; [`MAX_PLACEMENT_ATTEMPTS`] failed candidates end the search
/// with [`SceneError::InfeasiblePlacement`]. The first tetromino building also
/// claims an edge-adjacent 2x2 parking lot.
pub fn generate_layout(
    grid: GridSpec,
    counts: &StructureCounts,
    seed: u64,
) -> Result<FacilityLayout, SceneError> {
    grid.check()?;
    let buildings = counts
        .get(&StructureClass::TetrominoBuilding)
        .copied()
        .unwrap_or(0);
    let parking_needed = buildings > 0;
    let requested: usize = counts
        .iter()
        .map(|(class, n)| class.footprint_size() * *n as usize)
        .sum::<usize>()
        + if parking_needed {
            (PARKING_SIDE * PARKING_SIDE) as usize
        } else {
            0
        };
    if requested > grid.cell_count() {
        return Err(SceneError::InvalidConfig(format!(
            "requested footprint of {requested} cells exceeds the {} cells of a {}x{} grid",
            grid.cell_count(),
            grid.rows,
            grid.cols
        )));
    }

    let mut rng = seed::stream(seed, LAYOUT_STREAM);
    let mut occ = Occupancy {
        grid: &grid,
        taken: vec![false; grid.cell_count()],
    };
    let mut order: Vec<StructureClass> = StructureClass::ALL.to_vec();
    order.sort_by_key(|c| std::cmp::Reverse(c.footprint_size()));

    let all_cells: Vec<Cell> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| Cell::new(r, c)))
        .collect();
    let orientations: Vec<(TetrominoShape, Rotation)> = TetrominoShape::ALL
        .iter()
        .flat_map(|&s| Rotation::ALL.iter().map(move |&r| (s, r)))
        .collect();

    let mut structures = Vec::new();
    let mut parking_cells = BTreeSet::new();
    let mut next_id = 1u32;

    for class in order {
        let n = counts.get(&class).copied().unwrap_or(0);
        for ordinal in 0..n {
            let mut anchors = all_cells.clone();
            anchors.shuffle(&mut rng);
            let kinds: Vec<StructureKind> = match class {
                StructureClass::TetrominoBuilding => {
                    let mut o = orientations.clone();
                    o.shuffle(&mut rng);
                    o.into_iter()
                        .map(|(shape, rotation)| StructureKind::TetrominoBuilding { shape, rotation })
                        .collect()
                }
                StructureClass::Reactor => vec![StructureKind::Reactor],
                StructureClass::CoolingTower => vec![StructureKind::CoolingTower],
                StructureClass::Stack => vec![StructureKind::Stack],
            };
            let wants_parking = parking_needed && parking_cells.is_empty();

            let mut attempts = 0usize;
            let mut placed = None;
            'search: for &anchor in &anchors {
                for kind in &kinds {
                    attempts += 1;
                    if attempts > MAX_PLACEMENT_ATTEMPTS {
                        break 'search;
                    }
                    let Some(cells) = kind.footprint(anchor, &grid) else {
                        continue;
                    };
                    if !occ.is_free(&cells) {
                        continue;
                    }
                    let lot = if wants_parking {
                        match find_parking(&grid, &occ, &cells, &mut rng) {
                            Some(lot) => Some(lot),
                            None => continue,
                        }
                    } else {
                        None
                    };
                    placed = Some((*kind, anchor, cells, lot));
                    break 'search;
                }
            }
            let Some((kind, anchor, cells, lot)) = placed else {
                return Err(SceneError::InfeasiblePlacement {
                    class,
                    ordinal,
                    attempts: attempts.min(MAX_PLACEMENT_ATTEMPTS),
                });
            };
            occ.take(&cells);
            if let Some(lot) = lot {
                occ.take(&lot);
                parking_cells = lot;
            }
            structures.push(PlacedStructure {
                instance_id: next_id,
                kind,
                anchor_cell: anchor,
                footprint_cells: cells,
                height: height_for(class, &mut rng),
            });
            next_id += 1;
        }
    }

    Ok(FacilityLayout {
        grid,
        structures,
        parking_cells,
        details: ActivityDetails::default(),
        seed,
    })
}

fn find_parking(
    grid: &GridSpec,
    occ: &Occupancy<'_>,
    building: &BTreeSet<Cell>,
    rng: &mut impl Rng,
) -> Option<BTreeSet<Cell>> {
    if grid.rows < PARKING_SIDE || grid.cols < PARKING_SIDE {
        return None;
    }
    let mut anchors: Vec<Cell> = (0..=grid.rows - PARKING_SIDE)
        .flat_map(|r| (0..=grid.cols - PARKING_SIDE).map(move |c| Cell::new(r, c)))
        .collect();
    anchors.shuffle(rng);
    anchors.into_iter().find_map(|a| {
        let lot = parking_block(a, grid)?;
        let ok = occ.is_free(&lot)
            && lot.is_disjoint(building)
            && lot
                .iter()
                .any(|l| building.iter().any(|b| l.is_edge_adjacent(*b)));
        ok.then_some(lot)
    })
}

/// Parking slot centers and headings for one parking cell: two rows of three
/// bays, cars facing north in the top row and south in the bottom row.
fn parking_slots(grid: &GridSpec, cell: Cell) -> Vec<([f64; 2], f64)> {
    let (x0, y0, _, _) = grid.cell_bounds(cell);
    let bay_w = grid.cell_size / 3.0;
    let bay_h = grid.cell_size / 2.0;
    let mut slots = Vec::with_capacity(CARS_PER_PARKING_CELL);
    for i in 0..2 {
        for j in 0..3 {
            let x = x0 + (j as f64 + 0.5) * bay_w;
            let y = y0 + (i as f64 + 0.5) * bay_h;
            let heading = if i == 1 {
                std::f64::consts::FRAC_PI_2
            } else {
                3.0 * std::f64::consts::FRAC_PI_2
            };
            slots.push(([x, y], heading));
        }
    }
    slots
}

/// Populates parking lots and cooling-tower steam for an activity level.
///
/// The slot order and per-slot colors are drawn before truncation, so for a
/// fixed seed the cars at a lower level are a prefix of those at a higher one.
pub fn add_activity(
    layout: &FacilityLayout,
    activity_level: f64,
    seed: u64,
) -> Result<FacilityLayout, SceneError> {
    if !(0.0..=1.0).contains(&activity_level) {
        return Err(SceneError::InvalidLevel(activity_level));
    }
    let mut rng = seed::stream(seed, DETAIL_STREAM);
    let mut slots: Vec<([f64; 2], f64)> = layout
        .parking_cells
        .iter()
        .flat_map(|&c| parking_slots(&layout.grid, c))
        .collect();
    slots.shuffle(&mut rng);
    let jitter = 0.02 * layout.grid.cell_size;
    let all_cars: Vec<Car> = slots
        .into_iter()
        .map(|(p, heading)| Car {
            position: [
                p[0] + rng.random_range(-jitter..=jitter),
                p[1] + rng.random_range(-jitter..=jitter),
            ],
            heading: heading + rng.random_range(-0.05..=0.05),
            color_index: rng.random_range(0..CAR_PALETTE_LEN),
        })
        .collect();
    let n = (activity_level * layout.parking_capacity() as f64).round() as usize;
    let cars = all_cars.into_iter().take(n).collect();

    let steam_sources = if activity_level > 0.0 {
        layout
            .structures
            .iter()
            .filter(|s| s.kind == StructureKind::CoolingTower)
            .map(|s| SteamSource {
                tower_instance_id: s.instance_id,
                intensity: activity_level,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut out = layout.clone();
    out.details = ActivityDetails {
        activity_level,
        cars,
        steam_sources,
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "invariant", rename_all = "snake_case")]
pub enum Violation {
    InvalidGrid { reason: String },
    ReservedInstanceId { instance_id: u32 },
    DuplicateInstanceId { instance_id: u32 },
    FootprintOutOfGrid { instance_id: u32, cell: Cell },
    FootprintMismatch { instance_id: u32 },
    TetrominoShape { instance_id: u32 },
    OverlappingFootprint { instance_id: u32, other_instance_id: u32, cell: Cell },
    NonPositiveHeight { instance_id: u32 },
    ParkingOutOfGrid { cell: Cell },
    ParkingOverlapsStructure { instance_id: u32, cell: Cell },
    ActivityLevelOutOfRange { level: f64 },
    DetailsWithoutActivity,
    CarOutsideParking { car_index: usize },
    SteamUnknownTower { instance_id: u32 },
    SteamIntensityOutOfRange { instance_id: u32 },
}

impl Violation {
    pub fn instance_id(&self) -> Option<u32> {
        match self {
            Self::ReservedInstanceId { instance_id }
            | Self::DuplicateInstanceId { instance_id }
            | Self::FootprintOutOfGrid { instance_id, .. }
            | Self::FootprintMismatch { instance_id }
            | Self::TetrominoShape { instance_id }
            | Self::OverlappingFootprint { instance_id, .. }
            | Self::NonPositiveHeight { instance_id }
            | Self::ParkingOverlapsStructure { instance_id, .. }
            | Self::SteamUnknownTower { instance_id }
            | Self::SteamIntensityOutOfRange { instance_id } => Some(*instance_id),
            _ => None,
        }
    }
}

/// Four cells, edge-connected.
pub fn is_tetromino(cells: &BTreeSet<Cell>) -> bool {
    if cells.len() != 4 {
        return false;
    }
    let start = *cells.iter().next().expect("non-empty");
    let mut seen = HashSet::from([start]);
    let mut stack = vec![start];
    while let Some(c) = stack.pop() {
        for &n in cells {
            if c.is_edge_adjacent(n) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == 4
}

/// Checks every layout invariant; never fails, an empty list means valid.
pub fn validate_layout(layout: &FacilityLayout) -> Vec<Violation> {
    let mut v = Vec::new();
    let grid = &layout.grid;
    if let Err(e) = grid.check() {
        v.push(Violation::InvalidGrid {
            reason: e.to_string(),
        });
        return v;
    }

    let mut ids = HashSet::new();
    let mut owner: BTreeMap<Cell, u32> = BTreeMap::new();
    let mut overlaps: BTreeSet<(u32, u32)> = BTreeSet::new();
    for s in &layout.structures {
        let id = s.instance_id;
        if id == 0 {
            v.push(Violation::ReservedInstanceId { instance_id: id });
        }
        if !ids.insert(id) {
            v.push(Violation::DuplicateInstanceId { instance_id: id });
        }
        if !(s.height.is_finite() && s.height > 0.0) {
            v.push(Violation::NonPositiveHeight { instance_id: id });
        }
        if let StructureKind::TetrominoBuilding { .. } = s.kind {
            if !is_tetromino(&s.footprint_cells) {
                v.push(Violation::TetrominoShape { instance_id: id });
            }
        }
        for &c in &s.footprint_cells {
            if !grid.contains(c) {
                v.push(Violation::FootprintOutOfGrid {
                    instance_id: id,
                    cell: c,
                });
            }
            match owner.get(&c) {
                Some(&other) if other != id => {
                    if overlaps.insert((other, id)) {
                        v.push(Violation::OverlappingFootprint {
                            instance_id: id,
                            other_instance_id: other,
                            cell: c,
                        });
                    }
                }
                _ => {
                    owner.insert(c, id);
                }
            }
        }
        if s.kind.footprint(s.anchor_cell, grid).as_ref() != Some(&s.footprint_cells)
            && s.footprint_cells.iter().all(|c| grid.contains(*c))
        {
            v.push(Violation::FootprintMismatch { instance_id: id });
        }
    }

    for &c in &layout.parking_cells {
        if !grid.contains(c) {
            v.push(Violation::ParkingOutOfGrid { cell: c });
        }
        if let Some(&id) = owner.get(&c) {
            v.push(Violation::ParkingOverlapsStructure {
                instance_id: id,
                cell: c,
            });
        }
    }

    let d = &layout.details;
    if !(0.0..=1.0).contains(&d.activity_level) {
        v.push(Violation::ActivityLevelOutOfRange {
            level: d.activity_level,
        });
    }
    if d.activity_level == 0.0 && (!d.cars.is_empty() || !d.steam_sources.is_empty()) {
        v.push(Violation::DetailsWithoutActivity);
    }
    for (i, car) in d.cars.iter().enumerate() {
        let inside = grid
            .cell_at(car.position[0], car.position[1])
            .is_some_and(|c| layout.parking_cells.contains(&c));
        if !inside {
            v.push(Violation::CarOutsideParking { car_index: i });
        }
    }
    for s in &d.steam_sources {
        let is_tower = layout
            .structure(s.tower_instance_id)
            .is_some_and(|t| t.kind == StructureKind::CoolingTower);
        if !is_tower {
            v.push(Violation::SteamUnknownTower {
                instance_id: s.tower_instance_id,
            });
        }
        if !(0.0..=1.0).contains(&s.intensity) {
            v.push(Violation::SteamIntensityOutOfRange {
                instance_id: s.tower_instance_id,
            });
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r: u32, c: u32) -> GridSpec {
        GridSpec::new(r, c, 30.0).unwrap()
    }

    #[test]
    fn reference_mix_on_8x8() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        assert_eq!(layout.count(StructureClass::Reactor), 1);
        assert_eq!(layout.count(StructureClass::CoolingTower), 2);
        assert_eq!(layout.count(StructureClass::Stack), 1);
        assert_eq!(layout.count(StructureClass::TetrominoBuilding), 4);
        // exhaustive occupancy check
        let mut seen = vec![0u8; 64];
        for s in &layout.structures {
            for c in &s.footprint_cells {
                seen[(c.row * 8 + c.col) as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n <= 1));
        let total: usize = seen.iter().map(|&n| n as usize).sum();
        assert_eq!(total, 1 + 2 + 1 + 16);
        assert_eq!(layout.parking_cells.len(), 4);
        assert!(validate_layout(&layout).is_empty());
    }

    #[test]
    fn single_cell_grid() {
        let counts = BTreeMap::from([(StructureClass::Reactor, 1)]);
        let layout = generate_layout(grid(1, 1), &counts, 7).unwrap();
        assert_eq!(layout.structures.len(), 1);
        assert_eq!(layout.structures[0].anchor_cell, Cell::new(0, 0));
        assert_eq!(layout.structures[0].kind, StructureKind::Reactor);
        assert!(layout.parking_cells.is_empty());
    }

    #[test]
    fn deterministic() {
        let a = generate_layout(grid(8, 8), &reference_counts(), 5).unwrap();
        let b = generate_layout(grid(8, 8), &reference_counts(), 5).unwrap();
        assert_eq!(a.to_canonical(), b.to_canonical());
        let c = generate_layout(grid(8, 8), &reference_counts(), 6).unwrap();
        assert_ne!(a.to_canonical(), c.to_canonical());
    }

    #[test]
    fn zero_size_grid_is_invalid() {
        let g = GridSpec {
            rows: 0,
            cols: 4,
            cell_size: 30.0,
        };
        assert!(matches!(
            generate_layout(g, &reference_counts(), 1),
            Err(SceneError::InvalidConfig(_))
        ));
        assert!(GridSpec::new(3, 3, 0.0).is_err());
    }

    #[test]
    fn over_capacity_rejected() {
        let counts = BTreeMap::from([(StructureClass::Stack, 10)]);
        assert!(generate_layout(grid(3, 3), &counts, 1).is_err());
    }

    #[test]
    fn infeasible_reports_attempts() {
        // 4 + 4 cells fit in a single row by count, but the 2x2 lot never does.
        let counts = BTreeMap::from([(StructureClass::TetrominoBuilding, 1)]);
        match generate_layout(grid(1, 8), &counts, 3) {
            Err(SceneError::InfeasiblePlacement { class, attempts, .. }) => {
                assert_eq!(class, StructureClass::TetrominoBuilding);
                assert!(attempts <= MAX_PLACEMENT_ATTEMPTS);
            }
            other => panic!("expected InfeasiblePlacement, got {other:?}"),
        }
    }

    #[test]
    fn tetromino_rotations_are_connected() {
        for s in TetrominoShape::ALL {
            for r in Rotation::ALL {
                let cells: BTreeSet<Cell> = tetromino_cells(s, r)
                    .iter()
                    .map(|&(a, b)| Cell::new(a, b))
                    .collect();
                assert!(is_tetromino(&cells), "{s:?} {r:?}");
            }
        }
        let i90 = tetromino_cells(TetrominoShape::I, Rotation::R90);
        assert_eq!(i90, [(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn activity_zero_is_empty() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        let a = add_activity(&layout, 0.0, 1).unwrap();
        assert!(a.details.cars.is_empty());
        assert!(a.details.steam_sources.is_empty());
    }

    #[test]
    fn activity_full_fills_lot() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        assert_eq!(layout.parking_capacity(), 24);
        let a = add_activity(&layout, 1.0, 9).unwrap();
        assert_eq!(a.details.cars.len(), 24);
        for car in &a.details.cars {
            let cell = layout.grid.cell_at(car.position[0], car.position[1]).unwrap();
            assert!(layout.parking_cells.contains(&cell));
        }
        assert_eq!(a.details.steam_sources.len(), 2);
        assert!(a.details.steam_sources.iter().all(|s| s.intensity == 1.0));
        assert!(validate_layout(&a).is_empty());
    }

    #[test]
    fn activity_deterministic_and_nested() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        let a = add_activity(&layout, 0.5, 3).unwrap();
        let b = add_activity(&layout, 0.5, 3).unwrap();
        assert_eq!(a.details, b.details);
        assert_eq!(a.details.cars.len(), 12);
        let full = add_activity(&layout, 1.0, 3).unwrap();
        assert_eq!(&full.details.cars[..12], &a.details.cars[..]);
        // layout stream untouched by details
        assert_eq!(a.structures, layout.structures);
    }

    #[test]
    fn invalid_level() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        assert!(matches!(
            add_activity(&layout, 1.5, 0),
            Err(SceneError::InvalidLevel(_))
        ));
        assert!(add_activity(&layout, -0.1, 0).is_err());
    }

    #[test]
    fn overlap_violation() {
        let g = grid(6, 6);
        let mk = |id, cell: Cell| PlacedStructure {
            instance_id: id,
            kind: StructureKind::Stack,
            anchor_cell: cell,
            footprint_cells: BTreeSet::from([cell]),
            height: 80.0,
        };
        let layout = FacilityLayout {
            grid: g,
            structures: vec![mk(1, Cell::new(2, 3)), mk(2, Cell::new(2, 3))],
            parking_cells: BTreeSet::new(),
            details: ActivityDetails::default(),
            seed: 0,
        };
        let v = validate_layout(&layout);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(matches!(
            v[0],
            Violation::OverlappingFootprint {
                instance_id: 2,
                other_instance_id: 1,
                cell
            } if cell == Cell::new(2, 3)
        ));
        assert_eq!(v[0].instance_id(), Some(2));
    }

    #[test]
    fn car_outside_parking_violation() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        let mut a = add_activity(&layout, 0.5, 3).unwrap();
        a.details.cars[0].position = [1.0e4, 1.0e4];
        let v = validate_layout(&a);
        assert_eq!(v, vec![Violation::CarOutsideParking { car_index: 0 }]);
    }

    #[test]
    fn steam_must_reference_tower() {
        let layout = generate_layout(grid(8, 8), &reference_counts(), 42).unwrap();
        let mut a = add_activity(&layout, 0.5, 3).unwrap();
        let reactor = layout
            .structures
            .iter()
            .find(|s| s.kind == StructureKind::Reactor)
            .unwrap()
            .instance_id;
        a.details.steam_sources[0].tower_instance_id = reactor;
        let v = validate_layout(&a);
        assert_eq!(v, vec![Violation::SteamUnknownTower { instance_id: reactor }]);
    }

    #[test]
    fn canonical_form_is_stable() {
        let layout = generate_layout(grid(4, 4), &BTreeMap::from([(StructureClass::Stack, 1)]), 1)
            .unwrap();
        let text = layout.to_canonical();
        assert!(text.contains("\"cell_size\": 30.000000"));
        assert!(text.contains("\"height\": 80.000000"));
        let back: FacilityLayout = serde_json::from_str(&text).unwrap();
        assert_eq!(back, layout);
    }

    #[test]
    fn grid_cell_lookup_roundtrip() {
        let g = grid(5, 7);
        for r in 0..5 {
            for c in 0..7 {
                let (x, y) = g.cell_center(Cell::new(r, c));
                assert_eq!(g.cell_at(x, y), Some(Cell::new(r, c)));
            }
        }
        assert_eq!(g.cell_at(-1.0e6, 0.0), None);
    }
}
