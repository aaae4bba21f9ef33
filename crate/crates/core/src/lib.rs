//! Synthetic overhead imagery of notional nuclear power plants.
//!
//! The crate is organized as a straight pipeline:
//!
//! 1. [`scene`]: seeded grid layouts of reactors, cooling towers, stacks and
//!    tetromino buildings, plus activity details (cars, steam).
//! 2. [`acquisition`]: satellite viewing geometry, sun lookup, ground sampling
//!    distance and a flat-Earth constellation pass scheduler.
//! 3. [`render`]: a deterministic CPU raycaster producing RGB, metric depth,
//!    instance masks and separately rendered detail layers.
//! 4. [`control`]: canny, depth, sketch and color-block guidance maps.
//! 5. [`synthesis`]: prompt templates, modality combinations, the wire
//!    protocol, retrying gateway, and a deterministic mock backend.
//! 6. [`composite`]: detail reinsertion, procedural clouds, mood blending and
//!    sensor-resolution degradation.
//! 7. [`pipeline`]: scenario configuration, orchestration and the manifest.

pub mod acquisition;
pub mod canonical;
pub mod composite;
pub mod control;
pub mod digest;
pub mod imageio;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scene;
pub mod seed;
pub mod synthesis;
pub mod vec3;

/// Version string recorded in manifests.
pub const TOOL_VERSION: &str = concat!("synthsat ", env!("CARGO_PKG_VERSION"));
