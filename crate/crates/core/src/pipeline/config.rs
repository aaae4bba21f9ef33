//! Scenario configuration: strict TOML with documented defaults.

use super::PipelineError;
use crate::acquisition::{
    AcquisitionParams, Constellation, Satellite, TimeOfDay,
};
use crate::canonical::to_canonical_string;
use crate::composite::{CoverageLevel, MoodPlacement};
use crate::control::ExtractorParams;
use crate::digest::sha256_hex;
use crate::render::MIN_IMAGE_PX;
use crate::scene::{generate_layout, reference_counts, GridSpec, StructureCounts, DEFAULT_CELL_SIZE_M};
use crate::synthesis::{
    Modality, PromptSpec, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TEXT_GUIDANCE, MAX_MODALITY_WEIGHT,
    MAX_OUTPUT_PX,
};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

pub const DEFAULT_EPOCH: &str = "2024-01-01T00:00:00Z";
pub const DEFAULT_WINDOW_S: f64 = 86_400.0;
pub const DEFAULT_ALTITUDE_M: f64 = 500_000.0;
/// About 350 m of ground across the frame at 500 km, enough for an 8x8 site
/// of 30 m cells.
pub const DEFAULT_FOV_DEG: f64 = 0.04;
pub const DEFAULT_IMAGE_PX: u32 = 256;

fn d_true() -> bool {
    true
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("synthsat-out")
}
fn d_rows() -> u32 {
    8
}
fn d_cell() -> f64 {
    DEFAULT_CELL_SIZE_M
}
fn d_epoch() -> String {
    DEFAULT_EPOCH.to_owned()
}
fn d_end() -> f64 {
    DEFAULT_WINDOW_S
}
fn d_altitude() -> f64 {
    DEFAULT_ALTITUDE_M
}
fn d_fov() -> f64 {
    DEFAULT_FOV_DEG
}
fn d_px() -> u32 {
    DEFAULT_IMAGE_PX
}
fn d_auto() -> String {
    "auto".to_owned()
}
fn d_step() -> f64 {
    crate::acquisition::DEFAULT_COARSE_STEP_S
}
fn d_cross() -> f64 {
    400_000.0
}
fn d_backend() -> String {
    "mock".to_owned()
}
fn d_modalities() -> Vec<Modality> {
    vec![Modality::Canny]
}
fn d_text() -> f64 {
    DEFAULT_TEXT_GUIDANCE
}
fn d_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn d_timeout() -> f64 {
    120.0
}
fn d_attempts() -> u32 {
    3
}
fn d_delay() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Relative paths resolve against the working directory.
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    /// Event worker count; `None` uses the number of CPUs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub scene: SceneConfig,
    /// Step function `(time_s, level)`; a level holds until the next entry
    /// and the first entry also covers earlier times.
    #[serde(default)]
    pub activity: Vec<ActivityEntry>,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub control: ExtractorParams,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub compositor: CompositorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Also the scenario seed every event seed is derived from.
    pub seed: u64,
    #[serde(default = "d_rows")]
    pub rows: u32,
    #[serde(default = "d_rows")]
    pub cols: u32,
    #[serde(default = "d_cell")]
    pub cell_size_m: f64,
    #[serde(default = "reference_counts")]
    pub counts: StructureCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityEntry {
    pub time_s: f64,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskedAcquisition {
    pub time_s: f64,
    pub off_nadir_deg: f64,
    #[serde(default)]
    pub azimuth_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// RFC 3339 instant that event times count from.
    #[serde(default = "d_epoch")]
    pub epoch: String,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "d_end")]
    pub end_s: f64,
    #[serde(default = "d_altitude")]
    pub altitude_m: f64,
    #[serde(default = "d_fov")]
    pub fov_deg: f64,
    #[serde(default = "d_px")]
    pub image_px: u32,
    /// `auto` buckets local solar time; otherwise a fixed tag.
    #[serde(default = "d_auto")]
    pub time_of_day: String,
    #[serde(default)]
    pub utc_offset_hours: f64,
    #[serde(default = "d_step")]
    pub coarse_step_s: f64,
    #[serde(default = "d_cross")]
    pub max_cross_track_m: f64,
    #[serde(default)]
    pub satellites: Vec<Satellite>,
    #[serde(default)]
    pub tasked: Vec<TaskedAcquisition>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            epoch: d_epoch(),
            start_s: 0.0,
            end_s: d_end(),
            altitude_m: d_altitude(),
            fov_deg: d_fov(),
            image_px: d_px(),
            time_of_day: d_auto(),
            utc_offset_hours: 0.0,
            coarse_step_s: d_step(),
            max_cross_track_m: d_cross(),
            satellites: Vec::new(),
            tasked: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default = "d_true")]
    pub shadows: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { shadows: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationPolicy {
    /// One request per event using `synthesis.modalities`.
    #[default]
    Single,
    /// All sixteen modality subsets per event.
    All16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// `mock` or an `http(s)://` base URL.
    #[serde(default = "d_backend")]
    pub backend: String,
    #[serde(default)]
    pub policy: CombinationPolicy,
    #[serde(default = "d_modalities")]
    pub modalities: Vec<Modality>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default = "d_text")]
    pub text_guidance_scale: f64,
    #[serde(default)]
    pub weights: BTreeMap<Modality, f64>,
    #[serde(default = "d_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "d_timeout")]
    pub timeout_s: f64,
    #[serde(default = "d_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "d_delay")]
    pub retry_base_delay_s: f64,
    /// PNG whose color blocks replace the render-derived color map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_color: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            backend: d_backend(),
            policy: CombinationPolicy::Single,
            modalities: d_modalities(),
            prompt: PromptSpec::default(),
            text_guidance_scale: d_text(),
            weights: BTreeMap::new(),
            max_in_flight: d_in_flight(),
            timeout_s: d_timeout(),
            retry_attempts: d_attempts(),
            retry_base_delay_s: d_delay(),
            reference_color: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositorConfig {
    /// Reinsert rendered cars and steam.
    #[serde(default = "d_true")]
    pub details: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clouds: Option<CoverageLevel>,
    /// Weight of the event's time-of-day mood; 0 disables it.
    #[serde(default)]
    pub mood_weight: f64,
    #[serde(default)]
    pub mood_placement: MoodPlacement,
    #[serde(default)]
    pub psf_sigma_px: f64,
    /// `None` keeps the native resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_gsd_m: Option<f64>,
}

impl Default for CompositorConfig {
    fn default() -> Self {
        Self {
            details: true,
            clouds: None,
            mood_weight: 0.0,
            mood_placement: MoodPlacement::default(),
            psf_sigma_px: 0.0,
            target_gsd_m: None,
        }
    }
}

/// Fixed time-of-day tag, or `None` for automatic bucketing.
pub fn fixed_time_of_day(s: &str) -> Result<Option<TimeOfDay>, String> {
    if s == "auto" {
        Ok(None)
    } else {
        s.parse::<TimeOfDay>().map(Some).map_err(|_| {
            format!("acquisition.time_of_day must be auto, morning, day, evening or night, got {s:?}")
        })
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Strict parse followed by full validation.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, PipelineError> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        PipelineError::Parse { line, column, message: e.message().to_owned() }
    })?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(PipelineError::Validation(v))
    }
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn grid(&self) -> Result<GridSpec, String> {
        GridSpec::new(self.scene.rows, self.scene.cols, self.scene.cell_size_m).map_err(|e| e.to_string())
    }

    pub fn epoch(&self) -> Result<DateTime<Utc>, String> {
        DateTime::parse_from_rfc3339(&self.acquisition.epoch)
            .map(|d| d.with_timezone(&Utc))
            .map_err(|e| format!("acquisition.epoch {:?} is not RFC 3339: {e}", self.acquisition.epoch))
    }

    pub fn constellation(&self) -> Constellation {
        let a = &self.acquisition;
        let mut c = Constellation::new(
            a.satellites.clone(),
            a.start_s,
            a.end_s,
            crate::seed::derive_seed(self.scene.seed, 0, "constellation"),
        );
        c.max_cross_track_m = a.max_cross_track_m;
        c
    }

    /// Digest of the canonical form with run-local fields (output directory,
    /// worker count) removed, so it identifies the scenario content only.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = None;
        sha256_hex(to_canonical_string(&c).expect("config serializes").as_bytes())
    }

    /// Every violated constraint across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.workers == Some(0) {
            v.push("workers must be >= 1".to_owned());
        }

        match self.grid() {
            Err(e) => v.push(format!("scene: {e}")),
            Ok(grid) => {
                let cells: usize = self
                    .scene
                    .counts
                    .iter()
                    .map(|(c, n)| c.footprint_size() * *n as usize)
                    .sum();
                if cells > grid.cell_count() {
                    v.push(format!(
                        "scene: counts need {cells} cells but the grid has {}",
                        grid.cell_count()
                    ));
                } else if let Err(e) = generate_layout(grid, &self.scene.counts, self.scene.seed) {
                    v.push(format!("scene: {e}"));
                }
            }
        }

        let a = &self.acquisition;
        if let Err(e) = self.epoch() {
            v.push(e);
        }
        if !(a.start_s.is_finite() && a.end_s.is_finite() && a.end_s > a.start_s) {
            v.push(format!(
                "acquisition: window end_s ({}) must be greater than start_s ({})",
                a.end_s, a.start_s
            ));
        }
        let in_window = |t: f64| t >= a.start_s && t <= a.end_s;
        if let Err(e) = fixed_time_of_day(&a.time_of_day) {
            v.push(e);
        }
        if !(-14.0..=14.0).contains(&a.utc_offset_hours) {
            v.push(format!("acquisition.utc_offset_hours must be in [-14, 14], got {}", a.utc_offset_hours));
        }
        if !(a.coarse_step_s > 0.0) {
            v.push(format!("acquisition.coarse_step_s must be > 0, got {}", a.coarse_step_s));
        }
        if a.image_px < MIN_IMAGE_PX || a.image_px > MAX_OUTPUT_PX {
            v.push(format!(
                "acquisition.image_px must be in [{MIN_IMAGE_PX}, {MAX_OUTPUT_PX}], got {}",
                a.image_px
            ));
        }
        let base = AcquisitionParams {
            altitude_m: a.altitude_m,
            off_nadir_deg: 0.0,
            azimuth_deg: 0.0,
            fov_deg: a.fov_deg,
            image_px: a.image_px,
        };
        v.extend(base.violations().into_iter().map(|m| format!("acquisition: {m}")));
        for m in self.constellation().violations() {
            if !m.starts_with("window") {
                v.push(format!("acquisition.satellites: {m}"));
            }
        }
        for (i, t) in a.tasked.iter().enumerate() {
            let p = AcquisitionParams {
                altitude_m: t.altitude_m.unwrap_or(a.altitude_m),
                off_nadir_deg: t.off_nadir_deg,
                azimuth_deg: t.azimuth_deg,
                ..base
            };
            for m in p.violations() {
                if m.starts_with("off_nadir") || m.starts_with("azimuth") || m.starts_with("altitude") {
                    v.push(format!("acquisition.tasked[{i}]: {m}"));
                }
            }
            if !in_window(t.time_s) {
                v.push(format!(
                    "acquisition.tasked[{i}]: time_s {} is outside the window [{}, {}]",
                    t.time_s, a.start_s, a.end_s
                ));
            }
        }
        for (i, e) in self.activity.iter().enumerate() {
            if !in_window(e.time_s) {
                v.push(format!(
                    "activity[{i}]: time_s {} is outside the window [{}, {}]",
                    e.time_s, a.start_s, a.end_s
                ));
            }
            if !(0.0..=1.0).contains(&e.level) {
                v.push(format!("activity[{i}]: level must be in [0, 1], got {}", e.level));
            }
        }
        if self.activity.windows(2).any(|w| w[1].time_s <= w[0].time_s) {
            v.push("activity: entries must have strictly increasing time_s".to_owned());
        }

        let c = &self.control;
        if !(c.canny_low >= 0.0 && c.canny_low <= c.canny_high) {
            v.push(format!("control: need 0 <= canny_low ({}) <= canny_high ({})", c.canny_low, c.canny_high));
        }
        if c.color_block == 0 {
            v.push("control.color_block must be >= 1".to_owned());
        }
        if let Some(px) = c.extract_px {
            if px != a.image_px {
                v.push(format!(
                    "control.extract_px ({px}) must equal acquisition.image_px ({}) so maps register with the render",
                    a.image_px
                ));
            }
        }

        let s = &self.synthesis;
        if s.backend != "mock" && !s.backend.starts_with("http://") && !s.backend.starts_with("https://") {
            v.push(format!("synthesis.backend must be \"mock\" or an http(s) URL, got {:?}", s.backend));
        }
        let mut mods = s.modalities.clone();
        mods.sort();
        mods.dedup();
        if mods.len() != s.modalities.len() {
            v.push("synthesis.modalities must not repeat".to_owned());
        }
        if !(s.text_guidance_scale.is_finite() && s.text_guidance_scale > 0.0) {
            v.push(format!("synthesis.text_guidance_scale must be > 0, got {}", s.text_guidance_scale));
        }
        for (m, w) in &s.weights {
            if !(0.0..=MAX_MODALITY_WEIGHT).contains(w) {
                v.push(format!("synthesis.weights.{m} must be in [0, {MAX_MODALITY_WEIGHT}], got {w}"));
            }
        }
        if s.prompt.base.trim().is_empty() {
            v.push("synthesis.prompt.base must be non-empty".to_owned());
        }
        if s.max_in_flight == 0 {
            v.push("synthesis.max_in_flight must be >= 1".to_owned());
        }
        if !(s.timeout_s > 0.0) {
            v.push(format!("synthesis.timeout_s must be > 0, got {}", s.timeout_s));
        }
        if s.retry_attempts == 0 {
            v.push("synthesis.retry_attempts must be >= 1".to_owned());
        }
        if !(s.retry_base_delay_s >= 0.0) {
            v.push(format!("synthesis.retry_base_delay_s must be >= 0, got {}", s.retry_base_delay_s));
        }
        if let Some(p) = &s.reference_color {
            if !p.is_file() {
                v.push(format!("synthesis.reference_color {} is not a readable file", p.display()));
            }
        }

        let k = &self.compositor;
        if !(0.0..=1.0).contains(&k.mood_weight) {
            v.push(format!("compositor.mood_weight must be in [0, 1], got {}", k.mood_weight));
        }
        if !(k.psf_sigma_px.is_finite() && k.psf_sigma_px >= 0.0) {
            v.push(format!("compositor.psf_sigma_px must be >= 0, got {}", k.psf_sigma_px));
        }
        if let Some(t) = k.target_gsd_m {
            if !(t.is_finite() && t > 0.0) {
                v.push(format!("compositor.target_gsd_m must be > 0, got {t}"));
            }
        }
        v
    }
}
