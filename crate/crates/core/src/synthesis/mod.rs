//! Guided synthesis requests and the gateway that ships them to a backend.
//!
//! A [`SynthesisRequest`] names a subset of the four guidance modalities,
//! carries their maps, a text prompt and guidance scales. Requests have a
//! canonical serialization in which maps appear only by pixel digest; its
//! SHA-256 is the request digest that backends echo back.

mod gateway;
mod mock;
mod server;
mod wire;

pub use gateway::{
    Backend, BackendResponse, Gateway, GatewayError, HttpBackend, MockBackend, RetryPolicy,
    SendError, SynthesisResult, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT,
};
pub use mock::{mock_image, MOCK_BACKEND_ID, MOCK_MODEL_NAME};
pub use server::{handle_request, MockServer, WireReply};
pub use wire::{
    Capabilities, ErrorBody, ErrorDetail, WireMetadata, WireRequest, WireResponse,
    CAPABILITIES_PATH, PROTOCOL_HEADER, PROTOCOL_VERSION, SYNTHESIZE_PATH,
};

use crate::canonical::to_canonical_string;
use crate::control::ControlBundle;
use crate::digest::{gray_digest, rgb_digest, sha256_hex};
use crate::imageio::{self, ImageIoError};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const BASE_PROMPT: &str = "Satellite image of a nuclear power plant";
pub const DEFAULT_TEXT_GUIDANCE: f64 = 10.0;
pub const HIGH_TEXT_GUIDANCE: f64 = 15.0;
pub const DEFAULT_MODALITY_WEIGHT: f64 = 1.0;
pub const MAX_MODALITY_WEIGHT: f64 = 2.0;
pub const MAX_OUTPUT_PX: u32 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Canny,
    Depth,
    Sketch,
    Color,
}

impl Modality {
    /// Bit order used for combination indices: canny is bit 0, color bit 3.
    pub const ALL: [Modality; 4] = [Modality::Canny, Modality::Depth, Modality::Sketch, Modality::Color];

    pub fn bit(self) -> u32 {
        1 << (self as u32)
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Canny => "canny",
            Modality::Depth => "depth",
            Modality::Sketch => "sketch",
            Modality::Color => "color",
        }
    }

    /// Color maps are RGB, the others single-channel.
    pub fn is_rgb(self) -> bool {
        self == Modality::Color
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown modality {s:?}"))
    }
}

/// Modalities whose bits are set in `mask`, in canonical order.
pub fn combination(mask: u32) -> Vec<Modality> {
    Modality::ALL.into_iter().filter(|m| mask & m.bit() != 0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Spring,
    Summer,
    Fall,
    Winter,
}

impl Season {
    pub fn name(self) -> &'static str {
        match self {
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
            Season::Winter => "winter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Forest,
    Desert,
    Coastline,
    Mountains,
}

impl Environment {
    pub fn phrase(self) -> &'static str {
        match self {
            Environment::Forest => "in a forest",
            Environment::Desert => "in the desert",
            Environment::Coastline => "by a coastline",
            Environment::Mountains => "in the mountains",
        }
    }
}

fn default_base() -> String {
    BASE_PROMPT.to_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default = "default_base")]
    pub base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub season: Option<Season>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<Environment>,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self { base: default_base(), season: None, environment: None }
    }
}

/// `base`, then ` in <season>`, then ` <environment phrase>`.
pub fn render_prompt(spec: &PromptSpec) -> String {
    let mut s = spec.base.clone();
    if let Some(season) = spec.season {
        s.push_str(" in ");
        s.push_str(season.name());
    }
    if let Some(env) = spec.environment {
        s.push(' ');
        s.push_str(env.phrase());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl ControlImage {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            ControlImage::Gray(g) => g.dimensions(),
            ControlImage::Rgb(c) => c.dimensions(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ControlImage::Gray(_) => "L8",
            ControlImage::Rgb(_) => "RGB8",
        }
    }

    pub fn digest(&self) -> String {
        match self {
            ControlImage::Gray(g) => gray_digest(g),
            ControlImage::Rgb(c) => rgb_digest(c),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageIoError> {
        match self {
            ControlImage::Gray(g) => imageio::encode_png_gray(g),
            ControlImage::Rgb(c) => imageio::encode_png_rgb(c),
        }
    }

    /// Decodes a PNG into the channel layout `modality` expects.
    pub fn decode_png(bytes: &[u8], modality: Modality) -> Result<Self, ImageIoError> {
        Ok(if modality.is_rgb() {
            ControlImage::Rgb(imageio::decode_png_rgb(bytes)?)
        } else {
            ControlImage::Gray(imageio::decode_png_gray(bytes)?)
        })
    }

    /// Single-channel value at `(x, y)`; RGB maps report luma.
    pub fn gray_at(&self, x: u32, y: u32) -> u8 {
        match self {
            ControlImage::Gray(g) => g.get_pixel(x, y)[0],
            ControlImage::Rgb(c) => {
                let p = c.get_pixel(x, y);
                ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8
            }
        }
    }

    pub fn rgb_at(&self, x: u32, y: u32) -> [u8; 3] {
        match self {
            ControlImage::Gray(g) => [g.get_pixel(x, y)[0]; 3],
            ControlImage::Rgb(c) => c.get_pixel(x, y).0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    /// Sorted and unique.
    pub modalities: Vec<Modality>,
    pub maps: BTreeMap<Modality, ControlImage>,
    /// Missing entries mean [`DEFAULT_MODALITY_WEIGHT`].
    pub weights: BTreeMap<Modality, f64>,
    pub prompt: String,
    pub text_guidance_scale: f64,
    pub synthesis_seed: u64,
    pub output_px: u32,
}

#[derive(Serialize)]
struct MapRef {
    kind: &'static str,
    width: u32,
    height: u32,
    digest: String,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    protocol: u32,
    modalities: Vec<&'static str>,
    maps: BTreeMap<&'static str, MapRef>,
    weights: BTreeMap<&'static str, f64>,
    prompt: &'a str,
    text_guidance_scale: f64,
    synthesis_seed: u64,
    output_px: u32,
}

impl SynthesisRequest {
    pub fn weight(&self, m: Modality) -> f64 {
        self.weights.get(&m).copied().unwrap_or(DEFAULT_MODALITY_WEIGHT)
    }

    /// Every violated precondition, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.prompt.trim().is_empty() {
            v.push("prompt must be non-empty".to_owned());
        }
        if !(self.text_guidance_scale.is_finite() && self.text_guidance_scale > 0.0) {
            v.push(format!("text_guidance_scale must be > 0, got {}", self.text_guidance_scale));
        }
        if self.output_px == 0 || self.output_px > MAX_OUTPUT_PX {
            v.push(format!("output_px must be in [1, {MAX_OUTPUT_PX}], got {}", self.output_px));
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            v.push("modalities must be sorted and unique".to_owned());
        }
        for m in &self.modalities {
            match self.maps.get(m) {
                None => v.push(format!("modality {m} has no map")),
                Some(img) if img.kind() != if m.is_rgb() { "RGB8" } else { "L8" } => {
                    v.push(format!("map for {m} has the wrong channel layout"))
                }
                Some(_) => {}
            }
        }
        for m in self.maps.keys() {
            if !self.modalities.contains(m) {
                v.push(format!("map supplied for unnamed modality {m}"));
            }
        }
        for (m, w) in &self.weights {
            if !self.modalities.contains(m) {
                v.push(format!("weight supplied for unnamed modality {m}"));
            }
            if !(0.0..=MAX_MODALITY_WEIGHT).contains(w) {
                v.push(format!("weight for {m} must be in [0, {MAX_MODALITY_WEIGHT}], got {w}"));
            }
        }
        let mut dims = self.maps.values().map(ControlImage::dimensions);
        if let Some(first) = dims.next() {
            if first.0 == 0 || first.1 == 0 {
                v.push("maps must be non-empty".to_owned());
            }
            if dims.any(|d| d != first) {
                v.push("maps must share one resolution".to_owned());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(GatewayError::Validation(v))
        }
    }

    /// Canonical JSON with maps referenced by pixel digest and effective
    /// weights listed for every named modality.
    pub fn canonical_json(&self) -> String {
        let c = CanonicalRequest {
            protocol: PROTOCOL_VERSION,
            modalities: self.modalities.iter().map(|m| m.name()).collect(),
            maps: self
                .maps
                .iter()
                .map(|(m, img)| {
                    let (width, height) = img.dimensions();
                    (m.name(), MapRef { kind: img.kind(), width, height, digest: img.digest() })
                })
                .collect(),
            weights: self.modalities.iter().map(|&m| (m.name(), self.weight(m))).collect(),
            prompt: &self.prompt,
            text_guidance_scale: self.text_guidance_scale,
            synthesis_seed: self.synthesis_seed,
            output_px: self.output_px,
        };
        to_canonical_string(&c).expect("canonical request serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Combination index: the OR of the named modalities' bits.
    pub fn combination_index(&self) -> u32 {
        self.modalities.iter().fold(0, |acc, m| acc | m.bit())
    }

    /// Request for `modalities` drawn from `bundle`.
    pub fn from_bundle(bundle: &ControlBundle, modalities: &[Modality], template: &RequestTemplate) -> Self {
        let mut mods = modalities.to_vec();
        mods.sort();
        mods.dedup();
        let maps = mods
            .iter()
            .map(|&m| {
                let img = match m {
                    Modality::Canny => ControlImage::Gray(bundle.canny.clone()),
                    Modality::Depth => ControlImage::Gray(bundle.depth8.clone()),
                    Modality::Sketch => ControlImage::Gray(bundle.sketch.clone()),
                    Modality::Color => ControlImage::Rgb(bundle.color_blocks.clone()),
                };
                (m, img)
            })
            .collect();
        let weights = mods
            .iter()
            .filter_map(|m| template.weights.get(m).map(|w| (*m, *w)))
            .collect();
        Self {
            modalities: mods,
            maps,
            weights,
            prompt: template.prompt.clone(),
            text_guidance_scale: template.text_guidance_scale,
            synthesis_seed: template.synthesis_seed,
            output_px: template.output_px,
        }
    }
}

/// Everything in a request except the modality subset and its maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestTemplate {
    pub prompt: String,
    pub text_guidance_scale: f64,
    pub weights: BTreeMap<Modality, f64>,
    pub synthesis_seed: u64,
    pub output_px: u32,
}

impl Default for RequestTemplate {
    fn default() -> Self {
        Self {
            prompt: BASE_PROMPT.to_owned(),
            text_guidance_scale: DEFAULT_TEXT_GUIDANCE,
            weights: BTreeMap::new(),
            synthesis_seed: 0,
            output_px: 512,
        }
    }
}

/// One request per modality subset, indexed by binary counting with canny
/// as the lowest bit: index 0 is text-only, index 15 uses all four maps.
pub fn enumerate_combinations(bundle: &ControlBundle, template: &RequestTemplate) -> Vec<SynthesisRequest> {
    (0..16)
        .map(|mask| SynthesisRequest::from_bundle(bundle, &combination(mask), template))
        .collect()
}
