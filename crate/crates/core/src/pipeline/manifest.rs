//! Provenance records for a run.

use super::plan::PlannedEvent;
use crate::acquisition::Gsd;
use crate::canonical::to_canonical_string;
use crate::composite::{CoverageLevel, MoodPlacement, MoodSpec};
use crate::control::{ExtractorParams, SourceTag};
use crate::digest::sha256_hex;
use crate::synthesis::Modality;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

/// Fields that vary between otherwise identical runs and are left out of
/// the manifest digest.
pub const VOLATILE_FIELDS: [&str; 3] = ["latency_ms", "attempts", "reused"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Product {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    /// SHA-256 of the file bytes.
    pub digest: String,
}

impl Product {
    pub fn verify(&self, root: &Path) -> bool {
        std::fs::read(root.join(&self.path)).is_ok_and(|b| sha256_hex(&b) == self.digest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Some synthesis calls failed.
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderProducts {
    pub rgb: Product,
    pub depth: Product,
    pub instance_mask: Product,
    pub cars: Product,
    pub steam: Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecord {
    pub canny: Product,
    pub depth: Product,
    pub sketch: Product,
    pub color: Product,
    pub source_tag: SourceTag,
    pub color_source: SourceTag,
    pub params: ExtractorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudRecord {
    pub level: CoverageLevel,
    pub seed: u64,
    pub measured_coverage: f64,
    pub layer: Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeRecord {
    pub details: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mood: Option<MoodSpec>,
    pub mood_placement: MoodPlacement,
    pub psf_sigma_px: f64,
    pub native_gsd_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_gsd_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRecord {
    pub combination: u32,
    pub modalities: Vec<Modality>,
    pub prompt: String,
    pub text_guidance_scale: f64,
    pub synthesis_seed: u64,
    pub request_digest: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesized: Option<Product>,
    #[serde(default, rename = "final", skip_serializing_if = "Option::is_none")]
    pub final_image: Option<Product>,
}

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub event: PlannedEvent,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Digest of the scenario and event parameters that produced this record.
    pub fingerprint: String,
    /// Per-event sidecar copy of this record, relative to the output directory.
    pub sidecar: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsd: Option<Gsd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderProducts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clouds: Option<CloudRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<CompositeRecord>,
    #[serde(default)]
    pub synthesis: Vec<SynthesisRecord>,
    /// Set when a previous run's products were verified and kept.
    #[serde(default, skip_serializing_if = "is_false")]
    pub reused: bool,
}

impl EventRecord {
    pub fn products(&self) -> Vec<&Product> {
        let mut v = Vec::new();
        if let Some(r) = &self.render {
            v.extend([&r.rgb, &r.depth, &r.instance_mask, &r.cars, &r.steam]);
        }
        if let Some(b) = &self.bundle {
            v.extend([&b.canny, &b.depth, &b.sketch, &b.color]);
        }
        if let Some(c) = &self.clouds {
            v.push(&c.layer);
        }
        for s in &self.synthesis {
            v.extend(s.synthesized.iter().chain(s.final_image.iter()));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioManifest {
    /// Always true: every image described here is synthetic.
    pub synthetic: bool,
    pub tool_version: String,
    pub config_digest: String,
    pub scenario_seed: u64,
    pub layout_digest: String,
    pub events: Vec<EventRecord>,
}

fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for k in VOLATILE_FIELDS {
                map.remove(k);
            }
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

impl ScenarioManifest {
    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical manifest without [`VOLATILE_FIELDS`].
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        strip_volatile(&mut v);
        sha256_hex(to_canonical_string(&v).expect("value serializes").as_bytes())
    }

    pub fn products(&self) -> Vec<&Product> {
        self.events.iter().flat_map(EventRecord::products).collect()
    }
}
