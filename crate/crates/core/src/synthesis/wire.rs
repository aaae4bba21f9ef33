//! JSON bodies exchanged with synthesis backends.

use super::{ControlImage, GatewayError, Modality, SynthesisRequest};
use crate::imageio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PROTOCOL_VERSION: u32 = 1;
pub const PROTOCOL_HEADER: &str = "x-synthsat-proto";
pub const SYNTHESIZE_PATH: &str = "/v1/synthesize";
pub const CAPABILITIES_PATH: &str = "/v1/capabilities";

/// Body of `POST /v1/synthesize`. Modalities travel as plain strings so a
/// server can answer an unknown name with 422 rather than a parse failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub protocol: u32,
    pub request_digest: String,
    pub prompt: String,
    pub text_guidance_scale: f64,
    pub synthesis_seed: u64,
    pub output_px: u32,
    pub modalities: Vec<String>,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    /// Modality name to base64 PNG.
    #[serde(default)]
    pub maps: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMetadata {
    pub text_guidance_scale: f64,
    pub synthesis_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireResponse {
    pub protocol: u32,
    pub backend_id: String,
    pub model_name: String,
    pub request_digest: String,
    pub width: u32,
    pub height: u32,
    pub image_png_b64: String,
    pub metadata: WireMetadata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub protocol: u32,
    pub backend_id: String,
    pub model_name: String,
    pub modalities: Vec<String>,
    pub max_output_px: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl WireRequest {
    pub fn encode(req: &SynthesisRequest) -> Result<Self, GatewayError> {
        let mut maps = BTreeMap::new();
        for (m, img) in &req.maps {
            let png = img
                .encode_png()
                .map_err(|e| GatewayError::Validation(vec![format!("map {m}: {e}")]))?;
            maps.insert(m.name().to_owned(), imageio::base64_encode(&png));
        }
        Ok(Self {
            protocol: PROTOCOL_VERSION,
            request_digest: req.digest(),
            prompt: req.prompt.clone(),
            text_guidance_scale: req.text_guidance_scale,
            synthesis_seed: req.synthesis_seed,
            output_px: req.output_px,
            modalities: req.modalities.iter().map(|m| m.name().to_owned()).collect(),
            weights: req.weights.iter().map(|(m, w)| (m.name().to_owned(), *w)).collect(),
            maps,
        })
    }

    /// Rebuilds the typed request. Errors carry `(status, code, message)`.
    pub fn decode(&self) -> Result<SynthesisRequest, (u16, &'static str, String)> {
        let parse = |names: &mut dyn Iterator<Item = &String>| -> Result<Vec<Modality>, (u16, &'static str, String)> {
            names
                .map(|n| n.parse::<Modality>().map_err(|e| (422, "unsupported_modality", e)))
                .collect()
        };
        let modalities = parse(&mut self.modalities.iter())?;
        let map_names = parse(&mut self.maps.keys())?;
        let weight_names = parse(&mut self.weights.keys())?;
        let mut maps = BTreeMap::new();
        for (m, b64) in map_names.into_iter().zip(self.maps.values()) {
            let bytes = imageio::base64_decode(b64).map_err(|e| (400, "malformed_map", format!("{m}: {e}")))?;
            let img = ControlImage::decode_png(&bytes, m).map_err(|e| (400, "malformed_map", format!("{m}: {e}")))?;
            maps.insert(m, img);
        }
        let weights = weight_names.into_iter().zip(self.weights.values().copied()).collect();
        let req = SynthesisRequest {
            modalities,
            maps,
            weights,
            prompt: self.prompt.clone(),
            text_guidance_scale: self.text_guidance_scale,
            synthesis_seed: self.synthesis_seed,
            output_px: self.output_px,
        };
        let v = req.violations();
        if !v.is_empty() {
            return Err((422, "invalid_request", v.join("; ")));
        }
        let digest = req.digest();
        if digest != self.request_digest {
            return Err((
                400,
                "digest_mismatch",
                format!("request_digest {} does not match content digest {digest}", self.request_digest),
            ));
        }
        Ok(req)
    }
}
