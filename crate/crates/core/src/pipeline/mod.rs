//! Scenario orchestration.
//!
//! Per event: pose, render, extract guidance maps, synthesize (one or all
//! sixteen modality subsets), composite, degrade, write. Events run on a
//! bounded worker pool; the manifest is assembled in event order afterwards,
//! so neither thread count nor completion order affects it.
//!
//! Output layout, relative to the output directory:
//!
//! ```text
//! manifest.json          canonical manifest
//! manifest.sha256        its digest (volatile fields excluded)
//! events/<stem>/event.json
//! events/<stem>/render/{rgb.png,depth.pfm,mask.png,cars.png,steam.png}
//! events/<stem>/control/{canny,depth,sketch,color}.png
//! events/<stem>/clouds.png
//! events/<stem>/synth/<nn>_<modalities>.png
//! events/<stem>/final/<nn>_<modalities>.png
//! ```

mod config;
mod manifest;
mod plan;

pub use config::{
    fixed_time_of_day, parse_config, AcquisitionConfig, ActivityEntry, CombinationPolicy,
    CompositorConfig, RenderConfig, ScenarioConfig, SceneConfig, SynthesisConfig,
    TaskedAcquisition, DEFAULT_ALTITUDE_M, DEFAULT_EPOCH, DEFAULT_FOV_DEG, DEFAULT_IMAGE_PX,
    DEFAULT_WINDOW_S,
};
pub use manifest::{
    BundleRecord, CloudRecord, CompositeRecord, EventRecord, Product, RenderProducts,
    ScenarioManifest, Status, SynthesisRecord, VOLATILE_FIELDS,
};
pub use plan::{
    activity_at, describe_scenario, plan_events, requests_per_event, EventSeeds, EventSource,
    PlannedEvent,
};

use crate::acquisition::{ground_sampling_distance, resolve_pose, sun_for_time};
use crate::canonical::to_canonical_string;
use crate::composite::{apply_recipe, generate_clouds, CompositeRecipe, LayerRef, MoodSpec};
use crate::control::ControlBundle;
use crate::digest::sha256_hex;
use crate::imageio::{self, write_atomic};
use crate::render::{build_geometry, render_with, DetailLayer, RenderOptions};
use crate::scene::{add_activity, generate_layout, FacilityLayout};
use crate::synthesis::{
    enumerate_combinations, render_prompt, Gateway, HttpBackend, MockBackend, Modality,
    RequestTemplate, RetryPolicy, SynthesisRequest,
};
use crate::vec3::Vec3;
use image::RgbImage;
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub const BACKEND_URL_ENV: &str = "SYNTHSAT_BACKEND_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("planning failed: {0}")]
    Plan(String),
    #[error("output directory {path} is not writable: {message}")]
    FatalIo { path: PathBuf, message: String },
}

/// Applies `SYNTHSAT_BACKEND_URL` when it is set and non-empty.
pub fn apply_env_overrides(cfg: &mut ScenarioConfig) {
    if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
        if !url.trim().is_empty() {
            cfg.synthesis.backend = url.trim().to_owned();
        }
    }
}

/// Gateway described by the synthesis section.
pub fn gateway_for(cfg: &ScenarioConfig) -> Gateway {
    let s = &cfg.synthesis;
    let retry = RetryPolicy {
        attempts: s.retry_attempts,
        base_delay: Duration::from_secs_f64(s.retry_base_delay_s),
    };
    let backend: Arc<dyn crate::synthesis::Backend> = if s.backend == "mock" {
        Arc::new(MockBackend)
    } else {
        Arc::new(HttpBackend::new(&s.backend, Duration::from_secs_f64(s.timeout_s)))
    };
    Gateway::new(backend, retry, s.max_in_flight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub manifest: ScenarioManifest,
    pub manifest_digest: String,
    pub reused_events: usize,
    pub failed_events: usize,
}

struct Context<'a> {
    cfg: &'a ScenarioConfig,
    root: &'a Path,
    config_digest: String,
    layout: FacilityLayout,
    reference: Option<RgbImage>,
    gateway: &'a Gateway,
}

fn probe_output(root: &Path) -> Result<(), PipelineError> {
    let fatal = |e: std::io::Error| PipelineError::FatalIo { path: root.to_owned(), message: e.to_string() };
    fs::create_dir_all(root).map_err(fatal)?;
    let probe = root.join(".synthsat-write-probe");
    fs::write(&probe, b"").map_err(fatal)?;
    fs::remove_file(&probe).map_err(fatal)
}

/// Runs with the gateway the config describes.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, PipelineError> {
    run_scenario_with(cfg, &gateway_for(cfg))
}

pub fn run_scenario_with(cfg: &ScenarioConfig, gateway: &Gateway) -> Result<RunOutcome, PipelineError> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(PipelineError::Validation(v));
    }
    let root = cfg.output_dir.as_path();
    probe_output(root)?;
    let events = plan_events(cfg)?;
    let grid = cfg.grid().map_err(PipelineError::Plan)?;
    let layout = generate_layout(grid, &cfg.scene.counts, cfg.scene.seed).map_err(|e| PipelineError::Plan(e.to_string()))?;
    let reference = match &cfg.synthesis.reference_color {
        Some(p) => Some(
            image::open(p)
                .map_err(|e| PipelineError::Plan(format!("reading {}: {e}", p.display())))?
                .to_rgb8(),
        ),
        None => None,
    };
    let ctx = Context { cfg, root, config_digest: cfg.digest(), layout, reference, gateway };

    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Plan(format!("worker pool: {e}")))?;
    let records: Vec<EventRecord> = pool.install(|| events.par_iter().map(|e| process_event(&ctx, e)).collect());

    let manifest = ScenarioManifest {
        synthetic: true,
        tool_version: crate::TOOL_VERSION.to_owned(),
        config_digest: ctx.config_digest.clone(),
        scenario_seed: cfg.scene.seed,
        layout_digest: ctx.layout.digest(),
        events: records,
    };
    let digest = manifest.digest();
    let fatal = |e: std::io::Error| PipelineError::FatalIo { path: root.to_owned(), message: e.to_string() };
    write_atomic(&root.join("manifest.json"), manifest.to_json().as_bytes()).map_err(fatal)?;
    write_atomic(&root.join("manifest.sha256"), format!("{digest}\n").as_bytes()).map_err(fatal)?;
    Ok(RunOutcome {
        reused_events: manifest.events.iter().filter(|e| e.reused).count(),
        failed_events: manifest.events.iter().filter(|e| e.status == Status::Failed).count(),
        manifest_digest: digest,
        manifest,
    })
}

fn fingerprint(config_digest: &str, ev: &PlannedEvent) -> String {
    let body = to_canonical_string(ev).expect("event serializes");
    sha256_hex(format!("{config_digest}\n{body}").as_bytes())
}

struct Writer<'a> {
    root: &'a Path,
    dir: String,
}

impl Writer<'_> {
    fn put(&self, name: &str, bytes: &[u8]) -> Result<Product, String> {
        let path = format!("{}/{name}", self.dir);
        write_atomic(&self.root.join(&path), bytes).map_err(|e| format!("writing {path}: {e}"))?;
        Ok(Product { path, digest: sha256_hex(bytes) })
    }

    fn clear(&self) {
        let _ = fs::remove_dir_all(self.root.join(&self.dir));
    }
}

fn try_resume(ctx: &Context<'_>, sidecar: &str, fp: &str) -> Option<EventRecord> {
    let text = fs::read_to_string(ctx.root.join(sidecar)).ok()?;
    let mut rec: EventRecord = serde_json::from_str(&text).ok()?;
    if rec.fingerprint != fp || rec.status != Status::Ok {
        return None;
    }
    if !rec.products().iter().all(|p| p.verify(ctx.root)) {
        return None;
    }
    rec.reused = true;
    Some(rec)
}

fn combo_name(mods: &[Modality]) -> String {
    if mods.is_empty() {
        "text".to_owned()
    } else {
        mods.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
    }
}

fn process_event(ctx: &Context<'_>, ev: &PlannedEvent) -> EventRecord {
    let dir = format!("events/{}", ev.stem(ctx.cfg.scene.seed));
    let sidecar = format!("{dir}/event.json");
    let fp = fingerprint(&ctx.config_digest, ev);
    if let Some(rec) = try_resume(ctx, &sidecar, &fp) {
        return rec;
    }
    let w = Writer { root: ctx.root, dir };
    w.clear();
    let mut rec = EventRecord {
        event: ev.clone(),
        status: Status::Failed,
        error: None,
        fingerprint: fp,
        sidecar: sidecar.clone(),
        gsd: None,
        layout_digest: None,
        render: None,
        bundle: None,
        clouds: None,
        composite: None,
        synthesis: Vec::new(),
        reused: false,
    };
    if let Err(e) = run_event(ctx, ev, &w, &mut rec) {
        w.clear();
        rec = EventRecord { error: Some(e), status: Status::Failed, synthesis: Vec::new(), ..base_failed(rec) };
    }
    // The sidecar is advisory (it only accelerates resumption), so a write
    // failure here does not fail the event.
    let _ = write_atomic(&ctx.root.join(&sidecar), to_canonical_string(&rec).expect("record serializes").as_bytes());
    rec
}

fn base_failed(rec: EventRecord) -> EventRecord {
    EventRecord {
        gsd: None,
        layout_digest: None,
        render: None,
        bundle: None,
        clouds: None,
        composite: None,
        ..rec
    }
}

fn run_event(ctx: &Context<'_>, ev: &PlannedEvent, w: &Writer<'_>, rec: &mut EventRecord) -> Result<(), String> {
    let cfg = ctx.cfg;
    let px = cfg.acquisition.image_px;
    let detailed = add_activity(&ctx.layout, ev.activity_level, ev.seeds.activity).map_err(|e| e.to_string())?;
    rec.layout_digest = Some(detailed.digest());
    let geom = build_geometry(&detailed);
    let params = ev.params(cfg);
    let gsd = ground_sampling_distance(&params).map_err(|e| e.to_string())?;
    rec.gsd = Some(gsd);
    let pose = resolve_pose(&params, Vec3::ZERO).map_err(|e| e.to_string())?;
    let sun = sun_for_time(ev.time_of_day);
    let out = render_with(&geom, &pose, &sun, px, RenderOptions { shadows: cfg.render.shadows })
        .map_err(|e| e.to_string())?;

    let enc = |r: Result<Vec<u8>, imageio::ImageIoError>| r.map_err(|e| e.to_string());
    let layer = |l: DetailLayer| out.detail_layers.get(&l).ok_or_else(|| format!("render lacks {} layer", l.name()));
    let (cars, steam) = (layer(DetailLayer::Cars)?, layer(DetailLayer::Steam)?);
    rec.render = Some(RenderProducts {
        rgb: w.put("render/rgb.png", &enc(imageio::encode_png_rgb(&out.rgb))?)?,
        depth: w.put("render/depth.pfm", &imageio::encode_pfm(&out.depth))?,
        instance_mask: w.put("render/mask.png", &enc(imageio::encode_mask_png(&out.instance_mask))?)?,
        cars: w.put("render/cars.png", &enc(imageio::encode_png_rgba(&cars.rgb, &cars.alpha))?)?,
        steam: w.put("render/steam.png", &enc(imageio::encode_png_rgba(&steam.rgb, &steam.alpha))?)?,
    });

    let mut bundle = ControlBundle::from_render(&out, &cfg.control).map_err(|e| e.to_string())?;
    if let Some(photo) = &ctx.reference {
        bundle = bundle.with_reference_color(photo).map_err(|e| e.to_string())?;
    }
    rec.bundle = Some(BundleRecord {
        canny: w.put("control/canny.png", &enc(imageio::encode_png_gray(&bundle.canny))?)?,
        depth: w.put("control/depth.png", &enc(imageio::encode_png_gray(&bundle.depth8))?)?,
        sketch: w.put("control/sketch.png", &enc(imageio::encode_png_gray(&bundle.sketch))?)?,
        color: w.put("control/color.png", &enc(imageio::encode_png_rgb(&bundle.color_blocks))?)?,
        source_tag: bundle.source_tag,
        color_source: bundle.color_source,
        params: bundle.params,
    });

    let clouds = cfg.compositor.clouds.map(|level| generate_clouds(level, ev.seeds.clouds, px));
    if let Some(c) = &clouds {
        rec.clouds = Some(CloudRecord {
            level: c.level,
            seed: c.seed,
            measured_coverage: c.measured_coverage,
            layer: w.put("clouds.png", &enc(imageio::encode_png_rgba(&c.rgb, &c.alpha))?)?,
        });
    }

    let s = &cfg.synthesis;
    let template = RequestTemplate {
        prompt: render_prompt(&s.prompt),
        text_guidance_scale: s.text_guidance_scale,
        weights: s.weights.clone(),
        synthesis_seed: ev.seeds.synthesis,
        output_px: px,
    };
    let requests: Vec<SynthesisRequest> = match s.policy {
        CombinationPolicy::Single => vec![SynthesisRequest::from_bundle(&bundle, &s.modalities, &template)],
        CombinationPolicy::All16 => enumerate_combinations(&bundle, &template),
    };

    let k = &cfg.compositor;
    let mood = (k.mood_weight > 0.0).then_some(MoodSpec { tag: ev.time_of_day, weight: k.mood_weight });
    let composite = CompositeRecord {
        details: k.details,
        mood,
        mood_placement: k.mood_placement,
        psf_sigma_px: k.psf_sigma_px,
        native_gsd_m: gsd.across_m,
        target_gsd_m: k.target_gsd_m,
    };
    let details: Vec<LayerRef<'_>> = if k.details {
        vec![LayerRef { rgb: &cars.rgb, alpha: &cars.alpha }, LayerRef { rgb: &steam.rgb, alpha: &steam.alpha }]
    } else {
        Vec::new()
    };

    let results = ctx.gateway.synthesize_batch(&requests);
    for (req, res) in requests.iter().zip(results) {
        let idx = req.combination_index();
        let name = format!("{idx:02}_{}.png", combo_name(&req.modalities));
        let mut r = SynthesisRecord {
            combination: idx,
            modalities: req.modalities.clone(),
            prompt: req.prompt.clone(),
            text_guidance_scale: req.text_guidance_scale,
            synthesis_seed: req.synthesis_seed,
            request_digest: req.digest(),
            status: Status::Failed,
            error: None,
            backend_id: None,
            model_name: None,
            latency_ms: None,
            attempts: None,
            synthesized: None,
            final_image: None,
        };
        match res {
            Err(e) => r.error = Some(e.to_string()),
            Ok(out) => {
                r.backend_id = Some(out.backend_id.clone());
                r.model_name = Some(out.model_name.clone());
                r.latency_ms = Some(out.latency_ms);
                r.attempts = Some(out.attempts);
                r.synthesized = Some(w.put(&format!("synth/{name}"), &enc(imageio::encode_png_rgb(&out.image))?)?);
                let recipe = CompositeRecipe {
                    synthesized: &out.image,
                    details: details.clone(),
                    clouds: clouds.as_ref().map(|c| c.as_layer()),
                    mood,
                    mood_placement: k.mood_placement,
                    psf_sigma_px: k.psf_sigma_px,
                    native_gsd: gsd.across_m,
                    target_gsd: k.target_gsd_m,
                };
                match apply_recipe(&recipe) {
                    Ok(img) => {
                        r.final_image = Some(w.put(&format!("final/{name}"), &enc(imageio::encode_png_rgb(&img))?)?);
                        r.status = Status::Ok;
                    }
                    Err(e) => r.error = Some(format!("compositing: {e}")),
                }
            }
        }
        rec.synthesis.push(r);
    }
    rec.composite = Some(composite);
    let ok = rec.synthesis.iter().filter(|r| r.status == Status::Ok).count();
    rec.status = match ok {
        n if n == rec.synthesis.len() => Status::Ok,
        0 => Status::Failed,
        _ => Status::Partial,
    };
    if rec.status != Status::Ok {
        rec.error = Some(format!("{} of {} synthesis calls failed", rec.synthesis.len() - ok, rec.synthesis.len()));
    }
    Ok(())
}
