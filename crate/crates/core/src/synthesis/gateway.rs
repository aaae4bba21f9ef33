//! Validating, retrying, concurrency-bounded client for synthesis backends.

use super::mock::{mock_image, MOCK_BACKEND_ID, MOCK_MODEL_NAME};
use super::wire::{
    Capabilities, ErrorBody, WireRequest, WireResponse, CAPABILITIES_PATH, PROTOCOL_HEADER,
    PROTOCOL_VERSION, SYNTHESIZE_PATH,
};
use super::{Modality, SynthesisRequest, MAX_OUTPUT_PX};
use crate::imageio;
use image::RgbImage;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend rejected request ({status} {code}): {message}")]
    Rejected { status: u16, code: String, message: String },
}

/// Outcome of a single attempt. Only `Transient` is retried.
#[derive(Debug, Clone, PartialEq)]
pub enum SendError {
    Transient(String),
    Protocol(String),
    Rejected { status: u16, code: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendResponse {
    pub image: RgbImage,
    pub backend_id: String,
    pub model_name: String,
    pub request_digest: String,
}

pub trait Backend: Send + Sync {
    fn send(&self, req: &SynthesisRequest, digest: &str) -> Result<BackendResponse, SendError>;
    fn capabilities(&self) -> Result<Capabilities, SendError>;
}

/// In-process mock; same images as the mock HTTP server.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockBackend;

pub(crate) fn mock_capabilities() -> Capabilities {
    Capabilities {
        protocol: PROTOCOL_VERSION,
        backend_id: MOCK_BACKEND_ID.to_owned(),
        model_name: MOCK_MODEL_NAME.to_owned(),
        modalities: Modality::ALL.iter().map(|m| m.name().to_owned()).collect(),
        max_output_px: MAX_OUTPUT_PX,
    }
}

impl Backend for MockBackend {
    fn send(&self, req: &SynthesisRequest, digest: &str) -> Result<BackendResponse, SendError> {
        Ok(BackendResponse {
            image: mock_image(req),
            backend_id: MOCK_BACKEND_ID.to_owned(),
            model_name: MOCK_MODEL_NAME.to_owned(),
            request_digest: digest.to_owned(),
        })
    }

    fn capabilities(&self) -> Result<Capabilities, SendError> {
        Ok(mock_capabilities())
    }
}

/// Speaks the wire protocol over HTTP.
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self { base_url: base_url.trim_end_matches('/').to_owned(), agent: config.into() }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn read(resp: &mut ureq::http::Response<ureq::Body>) -> Result<String, SendError> {
        resp.body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| SendError::Transient(format!("reading response: {e}")))
    }

    fn classify(status: u16, body: &str) -> SendError {
        let (code, message) = match serde_json::from_str::<ErrorBody>(body) {
            Ok(e) => (e.error.code, e.error.message),
            Err(_) => (String::new(), body.chars().take(200).collect()),
        };
        if status == 429 || status >= 500 {
            SendError::Transient(format!("HTTP {status} {code}: {message}"))
        } else {
            SendError::Rejected { status, code, message }
        }
    }
}

fn transport(e: ureq::Error) -> SendError {
    SendError::Transient(e.to_string())
}

impl Backend for HttpBackend {
    fn send(&self, req: &SynthesisRequest, _digest: &str) -> Result<BackendResponse, SendError> {
        let wire = WireRequest::encode(req).map_err(|e| SendError::Protocol(e.to_string()))?;
        let body = serde_json::to_string(&wire).expect("wire request serializes");
        let mut resp = self
            .agent
            .post(format!("{}{SYNTHESIZE_PATH}", self.base_url))
            .header(PROTOCOL_HEADER, PROTOCOL_VERSION.to_string())
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let text = Self::read(&mut resp)?;
        if status != 200 {
            return Err(Self::classify(status, &text));
        }
        let env: WireResponse =
            serde_json::from_str(&text).map_err(|e| SendError::Protocol(format!("malformed response: {e}")))?;
        if env.protocol != PROTOCOL_VERSION {
            return Err(SendError::Protocol(format!(
                "expected protocol {PROTOCOL_VERSION}, got {}",
                env.protocol
            )));
        }
        let bytes = imageio::base64_decode(&env.image_png_b64)
            .map_err(|e| SendError::Protocol(format!("image: {e}")))?;
        let image = imageio::decode_png_rgb(&bytes).map_err(|e| SendError::Protocol(format!("image: {e}")))?;
        if image.dimensions() != (env.width, env.height) {
            return Err(SendError::Protocol(format!(
                "envelope says {}x{}, image is {}x{}",
                env.width,
                env.height,
                image.width(),
                image.height()
            )));
        }
        Ok(BackendResponse {
            image,
            backend_id: env.backend_id,
            model_name: env.model_name,
            request_digest: env.request_digest,
        })
    }

    fn capabilities(&self) -> Result<Capabilities, SendError> {
        let mut resp = self
            .agent
            .get(format!("{}{CAPABILITIES_PATH}", self.base_url))
            .header(PROTOCOL_HEADER, PROTOCOL_VERSION.to_string())
            .call()
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let text = Self::read(&mut resp)?;
        if status != 200 {
            return Err(Self::classify(status, &text));
        }
        serde_json::from_str(&text).map_err(|e| SendError::Protocol(format!("malformed capabilities: {e}")))
    }
}

/// `attempts` tries; before retry `k` (1-based) wait `base_delay * 2^(k-1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay * (1u32 << (retry - 1).min(16))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub image: RgbImage,
    pub backend_id: String,
    pub model_name: String,
    pub latency_ms: u64,
    pub request_digest: String,
    pub attempts: u32,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Shared by every worker of a run; at most `max_in_flight` requests are
/// outstanding at once across all callers.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    max_in_flight: usize,
    slots: Semaphore,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Self {
            backend,
            retry,
            max_in_flight,
            slots: Semaphore { free: Mutex::new(max_in_flight), cv: Condvar::new() },
        }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockBackend), RetryPolicy::default(), DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn capabilities(&self) -> Result<Capabilities, GatewayError> {
        self.backend.capabilities().map_err(|e| match e {
            SendError::Transient(m) => GatewayError::BackendUnavailable { attempts: 1, last: m },
            SendError::Protocol(m) => GatewayError::Protocol(m),
            SendError::Rejected { status, code, message } => GatewayError::Rejected { status, code, message },
        })
    }

    /// Validates, sends with retries, and checks the response against the
    /// request. Nothing is sent for an invalid request.
    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<SynthesisResult, GatewayError> {
        req.validate()?;
        let digest = req.digest();
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            if attempt > 1 {
                thread::sleep(self.retry.delay_before(attempt - 1));
            }
            let outcome = {
                let _slot = self.slots.acquire();
                self.backend.send(req, &digest)
            };
            match outcome {
                Ok(resp) => {
                    let want = (req.output_px, req.output_px);
                    if resp.image.dimensions() != want {
                        return Err(GatewayError::Protocol(format!(
                            "expected {}x{} image, got {}x{}",
                            want.0,
                            want.1,
                            resp.image.width(),
                            resp.image.height()
                        )));
                    }
                    if resp.request_digest != digest {
                        return Err(GatewayError::Protocol(format!(
                            "expected request_digest {digest}, got {}",
                            resp.request_digest
                        )));
                    }
                    if resp.backend_id.is_empty() {
                        return Err(GatewayError::Protocol("empty backend_id".to_owned()));
                    }
                    return Ok(SynthesisResult {
                        image: resp.image,
                        backend_id: resp.backend_id,
                        model_name: resp.model_name,
                        latency_ms: start.elapsed().as_millis() as u64,
                        request_digest: digest,
                        attempts: attempt,
                    });
                }
                Err(SendError::Transient(m)) => last = m,
                Err(SendError::Protocol(m)) => return Err(GatewayError::Protocol(m)),
                Err(SendError::Rejected { status, code, message }) => {
                    return Err(GatewayError::Rejected { status, code, message })
                }
            }
        }
        Err(GatewayError::BackendUnavailable { attempts: self.retry.attempts.max(1), last })
    }

    /// Runs a batch with up to `max_in_flight` concurrent requests; result
    /// `i` always belongs to request `i`.
    pub fn synthesize_batch(&self, reqs: &[SynthesisRequest]) -> Vec<Result<SynthesisResult, GatewayError>> {
        let next = AtomicUsize::new(0);
        let out: Vec<Mutex<Option<Result<SynthesisResult, GatewayError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|s| {
            for _ in 0..self.max_in_flight.min(reqs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let r = self.synthesize(&reqs[i]);
                    *out[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        out.into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every index processed"))
            .collect()
    }
}
