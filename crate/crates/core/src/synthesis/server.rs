//! HTTP server exposing the mock backend over the wire protocol.

use super::gateway::mock_capabilities;
use super::mock::{mock_image, MOCK_BACKEND_ID, MOCK_MODEL_NAME};
use super::wire::{
    ErrorBody, ErrorDetail, WireMetadata, WireRequest, WireResponse,
    CAPABILITIES_PATH, PROTOCOL_HEADER, PROTOCOL_VERSION, SYNTHESIZE_PATH,
};
use crate::imageio;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireReply {
    pub status: u16,
    pub body: String,
}

fn error(status: u16, code: &str, message: impl Into<String>) -> WireReply {
    let body = ErrorBody { error: ErrorDetail { code: code.to_owned(), message: message.into() } };
    WireReply { status, body: serde_json::to_string(&body).expect("error body serializes") }
}

fn ok<T: serde::Serialize>(value: &T) -> WireReply {
    WireReply { status: 200, body: serde_json::to_string(value).expect("reply serializes") }
}

/// Transport-independent request handler; the HTTP loop is a thin shell
/// around it, which lets protocol vectors run without sockets.
pub fn handle_request(method: &str, path: &str, proto: Option<&str>, body: &[u8]) -> WireReply {
    let path = path.split('?').next().unwrap_or(path);
    let known = [SYNTHESIZE_PATH, CAPABILITIES_PATH];
    if !known.contains(&path) {
        return error(404, "not_found", format!("no route for {path}"));
    }
    let want = PROTOCOL_VERSION.to_string();
    if proto != Some(want.as_str()) {
        return error(
            400,
            "unsupported_protocol",
            format!("{PROTOCOL_HEADER} must be {want}, got {}", proto.unwrap_or("nothing")),
        );
    }
    match (method, path) {
        ("GET", CAPABILITIES_PATH) => ok(&mock_capabilities()),
        ("POST", SYNTHESIZE_PATH) => synthesize(body),
        _ => error(405, "method_not_allowed", format!("{method} not allowed on {path}")),
    }
}

fn synthesize(body: &[u8]) -> WireReply {
    let wire: WireRequest = match serde_json::from_slice(body) {
        Ok(w) => w,
        Err(e) => return error(400, "malformed_body", e.to_string()),
    };
    if wire.protocol != PROTOCOL_VERSION {
        return error(400, "unsupported_protocol", format!("body protocol {}", wire.protocol));
    }
    let req = match wire.decode() {
        Ok(r) => r,
        Err((status, code, message)) => return error(status, code, message),
    };
    let img = mock_image(&req);
    let png = match imageio::encode_png_rgb(&img) {
        Ok(p) => p,
        Err(e) => return error(500, "internal", e.to_string()),
    };
    ok(&WireResponse {
        protocol: PROTOCOL_VERSION,
        backend_id: MOCK_BACKEND_ID.to_owned(),
        model_name: MOCK_MODEL_NAME.to_owned(),
        request_digest: wire.request_digest,
        width: img.width(),
        height: img.height(),
        image_png_b64: imageio::base64_encode(&png),
        metadata: WireMetadata {
            text_guidance_scale: req.text_guidance_scale,
            synthesis_seed: req.synthesis_seed,
        },
    })
}

fn serve_one(mut rq: tiny_http::Request) {
    let proto = rq
        .headers()
        .iter()
        .find(|h| h.field.equiv(PROTOCOL_HEADER))
        .map(|h| h.value.as_str().to_owned());
    let mut body = Vec::new();
    let reply = match rq.as_reader().read_to_end(&mut body) {
        Ok(_) => handle_request(rq.method().as_str(), rq.url(), proto.as_deref(), &body),
        Err(e) => error(400, "malformed_body", e.to_string()),
    };
    let header = tiny_http::Header::from_bytes("content-type", "application/json").expect("static header");
    let resp = tiny_http::Response::from_string(reply.body)
        .with_status_code(reply.status)
        .with_header(header);
    let _ = rq.respond(resp);
}

/// Background mock server; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and serves on `threads`
    /// worker threads.
    pub fn start(addr: &str, threads: usize) -> io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, stop) = (server.clone(), stop.clone());
                thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(rq)) => serve_one(rq),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self { addr: bound, stop, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit, which only happens on a socket error.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
