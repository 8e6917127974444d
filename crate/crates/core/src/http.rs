//! Minimal HTTP/1.1 surface over the registry.
//!
//! Endpoints:
//!   POST   /adapters        — upload a .raml file (raw bytes or multipart)
//!   GET    /adapters        — list the pool
//!   DELETE /adapters/{name} — drop an adapter
//!   POST   /query           — {prompt, k?, strategy?, mask?}
//!   POST   /batch           — {prompts, k?, strategy?}
//!
//! Serving requests take a read lock on the registry; uploads and deletes
//! take the write lock and publish the rebuilt index before releasing it,
//! so no request ever observes a half-updated pool.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::CompositionStrategy;
use crate::registry::{parse_raml, Registry, ServeOutcome};
use crate::router::RouterLora;

#[derive(Clone)]
pub struct ServerConfig {
    pub default_k: usize,
    pub default_strategy: CompositionStrategy,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            default_k: 3,
            default_strategy: CompositionStrategy::Mixture,
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds and serves on a background thread until the handle shuts down.
pub fn serve_http(
    registry: Arc<RwLock<Registry>>,
    router: Option<Arc<RouterLora>>,
    addr: &str,
    config: ServerConfig,
) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let join = thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let registry = Arc::clone(&registry);
                    let router = router.clone();
                    let config = config.clone();
                    thread::spawn(move || {
                        let _ = handle_connection(stream, &registry, router.as_deref(), &config);
                    });
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle {
        addr: bound,
        stop,
        join: Some(join),
    })
}

struct Request {
    method: String,
    path: String,
    content_type: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<Option<Request>> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_uppercase();
    let path = parts.next().unwrap_or("/").to_string();

    let mut content_length = 0usize;
    let mut content_type = String::new();
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 {
            break;
        }
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((key, value)) = header.split_once(':') {
            match key.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                "content-type" => content_type = value.trim().to_string(),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body)?;
    }
    Ok(Some(Request {
        method,
        path,
        content_type,
        body,
    }))
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        201 => "Created",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        _ => "Internal Server Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn status_for(err: &Error) -> u16 {
    match err {
        Error::Conflict(_) => 409,
        Error::NotFound(_) => 404,
        Error::Io(_) | Error::Json(_) => 400,
        _ => 400,
    }
}

fn handle_connection(
    mut stream: TcpStream,
    registry: &RwLock<Registry>,
    router: Option<&RouterLora>,
    config: &ServerConfig,
) -> std::io::Result<()> {
    let Some(request) = read_request(&mut stream)? else {
        return Ok(());
    };
    let segments: Vec<&str> = request.path.trim_matches('/').split('/').collect();
    let (status, body) = match (request.method.as_str(), segments.as_slice()) {
        ("GET", ["adapters"]) => list_adapters(registry),
        ("POST", ["adapters"]) => upload_adapter(registry, &request),
        ("DELETE", ["adapters", name]) => delete_adapter(registry, name),
        ("POST", ["query"]) => run_query(registry, router, config, &request.body),
        ("POST", ["batch"]) => run_batch(registry, router, config, &request.body),
        _ => (405, error_json("unsupported method or path")),
    };
    respond(&mut stream, status, &body)
}

#[derive(Serialize)]
struct AdapterDoc {
    name: String,
    task_tag: String,
    rank: usize,
    alpha: f64,
    uploaded_at: u64,
    m: usize,
}

fn list_adapters(registry: &RwLock<Registry>) -> (u16, String) {
    let registry = registry.read().expect("registry lock");
    let docs: Vec<AdapterDoc> = registry
        .entries()
        .map(|e| AdapterDoc {
            name: e.adapter.name().to_string(),
            task_tag: e.task_tag.clone(),
            rank: e.adapter.rank(),
            alpha: e.adapter.alpha(),
            uploaded_at: e.uploaded_at,
            m: e.samples.len(),
        })
        .collect();
    (200, serde_json::to_string(&docs).expect("serializable docs"))
}

/// Pulls the first file out of a multipart/form-data body.
fn multipart_file(content_type: &str, body: &[u8]) -> Option<Vec<u8>> {
    let boundary = content_type
        .split(';')
        .map(str::trim)
        .find_map(|p| p.strip_prefix("boundary="))?
        .trim_matches('"');
    let marker = format!("--{boundary}");
    let data = body;
    let start = find_subslice(data, marker.as_bytes())?;
    let after_marker = start + marker.len();
    let headers_end = find_subslice(&data[after_marker..], b"\r\n\r\n")? + after_marker + 4;
    let closing = format!("\r\n--{boundary}");
    let end = find_subslice(&data[headers_end..], closing.as_bytes())? + headers_end;
    Some(data[headers_end..end].to_vec())
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn upload_adapter(registry: &RwLock<Registry>, request: &Request) -> (u16, String) {
    let bytes = if request.content_type.starts_with("multipart/form-data") {
        match multipart_file(&request.content_type, &request.body) {
            Some(bytes) => bytes,
            None => return (400, error_json("malformed multipart body")),
        }
    } else {
        request.body.clone()
    };
    let (adapter, samples, _) = match parse_raml(&bytes) {
        Ok(parsed) => parsed,
        Err(e) => return (400, error_json(&e.to_string())),
    };
    let name = adapter.name().to_string();
    let mut registry = registry.write().expect("registry lock");
    match registry.register(adapter, samples) {
        Ok(()) => (201, serde_json::json!({ "name": name }).to_string()),
        Err(e) => (status_for(&e), error_json(&e.to_string())),
    }
}

fn delete_adapter(registry: &RwLock<Registry>, name: &str) -> (u16, String) {
    let mut registry = registry.write().expect("registry lock");
    match registry.remove(name) {
        Ok(entry) => (
            200,
            serde_json::json!({ "removed": entry.adapter.name() }).to_string(),
        ),
        Err(e) => (status_for(&e), error_json(&e.to_string())),
    }
}

#[derive(Deserialize)]
struct QueryBody {
    prompt: String,
    k: Option<usize>,
    strategy: Option<String>,
    mask: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct BatchBody {
    prompts: Vec<String>,
    k: Option<usize>,
    strategy: Option<String>,
}

#[derive(Serialize)]
struct RetrievedDoc {
    name: String,
    similarity: f64,
}

#[derive(Serialize)]
struct QueryResponse {
    prompt: String,
    strategy: String,
    label: Option<usize>,
    logits: Vec<f64>,
    output: Vec<f64>,
    retrieved: Vec<RetrievedDoc>,
    empty_pool: bool,
    /// Final-layer mean routing weight per retrieved adapter, router runs only.
    routing_weights: Option<Vec<f64>>,
}

fn outcome_json(outcome: &ServeOutcome, strategy: CompositionStrategy) -> QueryResponse {
    let routing_weights = outcome.trace.as_ref().and_then(|t| {
        t.layers
            .last()
            .map(|(layer, _)| t.mean_weights(*layer).unwrap_or_default())
    });
    // Pooled final hidden state as the compact output payload.
    let shape = outcome.output.shape().to_vec();
    let (l, d) = (shape[1], shape[2]);
    let mut pooled = vec![0.0; d];
    for li in 0..l {
        for c in 0..d {
            pooled[c] += outcome.output.data()[li * d + c] / l as f64;
        }
    }
    QueryResponse {
        prompt: outcome.prompt.clone(),
        strategy: strategy.to_string(),
        label: outcome.label,
        logits: outcome.logits.clone(),
        output: pooled,
        retrieved: outcome
            .retrieved
            .iter()
            .map(|(name, similarity)| RetrievedDoc {
                name: name.clone(),
                similarity: *similarity,
            })
            .collect(),
        empty_pool: outcome.empty_pool,
        routing_weights,
    }
}

fn parse_strategy(
    requested: Option<&str>,
    config: &ServerConfig,
) -> std::result::Result<CompositionStrategy, String> {
    match requested {
        None => Ok(config.default_strategy),
        Some(s) => CompositionStrategy::from_str(s).map_err(|e| e.to_string()),
    }
}

fn run_query(
    registry: &RwLock<Registry>,
    router: Option<&RouterLora>,
    config: &ServerConfig,
    body: &[u8],
) -> (u16, String) {
    let parsed: QueryBody = match serde_json::from_slice(body) {
        Ok(p) => p,
        Err(e) => return (400, error_json(&format!("bad query body: {e}"))),
    };
    let strategy = match parse_strategy(parsed.strategy.as_deref(), config) {
        Ok(s) => s,
        Err(e) => return (400, error_json(&e)),
    };
    let mask: Option<BTreeSet<String>> = parsed.mask.map(|names| names.into_iter().collect());
    let registry = registry.read().expect("registry lock");
    match registry.serve(
        router,
        &parsed.prompt,
        parsed.k.unwrap_or(config.default_k),
        strategy,
        mask.as_ref(),
    ) {
        Ok(outcome) => (
            200,
            serde_json::to_string(&outcome_json(&outcome, strategy)).expect("serializable"),
        ),
        Err(e) => (status_for(&e), error_json(&e.to_string())),
    }
}

fn run_batch(
    registry: &RwLock<Registry>,
    router: Option<&RouterLora>,
    config: &ServerConfig,
    body: &[u8],
) -> (u16, String) {
    let parsed: BatchBody = match serde_json::from_slice(body) {
        Ok(p) => p,
        Err(e) => return (400, error_json(&format!("bad batch body: {e}"))),
    };
    let strategy = match parse_strategy(parsed.strategy.as_deref(), config) {
        Ok(s) => s,
        Err(e) => return (400, error_json(&e)),
    };
    let registry = registry.read().expect("registry lock");
    match registry.serve_batch(
        router,
        &parsed.prompts,
        parsed.k.unwrap_or(config.default_k),
        strategy,
    ) {
        Ok(outcomes) => {
            let docs: Vec<QueryResponse> = outcomes
                .iter()
                .map(|o| outcome_json(o, strategy))
                .collect();
            (200, serde_json::to_string(&docs).expect("serializable"))
        }
        Err(e) => (status_for(&e), error_json(&e.to_string())),
    }
}
