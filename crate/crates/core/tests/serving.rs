//! End-to-end serving surface: HTTP endpoints over a live registry, the
//! adapter upload format, and dynamic pool updates under traffic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, RwLock};

use loramix::http::{serve_http, ServerConfig};
use loramix::lora::{BaseModel, CompositionStrategy, LoraAdapter, LoraDelta};
use loramix::registry::{raml_bytes, Registry};
use loramix::retriever::EmbeddingProvider;
use loramix::router::RouterLora;
use loramix::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn request(addr: &str, method: &str, path: &str, content_type: &str, body: &[u8]) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).expect("connect");
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body).unwrap();
    let mut response = Vec::new();
    stream.read_to_end(&mut response).unwrap();
    let text = String::from_utf8_lossy(&response).to_string();
    let status: u16 = text
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let body = text.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}

fn adapter_with_signal(model: &BaseModel, name: &str, seed: u64) -> LoraAdapter {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut deltas = BTreeMap::new();
    for layer in 0..model.layer_count() {
        let (d_in, d_out) = model.dims_of(layer);
        deltas.insert(
            layer,
            LoraDelta {
                a: Tensor::randn(&[6, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng),
                b: Tensor::randn(&[d_out, 6], 0.3, &mut rng),
            },
        );
    }
    LoraAdapter::new(name, name, 6, 12.0, deltas).unwrap()
}

fn start_server() -> (loramix::http::ServerHandle, String, Arc<RwLock<Registry>>) {
    let model = Arc::new(BaseModel::toy(77));
    let mut registry = Registry::new(Arc::clone(&model), EmbeddingProvider::new(), 4);
    for i in 0..3 {
        let adapter = adapter_with_signal(&model, &format!("srv{i}"), 100 + i as u64);
        let samples: Vec<String> = (0..3).map(|j| format!("field{i} crop{i} row{j}")).collect();
        registry.register(adapter, samples).unwrap();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let router = RouterLora::init_for_model(&model, 6, &mut rng).unwrap();
    let shared = Arc::new(RwLock::new(registry));
    let handle = serve_http(
        Arc::clone(&shared),
        Some(Arc::new(router)),
        "127.0.0.1:0",
        ServerConfig::default(),
    )
    .unwrap();
    let addr = handle.addr().to_string();
    (handle, addr, shared)
}

#[test]
fn list_query_and_batch_roundtrip() {
    let (_handle, addr, _) = start_server();

    let (status, body) = request(&addr, "GET", "/adapters", "application/json", b"");
    assert_eq!(status, 200);
    let list: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(list.as_array().unwrap().len(), 3);

    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "field1 crop1 row0", "k": 2, "strategy": "mixture"}"#,
    );
    assert_eq!(status, 200, "{body}");
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(doc["retrieved"].as_array().unwrap().len(), 2);
    assert_eq!(doc["retrieved"][0]["name"], "srv1");
    assert_eq!(doc["empty_pool"], false);
    assert!(doc["label"].is_u64());

    // Router strategy reports final-layer weights.
    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "field2 crop2 row1", "strategy": "damole"}"#,
    );
    assert_eq!(status, 200, "{body}");
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    let weights = doc["routing_weights"].as_array().unwrap();
    assert_eq!(weights.len(), 3);
    let total: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);

    let (status, body) = request(
        &addr,
        "POST",
        "/batch",
        "application/json",
        br#"{"prompts": ["field0 crop0 row0", "field2 crop2 row2"], "strategy": "selection"}"#,
    );
    assert_eq!(status, 200, "{body}");
    let docs: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(docs.as_array().unwrap().len(), 2);
    assert_eq!(docs[0]["retrieved"][0]["name"], "srv0");
    assert_eq!(docs[1]["retrieved"][0]["name"], "srv2");
}

#[test]
fn upload_retrieve_delete_lifecycle() {
    let (_handle, addr, shared) = start_server();
    let model = BaseModel::toy(77);

    // Upload as raw bytes.
    let adapter = adapter_with_signal(&model, "upload-raw", 300);
    let samples = vec!["meadow brook stone path".to_string()];
    let bytes = raml_bytes(&adapter, &samples, 123).unwrap();
    let (status, body) = request(&addr, "POST", "/adapters", "application/octet-stream", &bytes);
    assert_eq!(status, 201, "{body}");

    // Upload as multipart/form-data.
    let adapter2 = adapter_with_signal(&model, "upload-multipart", 301);
    let bytes2 = raml_bytes(&adapter2, &["violet dusk harbor".to_string()], 124).unwrap();
    let boundary = "XBOUNDARYX";
    let mut multipart = Vec::new();
    multipart.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
    multipart.extend_from_slice(
        b"Content-Disposition: form-data; name=\"file\"; filename=\"a.raml\"\r\nContent-Type: application/octet-stream\r\n\r\n",
    );
    multipart.extend_from_slice(&bytes2);
    multipart.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let (status, body) = request(
        &addr,
        "POST",
        "/adapters",
        &format!("multipart/form-data; boundary={boundary}"),
        &multipart,
    );
    assert_eq!(status, 201, "{body}");

    // Both are immediately retrievable; no router retraining involved.
    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "meadow brook stone path", "k": 1}"#,
    );
    assert_eq!(status, 200);
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(doc["retrieved"][0]["name"], "upload-raw");

    // Duplicate upload conflicts.
    let (status, _) = request(&addr, "POST", "/adapters", "application/octet-stream", &bytes);
    assert_eq!(status, 409);

    // Delete; the adapter disappears from retrieval.
    let (status, _) = request(&addr, "DELETE", "/adapters/upload-raw", "application/json", b"");
    assert_eq!(status, 200);
    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "meadow brook stone path", "k": 5}"#,
    );
    assert_eq!(status, 200);
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(doc["retrieved"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["name"] != "upload-raw"));

    // Deleting a ghost is a 404; bad upload bytes are a 400.
    let (status, _) = request(&addr, "DELETE", "/adapters/ghost", "application/json", b"");
    assert_eq!(status, 404);
    let (status, _) = request(&addr, "POST", "/adapters", "application/octet-stream", b"junk");
    assert_eq!(status, 400);

    // The shared registry saw every mutation.
    assert_eq!(shared.read().unwrap().len(), 4);
}

#[test]
fn empty_pool_flags_base_model_answer() {
    let model = Arc::new(BaseModel::toy(5));
    let registry = Registry::new(model, EmbeddingProvider::new(), 4);
    let shared = Arc::new(RwLock::new(registry));
    let handle = serve_http(Arc::clone(&shared), None, "127.0.0.1:0", ServerConfig::default()).unwrap();
    let addr = handle.addr().to_string();
    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "nobody home"}"#,
    );
    assert_eq!(status, 200);
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(doc["empty_pool"], true);
    assert_eq!(doc["retrieved"].as_array().unwrap().len(), 0);
}

#[test]
fn unknown_paths_rejected() {
    let (_handle, addr, _) = start_server();
    let (status, _) = request(&addr, "GET", "/nothing/here", "application/json", b"");
    assert_eq!(status, 405);
    let (status, _) = request(&addr, "PATCH", "/adapters", "application/json", b"");
    assert_eq!(status, 405);
}

#[test]
fn ood_mask_via_http() {
    let (_handle, addr, _) = start_server();
    let (status, body) = request(
        &addr,
        "POST",
        "/query",
        "application/json",
        br#"{"prompt": "field0 crop0 row1", "k": 3, "mask": ["srv0"]}"#,
    );
    assert_eq!(status, 200);
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    let names: Vec<&str> = doc["retrieved"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert!(!names.contains(&"srv0"), "mask leaked: {names:?}");
    assert_eq!(names.len(), 2);
}

#[test]
fn concurrent_queries_and_mutations_stay_consistent() {
    let (_handle, addr, shared) = start_server();
    let model = BaseModel::toy(77);

    let mut query_threads = Vec::new();
    for i in 0..4 {
        let addr = addr.clone();
        query_threads.push(std::thread::spawn(move || {
            for j in 0..10 {
                let body = format!(
                    "{{\"prompt\": \"field{} crop{} row{}\"}}",
                    (i + j) % 3,
                    (i + j) % 3,
                    j
                );
                let (status, text) =
                    request(&addr, "POST", "/query", "application/json", body.as_bytes());
                assert_eq!(status, 200, "{text}");
            }
        }));
    }
    // Interleave uploads and deletes while queries fly.
    for round in 0..3 {
        let adapter = adapter_with_signal(&model, &format!("churn{round}"), 400 + round as u64);
        let bytes = raml_bytes(&adapter, &[format!("churn text {round}")], 0).unwrap();
        let (status, _) = request(&addr, "POST", "/adapters", "application/octet-stream", &bytes);
        assert_eq!(status, 201);
        let (status, _) = request(
            &addr,
            "DELETE",
            &format!("/adapters/churn{round}"),
            "application/json",
            b"",
        );
        assert_eq!(status, 200);
    }
    for t in query_threads {
        t.join().unwrap();
    }
    assert_eq!(shared.read().unwrap().len(), 3);
}
