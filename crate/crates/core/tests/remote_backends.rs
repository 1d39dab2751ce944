use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use protoflow::backends::{
    BackendError, Embedder, ImageGenRequest, ImageGenerator, ImageRequestBody, ImageSize,
    RemoteEmbedder, RemoteImage, RemoteText, RetryPolicy, TextGenRequest, TextGenerator,
};
use protoflow::kb::LayoutComponent;
use protoflow::{BBox, Canvas, ComponentType, Layout, RasterImage};
use serde_json::{json, Value};

#[derive(Default)]
struct Server {
    /// Requests to fail with 503 before answering.
    failures: AtomicUsize,
    hits: AtomicUsize,
    last_image: Mutex<Option<Value>>,
}

async fn complete(State(s): State<Arc<Server>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    s.hits.fetch_add(1, Ordering::SeqCst);
    if s.failures.load(Ordering::SeqCst) > 0 {
        s.failures.fetch_sub(1, Ordering::SeqCst);
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
    }
    let prompt = body["prompt"].as_str().unwrap_or_default();
    if prompt == "reject" {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "no"})));
    }
    if prompt == "silent" {
        return (StatusCode::OK, Json(json!({"text": "  "})));
    }
    let text = format!("echo:{prompt}:{}", body["temperature"]);
    (StatusCode::OK, Json(json!({ "text": text })))
}

async fn embed(State(s): State<Arc<Server>>, Json(body): Json<Value>) -> Json<Value> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    let n = body["text"].as_str().unwrap_or_default().len() as f64;
    Json(json!({ "vector": [n, 1.0, 0.0] }))
}

async fn image(State(s): State<Arc<Server>>, Json(body): Json<Value>) -> Json<Value> {
    s.hits.fetch_add(1, Ordering::SeqCst);
    *s.last_image.lock().unwrap() = Some(body.clone());
    let parsed: ImageRequestBody = serde_json::from_value(body).unwrap();
    let w = parsed.size.width;
    // answers the wrong size when asked to
    let h = if parsed.prompt == "wrong size" { 3 } else { parsed.size.height };
    let img = RasterImage::filled(w, h, [1, 2, 3]);
    Json(json!({ "png_base64": img.to_png_base64().unwrap() }))
}

fn spawn_server() -> (String, Arc<Server>) {
    let state = Arc::new(Server::default());
    let app = Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/embed", post(embed))
        .route("/v1/image", post(image))
        .with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), state)
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
    }
}

#[test]
fn text_round_trip_and_retry() {
    let (url, server) = spawn_server();
    let client = RemoteText::new(&url).with_retry(fast());
    let out = client
        .generate_text(&TextGenRequest::new("hi", 8))
        .unwrap();
    assert_eq!(out, "echo:hi:0.0");

    server.failures.store(2, Ordering::SeqCst);
    let before = server.hits.load(Ordering::SeqCst);
    assert_eq!(client.generate_text(&TextGenRequest::new("again", 8)).unwrap(), "echo:again:0.0");
    assert_eq!(server.hits.load(Ordering::SeqCst) - before, 3);

    server.failures.store(5, Ordering::SeqCst);
    match client.generate_text(&TextGenRequest::new("x", 8)) {
        Err(BackendError::Unreachable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
    server.failures.store(0, Ordering::SeqCst);

    let before = server.hits.load(Ordering::SeqCst);
    assert!(matches!(
        client.generate_text(&TextGenRequest::new("reject", 8)),
        Err(BackendError::Protocol(_))
    ));
    assert_eq!(server.hits.load(Ordering::SeqCst) - before, 1);
    assert!(matches!(
        client.generate_text(&TextGenRequest::new("silent", 8)),
        Err(BackendError::EmptyCompletion)
    ));
}

#[test]
fn unreachable_host_fails_after_retries() {
    let client = RemoteText::new("http://127.0.0.1:9").with_retry(fast());
    assert!(matches!(
        client.generate_text(&TextGenRequest::new("hi", 8)),
        Err(BackendError::Unreachable { attempts: 3, .. })
    ));
}

#[test]
fn embedder_checks_dimension() {
    let (url, _) = spawn_server();
    let ok = RemoteEmbedder::new(&url, 3).with_retry(fast());
    assert_eq!(ok.embed_text("abcd").unwrap().as_slice(), &[4.0, 1.0, 0.0]);
    let wrong = RemoteEmbedder::new(&url, 8).with_retry(fast());
    assert!(matches!(wrong.embed_text("abcd"), Err(BackendError::Protocol(_))));
}

#[test]
fn image_request_wire_format() {
    let (url, server) = spawn_server();
    let client = RemoteImage::new(&url).with_retry(fast());
    let layout = Layout {
        canvas: Canvas { width: 100, height: 200 },
        components: vec![LayoutComponent {
            kind: ComponentType::Icon,
            bbox: BBox::new(10, 20, 30, 40),
        }],
    };
    let req = ImageGenRequest {
        prompt: "theme".into(),
        layout_condition: Some(layout),
        init_image: None,
        strength: 0.6,
        seed: 9,
        size: ImageSize { width: 50, height: 100 },
    };
    let img = client.generate_image(&req).unwrap();
    assert_eq!((img.width(), img.height()), (50, 100));
    let body = server.last_image.lock().unwrap().clone().unwrap();
    assert_eq!(body["layout"], json!([{"type": "Icon", "bbox": [5, 10, 15, 20]}]));
    assert_eq!(body["seed"], 9);
    assert!(body.get("init_image_png_base64").is_none());

    let init = RasterImage::filled(50, 100, [9, 9, 9]);
    let req = ImageGenRequest {
        layout_condition: None,
        init_image: Some(init.clone()),
        ..req
    };
    client.generate_image(&req).unwrap();
    let body = server.last_image.lock().unwrap().clone().unwrap();
    assert_eq!(body["strength"], 0.6);
    let sent = RasterImage::from_png_base64(body["init_image_png_base64"].as_str().unwrap()).unwrap();
    assert_eq!(sent, init);

    let wrong = ImageGenRequest {
        prompt: "wrong size".into(),
        ..req
    };
    assert!(matches!(client.generate_image(&wrong), Err(BackendError::Protocol(_))));
}
