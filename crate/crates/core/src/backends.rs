//! Model backends: text generation, text embedding and image generation.
//!
//! Each capability is a trait so the pipeline can run against hosted models
//! (see [`RemoteText`], [`RemoteEmbedder`], [`RemoteImage`]) or against the
//! deterministic mocks used throughout the tests.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{to_hex, ImageError, RasterImage, Rgb};
use crate::kb::{BBox, ComponentType, Layout};
use crate::retrieval::EmbeddingVector;

pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_IMAGE_SIZE: u32 = 512;
pub const DEFAULT_STRENGTH: f64 = 0.6;
pub const MOCK_EMBEDDING_DIM: usize = 64;

/// Line every theme-description prompt carries; the mock text backend keys
/// off it to answer in the labeled-field format.
pub const THEME_FORMAT_MARKER: &str = "Answer with exactly these labeled lines:";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unreachable { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGenRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl TextGenRequest {
    /// Greedy decoding: every request the pipeline issues uses temperature 0.
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        TextGenRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn square(side: u32) -> Self {
        ImageSize {
            width: side,
            height: side,
        }
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        ImageSize::square(DEFAULT_IMAGE_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGenRequest {
    pub prompt: String,
    /// Spatial condition; only the theme image sets it.
    pub layout_condition: Option<Layout>,
    /// img2img source; only the image sub-module sets it.
    pub init_image: Option<RasterImage>,
    pub strength: f64,
    pub seed: u64,
    pub size: ImageSize,
}

impl ImageGenRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.size.width == 0 || self.size.height == 0 {
            return Err(BackendError::InvalidRequest("image size must be positive".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "strength {} outside (0, 1]",
                self.strength
            )));
        }
        if self.layout_condition.is_some() && self.init_image.is_some() {
            return Err(BackendError::InvalidRequest(
                "layout condition and init image are mutually exclusive".into(),
            ));
        }
        if let Some(init) = &self.init_image {
            if (init.width(), init.height()) != (self.size.width, self.size.height) {
                return Err(BackendError::InvalidRequest(format!(
                    "init image is {}x{}, request size is {}x{}",
                    init.width(),
                    init.height(),
                    self.size.width,
                    self.size.height
                )));
            }
        }
        Ok(())
    }
}

pub trait TextGenerator: Send + Sync {
    fn generate_text(&self, req: &TextGenRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate_image(&self, req: &ImageGenRequest) -> Result<RasterImage, BackendError>;
}

/// The three capabilities bundled together.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextGenerator>,
    pub embed: Arc<dyn Embedder>,
    pub image: Arc<dyn ImageGenerator>,
}

impl Backends {
    pub fn mock() -> Self {
        Backends {
            text: Arc::new(MockText),
            embed: Arc::new(MockEmbedder::default()),
            image: Arc::new(MockImage),
        }
    }

    /// Remote backends for each of `PROTOFLOW_TEXT_URL`, `PROTOFLOW_EMBED_URL`
    /// and `PROTOFLOW_IMAGE_URL` that is set; mocks for the rest.
    ///
    /// The embedding dimension of a remote embedder is taken from
    /// `PROTOFLOW_EMBED_DIM` (default 1536).
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut b = Backends::mock();
        if let Some(url) = var("PROTOFLOW_TEXT_URL") {
            b.text = Arc::new(RemoteText::new(url));
        }
        if let Some(url) = var("PROTOFLOW_EMBED_URL") {
            let dim = var("PROTOFLOW_EMBED_DIM")
                .and_then(|d| d.parse().ok())
                .unwrap_or(1536);
            b.embed = Arc::new(RemoteEmbedder::new(url, dim));
        }
        if let Some(url) = var("PROTOFLOW_IMAGE_URL") {
            b.image = Arc::new(RemoteImage::new(url));
        }
        b
    }
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        // length-prefix so part boundaries are unambiguous
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// First 8 bytes of SHA-256, as 16 lowercase hex digits.
pub fn digest16(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Deterministic text backend.
///
/// Theme-description prompts (recognized by [`THEME_FORMAT_MARKER`]) get a
/// schema-shaped answer; every other prompt gets `MOCK:<digest16(prompt)>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockText;

impl TextGenerator for MockText {
    fn generate_text(&self, req: &TextGenRequest) -> Result<String, BackendError> {
        if req.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if req.prompt.contains(THEME_FORMAT_MARKER) {
            return Ok(mock_theme_answer(&req.prompt));
        }
        Ok(format!("MOCK:{}", digest16(&req.prompt)))
    }
}

fn mock_theme_answer(prompt: &str) -> String {
    let digest = sha256(&[prompt.as_bytes()]);
    // Follow the first reference's attributes when references are present,
    // as a few-shot prompted model tends to.
    let reference = |key: &str| {
        prompt
            .lines()
            .find_map(|l| l.strip_prefix(key).map(str::trim))
            .filter(|v| !v.is_empty())
            .map(str::to_owned)
    };
    let hex_ref = |key: &str| reference(key).filter(|v| crate::image::parse_hex(v).is_some());
    let theme_color = hex_ref("theme_color: ").unwrap_or_else(|| to_hex([digest[0], digest[1], digest[2]]));
    let primary_color =
        hex_ref("primary_color: ").unwrap_or_else(|| to_hex([digest[3], digest[4], digest[5]]));
    let category = reference("app_category: ").unwrap_or_else(|| "general".into());
    let request = prompt.lines().next().unwrap_or_default().trim();
    let tag = hex::encode(&digest[..4]);

    let mut out = vec![
        format!("THEME_COLOR: {}", theme_color.to_ascii_lowercase()),
        format!("PRIMARY_COLOR: {}", primary_color.to_ascii_lowercase()),
        format!("APP_CATEGORY: {category}"),
        format!("THEME: {request} (style {tag})"),
    ];
    for line in prompt.lines() {
        let Some((index, kind)) = parse_component_slot(line) else {
            continue;
        };
        let hint = hex::encode(&sha256(&[prompt.as_bytes(), &index.to_le_bytes()])[..4]);
        let kind = match kind {
            ComponentType::Text | ComponentType::TextButton => "text",
            ComponentType::Image | ComponentType::BackgroundImage => "image",
            ComponentType::Icon => "icon",
            _ => "other",
        };
        out.push(format!("COMPONENT[{index}]: {kind} | {kind} content {hint}"));
    }
    out.join("\n")
}

/// Recognizes the slot lines of the theme template, `COMPONENT[i] (<Type> [..]): ...`.
fn parse_component_slot(line: &str) -> Option<(usize, ComponentType)> {
    let rest = line.trim().strip_prefix("COMPONENT[")?;
    let (index, rest) = rest.split_once(']')?;
    let rest = rest.trim_start().strip_prefix('(')?;
    let (kind, _) = rest.split_once(' ')?;
    Some((index.parse().ok()?, kind.parse().ok()?))
}

/// Deterministic hash embedder: each coordinate comes from a seeded hash of
/// (text, position); the vector is L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder {
            seed: 0,
            dim: MOCK_EMBEDDING_DIM,
        }
    }
}

impl Embedder for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let seed = self.seed.to_le_bytes();
        let raw: Vec<f64> = (0..self.dim as u64)
            .map(|i| {
                let h = sha256(&[&seed, text.as_bytes(), &i.to_le_bytes()]);
                let bits = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
                // 53 random mantissa bits mapped onto [-1, 1)
                (bits >> 11) as f64 / (1u64 << 52) as f64 - 1.0
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector::new(raw.into_iter().map(|v| v / norm).collect())
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

/// Deterministic image backend.
///
/// With a layout condition it paints each (scaled) component box a solid
/// color over a solid background; otherwise it paints a two-color vertical
/// gradient, blended with the init image by `strength` when one is given.
/// All colors are hashes of (prompt, seed[, component index]).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockImage;

pub fn mock_color(prompt: &str, seed: u64, slot: &str) -> Rgb {
    let h = sha256(&[prompt.as_bytes(), &seed.to_le_bytes(), slot.as_bytes()]);
    [h[0], h[1], h[2]]
}

pub fn mock_background(prompt: &str, seed: u64) -> Rgb {
    mock_color(prompt, seed, "background")
}

pub fn mock_component_color(prompt: &str, seed: u64, index: usize) -> Rgb {
    let bg = mock_background(prompt, seed);
    let mut c = mock_color(prompt, seed, &format!("component-{index}"));
    if c == bg {
        c[2] ^= 1;
    }
    c
}

impl ImageGenerator for MockImage {
    fn generate_image(&self, req: &ImageGenRequest) -> Result<RasterImage, BackendError> {
        req.validate()?;
        let ImageSize { width, height } = req.size;
        let bg = mock_background(&req.prompt, req.seed);
        if let Some(layout) = &req.layout_condition {
            let mut img = RasterImage::filled(width, height, bg);
            for (i, c) in layout.components.iter().enumerate() {
                if let Some(b) = c.bbox.scale_to(layout.canvas, width, height) {
                    img.fill_rect(
                        b.x,
                        b.y,
                        b.w,
                        b.h,
                        mock_component_color(&req.prompt, req.seed, i),
                    );
                }
            }
            return Ok(img);
        }
        let bottom = mock_color(&req.prompt, req.seed, "gradient");
        let lerp = |a: u8, b: u8, t: f64| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
        let row_color = |y: u32| {
            let t = if height > 1 {
                y as f64 / (height - 1) as f64
            } else {
                0.0
            };
            [lerp(bg[0], bottom[0], t), lerp(bg[1], bottom[1], t), lerp(bg[2], bottom[2], t)]
        };
        Ok(match &req.init_image {
            None => RasterImage::from_fn(width, height, |_, y| row_color(y)),
            Some(init) => RasterImage::from_fn(width, height, |x, y| {
                let g = row_color(y);
                let p = init.get(x, y);
                let s = req.strength;
                [
                    lerp(p[0], g[0], s),
                    lerp(p[1], g[1], s),
                    lerp(p[2], g[2], s),
                ]
            }),
        })
    }
}

/// Retry schedule for remote calls: `attempts` tries, sleeping
/// `base_delay * 2^(n-1)` after the n-th failure.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug)]
enum CallError {
    Retryable(String),
    Fatal(BackendError),
}

struct HttpClient {
    url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpClient {
    fn new(base: &str, path: &str) -> Self {
        HttpClient {
            url: format!("{}{}", base.trim_end_matches('/'), path),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client builds"),
            retry: RetryPolicy::default(),
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            match self.try_post(body) {
                Ok(r) => return Ok(r),
                Err(CallError::Fatal(e)) => return Err(e),
                Err(CallError::Retryable(msg)) => {
                    log::warn!("{} attempt {attempt} failed: {msg}", self.url);
                    last = msg;
                    if attempt < self.retry.attempts {
                        thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                    }
                }
            }
        }
        Err(BackendError::Unreachable {
            attempts: self.retry.attempts.max(1),
            message: last,
        })
    }

    fn try_post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        body: &Req,
    ) -> Result<Resp, CallError> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| CallError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(CallError::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(CallError::Fatal(BackendError::Protocol(format!(
                "status {status}"
            ))));
        }
        resp.json()
            .map_err(|e| CallError::Fatal(BackendError::Protocol(e.to_string())))
    }
}

/// `POST {base}/v1/complete {prompt, temperature, max_tokens} -> {text}`
pub struct RemoteText {
    http: HttpClient,
}

impl RemoteText {
    pub fn new(base_url: impl AsRef<str>) -> Self {
        RemoteText {
            http: HttpClient::new(base_url.as_ref(), "/v1/complete"),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

impl TextGenerator for RemoteText {
    fn generate_text(&self, req: &TextGenRequest) -> Result<String, BackendError> {
        if req.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let resp: CompleteResponse = self.http.post(req)?;
        if resp.text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(resp.text)
    }
}

/// `POST {base}/v1/embed {text} -> {vector}`
pub struct RemoteEmbedder {
    http: HttpClient,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(base_url: impl AsRef<str>, dim: usize) -> Self {
        RemoteEmbedder {
            http: HttpClient::new(base_url.as_ref(), "/v1/embed"),
            dim,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let resp: EmbedResponse = self.http.post(&EmbedRequest { text })?;
        if resp.vector.len() != self.dim {
            return Err(BackendError::Protocol(format!(
                "embedding has dimension {}, expected {}",
                resp.vector.len(),
                self.dim
            )));
        }
        EmbeddingVector::new(resp.vector).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

/// `POST {base}/v1/image {prompt, size, seed, strength?, layout?, init_image_png_base64?} -> {png_base64}`
pub struct RemoteImage {
    http: HttpClient,
}

impl RemoteImage {
    pub fn new(base_url: impl AsRef<str>) -> Self {
        RemoteImage {
            http: HttpClient::new(base_url.as_ref(), "/v1/image"),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.http.retry = retry;
        self
    }
}

/// Wire form of an image request.
#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRequestBody {
    pub prompt: String,
    pub size: ImageSize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<LayoutItem>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image_png_base64: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutItem {
    #[serde(rename = "type")]
    pub kind: ComponentType,
    pub bbox: BBox,
}

#[derive(Serialize, Deserialize)]
pub struct ImageResponseBody {
    pub png_base64: String,
}

impl ImageRequestBody {
    /// Layout boxes are sent in image coordinates, already scaled from the
    /// layout canvas to the requested size.
    pub fn from_request(req: &ImageGenRequest) -> Result<Self, BackendError> {
        let layout = req.layout_condition.as_ref().map(|l| {
            l.components
                .iter()
                .filter_map(|c| {
                    c.bbox
                        .scale_to(l.canvas, req.size.width, req.size.height)
                        .map(|bbox| LayoutItem { kind: c.kind, bbox })
                })
                .collect()
        });
        Ok(ImageRequestBody {
            prompt: req.prompt.clone(),
            size: req.size,
            seed: req.seed,
            strength: req.init_image.as_ref().map(|_| req.strength),
            layout,
            init_image_png_base64: req
                .init_image
                .as_ref()
                .map(RasterImage::to_png_base64)
                .transpose()?,
        })
    }
}

impl ImageGenerator for RemoteImage {
    fn generate_image(&self, req: &ImageGenRequest) -> Result<RasterImage, BackendError> {
        req.validate()?;
        let body = ImageRequestBody::from_request(req)?;
        let resp: ImageResponseBody = self.http.post(&body)?;
        let img = RasterImage::from_png_base64(&resp.png_base64)?;
        if (img.width(), img.height()) != (req.size.width, req.size.height) {
            return Err(BackendError::Protocol(format!(
                "image is {}x{}, requested {}x{}",
                img.width(),
                img.height(),
                req.size.width,
                req.size.height
            )));
        }
        Ok(img)
    }
}
