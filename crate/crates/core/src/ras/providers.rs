//! Embedding and image-generation providers: the in-process mocks and the
//! HTTP clients for the sidecar.
//!
//! Mock embedding of a text: for each whitespace token, `h = fnv1a64(token)
//! ^ seed`; dimension `i` of the token vector is `u(splitmix64(h + i)) * 2 - 1`
//! where `u(x) = (x >> 11) * 2^-53`. Token vectors are summed and the sum is
//! L2-normalized (an empty text maps to the zero vector).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MOCK_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("{endpoint} unavailable after {attempts} attempt(s) (backoff {backoff_ms:?} ms): {message}")]
    Unavailable { endpoint: String, attempts: u32, backoff_ms: Vec<u64>, message: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt too long (limit {limit:?})")]
    PromptTooLong { limit: Option<usize> },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Unavailable { .. } => "ProviderUnavailable",
            ProviderError::DimensionMismatch { .. } => "DimensionMismatch",
            ProviderError::PromptTooLong { .. } => "PromptTooLong",
            ProviderError::Protocol(_) => "ProtocolError",
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub format: String,
    pub bytes: Vec<u8>,
    pub seed: u64,
}

pub trait ImageGenerator: Send + Sync {
    fn name(&self) -> String;
    /// Up to `n` images; fewer on a partial failure.
    fn generate(&self, prompt: &str, n: usize, seed: Option<u64>) -> Result<Vec<GeneratedImage>, ProviderError>;
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded bag-of-words hash embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder {
    pub seed: u64,
}

impl MockEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; MOCK_DIM];
        for token in text.split_whitespace() {
            let h = fnv1a64(token.as_bytes()) ^ self.seed;
            for (i, x) in v.iter_mut().enumerate() {
                let r = splitmix64(h.wrapping_add(i as u64));
                *x += ((r >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) * 2.0 - 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        MOCK_DIM
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Deterministic placeholder rasters (binary PPM) derived from the prompt
/// hash and the per-image seed.
#[derive(Debug, Default)]
pub struct MockGenerator {
    pub side: u32,
    /// Serve this many images in total, then report the generator down.
    pub fail_after: Option<usize>,
    /// Cap on images per call, to simulate partial responses.
    pub max_per_call: Option<usize>,
    served: AtomicUsize,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self { side: 64, ..Default::default() }
    }

    pub fn failing_after(n: usize) -> Self {
        Self { fail_after: Some(n), ..Self::new() }
    }

    pub fn capped_per_call(n: usize) -> Self {
        Self { max_per_call: Some(n), ..Self::new() }
    }

    pub fn raster(&self, prompt: &str, seed: u64) -> Vec<u8> {
        let side = self.side.max(1) as usize;
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        let len = out.len() + side * side * 3;
        let base = fnv1a64(prompt.as_bytes()) ^ seed;
        let mut i = 0u64;
        while out.len() < len {
            out.extend_from_slice(&splitmix64(base.wrapping_add(i)).to_le_bytes());
            i += 1;
        }
        out.truncate(len);
        out
    }
}

impl ImageGenerator for MockGenerator {
    fn name(&self) -> String {
        "mock".into()
    }

    fn generate(&self, prompt: &str, n: usize, seed: Option<u64>) -> Result<Vec<GeneratedImage>, ProviderError> {
        let base = seed.unwrap_or_else(|| fnv1a64(prompt.as_bytes()));
        let mut want = n.min(self.max_per_call.unwrap_or(n));
        if let Some(limit) = self.fail_after {
            let served = self.served.load(Ordering::SeqCst);
            if served >= limit {
                return Err(ProviderError::Unavailable {
                    endpoint: "mock".into(),
                    attempts: 1,
                    backoff_ms: Vec::new(),
                    message: "mock generator stopped".into(),
                });
            }
            want = want.min(limit - served);
        }
        self.served.fetch_add(want, Ordering::SeqCst);
        Ok((0..want as u64)
            .map(|i| {
                let s = base.wrapping_add(i);
                GeneratedImage { format: "ppm".into(), bytes: self.raster(prompt, s), seed: s }
            })
            .collect())
    }
}

/// Width and height from a PPM or PNG header.
pub fn image_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") && bytes.len() >= 24 {
        let w = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
        let h = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
        return Some((w, h));
    }
    if bytes.starts_with(b"P6") {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]);
        let mut it = head.split_ascii_whitespace().skip(1);
        let w = it.next()?.parse().ok()?;
        let h = it.next()?.parse().ok()?;
        return Some((w, h));
    }
    None
}

/// Retry policy for the HTTP clients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff_ms: 200, timeout_ms: 120_000 }
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    #[serde(default)]
    code: Option<serde_json::Value>,
    #[serde(default)]
    message: Option<String>,
    #[serde(default)]
    max_length: Option<usize>,
}

enum Attempt<T> {
    Done(T),
    Fatal(ProviderError),
    Retry(String),
}

struct HttpClient {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpClient {
    fn new(base: &str, retry: RetryPolicy) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(retry.timeout_ms)).build();
        Self { base: base.trim_end_matches('/').to_string(), agent, retry }
    }

    fn call<T>(
        &self,
        path: &str,
        body: Option<&serde_json::Value>,
        parse: impl Fn(ureq::Response) -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let url = format!("{}{path}", self.base);
        let mut backoff = Vec::new();
        let mut delay = self.retry.initial_backoff_ms;
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let result = match body {
                Some(b) => self.agent.post(&url).send_json(b.clone()),
                None => self.agent.get(&url).call(),
            };
            let outcome = match result {
                Ok(resp) => match parse(resp) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(e),
                },
                Err(ureq::Error::Status(413, resp)) => {
                    let limit = resp.into_json::<ErrorBody>().ok().and_then(|b| b.max_length);
                    Attempt::Fatal(ProviderError::PromptTooLong { limit })
                }
                Err(ureq::Error::Status(code, resp)) if code == 503 || code >= 500 => {
                    Attempt::Retry(format!("HTTP {code}: {}", resp.into_string().unwrap_or_default()))
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let msg = resp
                        .into_json::<ErrorBody>()
                        .ok()
                        .map(|b| format!("{} {}", b.code.unwrap_or_default(), b.message.unwrap_or_default()))
                        .unwrap_or_default();
                    Attempt::Fatal(ProviderError::Protocol(format!("HTTP {code} from {url}: {}", msg.trim())))
                }
                Err(ureq::Error::Transport(t)) => Attempt::Retry(t.to_string()),
            };
            match outcome {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    last = msg;
                    if attempt < attempts {
                        log::warn!("{url}: {last}; retrying in {delay} ms");
                        std::thread::sleep(Duration::from_millis(delay));
                        backoff.push(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(ProviderError::Unavailable { endpoint: url, attempts, backoff_ms: backoff, message: last })
    }
}

fn bad_json(e: impl std::fmt::Display) -> ProviderError {
    ProviderError::Protocol(format!("malformed response: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub mode: String,
    #[serde(default)]
    pub models: serde_json::Value,
    pub dim: usize,
}

pub fn health(base_url: &str, retry: RetryPolicy) -> Result<Health, ProviderError> {
    HttpClient::new(base_url, retry).call("/health", None, |r| r.into_json::<Health>().map_err(bad_json))
}

/// Client for `POST /embed`.
pub struct HttpEmbedder {
    client: HttpClient,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

impl HttpEmbedder {
    /// Asks `/health` for the embedding dimension.
    pub fn connect(base_url: &str, retry: RetryPolicy) -> Result<Self, ProviderError> {
        let h = health(base_url, retry.clone())?;
        Ok(Self { client: HttpClient::new(base_url, retry), dim: h.dim })
    }

    pub fn with_dim(base_url: &str, dim: usize, retry: RetryPolicy) -> Self {
        Self { client: HttpClient::new(base_url, retry), dim }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = serde_json::json!({ "texts": texts });
        let r: EmbedResponse = self.client.call("/embed", Some(&body), |r| r.into_json().map_err(bad_json))?;
        if r.embeddings.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "{} embeddings for {} texts",
                r.embeddings.len(),
                texts.len()
            )));
        }
        if r.dim != self.dim {
            return Err(ProviderError::DimensionMismatch { expected: self.dim, got: r.dim });
        }
        for e in &r.embeddings {
            if e.len() != self.dim {
                return Err(ProviderError::DimensionMismatch { expected: self.dim, got: e.len() });
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(ProviderError::Protocol("non-finite embedding value".into()));
            }
        }
        Ok(r.embeddings)
    }
}

/// Client for `POST /generate`. Images come back base64-encoded or as a
/// path on a filesystem shared with the server.
pub struct HttpGenerator {
    client: HttpClient,
    shared_root: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ImagePayload {
    format: String,
    #[serde(default)]
    data: Option<String>,
    #[serde(default)]
    path: Option<String>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    images: Vec<ImagePayload>,
    seeds: Vec<u64>,
}

impl HttpGenerator {
    pub fn new(base_url: &str, retry: RetryPolicy, shared_root: Option<&Path>) -> Self {
        Self { client: HttpClient::new(base_url, retry), shared_root: shared_root.map(Path::to_path_buf) }
    }

    fn load(&self, img: &ImagePayload) -> Result<Vec<u8>, ProviderError> {
        if let Some(data) = &img.data {
            return base64::engine::general_purpose::STANDARD.decode(data).map_err(bad_json);
        }
        let path = img.path.as_ref().ok_or_else(|| ProviderError::Protocol("image has neither data nor path".into()))?;
        let full = match &self.shared_root {
            Some(root) => root.join(path),
            None => PathBuf::from(path),
        };
        std::fs::read(&full).map_err(|e| ProviderError::Protocol(format!("{}: {e}", full.display())))
    }
}

impl ImageGenerator for HttpGenerator {
    fn name(&self) -> String {
        format!("http:{}", self.client.base)
    }

    fn generate(&self, prompt: &str, n: usize, seed: Option<u64>) -> Result<Vec<GeneratedImage>, ProviderError> {
        let body = serde_json::json!({ "prompt": prompt, "n": n, "seed": seed });
        let r: GenerateResponse = self.client.call("/generate", Some(&body), |r| r.into_json().map_err(bad_json))?;
        if r.seeds.len() != r.images.len() {
            return Err(ProviderError::Protocol(format!("{} seeds for {} images", r.seeds.len(), r.images.len())));
        }
        r.images
            .iter()
            .zip(r.seeds)
            .take(n)
            .map(|(img, seed)| Ok(GeneratedImage { format: img.format.clone(), bytes: self.load(img)?, seed }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn hash_constants() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }

    #[test]
    fn mock_embedding_properties() {
        let m = MockEmbedder::default();
        let a = m.embed_one("man on horse");
        assert_eq!(a, m.embed_one("man  on horse"));
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let b = m.embed_one("cat under table");
        assert!(1.0 - cosine(&a, &b) > 0.0);
        // shared words pull texts together
        let c = m.embed_one("man on table");
        assert!(cosine(&a, &c) > cosine(&a, &b));
        assert_eq!(m.embed_one(""), vec![0.0; MOCK_DIM]);
        assert_ne!(MockEmbedder { seed: 1 }.embed_one("man"), m.embed_one("man"));
    }

    #[test]
    fn mock_embedding_matches_scheme() {
        // single token: the normalized token vector itself
        let h = fnv1a64(b"horse");
        let raw: Vec<f64> = (0..MOCK_DIM as u64)
            .map(|i| ((splitmix64(h + i) >> 11) as f64 / 9007199254740992.0) * 2.0 - 1.0)
            .collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e = MockEmbedder::default().embed_one("horse");
        for (x, y) in raw.iter().zip(&e) {
            assert!((x / n - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mock_generator_contract() {
        let g = MockGenerator::new();
        let a = g.generate("Realistic Image of man on horse", 10, Some(5)).unwrap();
        let b = g.generate("Realistic Image of man on horse", 10, Some(5)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_ne!(a[0].bytes, a[1].bytes);
        assert_eq!(a[3].seed, 8);
        assert_eq!(image_dimensions(&a[0].bytes), Some((64, 64)));
        assert_eq!(a[0].bytes.len(), "P6\n64 64\n255\n".len() + 64 * 64 * 3);
        assert_eq!(g.generate("x", 1, None).unwrap().len(), 1);

        let partial = MockGenerator { max_per_call: Some(7), ..MockGenerator::new() };
        assert_eq!(partial.generate("x", 10, None).unwrap().len(), 7);
        let down = MockGenerator::failing_after(3);
        assert_eq!(down.generate("x", 2, None).unwrap().len(), 2);
        assert_eq!(down.generate("x", 2, None).unwrap().len(), 1);
        assert!(matches!(down.generate("x", 2, None), Err(ProviderError::Unavailable { .. })));
    }

    #[test]
    fn png_dimensions() {
        let mut png = b"\x89PNG\r\n\x1a\n\0\0\0\rIHDR".to_vec();
        png.extend_from_slice(&640u32.to_be_bytes());
        png.extend_from_slice(&480u32.to_be_bytes());
        assert_eq!(image_dimensions(&png), Some((640, 480)));
        assert_eq!(image_dimensions(b"GIF89a"), None);
    }

    #[test]
    fn unreachable_server_reports_attempts() {
        let retry = RetryPolicy { attempts: 2, initial_backoff_ms: 1, timeout_ms: 500 };
        let e = HttpEmbedder::with_dim("http://127.0.0.1:9", 64, retry);
        match e.embed(&["a".to_string()]) {
            Err(ProviderError::Unavailable { attempts, backoff_ms, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(backoff_ms, vec![1]);
            }
            other => panic!("{other:?}"),
        }
    }
}
