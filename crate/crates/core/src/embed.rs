//! Text embedding providers and exact nearest-neighbor search.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retry::{AttemptError, RetryPolicy};
use crate::types::{l2_norm, sq_dist, EmbeddingMatrix};

pub const API_KEY_ENV: &str = "AUGPE_API_KEY";

/// Maps texts to fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Whether output rows are unit-normalized.
    fn normalizes(&self) -> bool;

    /// One row per text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<EmbeddingMatrix>;

    fn identifier(&self) -> String;
}

/// Serializable provider description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingProvider {
    MockHash {
        dimension: usize,
        #[serde(default = "yes")]
        normalize: bool,
    },
    HttpApi {
        endpoint: String,
        model: String,
        dimension: usize,
        #[serde(default = "yes")]
        normalize: bool,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn yes() -> bool {
    true
}

fn default_batch() -> usize {
    64
}

fn default_timeout() -> u64 {
    60
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        EmbeddingProvider::MockHash {
            dimension: MockHashEmbedder::DEFAULT_DIMENSION,
            normalize: true,
        }
    }
}

impl EmbeddingProvider {
    /// Builds the provider. `max_in_flight` bounds concurrent HTTP requests.
    pub fn build(&self, max_in_flight: usize) -> Result<Box<dyn Embedder>> {
        match self {
            EmbeddingProvider::MockHash {
                dimension,
                normalize,
            } => Ok(Box::new(MockHashEmbedder::new(*dimension, *normalize)?)),
            EmbeddingProvider::HttpApi {
                endpoint,
                model,
                dimension,
                normalize,
                batch_size,
                timeout_secs,
                retry,
            } => Ok(Box::new(HttpEmbedder::new(
                endpoint.clone(),
                model.clone(),
                *dimension,
                *normalize,
                *batch_size,
                Duration::from_secs(*timeout_secs),
                retry.clone(),
                max_in_flight,
                std::env::var(API_KEY_ENV).ok(),
            )?)),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer, so every bit of the bucket index depends on the
/// whole token.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic bag-of-tokens embedder: each token hashes into a few signed,
/// weighted buckets out of `dimension`, and the count vector is mixed by a fixed
/// random projection.
/// A pure function of the text.
#[derive(Debug, Clone)]
pub struct MockHashEmbedder {
    dimension: usize,
    normalize: bool,
    projection: Vec<f64>,
}

impl MockHashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 16;
    const PROJECTION_SEED: u64 = 0x005e_ed0f_e4b3_dd00;
    const SMOOTHING: f64 = 0.3;
    /// Buckets per token. Each bucket gets a signed weight of magnitude
    /// `(1 + u) / (j + 1)` with `u` in [0, 1) taken from spare hash bits, so two
    /// words only embed identically when all four hashes agree.
    const TOKEN_BUCKETS: u64 = 4;

    pub fn new(dimension: usize, normalize: bool) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::domain("embedding dimension must be positive"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(Self::PROJECTION_SEED);
        let scale = Self::SMOOTHING / (dimension as f64).sqrt();
        let projection = (0..dimension * dimension)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        Ok(MockHashEmbedder {
            dimension,
            normalize,
            projection,
        })
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let d = self.dimension;
        let mut counts = vec![0.0; d];
        let mut any = false;
        for tok in text.split_whitespace() {
            let base = fnv1a(tok.as_bytes());
            for j in 0..Self::TOKEN_BUCKETS {
                let h = mix(base ^ j.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                let u = ((h >> 32) & 0x7fff_ffff) as f64 / 2f64.powi(31);
                counts[(h % d as u64) as usize] += sign * (1.0 + u) / (j + 1) as f64;
            }
            any = true;
        }
        // signed weights keep unrelated texts near-orthogonal; a whole text
        // cancelling to zero is treated like an empty one
        if !any || counts.iter().all(|&c| c == 0.0) {
            counts[(fnv1a(b"\x00empty") % d as u64) as usize] = 1.0;
        }
        let mut out = counts.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.projection[i * d..(i + 1) * d];
            *o += row.iter().zip(&counts).map(|(p, c)| p * c).sum::<f64>();
        }
        if self.normalize {
            let n = l2_norm(&out);
            out.iter_mut().for_each(|x| *x /= n);
        }
        out
    }
}

impl Embedder for MockHashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn normalizes(&self) -> bool {
        self.normalize
    }

    fn embed_batch(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        if texts.is_empty() {
            return Err(Error::domain("embed_batch needs at least one text"));
        }
        let rows: Vec<Vec<f64>> = texts.par_iter().map(|t| self.embed_one(t)).collect();
        EmbeddingMatrix::from_rows(rows, self.normalize)
    }

    fn identifier(&self) -> String {
        format!("mock_hash(d={})", self.dimension)
    }
}

#[derive(Debug, Serialize)]
pub struct EmbeddingRequest<'a> {
    pub model: &'a str,
    pub input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dimension: usize,
    normalize: bool,
    batch_size: usize,
    retry: RetryPolicy,
    max_in_flight: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        endpoint: String,
        model: String,
        dimension: usize,
        normalize: bool,
        batch_size: usize,
        timeout: Duration,
        retry: RetryPolicy,
        max_in_flight: usize,
        api_key: Option<String>,
    ) -> Result<Self> {
        if dimension == 0 || batch_size == 0 {
            return Err(Error::domain("dimension and batch_size must be positive"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(HttpEmbedder {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model,
            dimension,
            normalize,
            batch_size,
            retry,
            max_in_flight: max_in_flight.max(1),
            api_key,
            client,
        })
    }

    fn fetch(&self, texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, String> {
        let body = EmbeddingRequest {
            model: &self.model,
            input: texts,
        };
        self.retry.run(|_| {
            let mut req = self
                .client
                .post(format!("{}/embeddings", self.endpoint))
                .json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| AttemptError::Retryable(e.to_string()))?;
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                return Err(AttemptError::Retryable(format!("HTTP {status}")));
            }
            if !status.is_success() {
                return Err(AttemptError::Fatal(format!("HTTP {status}")));
            }
            let parsed: EmbeddingResponse = resp
                .json()
                .map_err(|e| AttemptError::Fatal(format!("bad response body: {e}")))?;
            let mut data = parsed.data;
            data.sort_by_key(|d| d.index);
            Ok(data.into_iter().map(|d| d.embedding).collect())
        })
    }

    fn finish_rows(&self, rows: Vec<Vec<f64>>, expected: usize) -> Result<Vec<Vec<f64>>> {
        if rows.len() != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} embeddings, got {}",
                rows.len()
            )));
        }
        rows.into_iter()
            .map(|mut r| {
                if r.len() != self.dimension {
                    return Err(Error::Protocol(format!(
                        "embedding of dimension {} from API, expected {}",
                        r.len(),
                        self.dimension
                    )));
                }
                if self.normalize {
                    let n = l2_norm(&r);
                    if n == 0.0 {
                        return Err(Error::Protocol("zero embedding from API".into()));
                    }
                    r.iter_mut().for_each(|x| *x /= n);
                }
                Ok(r)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn normalizes(&self) -> bool {
        self.normalize
    }

    fn embed_batch(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        if texts.is_empty() {
            return Err(Error::domain("embed_batch needs at least one text"));
        }
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let mut results: Vec<Option<std::result::Result<Vec<Vec<f64>>, String>>> =
            (0..batches.len()).map(|_| None).collect();
        for wave in (0..batches.len()).collect::<Vec<_>>().chunks(self.max_in_flight) {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&b| {
                        let batch = batches[b];
                        (b, s.spawn(move || self.fetch(batch)))
                    })
                    .collect();
                for (b, h) in handles {
                    results[b] = Some(h.join().unwrap_or_else(|_| Err("worker panicked".into())));
                }
            });
        }
        let mut rows = Vec::with_capacity(texts.len());
        let mut failed = Vec::new();
        let mut message = String::new();
        for (b, r) in results.into_iter().enumerate() {
            match r.expect("every batch is visited") {
                Ok(v) => rows.extend(self.finish_rows(v, batches[b].len())?),
                Err(e) => {
                    failed.push(b);
                    message = e;
                }
            }
        }
        if !failed.is_empty() {
            return Err(Error::Provider {
                batches: failed,
                message,
            });
        }
        EmbeddingMatrix::from_rows(rows, self.normalize)
    }

    fn identifier(&self) -> String {
        format!("http({}, {})", self.endpoint, self.model)
    }
}

/// Element-wise mean of `K ≥ 1` equally-shaped matrices, re-normalized when
/// `normalize` is set. A zero row after averaging is an error.
pub fn mean_embedding(matrices: &[EmbeddingMatrix], normalize: bool) -> Result<EmbeddingMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::domain("mean_embedding needs at least one matrix"))?;
    let (n, d) = (first.rows(), first.dim());
    if matrices.iter().any(|m| m.rows() != n || m.dim() != d) {
        return Err(Error::domain("mean_embedding shape mismatch"));
    }
    let k = matrices.len() as f64;
    let mut acc = vec![0.0; n * d];
    for m in matrices {
        acc.iter_mut().zip(m.as_flat()).for_each(|(a, x)| *a += x);
    }
    acc.iter_mut().for_each(|a| *a /= k);
    if normalize {
        for (i, row) in acc.chunks_exact_mut(d.max(1)).enumerate() {
            let norm = l2_norm(row);
            if norm < 1e-12 {
                return Err(Error::DegenerateRow { row: i });
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    EmbeddingMatrix::from_flat(acc, n, d, normalize)
}

/// For each query row, the index of the key row at minimum squared L2
/// distance. Ties go to the lowest index.
pub fn pairwise_nearest(queries: &EmbeddingMatrix, keys: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if keys.rows() == 0 {
        return Err(Error::domain("pairwise_nearest needs at least one key"));
    }
    if queries.rows() > 0 && queries.dim() != keys.dim() {
        return Err(Error::domain(format!(
            "query dimension {} differs from key dimension {}",
            queries.dim(),
            keys.dim()
        )));
    }
    Ok((0..queries.rows())
        .into_par_iter()
        .map(|q| nearest_row(queries.row(q), keys).0)
        .collect())
}

/// Index and squared distance of the nearest key row.
pub(crate) fn nearest_row(q: &[f64], keys: &EmbeddingMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, k) in keys.iter_rows().enumerate() {
        let d = sq_dist(q, k);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}
