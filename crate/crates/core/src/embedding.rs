//! Text embeddings for tool descriptions and queries.
//!
//! The default [`HashEmbedder`] is a deterministic hashed bag-of-words model:
//! lowercased alphanumeric tokens are hashed into `dim` buckets and the
//! count vector is L2-normalized. Real sentence-embedding services plug in
//! through [`RemoteEmbedder`], and [`CachedEmbedder`] memoizes any provider.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{self, HttpFailure, HttpStats, RetryPolicy};
use crate::par::{self, Parallelism};
use crate::registry::ToolPool;
use crate::rng::fnv1a;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty input")]
    EmptyInput,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite component in embedding")]
    NonFinite,
    #[error("embedding provider failed: {0}")]
    Provider(#[from] HttpFailure),
    #[error("embedding provider returned an unexpected payload: {0}")]
    BadResponse(String),
}

/// Fixed-length real vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; zero vectors are returned unchanged.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|v| v / n).collect())
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Contract for anything that turns text into fixed-dimension vectors.
/// Implementations must tolerate concurrent calls.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, used as part of cache keys.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn is_deterministic(&self) -> bool;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or_else(|| EmbedError::BadResponse("empty batch result".into()))
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        (**self).embed_batch(texts)
    }
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        (**self).embed(text)
    }
}

pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<Embedding, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    provider.embed(text)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("hash-bow-{dim}"),
        }
    }

    fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            v[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Ok(Embedding(v).normalized())
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn is_deterministic(&self) -> bool {
        true
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Memoizes a provider keyed by (provider id, text hash).
pub struct CachedEmbedder<P> {
    inner: P,
    cache: Mutex<HashMap<(String, u64), Embedding>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn key(&self, text: &str) -> (String, u64) {
        (self.inner.id().to_string(), fnv1a(text.as_bytes()))
    }
}

impl<P: EmbeddingProvider> fmt::Debug for CachedEmbedder<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CachedEmbedder").field("id", &self.inner.id()).finish()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let mut out: Vec<Option<Embedding>> = {
            let cache = self.cache.lock().expect("cache lock");
            texts.iter().map(|t| cache.get(&self.key(t)).cloned()).collect()
        };
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.embed_batch(&batch)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (&i, e) in missing.iter().zip(fresh) {
                cache.insert(self.key(texts[i]), e.clone());
                out[i] = Some(e);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Embedding service speaking `{"input": [..]}` → `{"embeddings": [[..]]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    api_key: Option<String>,
    dim: usize,
    id: String,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    stats: HttpStats,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let endpoint = endpoint.into();
        Self {
            id: format!("remote:{endpoint}"),
            endpoint,
            api_key: std::env::var("EMBED_API_KEY").ok(),
            dim,
            client: http::build_client(timeout),
            policy: RetryPolicy::default(),
            stats: HttpStats::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn stats(&self) -> &HttpStats {
        &self.stats
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn is_deterministic(&self) -> bool {
        false
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let body = EmbedRequest { input: texts };
        let ex = http::send_with_retry(&self.policy, &self.stats, || {
            let req = self.client.post(&self.endpoint).json(&body);
            match &self.api_key {
                Some(k) => req.bearer_auth(k),
                None => req,
            }
        })?;
        if !(200..300).contains(&ex.status) {
            return Err(HttpFailure::Status {
                status: Some(ex.status),
                body: http::excerpt(&ex.body),
                attempts: 1,
            }
            .into());
        }
        let parsed: EmbedResponse =
            serde_json::from_str(&ex.body).map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if parsed.embeddings.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                parsed.embeddings.len()
            )));
        }
        parsed
            .embeddings
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimMismatch(v.len(), self.dim));
                }
                Embedding::new(v)
            })
            .collect()
    }
}

/// Embeds every tool description, L2-normalized, in pool order.
pub fn embed_pool(
    pool: &ToolPool,
    provider: &dyn EmbeddingProvider,
    mode: Parallelism,
) -> Result<Vec<(String, Embedding)>, EmbedError> {
    const CHUNK: usize = 64;
    let tools = pool.tools();
    let chunks: Vec<&[crate::registry::Tool]> = tools.chunks(CHUNK).collect();
    let parts = par::try_map(&chunks, mode, |chunk| {
        let texts: Vec<&str> = chunk.iter().map(|t| t.description.as_str()).collect();
        provider.embed_batch(&texts)
    })?;
    Ok(tools
        .iter()
        .zip(parts.into_iter().flatten())
        .map(|(t, e)| (t.name.clone(), e.normalized()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Embedding {
        Embedding::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let p = HashEmbedder::new(64);
        let a = embed(&p, "weather lookup").unwrap();
        let b = embed(&p, "weather lookup").unwrap();
        assert_eq!(a, b);
        let e = embed(&p, "get weather").unwrap();
        let norm: f64 = e.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e.dim(), 64);
    }

    #[test]
    fn empty_input_rejected() {
        let p = HashEmbedder::default();
        assert_eq!(embed(&p, ""), Err(EmbedError::EmptyInput));
        assert_eq!(embed(&p, "  "), Err(EmbedError::EmptyInput));
        assert_eq!(p.embed("?!"), Err(EmbedError::EmptyInput));
    }

    #[test]
    fn bag_of_words_ignores_order_and_case() {
        let p = HashEmbedder::default();
        assert_eq!(
            p.embed("Get the Weather for Paris").unwrap(),
            p.embed("paris for weather the get").unwrap()
        );
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[1.0, 1.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&a, &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&v(&[1.0]), &v(&[1.0, 2.0])), Err(EmbedError::DimMismatch(1, 2)));
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])), Err(EmbedError::ZeroVector));
        assert_eq!(Embedding::new(vec![f64::NAN]), Err(EmbedError::NonFinite));
    }

    #[test]
    fn cache_hits_avoid_recompute() {
        let c = CachedEmbedder::new(HashEmbedder::new(32));
        let a = c.embed_batch(&["alpha", "beta", "alpha"]).unwrap();
        assert_eq!(a[0], a[2]);
        assert_eq!(c.cached_len(), 2);
        let b = c.embed("beta").unwrap();
        assert_eq!(b, a[1]);
        assert_eq!(c.cached_len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant(
                a in prop::collection::vec(-10.0f64..10.0, 4),
                b in prop::collection::vec(-10.0f64..10.0, 4),
                s in 0.01f64..100.0,
            ) {
                let (ea, eb) = (v(&a), v(&b));
                prop_assume!(ea.norm() > 1e-6 && eb.norm() > 1e-6);
                let ab = cosine(&ea, &eb).unwrap();
                prop_assert!((ab - cosine(&eb, &ea).unwrap()).abs() < 1e-12);
                let scaled = v(&a.iter().map(|x| x * s).collect::<Vec<_>>());
                prop_assert!((ab - cosine(&scaled, &eb).unwrap()).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }

            #[test]
            fn word_permutation_invariance(words in prop::collection::vec("[a-z]{1,6}", 1..8), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut shuffled = words.clone();
                shuffled.shuffle(&mut crate::rng::derive_rng(seed, "t", 0));
                let p = HashEmbedder::new(128);
                prop_assert_eq!(p.embed(&words.join(" ")).unwrap(), p.embed(&shuffled.join(" ")).unwrap());
            }
        }
    }
}
