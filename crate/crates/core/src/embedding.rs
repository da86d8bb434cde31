//! Text embeddings and cosine similarity.
//!
//! Profile and desire texts are turned into vectors by an
//! [`EmbeddingProvider`]. The similarity weights on `similar_to` and `want_to`
//! edges are clamped cosines of those vectors, so they always land in `[0, 1]`.
//!
//! [`HashEmbedder`] is the offline provider: a token-hashed bag of words. It
//! needs no model and is deterministic across processes, which makes it the
//! default for tests and mock runs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::rng::fnv1a;

pub const DEFAULT_DIMENSION: usize = 256;
pub const MIN_HASH_DIMENSION: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot compare an all-zero vector")]
    ZeroVector,
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding dimension {0} is below the minimum of {MIN_HASH_DIMENSION}")]
    DimensionTooSmall(usize),
    #[error("embedding vector is empty")]
    EmptyVector,
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyVector);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * k).collect() }
    }

    fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }
}

/// Turns text into vectors. Implementations must return equal vectors for
/// equal text within one process run.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).embed(text)
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch { left: a.dimension(), right: b.dimension() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity clamped below at zero.
pub fn similarity_weight(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_similarity(a, b).map(|c| c.max(0.0))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase())
}

/// Token-hashed bag of words, L2-normalized.
pub fn hash_embed(text: &str, dimension: usize) -> Result<EmbeddingVector, EmbeddingError> {
    if dimension < MIN_HASH_DIMENSION {
        return Err(EmbeddingError::DimensionTooSmall(dimension));
    }
    let mut values = vec![0.0; dimension];
    let mut any = false;
    for token in tokenize(text) {
        let bucket = (fnv1a(token.as_bytes()) % dimension as u64) as usize;
        values[bucket] += 1.0;
        any = true;
    }
    if !any {
        return Err(EmbeddingError::EmptyText);
    }
    let norm = libm::sqrt(values.iter().map(|v| v * v).sum());
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(EmbeddingVector { values })
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < MIN_HASH_DIMENSION {
            return Err(EmbeddingError::DimensionTooSmall(dimension));
        }
        Ok(Self { dimension })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: DEFAULT_DIMENSION }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        "hash-bow"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        hash_embed(text, self.dimension)
    }
}
