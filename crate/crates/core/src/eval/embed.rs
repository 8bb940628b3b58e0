//! Signed feature hashing of character bigrams and trigrams.
//!
//! The normalized text is wrapped in `^`/`$` boundary marks before n-gram
//! extraction, so every non-empty text yields an odd number of ±1
//! contributions and therefore a non-zero vector.

use std::hash::Hasher;

use fnv::FnvHasher;
use thiserror::Error;

use crate::domain::{normalize_text, DomainError};

pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("embedding dimension {0} is below the minimum of 8")]
    DimensionTooSmall(usize),
    #[error("embedding backend failed: {0}")]
    Backend(String),
}

impl From<DomainError> for EmbedError {
    fn from(_: DomainError) -> Self {
        EmbedError::EmptyText
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm vector of length `dim()`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_DIM {
            return Err(EmbedError::DimensionTooSmall(dim));
        }
        Ok(Self { dim })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        embed(text, self.dim)
    }
}

pub fn embed(text: &str, dim: usize) -> Result<Vec<f64>, EmbedError> {
    if dim < MIN_DIM {
        return Err(EmbedError::DimensionTooSmall(dim));
    }
    let norm = normalize_text(text)?;
    let chars: Vec<char> = std::iter::once('^')
        .chain(norm.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut v = vec![0.0f64; dim];
    let mut buf = [0u8; 4];
    for n in [2usize, 3] {
        for gram in chars.windows(n) {
            let mut h = FnvHasher::default();
            h.write_u8(n as u8);
            for c in gram {
                h.write(c.encode_utf8(&mut buf).as_bytes());
            }
            let hash = h.finish();
            let bucket = (hash % dim as u64) as usize;
            let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    let length = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= length);
    Ok(v)
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
