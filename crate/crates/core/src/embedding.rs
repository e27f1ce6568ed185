//! Deterministic text embeddings.
//!
//! The bundled provider hashes character trigrams into a fixed number of
//! signed buckets and L2-normalizes the result. It needs no model weights and
//! produces identical vectors on every platform.

use crate::error::{Error, Result};

/// Default embedding dimension.
pub const DEFAULT_DIMENSION: usize = 256;

const NGRAM: usize = 3;

/// Source of unit-norm text embeddings shared by skills and queries.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    /// Identifies the embedding model; changes whenever outputs could change.
    fn version(&self) -> &str;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing over character trigrams.
#[derive(Debug, Clone)]
pub struct TrigramHashEmbedder {
    dim: usize,
    trim: bool,
    version: String,
}

impl Default for TrigramHashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl TrigramHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            trim: true,
            version: format!("trigram-hash-v1/d{dim}"),
        }
    }

    /// Disable whitespace trimming and case folding of the input.
    pub fn without_trimming(mut self) -> Self {
        self.trim = false;
        self.version.push_str("/raw");
        self
    }

    fn canonical(&self, text: &str) -> String {
        if self.trim {
            text.trim().to_lowercase()
        } else {
            text.to_string()
        }
    }
}

impl EmbeddingProvider for TrigramHashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let text = self.canonical(text);
        if text.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }

        // Pad with a space on each side so short strings still yield a trigram.
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars())
            .chain(std::iter::once(' '))
            .collect();

        let mut v = vec![0.0f64; self.dim];
        let mut buf = String::with_capacity(NGRAM * 4);
        for window in chars.windows(NGRAM) {
            buf.clear();
            buf.extend(window.iter());
            let h = fnv1a64(buf.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }

        let norm = l2_norm(&v);
        if norm == 0.0 {
            // Every trigram cancelled out; fall back to a single hashed bucket.
            let h = fnv1a64(text.as_bytes());
            v.iter_mut().for_each(|x| *x = 0.0);
            v[(h % self.dim as u64) as usize] = 1.0;
            return Ok(v);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether `v` has unit L2 norm within `1e-6`.
pub fn is_unit(v: &[f64]) -> bool {
    (l2_norm(v) - 1.0).abs() <= 1e-6
}
