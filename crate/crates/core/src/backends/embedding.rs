use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use super::BackendError;
use crate::num::Scalar;
use crate::text::Tokenizer;

pub trait EmbeddingProvider<T>: Send + Sync {
    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<T>>, BackendError>;
}

/// Feature-hashed unigram counts, L2-normalized. Texts without tokens map to
/// the zero vector.
pub struct HashingEmbedder {
    dim: usize,
    tokenizer: Arc<dyn Tokenizer>,
}

impl HashingEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, tokenizer: Arc<dyn Tokenizer>) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, tokenizer }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    fn embed_one<T: Scalar>(&self, text: &str) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for t in self.tokenizer.tokenize(text) {
            let b = self.bucket(t);
            v[b] = v[b] + T::one();
        }
        let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::zero() {
            for x in &mut v {
                *x = *x / norm;
            }
        }
        v
    }
}

impl<T: Scalar> EmbeddingProvider<T> for HashingEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<T>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::ProviderFailure("no texts to embed".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Looks vectors up in a fixed table; unknown texts are a provider failure.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder<T> {
    table: HashMap<String, Vec<T>>,
}

impl<T: Scalar> FixedEmbedder<T> {
    pub fn new(pairs: impl IntoIterator<Item = (String, Vec<T>)>) -> Self {
        Self {
            table: pairs.into_iter().collect(),
        }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for FixedEmbedder<T> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<T>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::ProviderFailure("no texts to embed".into()));
        }
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| BackendError::ProviderFailure(format!("no vector for {t:?}")))
            })
            .collect()
    }
}
