//! Exhaustive cosine-similarity search over provider embeddings.

use super::{rank_candidates, KnowledgeItem, RetrievalError, RetrievedEvidence};
use crate::backends::EmbeddingProvider;
use crate::num::Scalar;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
    let na: T = a.iter().map(|x| *x * *x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|x| *x * *x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

/// Similarity of `query` to every item, in item order.
pub fn dense_scores<T: Scalar>(
    provider: &dyn EmbeddingProvider<T>,
    items: &[KnowledgeItem],
    query: &str,
) -> Result<Vec<T>, RetrievalError> {
    if items.is_empty() {
        return Err(RetrievalError::EmptyCollection);
    }
    let mut texts: Vec<&str> = Vec::with_capacity(items.len() + 1);
    texts.push(query);
    texts.extend(items.iter().map(|i| i.text.as_str()));
    let vectors = provider
        .embed(&texts)
        .map_err(|e| RetrievalError::Provider(e.to_string()))?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::Provider(format!(
            "provider returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let dim = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let (q, rest) = vectors.split_first().expect("non-empty");
    Ok(rest.iter().map(|v| cosine(q, v)).collect())
}

/// Top-`n` items by cosine similarity, ties broken by ascending key.
/// Zero and negative similarities are kept.
pub fn dense_search<T: Scalar>(
    provider: &dyn EmbeddingProvider<T>,
    items: &[KnowledgeItem],
    query: &str,
    n: usize,
) -> Result<Vec<RetrievedEvidence<T>>, RetrievalError> {
    let scores = dense_scores(provider, items, query)?;
    Ok(rank_candidates(items, scores.into_iter().enumerate().collect(), n))
}
