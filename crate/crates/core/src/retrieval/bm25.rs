//! Okapi BM25 over an in-memory inverted index.
//!
//! ```text
//! idf(q)      = ln((|C| - df(q) + 0.5) / (df(q) + 0.5) + 1)
//! score(q, d) = idf(q) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avglen))
//! score(Q, d) = sum over query tokens, each occurrence counted
//! ```

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{rank_candidates, KnowledgeItem, RetrievalError, RetrievedEvidence};
use crate::num::Scalar;
use crate::text::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<T> {
    pub k1: T,
    pub b: T,
}

impl<T: Scalar> Default for Bm25Params<T> {
    fn default() -> Self {
        Self {
            k1: T::lit(1.2),
            b: T::lit(0.75),
        }
    }
}

impl<T: Scalar> Bm25Params<T> {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k1.is_nan() || self.k1 < T::zero() {
            return Err(RetrievalError::InvalidParams(format!("k1 = {} must be >= 0", self.k1)));
        }
        if !(self.b >= T::zero() && self.b <= T::one()) {
            return Err(RetrievalError::InvalidParams(format!("b = {} must lie in [0, 1]", self.b)));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(self) -> Bm25Params<U> {
        Bm25Params {
            k1: U::lit(self.k1.to_f64_lossy()),
            b: U::lit(self.b.to_f64_lossy()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: usize,
    tf: usize,
}

pub struct Bm25Index<T> {
    params: Bm25Params<T>,
    items: Vec<KnowledgeItem>,
    postings: HashMap<String, Vec<Posting>>,
    lengths: Vec<usize>,
    avg_len: T,
    tokenizer: Arc<dyn Tokenizer>,
}

impl<T: Scalar> Bm25Index<T> {
    pub fn build(
        items: Vec<KnowledgeItem>,
        params: Bm25Params<T>,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Self, RetrievalError> {
        params.validate()?;
        if items.is_empty() {
            return Err(RetrievalError::EmptyCollection);
        }
        let mut keys = HashSet::with_capacity(items.len());
        for item in &items {
            if !keys.insert((&item.source, item.key)) {
                return Err(RetrievalError::DuplicateKey(item.key));
            }
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut lengths = Vec::with_capacity(items.len());
        for (doc, item) in items.iter().enumerate() {
            let tokens = tokenizer.tokenize(&item.text);
            lengths.push(tokens.len());
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting { doc, tf });
            }
        }
        let total: usize = lengths.iter().sum();
        let avg_len = T::from_count(total) / T::from_count(items.len());
        Ok(Self {
            params,
            items,
            postings,
            lengths,
            avg_len,
            tokenizer,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn avg_len(&self) -> T {
        self.avg_len
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Score of every item, in index order.
    pub fn score_all(&self, query: &str) -> Vec<T> {
        let mut scores = vec![T::zero(); self.items.len()];
        let n = T::from_count(self.items.len());
        let half = T::lit(0.5);
        let Bm25Params { k1, b } = self.params;
        for term in self.tokenizer.tokenize(query) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = T::from_count(list.len());
            let idf = ((n - df + half) / (df + half) + T::one()).ln();
            for p in list {
                let tf = T::from_count(p.tf);
                let len = T::from_count(self.lengths[p.doc]);
                let norm = if self.avg_len > T::zero() {
                    T::one() - b + b * len / self.avg_len
                } else {
                    T::one()
                };
                scores[p.doc] = scores[p.doc] + idf * tf * (k1 + T::one()) / (tf + k1 * norm);
            }
        }
        scores
    }

    /// Top-`n` items with positive score, ties broken by ascending key.
    pub fn search(&self, query: &str, n: usize) -> Vec<RetrievedEvidence<T>> {
        let scores = self.score_all(query);
        let candidates = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > T::zero())
            .collect::<Vec<_>>();
        rank_candidates(&self.items, candidates, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::SourceId;
    use crate::retrieval::ItemKey;
    use crate::text::WhitespaceCjkTokenizer;

    fn items(texts: &[&str]) -> Vec<KnowledgeItem> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| KnowledgeItem::new(SourceId::persona(), ItemKey::persona(i), *t))
            .collect()
    }

    fn index(texts: &[&str]) -> Bm25Index<f64> {
        Bm25Index::build(items(texts), Bm25Params::default(), Arc::new(WhitespaceCjkTokenizer)).unwrap()
    }

    #[test]
    fn bookkeeping() {
        let idx = index(&["a b", "a b c d", "e"]);
        assert_eq!(idx.len(), 3);
        assert!((idx.avg_len() - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(idx.document_frequency("a"), 2);
        assert_eq!(idx.document_frequency("zzz"), 0);
    }

    #[test]
    fn unique_term_ranks_first() {
        let idx = index(&["red apple", "green pear", "yellow banana"]);
        let hits = idx.search("pear", 3);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].item.key, ItemKey::persona(1));
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn no_matching_term_gives_nothing() {
        let idx = index(&["red apple", "green pear"]);
        assert!(idx.search("violet", 5).is_empty());
        assert!(idx.search("", 5).is_empty());
    }

    #[test]
    fn ties_break_on_key() {
        let idx = index(&["x y", "x y", "x y"]);
        let keys: Vec<_> = idx.search("x", 3).iter().map(|e| e.item.key).collect();
        assert_eq!(keys, vec![ItemKey::persona(0), ItemKey::persona(1), ItemKey::persona(2)]);
    }

    #[test]
    fn build_errors() {
        let tok: Arc<dyn Tokenizer> = Arc::new(WhitespaceCjkTokenizer);
        assert!(matches!(
            Bm25Index::<f64>::build(vec![], Bm25Params::default(), tok.clone()),
            Err(RetrievalError::EmptyCollection)
        ));
        let mut dup = items(&["a", "b"]);
        dup[1].key = dup[0].key;
        assert!(matches!(
            Bm25Index::<f64>::build(dup, Bm25Params::default(), tok.clone()),
            Err(RetrievalError::DuplicateKey(_))
        ));
        let bad = Bm25Params { k1: 1.2, b: 1.5 };
        assert!(matches!(
            Bm25Index::build(items(&["a"]), bad, tok),
            Err(RetrievalError::InvalidParams(_))
        ));
    }

    #[test]
    fn single_precision_path() {
        let idx = Bm25Index::<f32>::build(
            items(&["red apple", "green pear"]),
            Bm25Params::default(),
            Arc::new(WhitespaceCjkTokenizer),
        )
        .unwrap();
        let hits = idx.search("apple", 1);
        assert_eq!(hits[0].item.key, ItemKey::persona(0));
        assert!(hits[0].score > 0.0f32);
    }
}
