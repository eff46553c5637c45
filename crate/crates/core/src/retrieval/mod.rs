//! Sparse and dense retrieval, and plan-driven multi-source retrieval over
//! the four persona/document store layouts.

pub mod bench;
pub mod bm25;
pub mod dense;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{EmbeddingProvider, HashingEmbedder};
use crate::corpus::{DialogueContext, DialogueRecord};
use crate::num::Scalar;
use crate::registry::{RegistryError, SourceId, SourceRegistry, DOCUMENTS, PERSONA};
use crate::text::{Tokenizer, WhitespaceCjkTokenizer};

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::{cosine, dense_search};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("cannot index an empty collection")]
    EmptyCollection,
    #[error("duplicate item key {0}")]
    DuplicateKey(ItemKey),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding provider failure: {0}")]
    Provider(String),
    #[error("plan {0:?} violates source dependencies")]
    PlanOrderInvalid(Vec<SourceId>),
    #[error("source {0} has no items in this dialogue")]
    SourceEmpty(SourceId),
    #[error("source {0} has no retrievable store")]
    UnsupportedSource(SourceId),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Stable id of a knowledge item within a dialogue: a persona index, or a
/// persona index plus the index of one of its documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub persona: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc: Option<usize>,
}

impl ItemKey {
    pub fn persona(persona: usize) -> Self {
        Self { persona, doc: None }
    }

    pub fn document(persona: usize, doc: usize) -> Self {
        Self {
            persona,
            doc: Some(doc),
        }
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.doc {
            Some(d) => write!(f, "{}/{}", self.persona, d),
            None => write!(f, "{}", self.persona),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub source: SourceId,
    pub key: ItemKey,
    pub text: String,
}

impl KnowledgeItem {
    pub fn new(source: SourceId, key: ItemKey, text: impl Into<String>) -> Self {
        Self {
            source,
            key,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvidence<T> {
    pub item: KnowledgeItem,
    pub score: T,
    pub rank: usize,
}

/// Evidence per source, as produced by one plan execution.
pub type EvidenceMap<T> = BTreeMap<SourceId, Vec<RetrievedEvidence<T>>>;

/// Sort `(item index, score)` pairs by descending score then ascending key,
/// keep the first `n`, and assign ranks 1..
pub(crate) fn rank_candidates<T: Scalar>(
    items: &[KnowledgeItem],
    mut candidates: Vec<(usize, T)>,
    n: usize,
) -> Vec<RetrievedEvidence<T>> {
    candidates.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| items[*ia].key.cmp(&items[*ib].key))
    });
    candidates
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(r, (i, score))| RetrievedEvidence {
            item: items[i].clone(),
            score,
            rank: r + 1,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Documents are keyed by persona; only the selected persona's documents are searched.
    #[serde(rename = "DEPENDENT_A")]
    Dependent,
    /// Personas and documents are two flat pools searched independently.
    #[serde(rename = "INDEPENDENT_B")]
    Independent,
    /// Personas and documents merged into one pool; two items are retrieved.
    #[serde(rename = "MERGED_C")]
    Merged,
    /// Every persona concatenated with each of its documents; one item is retrieved.
    #[serde(rename = "CONCATENATED_D")]
    Concatenated,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Dependent,
        Strategy::Independent,
        Strategy::Merged,
        Strategy::Concatenated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dependent => "DEPENDENT_A",
            Self::Independent => "INDEPENDENT_B",
            Self::Merged => "MERGED_C",
            Self::Concatenated => "CONCATENATED_D",
        }
    }

    /// Accepts the full name or the single letter `a`..`d`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" | "DEPENDENT_A" | "DEPENDENT" => Some(Self::Dependent),
            "B" | "INDEPENDENT_B" | "INDEPENDENT" => Some(Self::Independent),
            "C" | "MERGED_C" | "MERGED" => Some(Self::Merged),
            "D" | "CONCATENATED_D" | "CONCATENATED" => Some(Self::Concatenated),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub top_n: usize,
    pub strategy: Strategy,
    pub retriever_kind: RetrieverKind,
    /// Number of trailing turns used as the query; all turns when unset.
    pub context_window_turns: Option<usize>,
    /// Under `INDEPENDENT_B`, append the rank-1 persona to the document query.
    pub persona_conditioned_query: bool,
    pub bm25: Bm25Params<f64>,
    pub embedding_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_n: 1,
            strategy: Strategy::Dependent,
            retriever_kind: RetrieverKind::Bm25,
            context_window_turns: None,
            persona_conditioned_query: false,
            bm25: Bm25Params::default(),
            embedding_dim: HashingEmbedder::DEFAULT_DIM,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.top_n == 0 {
            return Err(RetrievalError::InvalidParams("top_n must be >= 1".into()));
        }
        self.bm25.validate()
    }
}

/// Work done by one plan execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanStats {
    /// Number of retrieval passes over a candidate pool.
    pub search_calls: usize,
    /// Total candidates scored across those passes.
    pub candidates_scanned: usize,
}

impl ScanStats {
    pub fn add(&mut self, other: ScanStats) {
        self.search_calls += other.search_calls;
        self.candidates_scanned += other.candidates_scanned;
    }
}

/// Scores candidate pools with BM25 or a dense embedding provider.
pub struct Retriever<T: Scalar> {
    kind: RetrieverKind,
    params: Bm25Params<T>,
    tokenizer: Arc<dyn Tokenizer>,
    embedder: Arc<dyn EmbeddingProvider<T>>,
}

impl<T: Scalar> Retriever<T> {
    pub fn new(
        kind: RetrieverKind,
        params: Bm25Params<T>,
        tokenizer: Arc<dyn Tokenizer>,
        embedder: Arc<dyn EmbeddingProvider<T>>,
    ) -> Self {
        Self {
            kind,
            params,
            tokenizer,
            embedder,
        }
    }

    pub fn from_config(cfg: &RetrievalConfig) -> Self {
        let tokenizer: Arc<dyn Tokenizer> = Arc::new(WhitespaceCjkTokenizer);
        let embedder = Arc::new(HashingEmbedder::new(cfg.embedding_dim, tokenizer.clone()));
        Self::new(cfg.retriever_kind, cfg.bm25.cast(), tokenizer, embedder)
    }

    pub fn kind(&self) -> RetrieverKind {
        self.kind
    }

    fn scores(&self, pool: &[KnowledgeItem], query: &str) -> Result<Vec<T>, RetrievalError> {
        match self.kind {
            RetrieverKind::Bm25 => {
                let index = Bm25Index::build(pool.to_vec(), self.params, self.tokenizer.clone())?;
                Ok(index.score_all(query))
            }
            RetrieverKind::Dense => dense::dense_scores(self.embedder.as_ref(), pool, query),
        }
    }

    /// BM25 drops zero-score candidates; dense similarity keeps everything.
    fn admissible(&self, score: T) -> bool {
        match self.kind {
            RetrieverKind::Bm25 => score > T::zero(),
            RetrieverKind::Dense => true,
        }
    }

    /// One ranking pass over `pool`, returning the top `n`.
    pub fn search(
        &self,
        pool: &[KnowledgeItem],
        query: &str,
        n: usize,
        stats: &mut ScanStats,
    ) -> Result<Vec<RetrievedEvidence<T>>, RetrievalError> {
        stats.search_calls += 1;
        stats.candidates_scanned += pool.len();
        let scores = self.scores(pool, query)?;
        let candidates = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| self.admissible(*s))
            .collect();
        Ok(rank_candidates(pool, candidates, n))
    }

    /// Retrieve `k` items one at a time, rescanning the whole pool for each
    /// (the previously chosen items are excluded). Equivalent to the top-`k`
    /// ranking, at `k` times the scan cost.
    pub fn select_iteratively(
        &self,
        pool: &[KnowledgeItem],
        query: &str,
        k: usize,
        stats: &mut ScanStats,
    ) -> Result<Vec<RetrievedEvidence<T>>, RetrievalError> {
        if pool.is_empty() {
            return Err(RetrievalError::EmptyCollection);
        }
        let index = match self.kind {
            RetrieverKind::Bm25 => Some(Bm25Index::build(pool.to_vec(), self.params, self.tokenizer.clone())?),
            RetrieverKind::Dense => None,
        };
        let mut chosen: Vec<(usize, T)> = Vec::with_capacity(k);
        for _ in 0..k {
            stats.search_calls += 1;
            stats.candidates_scanned += pool.len();
            let scores = match &index {
                Some(idx) => idx.score_all(query),
                None => dense::dense_scores(self.embedder.as_ref(), pool, query)?,
            };
            let best = scores
                .into_iter()
                .enumerate()
                .filter(|(i, s)| self.admissible(*s) && !chosen.iter().any(|(c, _)| c == i))
                .min_by(|(ia, sa), (ib, sb)| {
                    sb.partial_cmp(sa)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| pool[*ia].key.cmp(&pool[*ib].key))
                });
            match best {
                Some(b) => chosen.push(b),
                None => break,
            }
        }
        Ok(rank_candidates(pool, chosen, k))
    }
}

enum Layout {
    Keyed {
        personas: Vec<KnowledgeItem>,
        documents: Vec<Vec<KnowledgeItem>>,
    },
    Flat {
        personas: Vec<KnowledgeItem>,
        documents: Vec<KnowledgeItem>,
    },
    Merged {
        pool: Vec<KnowledgeItem>,
    },
    Concatenated {
        /// (key, persona text, document text)
        pairs: Vec<(ItemKey, String, String)>,
    },
}

/// A dialogue's persona and document stores organized for one strategy.
pub struct KnowledgeStore {
    strategy: Strategy,
    layout: Layout,
}

fn persona_items(record: &DialogueRecord) -> Vec<KnowledgeItem> {
    record
        .persona
        .iter()
        .enumerate()
        .map(|(p, text)| KnowledgeItem::new(SourceId::persona(), ItemKey::persona(p), text.clone()))
        .collect()
}

fn document_items(record: &DialogueRecord, p: usize) -> Vec<KnowledgeItem> {
    record.documents[p]
        .iter()
        .enumerate()
        .map(|(d, text)| KnowledgeItem::new(SourceId::documents(), ItemKey::document(p, d), text.clone()))
        .collect()
}

impl KnowledgeStore {
    pub fn build(record: &DialogueRecord, strategy: Strategy) -> Self {
        let layout = match strategy {
            Strategy::Dependent => Layout::Keyed {
                personas: persona_items(record),
                documents: (0..record.documents.len()).map(|p| document_items(record, p)).collect(),
            },
            Strategy::Independent => Layout::Flat {
                personas: persona_items(record),
                documents: (0..record.documents.len()).flat_map(|p| document_items(record, p)).collect(),
            },
            Strategy::Merged => {
                let mut pool = persona_items(record);
                pool.extend((0..record.documents.len()).flat_map(|p| document_items(record, p)));
                Layout::Merged { pool }
            }
            Strategy::Concatenated => Layout::Concatenated {
                pairs: record
                    .documents
                    .iter()
                    .enumerate()
                    .flat_map(|(p, docs)| {
                        docs.iter().enumerate().map(move |(d, doc)| (ItemKey::document(p, d), p, doc))
                    })
                    .map(|(key, p, doc)| (key, record.persona[p].clone(), doc.clone()))
                    .collect(),
            },
        };
        Self { strategy, layout }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Text units held in memory. A concatenated item stores both of its halves.
    pub fn resident_items(&self) -> usize {
        match &self.layout {
            Layout::Keyed { personas, documents } => personas.len() + documents.iter().map(Vec::len).sum::<usize>(),
            Layout::Flat { personas, documents } => personas.len() + documents.len(),
            Layout::Merged { pool } => pool.len(),
            Layout::Concatenated { pairs } => 2 * pairs.len(),
        }
    }
}

/// Evidence and scan accounting for one plan execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome<T> {
    pub evidence: EvidenceMap<T>,
    pub stats: ScanStats,
}

impl<T> Default for RetrievalOutcome<T> {
    fn default() -> Self {
        Self {
            evidence: BTreeMap::new(),
            stats: ScanStats::default(),
        }
    }
}

fn check_plan(plan: &[SourceId], registry: &SourceRegistry) -> Result<(), RetrievalError> {
    if !registry.validate_order(plan)? {
        return Err(RetrievalError::PlanOrderInvalid(plan.to_vec()));
    }
    for s in plan {
        if s.as_str() != PERSONA && s.as_str() != DOCUMENTS {
            return Err(RetrievalError::UnsupportedSource(s.clone()));
        }
    }
    Ok(())
}

fn rerank<T>(mut list: Vec<RetrievedEvidence<T>>) -> Vec<RetrievedEvidence<T>> {
    for (i, e) in list.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    list
}

/// Execute `plan` against a dialogue's stores, in plan order.
///
/// Under `DEPENDENT_A` the documents searched are exactly those of the
/// rank-1 persona; if no persona was retrieved, no document is either.
pub fn retrieve_plan<T: Scalar>(
    plan: &[SourceId],
    context: &DialogueContext,
    record: &DialogueRecord,
    cfg: &RetrievalConfig,
    registry: &SourceRegistry,
    retriever: &Retriever<T>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    let store = KnowledgeStore::build(record, cfg.strategy);
    retrieve_in_store(&store, plan, context, cfg, registry, retriever)
}

pub fn retrieve_in_store<T: Scalar>(
    store: &KnowledgeStore,
    plan: &[SourceId],
    context: &DialogueContext,
    cfg: &RetrievalConfig,
    registry: &SourceRegistry,
    retriever: &Retriever<T>,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    cfg.validate()?;
    check_plan(plan, registry)?;
    let mut out = RetrievalOutcome::default();
    if plan.is_empty() {
        return Ok(out);
    }
    let query = context.query_text(cfg.context_window_turns);
    let wants = |name: &str| plan.iter().any(|s| s.as_str() == name);
    let n = cfg.top_n;
    let stats = &mut out.stats;
    let evidence = &mut out.evidence;

    match &store.layout {
        Layout::Keyed { personas, documents } => {
            let mut selected: Option<usize> = None;
            for source in plan {
                if source.as_str() == PERSONA {
                    if personas.is_empty() {
                        return Err(RetrievalError::SourceEmpty(source.clone()));
                    }
                    let hits = retriever.search(personas, &query, n, stats)?;
                    selected = hits.first().map(|h| h.item.key.persona);
                    evidence.insert(source.clone(), hits);
                } else {
                    if documents.iter().all(Vec::is_empty) {
                        return Err(RetrievalError::SourceEmpty(source.clone()));
                    }
                    let hits = if wants(PERSONA) {
                        match selected {
                            Some(p) if !documents[p].is_empty() => retriever.search(&documents[p], &query, n, stats)?,
                            _ => Vec::new(),
                        }
                    } else {
                        let all: Vec<KnowledgeItem> = documents.iter().flatten().cloned().collect();
                        retriever.search(&all, &query, n, stats)?
                    };
                    evidence.insert(source.clone(), hits);
                }
            }
        }
        Layout::Flat { personas, documents } => {
            let mut selected_text: Option<String> = None;
            for source in plan {
                let (pool, q) = if source.as_str() == PERSONA {
                    (personas, query.clone())
                } else {
                    let q = match (&selected_text, cfg.persona_conditioned_query) {
                        (Some(p), true) => format!("{query} {p}"),
                        _ => query.clone(),
                    };
                    (documents, q)
                };
                if pool.is_empty() {
                    return Err(RetrievalError::SourceEmpty(source.clone()));
                }
                let hits = retriever.search(pool, &q, n, stats)?;
                if source.as_str() == PERSONA {
                    selected_text = hits.first().map(|h| h.item.text.clone());
                }
                evidence.insert(source.clone(), hits);
            }
        }
        Layout::Merged { pool } => {
            if pool.is_empty() {
                return Err(RetrievalError::SourceEmpty(plan[0].clone()));
            }
            let hits = retriever.select_iteratively(pool, &query, 2 * n, stats)?;
            for source in plan {
                let list: Vec<_> = hits.iter().filter(|h| &h.item.source == source).cloned().collect();
                evidence.insert(source.clone(), rerank(list));
            }
        }
        Layout::Concatenated { pairs } => {
            if pairs.is_empty() {
                return Err(RetrievalError::SourceEmpty(plan[0].clone()));
            }
            let pool: Vec<KnowledgeItem> = pairs
                .iter()
                .map(|(key, p, d)| KnowledgeItem::new(SourceId::documents(), *key, format!("{p} {d}")))
                .collect();
            let hits = retriever.search(&pool, &query, n, stats)?;
            for source in plan {
                let mut list: Vec<RetrievedEvidence<T>> = Vec::new();
                for h in &hits {
                    let (_, persona_text, doc_text) = pairs
                        .iter()
                        .find(|(k, _, _)| *k == h.item.key)
                        .expect("hit comes from the pool");
                    let (key, text) = if source.as_str() == PERSONA {
                        (ItemKey::persona(h.item.key.persona), persona_text)
                    } else {
                        (h.item.key, doc_text)
                    };
                    if list.iter().any(|e| e.item.key == key) {
                        continue;
                    }
                    list.push(RetrievedEvidence {
                        item: KnowledgeItem::new(source.clone(), key, text.clone()),
                        score: h.score,
                        rank: 0,
                    });
                }
                evidence.insert(source.clone(), rerank(list));
            }
        }
    }
    Ok(out)
}
