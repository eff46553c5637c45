//! Cost profile of the four store layouts on synthetic dialogues.
//!
//! With `N` personas and `M` documents per persona, one `[PERSONA, DOCUMENTS]`
//! retrieval scans `N + M` candidates under the dependent layout, `N + NM`
//! under independent pools, `2(N + NM)` for the merged pool (two retrieval
//! passes) and `NM` for concatenated pairs; the concatenated layout holds
//! `2NM` text units, the others `N + NM`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{retrieve_in_store, KnowledgeStore, RetrievalConfig, RetrievalError, Retriever, ScanStats, Strategy};
use crate::corpus::{DialogueContext, DialogueRecord, Speaker, Turn};
use crate::registry::{SourceId, SourceRegistry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub strategy: Strategy,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub queries: usize,
    /// Candidates scored per query (the maximum, if queries differed).
    pub candidates_scanned: usize,
    /// False when some query scanned a different number of candidates.
    pub uniform: bool,
    pub peak_items_resident: usize,
    /// Informational only; excluded from any comparison.
    pub wall_time_ns: u128,
}

const FILLER: [&str; 8] = ["tell", "me", "about", "the", "your", "what", "do", "know"];

/// A dialogue with `n` personas and `m` documents each. Persona `i` mentions
/// the token `persona_i`, document `(i, j)` the token `fact_i_j`.
pub fn synthetic_record(n: usize, m: usize, id: &str) -> DialogueRecord {
    DialogueRecord {
        dialogue_id: id.to_owned(),
        persona: (0..n).map(|i| format!("I like persona_{i} and topic_{i}")).collect(),
        documents: (0..n)
            .map(|i| (0..m).map(|j| format!("fact_{i}_{j} is about topic_{i}")).collect())
            .collect(),
        turns: vec![Turn::user("hello")],
    }
}

/// Queries naming one random persona and one of its documents.
pub fn synthetic_queries(n: usize, m: usize, count: usize, seed: u64) -> Vec<DialogueContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..m);
            let a = FILLER[rng.random_range(0..FILLER.len())];
            let b = FILLER[rng.random_range(0..FILLER.len())];
            let mut c = DialogueContext::default();
            c.push(Speaker::User, format!("{a} persona_{i} {b} fact_{i}_{j}"));
            c
        })
        .collect()
}

/// Run every query through one strategy and report per-query scan cost and
/// store footprint.
pub fn run_strategy_bench(
    record: &DialogueRecord,
    queries: &[DialogueContext],
    strategy: Strategy,
    cfg: &RetrievalConfig,
) -> Result<StrategyProfile, RetrievalError> {
    let cfg = RetrievalConfig {
        strategy,
        ..cfg.clone()
    };
    let registry = SourceRegistry::persona_documents();
    let retriever = Retriever::<f64>::from_config(&cfg);
    let plan = [SourceId::persona(), SourceId::documents()];
    let start = Instant::now();
    let store = KnowledgeStore::build(record, strategy);
    let mut per_query: Vec<ScanStats> = Vec::with_capacity(queries.len());
    for q in queries {
        per_query.push(retrieve_in_store(&store, &plan, q, &cfg, &registry, &retriever)?.stats);
    }
    let wall_time_ns = start.elapsed().as_nanos();
    let max = per_query.iter().map(|s| s.candidates_scanned).max().unwrap_or(0);
    Ok(StrategyProfile {
        strategy,
        n: record.persona.len(),
        m: record.documents.first().map_or(0, Vec::len),
        queries: queries.len(),
        candidates_scanned: max,
        uniform: per_query.iter().all(|s| s.candidates_scanned == max),
        peak_items_resident: store.resident_items(),
        wall_time_ns,
    })
}

/// Sweep the `(N, M, strategy)` grid. Each cell gets its own query stream
/// derived from `seed`.
pub fn run_bench(
    n_list: &[usize],
    m_list: &[usize],
    strategies: &[Strategy],
    queries_per_cell: usize,
    seed: u64,
    cfg: &RetrievalConfig,
) -> Result<Vec<StrategyProfile>, RetrievalError> {
    let mut out = Vec::with_capacity(n_list.len() * m_list.len() * strategies.len());
    for &n in n_list {
        for &m in m_list {
            if n == 0 || m == 0 {
                return Err(RetrievalError::InvalidParams(format!(
                    "bench needs N >= 1 and M >= 1, got N={n} M={m}"
                )));
            }
            let record = synthetic_record(n, m, &format!("bench-{n}x{m}"));
            let cell_seed = seed ^ ((n as u64) << 32) ^ m as u64;
            let queries = synthetic_queries(n, m, queries_per_cell, cell_seed);
            for &s in strategies {
                out.push(run_strategy_bench(&record, &queries, s, cfg)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(n: usize, m: usize, s: Strategy) -> StrategyProfile {
        run_bench(&[n], &[m], &[s], 5, 7, &RetrievalConfig::default())
            .unwrap()
            .remove(0)
    }

    #[test]
    fn counts_for_four_by_five() {
        assert_eq!(profile(4, 5, Strategy::Dependent).candidates_scanned, 9);
        assert_eq!(profile(4, 5, Strategy::Independent).candidates_scanned, 24);
        assert_eq!(profile(4, 5, Strategy::Concatenated).peak_items_resident, 40);
    }

    #[test]
    fn counts_for_ten_by_ten() {
        assert_eq!(profile(10, 10, Strategy::Dependent).candidates_scanned, 20);
        assert_eq!(profile(10, 10, Strategy::Merged).candidates_scanned, 220);
        assert_eq!(profile(10, 10, Strategy::Concatenated).peak_items_resident, 200);
    }

    #[test]
    fn queries_are_seeded() {
        assert_eq!(synthetic_queries(3, 3, 4, 1), synthetic_queries(3, 3, 4, 1));
        assert_ne!(synthetic_queries(3, 3, 8, 1), synthetic_queries(3, 3, 8, 2));
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(run_bench(&[0], &[1], &[Strategy::Dependent], 1, 0, &RetrievalConfig::default()).is_err());
    }

    #[test]
    fn profile_json_shape() {
        let p = profile(2, 3, Strategy::Merged);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["strategy"], "MERGED_C");
        assert_eq!(v["N"], 2);
        assert_eq!(v["M"], 3);
        assert!(v["wall_time_ns"].is_number());
    }
}
