//! Evaluation metrics: per-decision planning F1, Recall@1, BLEU1, Rouge-L
//! and the calibrated persona/knowledge consistency scores.
//!
//! The consistency value of a response `r` against a gold grounding `g`:
//!
//! ```text
//! gold grounding | planner uses source | C(r, g)
//! ---------------+---------------------+----------
//! yes            | yes                 | NLI(r, g)
//! yes            | no                  | 0
//! no             | yes                 | 0
//! no             | no                  | 1
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Judge};
use crate::num::{mean, ratio, Scalar};
use crate::planner::{DecisionClass, PlanDecision};
use crate::registry::{SourceId, DOCUMENTS, PERSONA};
use crate::retrieval::{EvidenceMap, ItemKey};
use crate::text::Tokenizer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{sample_id}: decision {decision} is not NULL, PERSONA or PERSONA, DOCUMENTS")]
    UnclassifiableDecision { sample_id: String, decision: String },
    #[error("no sample's gold decision uses {0}")]
    NoEligibleSamples(SourceId),
    #[error("inconsistent consistency case: {0}")]
    InvalidCase(String),
    #[error("{sample_id}: {source}")]
    Judge {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error("no samples to evaluate")]
    EmptySamples,
}

/// F1 and prediction count for one decision class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore<T> {
    pub f1: T,
    pub predicted: usize,
    pub gold: usize,
}

/// One-vs-rest F1 per decision class over `(gold, predicted)` pairs.
pub fn planning_f1<T: Scalar>(pairs: &[(DecisionClass, DecisionClass)]) -> BTreeMap<DecisionClass, ClassScore<T>> {
    DecisionClass::ALL
        .iter()
        .map(|&c| {
            let tp = pairs.iter().filter(|(g, p)| *g == c && *p == c).count();
            let predicted = pairs.iter().filter(|(_, p)| *p == c).count();
            let gold = pairs.iter().filter(|(g, _)| *g == c).count();
            let precision: T = ratio(tp, predicted);
            let recall: T = ratio(tp, gold);
            let f1 = if precision + recall == T::zero() {
                T::zero()
            } else {
                T::lit(2.0) * precision * recall / (precision + recall)
            };
            (c, ClassScore { f1, predicted, gold })
        })
        .collect()
}

/// Modified unigram precision with clipping, times the brevity penalty
/// `min(1, exp(1 - |ref| / |cand|))`. An empty candidate scores 0.
pub fn bleu1<T: Scalar>(candidate: &str, reference: &str, tokenizer: &dyn Tokenizer) -> T {
    let cand = tokenizer.tokenize(candidate);
    let refs = tokenizer.tokenize(reference);
    if cand.is_empty() {
        return T::zero();
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(t).or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(t, c)| (*c).min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let precision: T = ratio(clipped, cand.len());
    let bp = (T::one() - T::from_count(refs.len()) / T::from_count(cand.len()))
        .exp()
        .min(T::one());
    precision * bp
}

/// Length of the longest common subsequence.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure `(1 + β²) P R / (R + β² P)`.
pub fn rouge_l<T: Scalar>(candidate: &str, reference: &str, tokenizer: &dyn Tokenizer, beta: T) -> T {
    let cand = tokenizer.tokenize(candidate);
    let refs = tokenizer.tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return T::zero();
    }
    let l = lcs_len(&cand, &refs);
    let p: T = ratio(l, cand.len());
    let r: T = ratio(l, refs.len());
    let b2 = beta * beta;
    let denom = r + b2 * p;
    if denom == T::zero() {
        T::zero()
    } else {
        (T::one() + b2) * p * r / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyCase {
    pub has_grounding: bool,
    pub planner_used: bool,
    pub judge_verdict: Option<bool>,
}

impl ConsistencyCase {
    pub fn new(has_grounding: bool, planner_used: bool, judge_verdict: Option<bool>) -> Self {
        Self {
            has_grounding,
            planner_used,
            judge_verdict,
        }
    }
}

pub fn consistency_value<T: Scalar>(case: ConsistencyCase) -> Result<T, MetricsError> {
    let needs_verdict = case.has_grounding && case.planner_used;
    if needs_verdict != case.judge_verdict.is_some() {
        return Err(MetricsError::InvalidCase(format!("{case:?}")));
    }
    Ok(match (case.has_grounding, case.planner_used, case.judge_verdict) {
        (true, true, Some(v)) => {
            if v {
                T::one()
            } else {
                T::zero()
            }
        }
        (true, false, _) | (false, true, _) => T::zero(),
        (false, false, _) => T::one(),
        (true, true, None) => unreachable!("checked above"),
    })
}

/// Everything needed to score one system turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval<T> {
    pub sample_id: String,
    pub gold_decision: PlanDecision,
    pub pred_decision: PlanDecision,
    pub gold_persona: Option<String>,
    /// Gold knowledge sentences joined with a space.
    pub gold_knowledge: Option<String>,
    /// Gold item keys per source, for retrieval scoring.
    pub gold_keys: BTreeMap<SourceId, Vec<ItemKey>>,
    /// Evidence retrieved for the predicted decision.
    pub retrieved: EvidenceMap<T>,
    /// Evidence retrieved for the gold decision.
    pub gold_plan_retrieved: EvidenceMap<T>,
    pub response: String,
    pub reference: String,
}

impl<T> SampleEval<T> {
    pub fn check(&self) -> Result<(), MetricsError> {
        let bad = |what: &str| {
            Err(MetricsError::InvalidCase(format!(
                "{}: {what}",
                self.sample_id
            )))
        };
        if self.gold_persona.is_some() != self.gold_decision.uses(PERSONA) {
            return bad("gold_persona present iff PERSONA is in the gold decision");
        }
        if self.gold_knowledge.is_some() != self.gold_decision.uses(DOCUMENTS) {
            return bad("gold_knowledge present iff DOCUMENTS is in the gold decision");
        }
        Ok(())
    }

    fn classes(&self) -> Result<(DecisionClass, DecisionClass), MetricsError> {
        let class = |d: &PlanDecision| {
            d.class().ok_or_else(|| MetricsError::UnclassifiableDecision {
                sample_id: self.sample_id.clone(),
                decision: d.to_string(),
            })
        };
        Ok((class(&self.gold_decision)?, class(&self.pred_decision)?))
    }
}

fn hit_within<T>(sample: &SampleEval<T>, source: &SourceId, k: usize) -> bool {
    let gold: BTreeSet<ItemKey> = sample.gold_keys.get(source).into_iter().flatten().copied().collect();
    sample
        .gold_plan_retrieved
        .get(source)
        .into_iter()
        .flatten()
        .take(k)
        .any(|e| gold.contains(&e.item.key))
}

/// Fraction of samples whose gold decision uses `source` and whose top-`k`
/// evidence for it (retrieved under the gold decision) contains a gold item.
pub fn contains_gold_at_k<T: Scalar>(samples: &[SampleEval<T>], source: &SourceId, k: usize) -> Result<T, MetricsError> {
    let eligible: Vec<&SampleEval<T>> = samples
        .iter()
        .filter(|s| s.gold_decision.sources.contains(source))
        .collect();
    if eligible.is_empty() {
        return Err(MetricsError::NoEligibleSamples(source.clone()));
    }
    let hits = eligible.iter().filter(|s| hit_within(s, source, k)).count();
    Ok(ratio(hits, eligible.len()))
}

/// Rank-1 item matches a gold item, over samples whose gold decision uses
/// `source`. For documents any of the gold knowledge indices counts.
pub fn recall_at_1<T: Scalar>(samples: &[SampleEval<T>], source: &SourceId) -> Result<T, MetricsError> {
    contains_gold_at_k(samples, source, 1)
}

/// Persona and knowledge consistency of every sample, in sample order.
/// Persona and knowledge consistency of one sample.
pub fn sample_consistency<T: Scalar>(s: &SampleEval<T>, judge: &dyn Judge) -> Result<(T, T), MetricsError> {
    let one = |gold: &Option<String>, source: &str| -> Result<T, MetricsError> {
        let used = s.pred_decision.uses(source);
        let verdict = match (gold, used) {
            (Some(g), true) => Some(judge.entails(&s.response, g).map_err(|e| MetricsError::Judge {
                sample_id: s.sample_id.clone(),
                source: e,
            })?),
            _ => None,
        };
        consistency_value(ConsistencyCase::new(gold.is_some(), used, verdict))
    };
    Ok((one(&s.gold_persona, PERSONA)?, one(&s.gold_knowledge, DOCUMENTS)?))
}

pub fn consistency_values<T: Scalar>(samples: &[SampleEval<T>], judge: &dyn Judge) -> Result<Vec<(T, T)>, MetricsError> {
    let per_sample: Vec<Result<(T, T), MetricsError>> =
        samples.par_iter().map(|s| sample_consistency(s, judge)).collect();
    per_sample.into_iter().collect()
}

/// Mean persona and knowledge consistency.
pub fn pc_kc<T: Scalar>(samples: &[SampleEval<T>], judge: &dyn Judge) -> Result<(T, T), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let values = consistency_values(samples, judge)?;
    let p: Vec<T> = values.iter().map(|v| v.0).collect();
    let k: Vec<T> = values.iter().map(|v| v.1).collect();
    Ok((mean(&p), mean(&k)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    /// Samples scored.
    pub m: usize,
    /// Samples that failed before scoring.
    pub errors: usize,
    pub f1_per_class: BTreeMap<DecisionClass, ClassScore<T>>,
    pub recall_at_1: BTreeMap<SourceId, T>,
    /// Reported instead of Recall@1 when two items come from a merged pool.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub contains_gold_at_2: BTreeMap<SourceId, T>,
    pub recall_eligible: BTreeMap<SourceId, usize>,
    pub bleu1: T,
    pub rouge_l: T,
    pub pc: T,
    pub kc: T,
    pub empty_candidates: usize,
}

#[derive(Clone, Copy)]
pub struct ReportOptions<'a, T> {
    pub tokenizer: &'a dyn Tokenizer,
    pub judge: &'a dyn Judge,
    pub rouge_beta: T,
    /// Score retrieval as contains-gold@2 rather than Recall@1.
    pub merged_pool: bool,
}

impl<T: Scalar> EvalReport<T> {
    pub fn compute(samples: &[SampleEval<T>], errors: usize, opts: ReportOptions<'_, T>) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::EmptySamples);
        }
        let values = consistency_values(samples, opts.judge)?;
        Self::from_values(samples, &values, errors, opts)
    }

    /// Like `compute`, with per-sample consistency values already judged.
    pub fn from_values(
        samples: &[SampleEval<T>],
        values: &[(T, T)],
        errors: usize,
        opts: ReportOptions<'_, T>,
    ) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::EmptySamples);
        }
        if values.len() != samples.len() {
            return Err(MetricsError::InvalidCase(format!(
                "{} consistency values for {} samples",
                values.len(),
                samples.len()
            )));
        }
        let mut pairs = Vec::with_capacity(samples.len());
        for s in samples {
            s.check()?;
            pairs.push(s.classes()?);
        }
        let mut recall = BTreeMap::new();
        let mut at2 = BTreeMap::new();
        let mut eligible = BTreeMap::new();
        for source in [SourceId::persona(), SourceId::documents()] {
            let n = samples.iter().filter(|s| s.gold_decision.sources.contains(&source)).count();
            if n == 0 {
                continue;
            }
            eligible.insert(source.clone(), n);
            if opts.merged_pool {
                at2.insert(source.clone(), contains_gold_at_k(samples, &source, 2)?);
            } else {
                recall.insert(source.clone(), recall_at_1(samples, &source)?);
            }
        }
        let bleu: Vec<T> = samples.iter().map(|s| bleu1(&s.response, &s.reference, opts.tokenizer)).collect();
        let rouge: Vec<T> = samples
            .iter()
            .map(|s| rouge_l(&s.response, &s.reference, opts.tokenizer, opts.rouge_beta))
            .collect();
        let empty_candidates = samples
            .iter()
            .filter(|s| opts.tokenizer.tokenize(&s.response).is_empty())
            .count();
        let p: Vec<T> = values.iter().map(|v| v.0).collect();
        let k: Vec<T> = values.iter().map(|v| v.1).collect();
        let (pc, kc) = (mean(&p), mean(&k));
        Ok(Self {
            m: samples.len(),
            errors,
            f1_per_class: planning_f1(&pairs),
            recall_at_1: recall,
            contains_gold_at_2: at2,
            recall_eligible: eligible,
            bleu1: mean(&bleu),
            rouge_l: mean(&rouge),
            pc,
            kc,
            empty_candidates,
        })
    }

    /// Aligned text table, scores multiplied by 100 with two decimals.
    pub fn to_table(&self) -> String {
        let pct = |v: T| format!("{:.2}", v.to_f64_lossy() * 100.0);
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}  errors: {}", self.m, self.errors);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14}{:>16}{:>16}{:>16}", "Planning F1", "NULL", "PERSONA", "BOTH");
        let cells: Vec<String> = DecisionClass::ALL
            .iter()
            .map(|c| match self.f1_per_class.get(c) {
                Some(s) => format!("{} ({})", pct(s.f1), s.predicted),
                None => "-".into(),
            })
            .collect();
        let _ = writeln!(out, "{:<14}{:>16}{:>16}{:>16}", "", cells[0], cells[1], cells[2]);
        let _ = writeln!(out);
        let (label, map) = if self.contains_gold_at_2.is_empty() {
            ("Recall@1", &self.recall_at_1)
        } else {
            ("Contains@2", &self.contains_gold_at_2)
        };
        let _ = writeln!(out, "{:<14}{:>16}{:>16}", label, PERSONA, DOCUMENTS);
        let cell = |s: SourceId| map.get(&s).map_or("-".to_string(), |v| pct(*v));
        let _ = writeln!(
            out,
            "{:<14}{:>16}{:>16}",
            "",
            cell(SourceId::persona()),
            cell(SourceId::documents())
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14}{:>16}{:>16}{:>16}{:>16}", "Response", "BLEU1", "Rouge-L", "P.C", "K.C");
        let _ = writeln!(
            out,
            "{:<14}{:>16}{:>16}{:>16}{:>16}",
            "",
            pct(self.bleu1),
            pct(self.rouge_l),
            pct(self.pc),
            pct(self.kc)
        );
        out
    }
}
