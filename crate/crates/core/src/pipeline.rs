//! End-to-end orchestration: plan, retrieve, assemble, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{assemble, AssembleOutcome, AssemblerError, AssemblerFormat, AssemblerSpec};
use crate::backends::{build_backend, BackendDescriptor, BackendError, GenerationBackend, GenerationParams, Judge, JudgeDescriptor};
use crate::corpus::{load_dataset, CorpusError, DialogueContext, DialogueRecord, GroundingLabel, Speaker};
use crate::metrics::{sample_consistency, EvalReport, MetricsError, ReportOptions, SampleEval};
use crate::planner::{
    plan, select_demonstrations, serialize_decision, Demonstration, NormalizationFlag, ParsedDecision, PlanDecision,
    PlannerError, PlannerPromptSpec, PromptMode, SpecialTokens,
};
use crate::registry::{SourceId, SourceRegistry, SourceSpec, DOCUMENTS, PERSONA};
use crate::retrieval::{
    retrieve_plan, EvidenceMap, ItemKey, KnowledgeItem, RetrievalConfig, RetrievalError, RetrievedEvidence, Retriever,
    ScanStats, Strategy,
};
use crate::text::{Tokenizer, WhitespaceCjkTokenizer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Assembler(#[from] AssemblerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: system turn has no gold grounding")]
    MissingGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlannerMode {
    BackendZeroShot,
    BackendInContext,
    /// The gold decision of each sample.
    Oracle,
    AlwaysPersona,
    AlwaysBoth,
    /// Backend planning without dependency information; documents are
    /// retrieved from one pool spanning every persona.
    NoDependency,
    /// Backend planning over the persona source alone.
    NoDocuments,
}

impl PlannerMode {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_"))).ok()
    }

    fn uses_backend(self) -> bool {
        matches!(
            self,
            Self::BackendZeroShot | Self::BackendInContext | Self::NoDependency | Self::NoDocuments
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvidenceMode {
    Retrieved,
    /// Gold items of the planned sources are injected in place of retrieval.
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset_path: PathBuf,
    /// Dialogues to draw in-context demonstrations from.
    pub train_path: Option<PathBuf>,
    pub registry: SourceRegistry,
    pub retrieval: RetrievalConfig,
    pub planner_mode: PlannerMode,
    /// Prompt mode of the backend planner under the NO_DEPENDENCY and NO_DOCUMENTS ablations.
    pub ablation_prompt_mode: PromptMode,
    pub evidence_mode: EvidenceMode,
    pub assembler_format: AssemblerFormat,
    pub backend: BackendDescriptor,
    /// Planner backend; the assembling backend is used when unset.
    pub planner_backend: Option<BackendDescriptor>,
    pub judge: JudgeDescriptor,
    pub generation: GenerationParams,
    pub special_tokens: SpecialTokens,
    pub planning_template_path: Option<PathBuf>,
    pub assembling_template_path: Option<PathBuf>,
    pub demonstrations: usize,
    pub rouge_beta: f64,
    pub seed: u64,
    pub max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_path: PathBuf::new(),
            train_path: None,
            registry: SourceRegistry::persona_documents(),
            retrieval: RetrievalConfig::default(),
            planner_mode: PlannerMode::BackendZeroShot,
            ablation_prompt_mode: PromptMode::ZeroShot,
            evidence_mode: EvidenceMode::Retrieved,
            assembler_format: AssemblerFormat::SerializedInput,
            backend: BackendDescriptor::default(),
            planner_backend: None,
            judge: JudgeDescriptor::default(),
            generation: GenerationParams::default(),
            special_tokens: SpecialTokens::default(),
            planning_template_path: None,
            assembling_template_path: None,
            demonstrations: 3,
            rouge_beta: 1.2,
            seed: 0,
            max_in_flight: 4,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Read a JSON configuration; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset_path);
        for p in [
            &mut self.train_path,
            &mut self.planning_template_path,
            &mut self.assembling_template_path,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        self.backend.resolve_paths(base);
        if let Some(b) = &mut self.planner_backend {
            b.resolve_paths(base);
        }
        self.judge.resolve_paths(base);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_owned()));
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1");
        }
        if !self.registry.contains(&SourceId::persona()) || !self.registry.contains(&SourceId::documents()) {
            return bad("registry must declare PERSONA and DOCUMENTS");
        }
        self.retrieval.validate()?;
        self.backend.validate()?;
        if let Some(b) = &self.planner_backend {
            b.validate()?;
        }
        let needs_demos = self.assembler_format == AssemblerFormat::InContext
            || self.planner_mode == PlannerMode::BackendInContext
            || (matches!(self.planner_mode, PlannerMode::NoDependency | PlannerMode::NoDocuments)
                && self.ablation_prompt_mode == PromptMode::InContext);
        if needs_demos && self.train_path.is_none() {
            return bad("in-context prompting needs train_path");
        }
        if needs_demos && self.demonstrations == 0 {
            return bad("in-context prompting needs demonstrations >= 1");
        }
        Ok(())
    }

    /// Retrieval settings after applying the planner mode.
    pub fn effective_retrieval(&self) -> RetrievalConfig {
        let mut r = self.retrieval.clone();
        if self.planner_mode == PlannerMode::NoDependency {
            r.strategy = Strategy::Independent;
        }
        r
    }
}

/// One sample's trail through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample_id: String,
    pub gold_decision: Option<PlanDecision>,
    pub raw_output: Option<String>,
    pub parsed_decision: Option<PlanDecision>,
    pub normalization_flags: Vec<NormalizationFlag>,
    pub evidence: EvidenceMap<f64>,
    pub retrieval: ScanStats,
    pub rendered_input_or_prompt: Option<String>,
    pub response: Option<String>,
    pub error: Option<String>,
}

impl AuditRecord {
    fn new(sample_id: String) -> Self {
        Self {
            sample_id,
            gold_decision: None,
            raw_output: None,
            parsed_decision: None,
            normalization_flags: Vec::new(),
            evidence: EvidenceMap::new(),
            retrieval: ScanStats::default(),
            rendered_input_or_prompt: None,
            response: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub samples: usize,
    pub errors: usize,
    /// Plan executions against the knowledge stores.
    pub plan_retrievals: usize,
    /// Retrievals run for the gold decision, to score the retriever.
    pub probe_retrievals: usize,
    pub search_calls: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub load_ns: u128,
    pub samples_ns: u128,
    pub report_ns: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub audit: Vec<AuditRecord>,
    /// Absent when every sample failed.
    pub report: Option<EvalReport<f64>>,
    pub counters: RunCounters,
    /// Wall clock; the only field that differs between identical runs.
    pub timings: Timings,
}

/// The planner's answer for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub raw_output: Option<String>,
    pub parsed: ParsedDecision,
}

/// What one context produced: decision, evidence and reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub plan: PlanStep,
    pub evidence: EvidenceMap<f64>,
    pub stats: ScanStats,
    pub assembled: AssembleOutcome,
}

struct SampleResult {
    audit: AuditRecord,
    eval: Option<(SampleEval<f64>, (f64, f64))>,
}

/// Built pipeline components, shareable across worker threads.
pub struct Pipeline {
    cfg: PipelineConfig,
    retrieval: RetrievalConfig,
    planner_backend: Arc<dyn GenerationBackend>,
    backend: Arc<dyn GenerationBackend>,
    judge: Arc<dyn Judge>,
    planner_spec: Option<PlannerPromptSpec>,
    assembler_spec: AssemblerSpec,
    retriever: Retriever<f64>,
    tokenizer: Arc<dyn Tokenizer>,
    plan_retrievals: AtomicUsize,
    probe_retrievals: AtomicUsize,
    search_calls: AtomicUsize,
}

fn strip_dependencies(registry: &SourceRegistry) -> SourceRegistry {
    let specs = registry
        .specs()
        .iter()
        .map(|s| SourceSpec::new(s.id.clone(), s.description.clone(), vec![]))
        .collect();
    SourceRegistry::from_specs(specs).expect("removing edges keeps the registry valid")
}

fn without_documents(registry: &SourceRegistry) -> SourceRegistry {
    let docs = SourceId::documents();
    let specs = registry
        .specs()
        .iter()
        .filter(|s| s.id != docs && !s.depends_on.contains(&docs))
        .cloned()
        .collect();
    SourceRegistry::from_specs(specs).expect("dropping a source and its dependents keeps the registry valid")
}

impl Pipeline {
    /// Build backends and judge from their descriptors.
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let backend = build_backend(&cfg.backend)?;
        let planner_backend = match &cfg.planner_backend {
            Some(d) => build_backend(d)?,
            None => backend.clone(),
        };
        let judge = cfg.judge.build()?;
        Self::with_parts(cfg, planner_backend, backend, judge)
    }

    /// Build with explicitly supplied backends and judge.
    pub fn with_parts(
        cfg: PipelineConfig,
        planner_backend: Arc<dyn GenerationBackend>,
        backend: Arc<dyn GenerationBackend>,
        judge: Arc<dyn Judge>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let train = match &cfg.train_path {
            Some(p) => load_dataset(p)?,
            None => Vec::new(),
        };
        let demos = |n: usize| -> Vec<Demonstration> { select_demonstrations(&train, n, Some(cfg.seed)) };
        let prompt_mode = match cfg.planner_mode {
            PlannerMode::BackendZeroShot => Some(PromptMode::ZeroShot),
            PlannerMode::BackendInContext => Some(PromptMode::InContext),
            PlannerMode::NoDependency | PlannerMode::NoDocuments => Some(cfg.ablation_prompt_mode),
            _ => None,
        };
        let planner_spec = match prompt_mode {
            None => None,
            Some(mode) => {
                let registry = match cfg.planner_mode {
                    PlannerMode::NoDocuments => without_documents(&cfg.registry),
                    _ => cfg.registry.clone(),
                };
                let mut spec = match mode {
                    PromptMode::ZeroShot => PlannerPromptSpec::zero_shot(registry),
                    PromptMode::InContext => {
                        let mut d = demos(cfg.demonstrations);
                        if cfg.planner_mode == PlannerMode::NoDocuments {
                            for demo in &mut d {
                                demo.decision.sources.retain(|s| s.as_str() != DOCUMENTS);
                            }
                        }
                        PlannerPromptSpec::in_context(registry, d)
                    }
                };
                spec.tokens = cfg.special_tokens.clone();
                if let Some(p) = &cfg.planning_template_path {
                    spec = spec.with_template_file(p)?;
                }
                if cfg.planner_mode == PlannerMode::NoDependency {
                    spec.registry = strip_dependencies(&spec.registry);
                }
                spec.validate()?;
                Some(spec)
            }
        };
        let mut assembler_spec = AssemblerSpec::new(cfg.assembler_format);
        assembler_spec.tokens = cfg.special_tokens.clone();
        if cfg.assembler_format == AssemblerFormat::InContext {
            assembler_spec = assembler_spec.with_demonstrations(demos(cfg.demonstrations));
        }
        if let Some(p) = &cfg.assembling_template_path {
            assembler_spec = assembler_spec.with_template_file(p)?;
        }
        assembler_spec.validate()?;
        let retrieval = cfg.effective_retrieval();
        let retriever = Retriever::from_config(&retrieval);
        Ok(Self {
            retrieval,
            planner_backend,
            backend,
            judge,
            planner_spec,
            assembler_spec,
            retriever,
            tokenizer: Arc::new(WhitespaceCjkTokenizer),
            plan_retrievals: AtomicUsize::new(0),
            probe_retrievals: AtomicUsize::new(0),
            search_calls: AtomicUsize::new(0),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Decide which sources to call. `gold` is required in oracle mode.
    pub fn decide(
        &self,
        sample_id: &str,
        context: &DialogueContext,
        gold: Option<&PlanDecision>,
    ) -> Result<PlanStep, PipelineError> {
        let fixed = |d: PlanDecision| PlanStep {
            raw_output: None,
            parsed: ParsedDecision {
                decision: d,
                flags: Vec::new(),
            },
        };
        Ok(match self.cfg.planner_mode {
            PlannerMode::Oracle => fixed(gold.cloned().ok_or_else(|| PipelineError::MissingGold(sample_id.to_owned()))?),
            PlannerMode::AlwaysPersona => fixed(PlanDecision::persona()),
            PlannerMode::AlwaysBoth => fixed(PlanDecision::both()),
            mode => {
                debug_assert!(mode.uses_backend());
                let spec = self.planner_spec.as_ref().expect("backend planner has a prompt spec");
                let out = plan(sample_id, context, self.planner_backend.as_ref(), spec, self.cfg.generation)?;
                let mut parsed = out.parsed;
                if mode == PlannerMode::NoDependency {
                    // The prompt omits the dependency, but calls still have to respect it.
                    let reparsed =
                        crate::planner::parse_decision(&out.raw_output, &self.cfg.registry, &self.cfg.special_tokens);
                    parsed = reparsed;
                }
                PlanStep {
                    raw_output: Some(out.raw_output),
                    parsed,
                }
            }
        })
    }

    fn retrieve(
        &self,
        decision: &PlanDecision,
        context: &DialogueContext,
        record: &DialogueRecord,
        counter: &AtomicUsize,
    ) -> Result<(EvidenceMap<f64>, ScanStats), PipelineError> {
        if decision.is_null() {
            return Ok((EvidenceMap::new(), ScanStats::default()));
        }
        counter.fetch_add(1, Ordering::SeqCst);
        let out = retrieve_plan(
            &decision.sources,
            context,
            record,
            &self.retrieval,
            &self.cfg.registry,
            &self.retriever,
        )?;
        self.search_calls.fetch_add(out.stats.search_calls, Ordering::SeqCst);
        Ok((out.evidence, out.stats))
    }

    /// Plan, retrieve and assemble a reply for `context`.
    pub fn respond(
        &self,
        sample_id: &str,
        context: &DialogueContext,
        record: &DialogueRecord,
        gold: Option<(&PlanDecision, &GroundingLabel)>,
    ) -> Result<TurnOutcome, PipelineError> {
        let plan = self.decide(sample_id, context, gold.map(|g| g.0))?;
        let decision = &plan.parsed.decision;
        let (evidence, stats) = match (self.cfg.evidence_mode, gold) {
            (EvidenceMode::Gold, Some((_, label))) => (gold_evidence(decision, record, label), ScanStats::default()),
            (EvidenceMode::Gold, None) => return Err(PipelineError::MissingGold(sample_id.to_owned())),
            (EvidenceMode::Retrieved, _) => self.retrieve(decision, context, record, &self.plan_retrievals)?,
        };
        let assembled = assemble(
            sample_id,
            context,
            decision,
            &evidence,
            self.backend.as_ref(),
            &self.assembler_spec,
            self.cfg.generation,
        )?;
        Ok(TurnOutcome {
            plan,
            evidence,
            stats,
            assembled,
        })
    }

    fn run_sample(&self, record: &DialogueRecord, turn: usize) -> SampleResult {
        let sample_id = record.sample_id(turn);
        let mut audit = AuditRecord::new(sample_id.clone());
        let result = (|| -> Result<(SampleEval<f64>, (f64, f64)), PipelineError> {
            let label = record.turns[turn]
                .grounding
                .as_ref()
                .ok_or_else(|| PipelineError::MissingGold(sample_id.clone()))?;
            let gold = PlanDecision::new(label.sources.clone());
            audit.gold_decision = Some(gold.clone());
            let context = record.context_before(turn);
            let outcome = self.respond(&sample_id, &context, record, Some((&gold, label)))?;
            audit.raw_output = outcome.plan.raw_output.clone();
            audit.parsed_decision = Some(outcome.plan.parsed.decision.clone());
            audit.normalization_flags = outcome.plan.parsed.flags.clone();
            audit.evidence = outcome.evidence.clone();
            audit.retrieval = outcome.stats;
            audit.rendered_input_or_prompt = Some(outcome.assembled.rendered_input_or_prompt.clone());
            audit.response = Some(outcome.assembled.response.clone());
            let gold_plan_retrieved = match self.cfg.evidence_mode {
                EvidenceMode::Gold => gold_evidence(&gold, record, label),
                EvidenceMode::Retrieved => self.retrieve(&gold, &context, record, &self.probe_retrievals)?.0,
            };
            let knowledge = record.gold_knowledge(label);
            let eval = SampleEval {
                sample_id: sample_id.clone(),
                gold_persona: gold
                    .uses(PERSONA)
                    .then(|| record.gold_persona(label).unwrap_or_default().to_owned()),
                gold_knowledge: gold.uses(DOCUMENTS).then(|| knowledge.join(" ")),
                gold_keys: gold_keys(label),
                gold_decision: gold,
                pred_decision: outcome.plan.parsed.decision,
                retrieved: outcome.evidence,
                gold_plan_retrieved,
                response: outcome.assembled.response,
                reference: record.turns[turn].text.clone(),
            };
            let values = sample_consistency(&eval, self.judge.as_ref())?;
            Ok((eval, values))
        })();
        match result {
            Ok(eval) => SampleResult {
                audit,
                eval: Some(eval),
            },
            Err(e) => {
                audit.error = Some(e.to_string());
                SampleResult { audit, eval: None }
            }
        }
    }

    /// Evaluate every system turn of `records`.
    pub fn evaluate(&self, records: &[DialogueRecord]) -> Result<RunArtifacts, PipelineError> {
        let started = Instant::now();
        let samples: Vec<(usize, usize)> = records
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| rec.system_turns().map(move |t| (r, t)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_in_flight)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let results: Vec<SampleResult> = pool.install(|| {
            samples
                .par_iter()
                .map(|&(r, t)| self.run_sample(&records[r], t))
                .collect()
        });
        let samples_ns = started.elapsed().as_nanos();
        let report_started = Instant::now();
        let mut audit = Vec::with_capacity(results.len());
        let mut evals = Vec::new();
        let mut values = Vec::new();
        for r in results {
            audit.push(r.audit);
            if let Some((e, v)) = r.eval {
                evals.push(e);
                values.push(v);
            }
        }
        let errors = audit.len() - evals.len();
        let report = if evals.is_empty() {
            None
        } else {
            Some(EvalReport::from_values(
                &evals,
                &values,
                errors,
                ReportOptions {
                    tokenizer: self.tokenizer.as_ref(),
                    judge: self.judge.as_ref(),
                    rouge_beta: self.cfg.rouge_beta,
                    merged_pool: self.retrieval.strategy == Strategy::Merged,
                },
            )?)
        };
        Ok(RunArtifacts {
            config: self.cfg.clone(),
            counters: RunCounters {
                samples: audit.len(),
                errors,
                plan_retrievals: self.plan_retrievals.load(Ordering::SeqCst),
                probe_retrievals: self.probe_retrievals.load(Ordering::SeqCst),
                search_calls: self.search_calls.load(Ordering::SeqCst),
            },
            audit,
            report,
            timings: Timings {
                load_ns: 0,
                samples_ns,
                report_ns: report_started.elapsed().as_nanos(),
            },
        })
    }
}

/// Gold items for the sources of `decision` that the label grounds.
pub fn gold_evidence(decision: &PlanDecision, record: &DialogueRecord, label: &GroundingLabel) -> EvidenceMap<f64> {
    let mut out = EvidenceMap::new();
    let item = |source: SourceId, key: ItemKey, text: &str, rank: usize| RetrievedEvidence {
        item: KnowledgeItem::new(source, key, text),
        score: 1.0,
        rank,
    };
    for source in &decision.sources {
        match (source.as_str(), label.persona_index) {
            (PERSONA, Some(p)) if label.uses(PERSONA) => {
                if let Some(text) = record.persona.get(p) {
                    out.insert(source.clone(), vec![item(source.clone(), ItemKey::persona(p), text, 1)]);
                }
            }
            (DOCUMENTS, Some(p)) if label.uses(DOCUMENTS) => {
                let list = label
                    .knowledge_indices
                    .iter()
                    .flatten()
                    .enumerate()
                    .filter_map(|(i, &k)| {
                        record
                            .documents
                            .get(p)
                            .and_then(|d| d.get(k))
                            .map(|t| item(source.clone(), ItemKey::document(p, k), t, i + 1))
                    })
                    .collect();
                out.insert(source.clone(), list);
            }
            _ => {}
        }
    }
    out
}

fn gold_keys(label: &GroundingLabel) -> BTreeMap<SourceId, Vec<ItemKey>> {
    let mut out = BTreeMap::new();
    if let (true, Some(p)) = (label.uses(PERSONA), label.persona_index) {
        out.insert(SourceId::persona(), vec![ItemKey::persona(p)]);
        if let (true, Some(ks)) = (label.uses(DOCUMENTS), &label.knowledge_indices) {
            out.insert(SourceId::documents(), ks.iter().map(|&k| ItemKey::document(p, k)).collect());
        }
    }
    out
}

/// Load the dataset named in `cfg`, build the pipeline and evaluate.
pub fn run_eval(cfg: PipelineConfig) -> Result<RunArtifacts, PipelineError> {
    let started = Instant::now();
    let records = load_dataset(&cfg.dataset_path)?;
    let load_ns = started.elapsed().as_nanos();
    let pipeline = Pipeline::new(cfg)?;
    let mut artifacts = pipeline.evaluate(&records)?;
    artifacts.timings.load_ns = load_ns;
    Ok(artifacts)
}

pub use crate::retrieval::bench::{run_bench, StrategyProfile};

/// Reply of the interactive session to one input line.
#[derive(Debug, Clone, PartialEq)]
pub enum ChatReply {
    Turn(Box<TurnOutcome>),
    History(String),
    Plan(String),
    Error(String),
    Empty,
    Quit,
}

/// Interactive dialogue over one dialogue's persona and documents.
pub struct ChatSession<'a> {
    pipeline: &'a Pipeline,
    record: DialogueRecord,
    context: DialogueContext,
    turns: usize,
    last: Option<PlanStep>,
}

impl<'a> ChatSession<'a> {
    pub fn new(pipeline: &'a Pipeline, record: DialogueRecord) -> Result<Self, PipelineError> {
        if pipeline.cfg.planner_mode == PlannerMode::Oracle || pipeline.cfg.evidence_mode == EvidenceMode::Gold {
            return Err(PipelineError::Config(
                "chat has no gold labels; use a backend or fixed planner mode with retrieved evidence".into(),
            ));
        }
        Ok(Self {
            pipeline,
            record,
            context: DialogueContext::default(),
            turns: 0,
            last: None,
        })
    }

    pub fn context(&self) -> &DialogueContext {
        &self.context
    }

    pub fn handle(&mut self, line: &str) -> ChatReply {
        let line = line.trim();
        match line {
            "" => ChatReply::Empty,
            "/quit" | "/exit" => ChatReply::Quit,
            "/history" => ChatReply::History(self.context.transcript()),
            "/plan" => ChatReply::Plan(match &self.last {
                None => "no turn yet".into(),
                Some(step) => {
                    let flags: Vec<String> = step
                        .parsed
                        .flags
                        .iter()
                        .map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default())
                        .collect();
                    format!(
                        "{}\nflags: {}",
                        serialize_decision(&step.parsed.decision, &self.pipeline.cfg.special_tokens),
                        if flags.is_empty() { "none".to_string() } else { flags.join(", ") }
                    )
                }
            }),
            cmd if cmd.starts_with('/') => ChatReply::Error(format!("unknown command {cmd}; try /history, /plan or /quit")),
            text => {
                let mut context = self.context.clone();
                context.push(Speaker::User, text);
                self.turns += 1;
                let id = format!("chat#{}", self.turns);
                match self.pipeline.respond(&id, &context, &self.record, None) {
                    Ok(outcome) => {
                        context.push(Speaker::System, outcome.assembled.response.clone());
                        self.context = context;
                        self.last = Some(outcome.plan.clone());
                        ChatReply::Turn(Box::new(outcome))
                    }
                    Err(e) => ChatReply::Error(e.to_string()),
                }
            }
        }
    }
}

impl TurnOutcome {
    /// Decision, evidence and response as terminal text.
    pub fn render(&self, toks: &SpecialTokens) -> String {
        let mut out = format!("plan: {}\n", serialize_decision(&self.plan.parsed.decision, toks));
        for (source, list) in &self.evidence {
            for e in list {
                out.push_str(&format!("  {source} #{} [{}] {:.4}: {}\n", e.rank, e.item.key, e.score, e.item.text));
            }
        }
        out.push_str(&format!("System: {}", self.assembled.response));
        out
    }
}
