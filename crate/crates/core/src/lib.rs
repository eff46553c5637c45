//! Dependency-aware multi-source planning, retrieval and response assembling
//! for knowledge-grounded dialogue, with the matching evaluation metrics.

pub mod backends;
pub mod corpus;
pub mod num;
pub mod registry;
pub mod retrieval;
pub mod text;
pub mod planner;
pub mod assembler;
pub mod metrics;
pub mod pipeline;

pub use assembler::{AssemblerFormat, AssemblerSpec};
pub use corpus::{DialogueContext, DialogueRecord, GroundingLabel};
pub use metrics::{EvalReport, SampleEval};
pub use pipeline::{Pipeline, PipelineConfig, PlannerMode};
pub use planner::{DecisionClass, PlanDecision, SpecialTokens};
pub use registry::{SourceId, SourceRegistry};
pub use retrieval::{RetrievalConfig, Strategy};

pub type Evidence = retrieval::RetrievedEvidence<f64>;
pub type Report = metrics::EvalReport<f64>;
pub type Sample = metrics::SampleEval<f64>;
pub type Bm25 = retrieval::Bm25Index<f64>;
pub type Searcher = retrieval::Retriever<f64>;
