//! Response assembling: the serialized generator input, the assembling
//! prompt, and the generation call.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationBackend, GenerationParams, GenerationRequest};
use crate::corpus::DialogueContext;
use crate::num::Scalar;
use crate::planner::{serialize_decision, Demonstration, PlanDecision, SpecialTokens};
use crate::registry::SourceId;
use crate::retrieval::EvidenceMap;

pub const ASSEMBLING_TEMPLATE_EN: &str = include_str!("../templates/assembling_en.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblerError {
    #[error("evidence for {0} which the decision does not use")]
    EvidenceWithoutSource(SourceId),
    #[error("{sample_id}: backend returned an empty response")]
    EmptyResponse { sample_id: String },
    #[error("{sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput<T> {
    pub context: DialogueContext,
    pub decision: PlanDecision,
    pub evidence: EvidenceMap<T>,
    pub rendered: String,
}

fn check_sources<T>(decision: &PlanDecision, evidence: &EvidenceMap<T>) -> Result<(), AssemblerError> {
    for source in evidence.keys() {
        if !decision.sources.contains(source) {
            return Err(AssemblerError::EvidenceWithoutSource(source.clone()));
        }
    }
    Ok(())
}

/// Evidence texts in decision order, each source's list in rank order.
fn ordered_texts<'a, T>(decision: &'a PlanDecision, evidence: &'a EvidenceMap<T>) -> Vec<(&'a SourceId, &'a str)> {
    decision
        .sources
        .iter()
        .filter_map(|s| evidence.get(s).map(|list| (s, list)))
        .flat_map(|(s, list)| list.iter().map(move |e| (s, e.item.text.as_str())))
        .collect()
}

/// `transcript [SOURCE] .. [EOS] [MIDDLE] k1; k2 [EOM]`, with `NULL` between
/// the middle markers when there is no evidence. Dialogue and evidence text
/// are escaped so the markers occur only where placed here.
pub fn render_input<T: Scalar>(
    context: &DialogueContext,
    decision: &PlanDecision,
    evidence: &EvidenceMap<T>,
    toks: &SpecialTokens,
) -> Result<AssembledInput<T>, AssemblerError> {
    check_sources(decision, evidence)?;
    let texts: Vec<String> = ordered_texts(decision, evidence)
        .into_iter()
        .map(|(_, t)| toks.escape(t))
        .collect();
    let middle = if texts.is_empty() {
        toks.null_token.clone()
    } else {
        texts.join("; ")
    };
    let rendered = format!(
        "{} {} {} {} {}",
        toks.escape(&context.transcript()),
        serialize_decision(decision, toks),
        toks.middle_open,
        middle,
        toks.middle_close
    );
    Ok(AssembledInput {
        context: context.clone(),
        decision: decision.clone(),
        evidence: evidence.clone(),
        rendered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssemblerFormat {
    /// The compact serialized input of a fine-tuned generator.
    #[serde(rename = "SERIALIZED_INPUT")]
    SerializedInput,
    #[serde(rename = "ZERO_SHOT")]
    ZeroShot,
    #[serde(rename = "IN_CONTEXT")]
    InContext,
}

#[derive(Debug, Clone)]
pub struct AssemblerSpec {
    pub format: AssemblerFormat,
    pub demonstrations: Vec<Demonstration>,
    pub template: String,
    pub tokens: SpecialTokens,
}

impl AssemblerSpec {
    pub fn new(format: AssemblerFormat) -> Self {
        Self {
            format,
            demonstrations: Vec::new(),
            template: ASSEMBLING_TEMPLATE_EN.to_owned(),
            tokens: SpecialTokens::default(),
        }
    }

    pub fn with_demonstrations(mut self, demonstrations: Vec<Demonstration>) -> Self {
        self.demonstrations = demonstrations;
        self
    }

    pub fn with_template_file(mut self, path: &Path) -> Result<Self, AssemblerError> {
        self.template = std::fs::read_to_string(path)
            .map_err(|e| AssemblerError::Template(format!("{}: {e}", path.display())))?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), AssemblerError> {
        for ph in ["{DIALOGUE}", "{MIDDLE_RESULTS}"] {
            if !self.template.contains(ph) {
                return Err(AssemblerError::Template(format!("assembling template lacks {ph}")));
            }
        }
        Ok(())
    }
}

fn fill_assembling(template: &str, transcript: &str, lines: &[String]) -> String {
    let middle = if lines.is_empty() {
        "NULL".to_owned()
    } else {
        lines.join("\n")
    };
    template.replace("{DIALOGUE}", transcript).replace("{MIDDLE_RESULTS}", &middle)
}

/// Render the assembling prompt: the dialogue, then one `SOURCE: text` line
/// per evidence item in decision order (or `NULL`). In-context mode prepends
/// each demonstration as a filled prompt followed by its reference reply.
pub fn build_assembling_prompt<T>(
    context: &DialogueContext,
    decision: &PlanDecision,
    evidence: &EvidenceMap<T>,
    spec: &AssemblerSpec,
) -> Result<String, AssemblerError> {
    spec.validate()?;
    check_sources(decision, evidence)?;
    let lines: Vec<String> = ordered_texts(decision, evidence)
        .into_iter()
        .map(|(s, t)| format!("{s}: {t}"))
        .collect();
    let live = fill_assembling(&spec.template, &context.transcript(), &lines);
    if spec.format != AssemblerFormat::InContext {
        return Ok(live);
    }
    let mut blocks: Vec<String> = spec
        .demonstrations
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let lines: Vec<String> = d.evidence.iter().map(|(s, t)| format!("{s}: {t}")).collect();
            format!(
                "Demonstration {}:\n{} {}",
                i + 1,
                fill_assembling(&spec.template, &d.context.transcript(), &lines).trim_end(),
                d.response
            )
        })
        .collect();
    blocks.push(live);
    Ok(blocks.join("\n\n"))
}

/// What was sent to the generator and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembleOutcome {
    pub rendered_input_or_prompt: String,
    pub response: String,
}

/// Build the generator input in the configured format and generate the reply.
pub fn assemble<T: Scalar>(
    sample_id: &str,
    context: &DialogueContext,
    decision: &PlanDecision,
    evidence: &EvidenceMap<T>,
    backend: &dyn GenerationBackend,
    spec: &AssemblerSpec,
    params: GenerationParams,
) -> Result<AssembleOutcome, AssemblerError> {
    let input = match spec.format {
        AssemblerFormat::SerializedInput => render_input(context, decision, evidence, &spec.tokens)?.rendered,
        _ => build_assembling_prompt(context, decision, evidence, spec)?,
    };
    let response = backend
        .generate(&GenerationRequest::with_params(input.clone(), params))
        .map_err(|source| AssemblerError::Backend {
            sample_id: sample_id.to_owned(),
            source,
        })?;
    if response.trim().is_empty() {
        return Err(AssemblerError::EmptyResponse {
            sample_id: sample_id.to_owned(),
        });
    }
    Ok(AssembleOutcome {
        rendered_input_or_prompt: input,
        response,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EchoBackend, EchoTransform, ScriptedBackend};
    use crate::corpus::Speaker;
    use crate::planner::parse_decision;
    use crate::registry::SourceRegistry;
    use crate::retrieval::{ItemKey, KnowledgeItem, RetrievedEvidence};

    fn ctx() -> DialogueContext {
        let mut c = DialogueContext::default();
        c.push(Speaker::User, "What do you like to eat?");
        c
    }

    fn ev(source: SourceId, texts: &[&str]) -> Vec<RetrievedEvidence<f64>> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| RetrievedEvidence {
                item: KnowledgeItem::new(source.clone(), ItemKey::persona(i), *t),
                score: 1.0,
                rank: i + 1,
            })
            .collect()
    }

    fn persona_evidence() -> EvidenceMap<f64> {
        EvidenceMap::from([(SourceId::persona(), ev(SourceId::persona(), &["I am a vegetarian"]))])
    }

    #[test]
    fn render_persona() {
        let a = render_input(&ctx(), &PlanDecision::persona(), &persona_evidence(), &SpecialTokens::default()).unwrap();
        assert_eq!(
            a.rendered,
            "User: What do you like to eat? [SOURCE] PERSONA [EOS] [MIDDLE] I am a vegetarian [EOM]"
        );
    }

    #[test]
    fn render_null() {
        let a = render_input::<f64>(&ctx(), &PlanDecision::null(), &EvidenceMap::new(), &SpecialTokens::default())
            .unwrap();
        assert!(a.rendered.ends_with("[SOURCE] NULL [EOS] [MIDDLE] NULL [EOM]"));
    }

    #[test]
    fn render_rejects_foreign_evidence() {
        let err = render_input(&ctx(), &PlanDecision::null(), &persona_evidence(), &SpecialTokens::default())
            .unwrap_err();
        assert_eq!(err, AssemblerError::EvidenceWithoutSource(SourceId::persona()));
    }

    #[test]
    fn render_orders_by_decision_and_parses_back() {
        let mut e = persona_evidence();
        e.insert(SourceId::documents(), ev(SourceId::documents(), &["Vegetarians eat [EOM] fruit", "NULL"]));
        let toks = SpecialTokens::default();
        let a = render_input(&ctx(), &PlanDecision::both(), &e, &toks).unwrap();
        assert!(a.rendered.ends_with("[MIDDLE] I am a vegetarian; Vegetarians eat [\\EOM] fruit; N\\ULL [EOM]"));
        let back = parse_decision(&a.rendered, &SourceRegistry::persona_documents(), &toks);
        assert_eq!(back.decision, PlanDecision::both());
    }

    #[test]
    fn prompt_null_slot_and_order() {
        let spec = AssemblerSpec::new(AssemblerFormat::ZeroShot);
        let p = build_assembling_prompt::<f64>(&ctx(), &PlanDecision::null(), &EvidenceMap::new(), &spec).unwrap();
        assert!(p.contains("knowledge bases:\nNULL\n"));
        let mut e = persona_evidence();
        e.insert(SourceId::documents(), ev(SourceId::documents(), &["Vegetarians eat fruit"]));
        let p = build_assembling_prompt(&ctx(), &PlanDecision::both(), &e, &spec).unwrap();
        let pi = p.find("PERSONA: I am a vegetarian").unwrap();
        let di = p.find("DOCUMENTS: Vegetarians eat fruit").unwrap();
        assert!(pi < di);
    }

    #[test]
    fn prompt_in_context_demos_first() {
        let demo = Demonstration {
            context: ctx(),
            decision: PlanDecision::persona(),
            response: "I only eat vegetables.".into(),
            evidence: vec![(SourceId::persona(), "I am a vegetarian".into())],
        };
        let spec = AssemblerSpec::new(AssemblerFormat::InContext).with_demonstrations(vec![demo; 3]);
        let p = build_assembling_prompt::<f64>(&ctx(), &PlanDecision::null(), &EvidenceMap::new(), &spec).unwrap();
        assert_eq!(p.matches("Demonstration ").count(), 3);
        assert_eq!(p.matches("System: I only eat vegetables.").count(), 3);
        assert!(p.ends_with("System:\n"));
    }

    #[test]
    fn assemble_with_echo_and_empty() {
        let spec = AssemblerSpec::new(AssemblerFormat::SerializedInput);
        let echo = EchoBackend::new(EchoTransform::FirstEvidence);
        let out = assemble("s", &ctx(), &PlanDecision::persona(), &persona_evidence(), &echo, &spec, GenerationParams::default())
            .unwrap();
        assert_eq!(out.response, "I am a vegetarian");
        let blank = ScriptedBackend::new([("User:", "  ")]).unwrap();
        let err = assemble("s", &ctx(), &PlanDecision::persona(), &persona_evidence(), &blank, &spec, GenerationParams::default())
            .unwrap_err();
        assert!(matches!(err, AssemblerError::EmptyResponse { .. }));
    }
}
