//! Knowledge sources and the dependency graph that constrains call order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("invalid source id {0:?}: expected a non-empty uppercase token")]
    InvalidId(String),
    #[error("source {0} is already registered")]
    DuplicateSource(SourceId),
    #[error("source {source_id} depends on unregistered source {dependency}")]
    UnknownDependency {
        source_id: SourceId,
        dependency: SourceId,
    },
    #[error("dependency cycle through {0}")]
    CycleDetected(SourceId),
    #[error("unknown source {0}")]
    UnknownSource(SourceId),
}

/// Name of a knowledge source, e.g. `PERSONA`.
///
/// Ids are case-sensitive and restricted to `[A-Z0-9_]` so that they can be
/// emitted verbatim into prompts and serialized plans.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourceId(String);

impl SourceId {
    pub fn new(name: impl Into<String>) -> Result<Self, RegistryError> {
        let name = name.into();
        let valid = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
            && name.chars().any(|c| c.is_ascii_uppercase());
        if valid {
            Ok(Self(name))
        } else {
            Err(RegistryError::InvalidId(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn persona() -> Self {
        Self(PERSONA.to_owned())
    }

    pub fn documents() -> Self {
        Self(DOCUMENTS.to_owned())
    }
}

impl TryFrom<String> for SourceId {
    type Error = RegistryError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SourceId> for String {
    fn from(value: SourceId) -> Self {
        value.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub const PERSONA: &str = "PERSONA";
pub const DOCUMENTS: &str = "DOCUMENTS";

const PERSONA_DESCRIPTION: &str = "This knowledge base stores information related to system personas, such as gender, age, place of origin, hobbies, personality traits, and other relevant data.";
const DOCUMENTS_DESCRIPTION: &str = "This knowledge base stores domain-specific knowledge related to system personas, such as the domain knowledge about the place of origin.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    #[serde(rename = "name")]
    pub id: SourceId,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub depends_on: Vec<SourceId>,
}

impl SourceSpec {
    pub fn new(id: SourceId, description: impl Into<String>, depends_on: Vec<SourceId>) -> Self {
        Self {
            id,
            description: description.into(),
            depends_on,
        }
    }
}

/// Ordered set of sources plus their dependency edges.
///
/// The graph is kept acyclic; registration order is preserved and used as
/// the tie-break whenever a canonical call order has to be chosen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SourceRegistry {
    sources: Vec<SourceSpec>,
}

impl<'de> Deserialize<'de> for SourceRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            sources: Vec<SourceSpec>,
        }
        let raw = Raw::deserialize(deserializer)?;
        SourceRegistry::from_specs(raw.sources).map_err(serde::de::Error::custom)
    }
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The two-source registry used by persona-grounded dialogue data:
    /// `PERSONA`, and `DOCUMENTS` depending on it.
    pub fn persona_documents() -> Self {
        let mut registry = Self::new();
        registry
            .register(SourceSpec::new(SourceId::persona(), PERSONA_DESCRIPTION, vec![]))
            .expect("static registry");
        registry
            .register(SourceSpec::new(
                SourceId::documents(),
                DOCUMENTS_DESCRIPTION,
                vec![SourceId::persona()],
            ))
            .expect("static registry");
        registry
    }

    /// Build a registry from specs given in any order. Dependencies may point
    /// at specs appearing later in the list.
    pub fn from_specs(specs: Vec<SourceSpec>) -> Result<Self, RegistryError> {
        let mut seen = BTreeSet::new();
        for spec in &specs {
            if !seen.insert(spec.id.clone()) {
                return Err(RegistryError::DuplicateSource(spec.id.clone()));
            }
        }
        for spec in &specs {
            for dep in &spec.depends_on {
                if dep == &spec.id {
                    return Err(RegistryError::CycleDetected(spec.id.clone()));
                }
                if !seen.contains(dep) {
                    return Err(RegistryError::UnknownDependency {
                        source_id: spec.id.clone(),
                        dependency: dep.clone(),
                    });
                }
            }
        }
        let registry = Self { sources: specs };
        registry.check_acyclic()?;
        Ok(registry)
    }

    /// Add a source whose dependencies are already registered.
    pub fn register(&mut self, spec: SourceSpec) -> Result<(), RegistryError> {
        if self.contains(&spec.id) {
            return Err(RegistryError::DuplicateSource(spec.id));
        }
        for dep in &spec.depends_on {
            if dep == &spec.id {
                return Err(RegistryError::CycleDetected(spec.id.clone()));
            }
            if !self.contains(dep) {
                return Err(RegistryError::UnknownDependency {
                    source_id: spec.id.clone(),
                    dependency: dep.clone(),
                });
            }
        }
        // Dependencies already exist, so appending cannot close a cycle.
        self.sources.push(spec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn specs(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn ids(&self) -> impl Iterator<Item = &SourceId> {
        self.sources.iter().map(|s| &s.id)
    }

    pub fn contains(&self, id: &SourceId) -> bool {
        self.position(id).is_some()
    }

    pub fn get(&self, id: &SourceId) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| &s.id == id)
    }

    /// Case-insensitive lookup, used when parsing free-form model output.
    pub fn find_ignore_case(&self, name: &str) -> Option<&SourceId> {
        self.ids().find(|id| id.as_str().eq_ignore_ascii_case(name))
    }

    fn position(&self, id: &SourceId) -> Option<usize> {
        self.sources.iter().position(|s| &s.id == id)
    }

    pub fn dependencies(&self, id: &SourceId) -> Result<&[SourceId], RegistryError> {
        self.get(id)
            .map(|s| s.depends_on.as_slice())
            .ok_or_else(|| RegistryError::UnknownSource(id.clone()))
    }

    /// All sources `id` depends on, directly or transitively.
    pub fn transitive_dependencies(&self, id: &SourceId) -> Result<BTreeSet<SourceId>, RegistryError> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<SourceId> = self.dependencies(id)?.to_vec();
        while let Some(dep) = stack.pop() {
            if out.insert(dep.clone()) {
                stack.extend(self.dependencies(&dep)?.iter().cloned());
            }
        }
        Ok(out)
    }

    /// `(dependency, dependent)` pairs in registration order of the dependent.
    pub fn edges(&self) -> Vec<(&SourceId, &SourceId)> {
        self.sources
            .iter()
            .flat_map(|s| s.depends_on.iter().map(move |d| (d, &s.id)))
            .collect()
    }

    /// True iff every source in `order` appears after all of its dependencies.
    pub fn validate_order(&self, order: &[SourceId]) -> Result<bool, RegistryError> {
        for id in order {
            if !self.contains(id) {
                return Err(RegistryError::UnknownSource(id.clone()));
            }
        }
        for (i, id) in order.iter().enumerate() {
            for dep in self.dependencies(id)? {
                if !order[..i].contains(dep) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// True iff every dependency of every member is also a member.
    pub fn is_dependency_closed(&self, set: &[SourceId]) -> Result<bool, RegistryError> {
        for id in set {
            for dep in self.dependencies(id)? {
                if !set.contains(dep) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Order a dependency-closed set so that it passes [`validate_order`].
    ///
    /// Kahn's algorithm; among ready sources the one earliest in `preferred`
    /// wins, so an already valid order is returned unchanged.
    ///
    /// [`validate_order`]: Self::validate_order
    pub fn dependency_order(&self, preferred: &[SourceId]) -> Result<Vec<SourceId>, RegistryError> {
        let mut remaining: Vec<SourceId> = Vec::new();
        for id in preferred {
            if !self.contains(id) {
                return Err(RegistryError::UnknownSource(id.clone()));
            }
            if !remaining.contains(id) {
                remaining.push(id.clone());
            }
        }
        let mut placed: Vec<SourceId> = Vec::with_capacity(remaining.len());
        while !remaining.is_empty() {
            let next = remaining.iter().position(|id| {
                self.dependencies(id)
                    .map(|deps| deps.iter().all(|d| !remaining.contains(d)))
                    .unwrap_or(false)
            });
            match next {
                Some(i) => placed.push(remaining.remove(i)),
                None => return Err(RegistryError::CycleDetected(remaining[0].clone())),
            }
        }
        Ok(placed)
    }

    /// One topological order of the full registry, registration order first.
    pub fn topological_order(&self) -> Vec<SourceId> {
        let all: Vec<SourceId> = self.ids().cloned().collect();
        self.dependency_order(&all).expect("registry is acyclic")
    }

    fn check_acyclic(&self) -> Result<(), RegistryError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let index: HashMap<&SourceId, usize> =
            self.sources.iter().enumerate().map(|(i, s)| (&s.id, i)).collect();
        let mut state = vec![0u8; self.sources.len()];
        for start in 0..self.sources.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (node, ref mut next_edge)) = stack.last_mut() {
                let deps = &self.sources[node].depends_on;
                if *next_edge < deps.len() {
                    let dep = index[&deps[*next_edge]];
                    *next_edge += 1;
                    match state[dep] {
                        0 => {
                            state[dep] = 1;
                            stack.push((dep, 0));
                        }
                        1 => return Err(RegistryError::CycleDetected(self.sources[dep].id.clone())),
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }
}
