//! Link / Conflict / Gap routing, relaxed conflict mining and graph export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::Archive;
use crate::composer::{Assessment, ComposerConfig};
use crate::evaluator::{loo_assessments, sign, sign_match, EvalError, LeaveOneOut};
use crate::representation::FeatureMatrix;

/// Number of nearest ids carried by a Gap outcome.
pub const DEFAULT_GAP_NEIGHBORS: usize = 5;
pub const DEFAULT_RELAX_FACTOR: f64 = 1.5;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("relax factor must be finite and >= 1, got {0}")]
    RelaxFactor(f64),
    #[error("{count} outcomes for target {id:?}")]
    DuplicateTarget { id: String, count: usize },
    #[error("no observed effect for {0:?}")]
    MissingEffect(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("atlas json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RoutingOutcome {
    Link {
        target_id: String,
        source_weights: BTreeMap<String, f64>,
    },
    Conflict {
        target_id: String,
        source_weights: BTreeMap<String, f64>,
        composed_effect: f64,
        observed_effect: f64,
        /// Composable only under a relaxed threshold.
        #[serde(default)]
        relaxed: bool,
    },
    Gap {
        target_id: String,
        rho: f64,
        nearest_ids: Vec<String>,
    },
}

impl RoutingOutcome {
    pub fn target_id(&self) -> &str {
        match self {
            Self::Link { target_id, .. } | Self::Conflict { target_id, .. } | Self::Gap { target_id, .. } => target_id,
        }
    }

    pub fn status(&self) -> NodeStatus {
        match self {
            Self::Link { .. } => NodeStatus::Link,
            Self::Conflict { .. } => NodeStatus::Conflict,
            Self::Gap { .. } => NodeStatus::Gap,
        }
    }

    pub fn is_conflict(&self) -> bool {
        matches!(self, Self::Conflict { .. })
    }

    pub fn source_weights(&self) -> Option<&BTreeMap<String, f64>> {
        match self {
            Self::Link { source_weights, .. } | Self::Conflict { source_weights, .. } => Some(source_weights),
            Self::Gap { .. } => None,
        }
    }
}

/// Routes on the composition's own gate.
pub fn route(assessment: &Assessment, observed: f64, gap_neighbors: usize) -> RoutingOutcome {
    let comp = &assessment.composition;
    if !comp.composable {
        return RoutingOutcome::Gap {
            target_id: comp.target_id.clone(),
            rho: comp.normalized_residual,
            nearest_ids: assessment.neighborhood.nearest(gap_neighbors),
        };
    }
    if sign_match(comp.composed_effect, observed) {
        RoutingOutcome::Link {
            target_id: comp.target_id.clone(),
            source_weights: comp.weights.clone(),
        }
    } else {
        RoutingOutcome::Conflict {
            target_id: comp.target_id.clone(),
            source_weights: comp.weights.clone(),
            composed_effect: comp.composed_effect,
            observed_effect: observed,
            relaxed: false,
        }
    }
}

pub fn route_all(
    archive: &Archive,
    assessments: &[Assessment],
    gap_neighbors: usize,
) -> Result<Vec<RoutingOutcome>, AtlasError> {
    assessments
        .iter()
        .map(|a| {
            let id = &a.composition.target_id;
            let exp = archive.get(id).ok_or_else(|| AtlasError::MissingEffect(id.clone()))?;
            Ok(route(a, exp.effect_size, gap_neighbors))
        })
        .collect()
}

/// Conflicts among existing assessments re-gated at `relax_factor × λ`.
/// Weights and composed effects are reused unchanged.
pub fn mine_conflicts_from(
    archive: &Archive,
    assessments: &[Assessment],
    lambda: f64,
    relax_factor: f64,
) -> Result<Vec<RoutingOutcome>, AtlasError> {
    if !(relax_factor.is_finite() && relax_factor >= 1.0) {
        return Err(AtlasError::RelaxFactor(relax_factor));
    }
    let relaxed_lambda = relax_factor * lambda;
    let mut out = Vec::new();
    for a in assessments {
        let comp = &a.composition;
        let exp = archive
            .get(&comp.target_id)
            .ok_or_else(|| AtlasError::MissingEffect(comp.target_id.clone()))?;
        let rho = comp.normalized_residual;
        if rho <= relaxed_lambda && !sign_match(comp.composed_effect, exp.effect_size) {
            out.push(RoutingOutcome::Conflict {
                target_id: comp.target_id.clone(),
                source_weights: comp.weights.clone(),
                composed_effect: comp.composed_effect,
                observed_effect: exp.effect_size,
                relaxed: rho > lambda,
            });
        }
    }
    Ok(out)
}

pub fn mine_conflicts(
    archive: &Archive,
    features: &FeatureMatrix,
    cfg: &ComposerConfig,
    relax_factor: f64,
) -> Result<Vec<RoutingOutcome>, AtlasError> {
    if !(relax_factor.is_finite() && relax_factor >= 1.0) {
        return Err(AtlasError::RelaxFactor(relax_factor));
    }
    let loo = LeaveOneOut::new(archive, features, *cfg)?;
    let assessments = loo_assessments(archive, &loo)?;
    mine_conflicts_from(archive, &assessments, cfg.lambda, relax_factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Link,
    Conflict,
    Gap,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Link => "link",
            Self::Conflict => "conflict",
            Self::Gap => "gap",
        }
    }

    fn dot_shape(self) -> &'static str {
        match self {
            Self::Link => "box",
            Self::Conflict => "diamond",
            Self::Gap => "ellipse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub sign: i8,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub conflicts: Vec<String>,
}

/// Builds the graph from one outcome per target. Nodes are sorted by id,
/// edges by (dst, src); only strictly positive weights become edges.
pub fn build_graph(outcomes: &[RoutingOutcome], observed: &dyn Fn(&str) -> Option<f64>) -> Result<AtlasGraph, AtlasError> {
    let mut by_id: BTreeMap<&str, &RoutingOutcome> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in outcomes {
        by_id.insert(o.target_id(), o);
        *counts.entry(o.target_id()).or_default() += 1;
    }
    if let Some((id, count)) = counts.into_iter().find(|(_, c)| *c > 1) {
        return Err(AtlasError::DuplicateTarget { id: id.to_string(), count });
    }
    let mut nodes = Vec::with_capacity(by_id.len());
    let mut edges = Vec::new();
    let mut conflicts = Vec::new();
    for (id, o) in &by_id {
        let tau = observed(id).ok_or_else(|| AtlasError::MissingEffect(id.to_string()))?;
        nodes.push(Node {
            id: id.to_string(),
            sign: sign(tau),
            status: o.status(),
        });
        if let Some(weights) = o.source_weights() {
            for (src, w) in weights.iter().filter(|(_, w)| **w > 0.0) {
                edges.push(Edge {
                    src: src.clone(),
                    dst: id.to_string(),
                    weight: *w,
                });
            }
        }
        if o.is_conflict() {
            conflicts.push(id.to_string());
        }
    }
    Ok(AtlasGraph { nodes, edges, conflicts })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl AtlasGraph {
    pub fn to_json(&self) -> Result<String, AtlasError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, AtlasError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Node shape by status: link box, conflict diamond, gap ellipse.
    pub fn to_dot(&self) -> String {
        let known: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut out = String::from("digraph atlas {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let style = if n.status == NodeStatus::Gap { ", style=dashed" } else { "" };
            let _ = writeln!(
                out,
                "  \"{}\" [shape={}, label=\"{} ({:+})\"{}];",
                dot_escape(&n.id),
                n.status.dot_shape(),
                dot_escape(&n.id),
                n.sign,
                style
            );
        }
        let mut extra: BTreeSet<&str> = BTreeSet::new();
        for e in &self.edges {
            if !known.contains(e.src.as_str()) {
                extra.insert(&e.src);
            }
        }
        for id in extra {
            let _ = writeln!(out, "  \"{}\" [shape=plaintext];", dot_escape(id));
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{:.4}\"];",
                dot_escape(&e.src),
                dot_escape(&e.dst),
                e.weight
            );
        }
        out.push_str("}\n");
        out
    }

    /// Writes `atlas.json` and `atlas.dot` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), AtlasError> {
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| AtlasError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        write("atlas.json", self.to_json()?)?;
        write("atlas.dot", self.to_dot())
    }
}

/// Routes, builds the graph, and returns it with the outcomes.
pub fn export_graph(archive: &Archive, outcomes: &[RoutingOutcome]) -> Result<AtlasGraph, AtlasError> {
    build_graph(outcomes, &|id| archive.get(id).map(|e| e.effect_size))
}
