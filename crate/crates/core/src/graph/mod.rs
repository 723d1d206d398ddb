//! Workflow graph data model and structural validation.
//!
//! A [`WorkflowGraph`] is an immutable value: mutators return a new graph
//! and leave the input untouched. Node insertion order is preserved and is
//! the canonical order for serialization and parallel-result fusion.

mod mutate;
mod validate;

pub use mutate::GraphStats;
pub use validate::{resolve_parallel_block, validate_graph, RuleId, ValidationReport, Violation};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

/// Discriminates LLM-backed nodes from tool invocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Basic,
    Tool,
}

/// A single workflow node: either a prompt-configured agent (`Basic`) or a
/// registered tool invocation (`Tool`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node_id: String,
    pub kind: NodeKind,
    pub node_name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_params: Option<BTreeMap<String, serde_json::Value>>,
}

impl NodeSpec {
    pub fn basic(
        node_id: impl Into<String>,
        node_name: impl Into<String>,
        description: impl Into<String>,
        system_prompt: impl Into<String>,
        human_prompt: impl Into<String>,
    ) -> Self {
        NodeSpec {
            node_id: node_id.into(),
            kind: NodeKind::Basic,
            node_name: node_name.into(),
            description: description.into(),
            system_prompt: Some(system_prompt.into()),
            human_prompt: Some(human_prompt.into()),
            tool_name: None,
            tool_params: None,
        }
    }

    pub fn tool(
        node_id: impl Into<String>,
        node_name: impl Into<String>,
        description: impl Into<String>,
        tool_name: impl Into<String>,
        tool_params: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        NodeSpec {
            node_id: node_id.into(),
            kind: NodeKind::Tool,
            node_name: node_name.into(),
            description: description.into(),
            system_prompt: None,
            human_prompt: None,
            tool_name: Some(tool_name.into()),
            tool_params: Some(tool_params),
        }
    }

    /// Field-level invariant problems, empty when the node is well-formed.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.node_id.trim().is_empty() {
            out.push("node_id is empty".into());
        }
        if self.node_name.trim().is_empty() {
            out.push("node_name is empty".into());
        }
        if self.description.trim().is_empty() {
            out.push("description is empty".into());
        }
        match self.kind {
            NodeKind::Basic => {
                if self.system_prompt.as_deref().is_none_or(|s| s.trim().is_empty()) {
                    out.push("basic node requires a non-empty system_prompt".into());
                }
                if self.human_prompt.as_deref().is_none_or(|s| s.trim().is_empty()) {
                    out.push("basic node requires a non-empty human_prompt".into());
                }
                if self.tool_name.is_some() || self.tool_params.is_some() {
                    out.push("basic node must not carry tool fields".into());
                }
            }
            NodeKind::Tool => {
                if self.tool_name.as_deref().is_none_or(|s| s.trim().is_empty()) {
                    out.push("tool node requires a non-empty tool_name".into());
                }
                if self.system_prompt.is_some() || self.human_prompt.is_some() {
                    out.push("tool node must not carry prompt fields".into());
                }
            }
        }
        out
    }
}

/// Edge kinds drive traversal semantics in the execution engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Sequential,
    ConditionalBranch,
    LoopBack,
    ParallelFanOut,
    ParallelFanIn,
}

/// A directed edge. The `(source, target)` pair is unique across all kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u32>,
}

impl EdgeSpec {
    pub fn sequential(source: impl Into<String>, target: impl Into<String>) -> Self {
        EdgeSpec {
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::Sequential,
            condition: None,
            branch_label: None,
            max_iterations: None,
        }
    }

    pub fn conditional(
        source: impl Into<String>,
        target: impl Into<String>,
        branch_label: impl Into<String>,
        condition: impl Into<String>,
    ) -> Self {
        EdgeSpec {
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::ConditionalBranch,
            condition: Some(condition.into()),
            branch_label: Some(branch_label.into()),
            max_iterations: None,
        }
    }

    pub fn loop_back(
        source: impl Into<String>,
        target: impl Into<String>,
        exit_condition: impl Into<String>,
        max_iterations: u32,
    ) -> Self {
        EdgeSpec {
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::LoopBack,
            condition: Some(exit_condition.into()),
            branch_label: None,
            max_iterations: Some(max_iterations),
        }
    }

    pub fn fan_out(source: impl Into<String>, target: impl Into<String>) -> Self {
        EdgeSpec {
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::ParallelFanOut,
            condition: None,
            branch_label: None,
            max_iterations: None,
        }
    }

    pub fn fan_in(source: impl Into<String>, target: impl Into<String>) -> Self {
        EdgeSpec {
            source: source.into(),
            target: target.into(),
            kind: EdgeKind::ParallelFanIn,
            condition: None,
            branch_label: None,
            max_iterations: None,
        }
    }
}

/// The evolving artifact: a directed graph of node specs and typed edges.
///
/// Checkpoint files serialize this struct verbatim; unknown fields are
/// rejected on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowGraph {
    pub graph_id: String,
    pub version: u64,
    pub entry_node: String,
    pub output_node: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

/// Errors from graph mutators. Structural violations found by the full
/// validation pass are reported as [`ValidationReport`] data instead.
#[derive(Debug, Clone, Error)]
pub enum GraphError {
    #[error("duplicate node id: {0}")]
    DuplicateNodeId(String),
    #[error("invalid node spec for {node_id}: {}", problems.join("; "))]
    InvalidNodeSpec { node_id: String, problems: Vec<String> },
    #[error("node not found: {0}")]
    NodeNotFound(String),
    #[error("cannot remove protected node {0} (entry or output)")]
    ProtectedNode(String),
    #[error("removal would leave an invalid graph: {}", report.summary())]
    WouldDisconnect { report: ValidationReport },
    #[error("edge {source_id} -> {target_id} already exists")]
    DuplicateEdge { source_id: String, target_id: String },
    #[error("edge {source_id} -> {target_id} closes a cycle but is not a LoopBack")]
    CycleWithoutLoopBack { source_id: String, target_id: String },
    #[error("unknown node referenced by edge: {0}")]
    UnknownNode(String),
    #[error("edge not found: {source_id} -> {target_id}")]
    EdgeNotFound { source_id: String, target_id: String },
}

impl WorkflowGraph {
    /// Empty graph shell. Callers normally go through [`WorkflowGraph::baseline`]
    /// or deserialization.
    pub fn new(
        graph_id: impl Into<String>,
        entry_node: impl Into<String>,
        output_node: impl Into<String>,
    ) -> Self {
        WorkflowGraph {
            graph_id: graph_id.into(),
            version: 1,
            entry_node: entry_node.into(),
            output_node: output_node.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// The single-node starting workflow: one diagnoser that is both entry
    /// and output.
    pub fn baseline(graph_id: impl Into<String>) -> Self {
        let node = NodeSpec::basic(
            "diagnoser",
            "Diagnoser",
            "Produces a ranked differential diagnosis directly from the case image.",
            "You are an expert clinical diagnostician.",
            "Case image: {{image_ref}}\n\
             Possible diagnoses: {{label_vocabulary}}\n\
             Rank the five most likely diagnoses for this case as a numbered list, \
             most likely first.",
        );
        let mut graph = WorkflowGraph::new(graph_id, "diagnoser", "diagnoser");
        graph.nodes.push(node);
        graph
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn has_node(&self, node_id: &str) -> bool {
        self.node(node_id).is_some()
    }

    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.node_id.as_str()).collect()
    }

    pub fn has_edge(&self, source: &str, target: &str) -> bool {
        self.edges.iter().any(|e| e.source == source && e.target == target)
    }

    pub fn edge(&self, source: &str, target: &str) -> Option<&EdgeSpec> {
        self.edges.iter().find(|e| e.source == source && e.target == target)
    }

    /// Outgoing edges of a node, in edge insertion order.
    pub fn outgoing(&self, node_id: &str) -> Vec<&EdgeSpec> {
        self.edges.iter().filter(|e| e.source == node_id).collect()
    }

    pub fn incoming(&self, node_id: &str) -> Vec<&EdgeSpec> {
        self.edges.iter().filter(|e| e.target == node_id).collect()
    }

    /// All nodes reachable from `start` by directed paths of length >= 0.
    pub fn reachable_from(&self, start: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        if self.has_node(start) {
            seen.insert(start.to_string());
            queue.push_back(start.to_string());
        }
        while let Some(cur) = queue.pop_front() {
            for edge in self.outgoing(&cur) {
                if seen.insert(edge.target.clone()) {
                    queue.push_back(edge.target.clone());
                }
            }
        }
        seen
    }

    /// True when a directed path of length >= 1 leads from `from` to `to`.
    pub fn reaches(&self, from: &str, to: &str) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<String> =
            self.outgoing(from).iter().map(|e| e.target.clone()).collect();
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                return true;
            }
            if seen.insert(cur.clone()) {
                for edge in self.outgoing(&cur) {
                    queue.push_back(edge.target.clone());
                }
            }
        }
        false
    }

    pub fn to_json_string(&self) -> String {
        // Serialization of this type cannot fail.
        serde_json::to_string_pretty(self).expect("graph serialization")
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Structural equality ignoring the version counter.
    pub fn same_structure(&self, other: &WorkflowGraph) -> bool {
        self.graph_id == other.graph_id
            && self.entry_node == other.entry_node
            && self.output_node == other.output_node
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}

/// A resolved parallel block: the fan-out arms and the single fusion node
/// their fan-in edges converge on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelBlock {
    pub source: String,
    pub arms: Vec<String>,
    pub fusion: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_node_spec_problems() {
        let good = NodeSpec::basic("a", "A", "does a", "sys", "hum");
        assert!(good.problems().is_empty());

        let mut empty_prompt = good.clone();
        empty_prompt.system_prompt = Some("  ".into());
        assert_eq!(empty_prompt.problems().len(), 1);

        let mut with_tool = good;
        with_tool.tool_name = Some("x".into());
        assert!(!with_tool.problems().is_empty());
    }

    #[test]
    fn tool_node_spec_problems() {
        let good = NodeSpec::tool("t", "T", "runs t", "image_search", BTreeMap::new());
        assert!(good.problems().is_empty());

        let mut with_prompt = good.clone();
        with_prompt.human_prompt = Some("hi".into());
        assert!(!with_prompt.problems().is_empty());

        let mut no_tool = good;
        no_tool.tool_name = None;
        assert!(!no_tool.problems().is_empty());
    }

    #[test]
    fn checkpoint_round_trip_preserves_structure() {
        let graph = WorkflowGraph::baseline("g");
        let text = graph.to_json_string();
        let back = WorkflowGraph::from_json_str(&text).unwrap();
        assert_eq!(graph, back);
    }

    #[test]
    fn checkpoint_rejects_unknown_fields() {
        let mut value: serde_json::Value =
            serde_json::from_str(&WorkflowGraph::baseline("g").to_json_string()).unwrap();
        value["surprise"] = serde_json::json!(1);
        let err = WorkflowGraph::from_json_str(&value.to_string());
        assert!(err.is_err());
    }

    #[test]
    fn basic_node_omits_tool_fields_in_json() {
        let text = WorkflowGraph::baseline("g").to_json_string();
        assert!(!text.contains("tool_name"));
        assert!(text.contains("system_prompt"));
    }

    #[test]
    fn reachability_follows_direction() {
        let mut g = WorkflowGraph::baseline("g");
        g.nodes.push(NodeSpec::basic("b", "B", "d", "s", "h"));
        g.edges.push(EdgeSpec::sequential("diagnoser", "b"));
        assert!(g.reaches("diagnoser", "b"));
        assert!(!g.reaches("b", "diagnoser"));
        assert!(!g.reaches("diagnoser", "diagnoser"));
    }
}
