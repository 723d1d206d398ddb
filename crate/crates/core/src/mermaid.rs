//! Deterministic Mermaid flowchart rendering of workflow graphs.
//!
//! The output is byte-stable for a given graph: nodes appear in insertion
//! order, edges sorted by `(source, target, kind)`. Descriptions ride along
//! as `%%` comments so an analyzing model sees them without cluttering the
//! diagram.

use crate::graph::{EdgeKind, EdgeSpec, NodeKind, WorkflowGraph};
use std::collections::BTreeMap;

/// Mermaid flowchart code plus the mapping from original node ids to the
/// sanitized identifiers used in the code.
#[derive(Debug, Clone, PartialEq)]
pub struct MermaidDocument {
    pub code: String,
    pub node_id_map: BTreeMap<String, String>,
}

/// Renders `flowchart TD` code for the graph.
pub fn to_mermaid(graph: &WorkflowGraph) -> MermaidDocument {
    let node_id_map = sanitized_ids(graph);
    let mut lines = vec!["flowchart TD".to_string()];

    for node in &graph.nodes {
        let mermaid_id = &node_id_map[&node.node_id];
        let display = display_text(&node.node_name);
        lines.push(format!("    %% {}: {}", mermaid_id, label_text(&node.description)));
        let shape = match node.kind {
            NodeKind::Basic => format!("{mermaid_id}[\"{display}\"]"),
            NodeKind::Tool => format!("{mermaid_id}[[\"{display}\"]]"),
        };
        lines.push(format!("    {shape}"));
    }

    let mut edges: Vec<&EdgeSpec> = graph.edges.iter().collect();
    edges.sort_by(|a, b| {
        (&a.source, &a.target, a.kind).cmp(&(&b.source, &b.target, b.kind))
    });
    for edge in edges {
        lines.push(format!("    {}", edge_line(edge, &node_id_map)));
    }

    let mut code = lines.join("\n");
    code.push('\n');
    MermaidDocument { code, node_id_map }
}

fn edge_line(edge: &EdgeSpec, ids: &BTreeMap<String, String>) -> String {
    let source = &ids[&edge.source];
    let target = &ids[&edge.target];
    match edge.kind {
        EdgeKind::Sequential => format!("{source} --> {target}"),
        EdgeKind::ConditionalBranch => {
            let label = edge.branch_label.as_deref().unwrap_or("");
            let condition = edge.condition.as_deref().unwrap_or("");
            format!(
                "{source} -->|{}: {}| {target}",
                label_text(label),
                label_text(condition)
            )
        }
        EdgeKind::LoopBack => {
            let condition = edge.condition.as_deref().unwrap_or("");
            let bound = edge.max_iterations.unwrap_or(0);
            format!(
                "{source} -.->|exit: {}, max {bound}| {target}",
                label_text(condition)
            )
        }
        EdgeKind::ParallelFanOut | EdgeKind::ParallelFanIn => {
            format!("{source} -->|parallel| {target}")
        }
    }
}

/// Sanitized Mermaid identifiers: alphanumerics and underscores, collisions
/// disambiguated with a numeric suffix.
fn sanitized_ids(graph: &WorkflowGraph) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for node in &graph.nodes {
        let base: String = node
            .node_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect();
        let base = if base.is_empty() { "node".to_string() } else { base };
        let count = used.entry(base.clone()).or_insert(0);
        *count += 1;
        let sanitized = if *count == 1 { base } else { format!("{base}_{count}") };
        map.insert(node.node_id.clone(), sanitized);
    }
    map
}

fn display_text(text: &str) -> String {
    text.replace('"', "'").replace('\n', " ")
}

fn label_text(text: &str) -> String {
    text.replace('|', "/").replace('\n', " ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeSpec, NodeSpec, WorkflowGraph};

    fn two_node_graph() -> WorkflowGraph {
        let mut g = WorkflowGraph::new("t", "A", "B");
        g.nodes.push(NodeSpec::basic("A", "A name", "first step", "s", "h"));
        g.nodes.push(NodeSpec::basic("B", "B name", "second step", "s", "h"));
        g.edges.push(EdgeSpec::sequential("A", "B"));
        g
    }

    #[test]
    fn sequential_edge_canonical_form() {
        let doc = to_mermaid(&two_node_graph());
        assert!(doc.code.starts_with("flowchart TD\n"));
        assert!(doc.code.contains("A[\"A name\"]"));
        assert!(doc.code.contains("B[\"B name\"]"));
        assert!(doc.code.contains("A --> B"));
    }

    #[test]
    fn sanitizer_replaces_and_disambiguates() {
        let mut g = WorkflowGraph::new("t", "Step 1!", "Step 1?");
        g.nodes.push(NodeSpec::basic("Step 1!", "Step one", "d", "s", "h"));
        g.nodes.push(NodeSpec::basic("Step 1?", "Step one again", "d", "s", "h"));
        g.edges.push(EdgeSpec::sequential("Step 1!", "Step 1?"));
        let doc = to_mermaid(&g);
        assert_eq!(doc.node_id_map["Step 1!"], "Step_1_");
        assert_eq!(doc.node_id_map["Step 1?"], "Step_1__2");
        assert!(doc.code.contains("Step_1_[\"Step one\"]"));
    }

    #[test]
    fn loop_edge_uses_dashed_arrow() {
        let mut g = two_node_graph();
        g.edges.push(EdgeSpec::loop_back("B", "A", "stable output", 3));
        let doc = to_mermaid(&g);
        let dashed: Vec<&str> = doc.code.lines().filter(|l| l.contains("-.->")).collect();
        assert_eq!(dashed, vec!["    B -.->|exit: stable output, max 3| A"]);
    }

    #[test]
    fn determinism_same_graph_same_bytes() {
        let g = two_node_graph();
        assert_eq!(to_mermaid(&g).code, to_mermaid(&g).code);
    }

    #[test]
    fn every_node_and_edge_appears_once() {
        let mut g = two_node_graph();
        g.nodes.push(NodeSpec::tool(
            "search",
            "Reference search",
            "finds similar cases",
            "image_search",
            Default::default(),
        ));
        g.edges.push(EdgeSpec::sequential("B", "search"));
        let doc = to_mermaid(&g);
        assert_eq!(doc.code.matches("search[[\"Reference search\"]]").count(), 1);
        assert_eq!(doc.code.matches(" --> ").count(), 2);
    }
}
