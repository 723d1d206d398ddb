//! Fixture graphs and the flowchart-recovery parser shared by the golden
//! and acceptance test targets.

#![allow(dead_code)]

use evoflow_core::mermaid::to_mermaid;
use evoflow_core::{EdgeSpec, NodeSpec, WorkflowGraph};
use std::collections::BTreeSet;
use std::path::Path;

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

pub fn baseline_graph() -> WorkflowGraph {
    WorkflowGraph::baseline("g")
}

pub fn conditional_graph() -> WorkflowGraph {
    let mut g = WorkflowGraph::new("g", "triage", "diagnoser");
    g.nodes.push(NodeSpec::basic(
        "triage",
        "Quality triage",
        "Routes cases by image quality.",
        "You assess medical image quality.",
        "Is this image clear enough to diagnose? {{image_ref}}",
    ));
    g.nodes.push(NodeSpec::basic(
        "enhance",
        "Detail enhancer",
        "Restates the case with extra visual detail for unclear images.",
        "You describe medical images in detail.",
        "Describe every visible feature of {{image_ref}}.",
    ));
    g.nodes.push(NodeSpec::basic(
        "diagnoser",
        "Diagnoser",
        "Produces a ranked differential diagnosis directly from the case image.",
        "You are an expert clinical diagnostician.",
        "Rank the likely diagnoses for {{image_ref}} from {{label_vocabulary}}.",
    ));
    g.edges.push(EdgeSpec::conditional(
        "triage",
        "enhance",
        "unclear",
        "the image is too blurry to read",
    ));
    g.edges.push(EdgeSpec::conditional(
        "triage",
        "diagnoser",
        "default",
        "image quality is acceptable",
    ));
    g.edges.push(EdgeSpec::sequential("enhance", "diagnoser"));
    g
}

pub fn loop_graph() -> WorkflowGraph {
    let mut g = WorkflowGraph::baseline("g");
    g.nodes.push(NodeSpec::basic(
        "critic",
        "Critic",
        "Reviews the ranking and flags weak reasoning.",
        "You critique diagnostic reasoning.",
        "Critique this ranking: {{diagnoser}}",
    ));
    g.edges.push(EdgeSpec::sequential("diagnoser", "critic"));
    g.edges.push(EdgeSpec::loop_back("critic", "diagnoser", "the critic approves the ranking", 3));
    g
}

pub fn parallel_graph() -> WorkflowGraph {
    let mut g = WorkflowGraph::new("g", "router", "fuse");
    g.nodes.push(NodeSpec::basic(
        "router",
        "Case router",
        "Hands the case to each specialist for independent review.",
        "You present medical cases.",
        "Present the case at {{image_ref}}.",
    ));
    g.nodes.push(NodeSpec::basic(
        "derm",
        "Dermatology specialist",
        "Reviews the case from a dermatology perspective.",
        "You are a dermatologist.",
        "Give your opinion on {{router}}.",
    ));
    g.nodes.push(NodeSpec::basic(
        "path",
        "Pathology specialist",
        "Reviews the case from a pathology perspective.",
        "You are a pathologist.",
        "Give your opinion on {{router}}.",
    ));
    g.nodes.push(NodeSpec::basic(
        "fuse",
        "Fusion",
        "Merges the specialist opinions into one ranking.",
        "You combine expert opinions.",
        "Combine {{derm}} and {{path}} into one ranking.",
    ));
    g.edges.push(EdgeSpec::fan_out("router", "derm"));
    g.edges.push(EdgeSpec::fan_out("router", "path"));
    g.edges.push(EdgeSpec::fan_in("derm", "fuse"));
    g.edges.push(EdgeSpec::fan_in("path", "fuse"));
    g
}

pub fn round_table_graph() -> WorkflowGraph {
    let mut g = WorkflowGraph::baseline("g");
    let expert = |role: &str, round: u32, desc_verb: &str| {
        NodeSpec::basic(
            format!("diagnoser_{role}_r{round}"),
            format!("{}{} (round {round})", role[..1].to_uppercase(), &role[1..]),
            format!("Round {round} {role}: {desc_verb}."),
            format!("You are a {role} in a multi-expert case discussion."),
            "Case: {{image_ref}}".to_string(),
        )
    };
    g.nodes.push(expert("dermatologist", 1, "gives an independent initial diagnosis"));
    g.nodes.push(expert("radiologist", 1, "gives an independent initial diagnosis"));
    g.nodes.push(expert("dermatologist", 2, "refines the discussion seeing all prior opinions"));
    g.nodes.push(expert("radiologist", 2, "refines the discussion seeing all prior opinions"));
    g.nodes.push(NodeSpec::basic(
        "diagnoser_aggregator",
        "Aggregator",
        "Merges all expert opinions into one final ranking.",
        "You aggregate expert opinions.",
        "Produce the final ranking.",
    ));
    g.output_node = "diagnoser_aggregator".to_string();
    g.edges.push(EdgeSpec::fan_out("diagnoser", "diagnoser_dermatologist_r1"));
    g.edges.push(EdgeSpec::fan_out("diagnoser", "diagnoser_radiologist_r1"));
    g.edges.push(EdgeSpec::fan_in("diagnoser_dermatologist_r1", "diagnoser_dermatologist_r2"));
    g.edges.push(EdgeSpec::fan_in("diagnoser_radiologist_r1", "diagnoser_dermatologist_r2"));
    g.edges.push(EdgeSpec::sequential("diagnoser_dermatologist_r2", "diagnoser_radiologist_r2"));
    g.edges.push(EdgeSpec::sequential("diagnoser_radiologist_r2", "diagnoser_aggregator"));
    g
}

/// Pulls `(nodes, edge pairs)` back out of flowchart code.
pub fn parse_flowchart(code: &str) -> (BTreeSet<String>, Vec<(String, String)>) {
    let mut nodes = BTreeSet::new();
    let mut edges = Vec::new();
    for line in code.lines().skip(1) {
        let line = line.trim();
        if line.is_empty() || line.starts_with("%%") {
            continue;
        }
        if let Some((source, rest)) = line.split_once(" --> ").or_else(|| {
            line.split_once(" -->|")
                .or_else(|| line.split_once(" -.->|"))
                .map(|(s, r)| (s, r.split_once("| ").expect("label close").1))
        }) {
            edges.push((source.to_string(), rest.to_string()));
        } else {
            let id = line.split('[').next().expect("node id");
            assert!(line.ends_with("\"]") || line.ends_with("\"]]"), "node line: {line}");
            nodes.insert(id.to_string());
        }
    }
    edges.sort();
    (nodes, edges)
}

/// Byte-compares the rendered flowchart against a committed golden file,
/// then recovers the node set and edge multiset from the rendered code.
pub fn assert_golden(graph: &WorkflowGraph, file: &str) {
    let doc = to_mermaid(graph);
    let expected = golden(file);
    assert_eq!(doc.code, expected, "rendered Mermaid differs from {file}");

    let (nodes, mut edges) = parse_flowchart(&doc.code);
    let expected_nodes: BTreeSet<String> = doc.node_id_map.values().cloned().collect();
    assert_eq!(nodes, expected_nodes, "recovered node set for {file}");

    let mut expected_edges: Vec<(String, String)> = graph
        .edges
        .iter()
        .map(|e| (doc.node_id_map[&e.source].clone(), doc.node_id_map[&e.target].clone()))
        .collect();
    expected_edges.sort();
    edges.sort();
    assert_eq!(edges, expected_edges, "recovered edge multiset for {file}");
}
