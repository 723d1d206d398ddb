//! Structural validation. `validate_graph` runs every rule and reports all
//! violations; it never stops at the first finding and never mutates.

use super::{EdgeKind, ParallelBlock, WorkflowGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

/// Stable identifiers for validation rules, used in reports and rejection
/// records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleId {
    NodeSpecInvalid,
    DuplicateNodeId,
    EntryNodeUnknown,
    OutputNodeUnknown,
    UnknownEdgeEndpoint,
    DuplicateEdge,
    MissingBranchFields,
    MissingExitCondition,
    InvalidLoopBound,
    MisplacedEdgeFields,
    EntryHasIncoming,
    MultipleSequentialOut,
    MixedOutgoing,
    NoDefaultBranch,
    DuplicateBranchLabel,
    UnreachableNode,
    OutputNotReachable,
    CycleWithoutExit,
    CycleMultipleLoopbacks,
    LoopbackWithoutCycle,
    UnmatchedFanOut,
    ParallelFusionConflict,
    UnmatchedFanIn,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(text.trim_matches('"'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: RuleId,
    pub message: String,
    pub offending: Vec<String>,
}

impl Violation {
    fn new(rule_id: RuleId, message: impl Into<String>, offending: Vec<String>) -> Self {
        Violation { rule_id, message: message.into(), offending }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        ValidationReport { ok: violations.is_empty(), violations }
    }

    pub fn has_rule(&self, rule_id: RuleId) -> bool {
        self.violations.iter().any(|v| v.rule_id == rule_id)
    }

    pub fn summary(&self) -> String {
        if self.ok {
            "ok".to_string()
        } else {
            self.violations
                .iter()
                .map(|v| format!("{}: {}", v.rule_id, v.message))
                .collect::<Vec<_>>()
                .join("; ")
        }
    }
}

/// Upper bound on enumerated simple cycles. Past this the pass falls back to
/// the acyclicity check on the graph minus LoopBack edges.
const MAX_CYCLES: usize = 10_000;

/// Runs every structural rule and returns the full violation list.
pub fn validate_graph(graph: &WorkflowGraph) -> ValidationReport {
    let mut violations = Vec::new();

    check_node_specs(graph, &mut violations);
    check_edge_fields(graph, &mut violations);
    let ids_resolve = check_id_resolution(graph, &mut violations);

    // Topology passes need resolvable ids to mean anything.
    if ids_resolve {
        check_outgoing_coherence(graph, &mut violations);
        check_entry_incoming(graph, &mut violations);
        check_reachability(graph, &mut violations);
        check_cycles(graph, &mut violations);
        check_parallel_blocks(graph, &mut violations);
    }

    ValidationReport::from_violations(violations)
}

fn check_node_specs(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for node in &graph.nodes {
        let problems = node.problems();
        if !problems.is_empty() {
            out.push(Violation::new(
                RuleId::NodeSpecInvalid,
                format!("node {}: {}", node.node_id, problems.join("; ")),
                vec![node.node_id.clone()],
            ));
        }
        if !seen.insert(node.node_id.clone()) {
            out.push(Violation::new(
                RuleId::DuplicateNodeId,
                format!("node id {} appears more than once", node.node_id),
                vec![node.node_id.clone()],
            ));
        }
    }
}

fn check_edge_fields(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    let mut seen_pairs = BTreeSet::new();
    for edge in &graph.edges {
        let pair = format!("{} -> {}", edge.source, edge.target);
        if !seen_pairs.insert(pair.clone()) {
            out.push(Violation::new(
                RuleId::DuplicateEdge,
                format!("edge {pair} appears more than once"),
                vec![pair.clone()],
            ));
        }

        let has_condition = edge.condition.as_deref().is_some_and(|c| !c.trim().is_empty());
        let has_label = edge.branch_label.as_deref().is_some_and(|l| !l.trim().is_empty());
        match edge.kind {
            EdgeKind::ConditionalBranch => {
                if !has_condition || !has_label {
                    out.push(Violation::new(
                        RuleId::MissingBranchFields,
                        format!("conditional edge {pair} requires condition and branch_label"),
                        vec![pair.clone()],
                    ));
                }
                if edge.max_iterations.is_some() {
                    out.push(Violation::new(
                        RuleId::MisplacedEdgeFields,
                        format!("conditional edge {pair} must not carry max_iterations"),
                        vec![pair.clone()],
                    ));
                }
            }
            EdgeKind::LoopBack => {
                if !has_condition {
                    out.push(Violation::new(
                        RuleId::MissingExitCondition,
                        format!("loop-back edge {pair} requires an exit condition"),
                        vec![pair.clone()],
                    ));
                }
                match edge.max_iterations {
                    None | Some(0) => out.push(Violation::new(
                        RuleId::InvalidLoopBound,
                        format!("loop-back edge {pair} requires max_iterations >= 1"),
                        vec![pair.clone()],
                    )),
                    Some(_) => {}
                }
                if has_label {
                    out.push(Violation::new(
                        RuleId::MisplacedEdgeFields,
                        format!("loop-back edge {pair} must not carry branch_label"),
                        vec![pair.clone()],
                    ));
                }
            }
            EdgeKind::Sequential | EdgeKind::ParallelFanOut | EdgeKind::ParallelFanIn => {
                if has_condition || has_label || edge.max_iterations.is_some() {
                    out.push(Violation::new(
                        RuleId::MisplacedEdgeFields,
                        format!("{:?} edge {pair} must not carry branch or loop fields", edge.kind),
                        vec![pair.clone()],
                    ));
                }
            }
        }
    }
}

/// Returns true when entry, output, and all edge endpoints name known nodes.
fn check_id_resolution(graph: &WorkflowGraph, out: &mut Vec<Violation>) -> bool {
    let ids: BTreeSet<&str> = graph.nodes.iter().map(|n| n.node_id.as_str()).collect();
    let mut ok = true;

    if !ids.contains(graph.entry_node.as_str()) {
        out.push(Violation::new(
            RuleId::EntryNodeUnknown,
            format!("entry_node {} is not a node", graph.entry_node),
            vec![graph.entry_node.clone()],
        ));
        ok = false;
    }
    if !ids.contains(graph.output_node.as_str()) {
        out.push(Violation::new(
            RuleId::OutputNodeUnknown,
            format!("output_node {} is not a node", graph.output_node),
            vec![graph.output_node.clone()],
        ));
        ok = false;
    }
    for edge in &graph.edges {
        for endpoint in [&edge.source, &edge.target] {
            if !ids.contains(endpoint.as_str()) {
                out.push(Violation::new(
                    RuleId::UnknownEdgeEndpoint,
                    format!("edge {} -> {} references unknown node {}", edge.source, edge.target, endpoint),
                    vec![endpoint.clone()],
                ));
                ok = false;
            }
        }
    }
    ok
}

/// Per-node outgoing edge sets must describe one unambiguous continuation:
/// at most one Sequential, or a conditional group, or a parallel fan-out, or
/// a single fan-in, or one LoopBack optionally paired with one Sequential.
fn check_outgoing_coherence(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    for node in &graph.nodes {
        let outgoing = graph.outgoing(&node.node_id);
        if outgoing.is_empty() {
            continue;
        }
        let count = |kind: EdgeKind| outgoing.iter().filter(|e| e.kind == kind).count();
        let seq = count(EdgeKind::Sequential);
        let branch = count(EdgeKind::ConditionalBranch);
        let loopback = count(EdgeKind::LoopBack);
        let fan_out = count(EdgeKind::ParallelFanOut);
        let fan_in = count(EdgeKind::ParallelFanIn);

        if seq > 1 {
            out.push(Violation::new(
                RuleId::MultipleSequentialOut,
                format!("node {} has {seq} outgoing Sequential edges", node.node_id),
                vec![node.node_id.clone()],
            ));
        }

        let coherent = (branch > 0 && seq + loopback + fan_out + fan_in == 0)
            || (fan_out > 0 && seq + branch + loopback + fan_in == 0)
            || (fan_in == 1 && seq + branch + loopback + fan_out == 0)
            || (loopback == 1 && branch + fan_out + fan_in == 0 && seq <= 1)
            || (seq <= 1 && branch + loopback + fan_out + fan_in == 0);
        if !coherent {
            out.push(Violation::new(
                RuleId::MixedOutgoing,
                format!(
                    "node {} mixes outgoing edge kinds ({seq} sequential, {branch} branch, \
                     {loopback} loop-back, {fan_out} fan-out, {fan_in} fan-in)",
                    node.node_id
                ),
                vec![node.node_id.clone()],
            ));
        }

        if branch > 0 {
            let mut labels = BTreeMap::new();
            for edge in outgoing.iter().filter(|e| e.kind == EdgeKind::ConditionalBranch) {
                if let Some(label) = edge.branch_label.as_deref() {
                    *labels.entry(label.to_string()).or_insert(0usize) += 1;
                }
            }
            for (label, n) in &labels {
                if *n > 1 {
                    out.push(Violation::new(
                        RuleId::DuplicateBranchLabel,
                        format!("node {} has {n} branches labeled {label}", node.node_id),
                        vec![node.node_id.clone()],
                    ));
                }
            }
            if !labels.contains_key("default") {
                out.push(Violation::new(
                    RuleId::NoDefaultBranch,
                    format!("conditional at node {} has no \"default\" branch", node.node_id),
                    vec![node.node_id.clone()],
                ));
            }
        }
    }
}

fn check_entry_incoming(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    for edge in graph.incoming(&graph.entry_node) {
        if matches!(edge.kind, EdgeKind::Sequential | EdgeKind::ConditionalBranch) {
            out.push(Violation::new(
                RuleId::EntryHasIncoming,
                format!(
                    "entry node {} has incoming {:?} edge from {}",
                    graph.entry_node, edge.kind, edge.source
                ),
                vec![edge.source.clone()],
            ));
        }
    }
}

fn check_reachability(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    let reachable = graph.reachable_from(&graph.entry_node);
    for node in &graph.nodes {
        if !reachable.contains(&node.node_id) {
            out.push(Violation::new(
                RuleId::UnreachableNode,
                format!("node {} is not reachable from the entry node", node.node_id),
                vec![node.node_id.clone()],
            ));
        }
    }

    // The output must stay reachable from every node that still continues.
    for node in &graph.nodes {
        if graph.outgoing(&node.node_id).is_empty() {
            continue;
        }
        if node.node_id != graph.output_node && !graph.reaches(&node.node_id, &graph.output_node) {
            out.push(Violation::new(
                RuleId::OutputNotReachable,
                format!("output node is unreachable from non-terminal node {}", node.node_id),
                vec![node.node_id.clone()],
            ));
        }
    }
}

/// Enumerates simple cycles (each exactly once) and checks the one-LoopBack
/// rule. LoopBack edges must also actually close a cycle.
fn check_cycles(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    let cycles = enumerate_simple_cycles(graph, MAX_CYCLES);
    match cycles {
        Some(cycles) => {
            for cycle in &cycles {
                let loopbacks = cycle_loopback_count(graph, cycle);
                let path = cycle.join(" -> ");
                if loopbacks == 0 {
                    out.push(Violation::new(
                        RuleId::CycleWithoutExit,
                        format!("cycle [{path}] contains no LoopBack edge"),
                        cycle.clone(),
                    ));
                } else if loopbacks > 1 {
                    out.push(Violation::new(
                        RuleId::CycleMultipleLoopbacks,
                        format!("cycle [{path}] contains {loopbacks} LoopBack edges"),
                        cycle.clone(),
                    ));
                }
            }
        }
        None => {
            // Fallback for pathological graphs: at least guarantee that the
            // graph minus LoopBack edges is acyclic.
            if has_cycle_without_loopback_edges(graph) {
                out.push(Violation::new(
                    RuleId::CycleWithoutExit,
                    "graph minus LoopBack edges is cyclic (cycle enumeration capped)".to_string(),
                    Vec::new(),
                ));
            }
        }
    }

    for edge in graph.edges.iter().filter(|e| e.kind == EdgeKind::LoopBack) {
        let closes = edge.source == edge.target || graph.reaches(&edge.target, &edge.source);
        if !closes {
            out.push(Violation::new(
                RuleId::LoopbackWithoutCycle,
                format!("LoopBack edge {} -> {} does not close a cycle", edge.source, edge.target),
                vec![format!("{} -> {}", edge.source, edge.target)],
            ));
        }
    }
}

/// Simple-cycle enumeration: DFS anchored per start node, visiting only
/// nodes at or after the anchor in insertion order so each cycle is found
/// exactly once. Returns None when the cap is exceeded.
fn enumerate_simple_cycles(graph: &WorkflowGraph, cap: usize) -> Option<Vec<Vec<String>>> {
    let order: BTreeMap<&str, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();
    let mut cycles = Vec::new();

    for start in graph.nodes.iter().map(|n| n.node_id.as_str()) {
        let start_rank = order[start];
        let mut path = vec![start.to_string()];
        let mut on_path: BTreeSet<String> = path.iter().cloned().collect();
        if !dfs_cycles(graph, &order, start, start_rank, &mut path, &mut on_path, &mut cycles, cap) {
            return None;
        }
    }
    Some(cycles)
}

#[allow(clippy::too_many_arguments)]
fn dfs_cycles(
    graph: &WorkflowGraph,
    order: &BTreeMap<&str, usize>,
    start: &str,
    start_rank: usize,
    path: &mut Vec<String>,
    on_path: &mut BTreeSet<String>,
    cycles: &mut Vec<Vec<String>>,
    cap: usize,
) -> bool {
    let current = path.last().expect("non-empty path").clone();
    for edge in graph.outgoing(&current) {
        let next = edge.target.as_str();
        let Some(&rank) = order.get(next) else { continue };
        if rank < start_rank {
            continue;
        }
        if next == start {
            cycles.push(path.clone());
            if cycles.len() > cap {
                return false;
            }
            continue;
        }
        if on_path.contains(next) {
            continue;
        }
        path.push(next.to_string());
        on_path.insert(next.to_string());
        let ok = dfs_cycles(graph, order, start, start_rank, path, on_path, cycles, cap);
        on_path.remove(next);
        path.pop();
        if !ok {
            return false;
        }
    }
    true
}

fn cycle_loopback_count(graph: &WorkflowGraph, cycle: &[String]) -> usize {
    let mut count = 0;
    for i in 0..cycle.len() {
        let source = &cycle[i];
        let target = &cycle[(i + 1) % cycle.len()];
        if let Some(edge) = graph.edge(source, target) {
            if edge.kind == EdgeKind::LoopBack {
                count += 1;
            }
        }
    }
    count
}

fn has_cycle_without_loopback_edges(graph: &WorkflowGraph) -> bool {
    // Kahn's algorithm over the graph minus LoopBack edges.
    let mut indegree: BTreeMap<&str, usize> =
        graph.nodes.iter().map(|n| (n.node_id.as_str(), 0)).collect();
    for edge in graph.edges.iter().filter(|e| e.kind != EdgeKind::LoopBack) {
        if let Some(d) = indegree.get_mut(edge.target.as_str()) {
            *d += 1;
        }
    }
    let mut queue: VecDeque<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut removed = 0usize;
    while let Some(node) = queue.pop_front() {
        removed += 1;
        for edge in graph.outgoing(node) {
            if edge.kind == EdgeKind::LoopBack {
                continue;
            }
            if let Some(d) = indegree.get_mut(edge.target.as_str()) {
                *d -= 1;
                if *d == 0 {
                    queue.push_back(edge.target.as_str());
                }
            }
        }
    }
    removed < graph.nodes.len()
}

/// Resolves the parallel block anchored at `source`: walks each arm forward
/// (through nested blocks) to the fan-in edges and demands one common fusion
/// node.
pub fn resolve_parallel_block(
    graph: &WorkflowGraph,
    source: &str,
) -> Result<ParallelBlock, String> {
    let mut resolving = BTreeSet::new();
    resolve_block_inner(graph, source, &mut resolving).map(|(block, _)| block)
}

type BlockResolution = (ParallelBlock, Vec<(String, String)>);

fn resolve_block_inner(
    graph: &WorkflowGraph,
    source: &str,
    resolving: &mut BTreeSet<String>,
) -> Result<BlockResolution, String> {
    if !resolving.insert(source.to_string()) {
        return Err(format!("parallel block at {source} is nested inside itself"));
    }
    let arms: Vec<String> = graph
        .outgoing(source)
        .iter()
        .filter(|e| e.kind == EdgeKind::ParallelFanOut)
        .map(|e| e.target.clone())
        .collect();
    if arms.is_empty() {
        resolving.remove(source);
        return Err(format!("node {source} has no ParallelFanOut edges"));
    }

    let mut fusions = BTreeSet::new();
    let mut consumed_fan_ins: Vec<(String, String)> = Vec::new();
    for arm in &arms {
        let mut queue = VecDeque::from([arm.clone()]);
        let mut visited = BTreeSet::new();
        let mut found_any = false;
        while let Some(node) = queue.pop_front() {
            if !visited.insert(node.clone()) {
                continue;
            }
            let outgoing = graph.outgoing(&node);
            let fan_ins: Vec<_> =
                outgoing.iter().filter(|e| e.kind == EdgeKind::ParallelFanIn).collect();
            if !fan_ins.is_empty() {
                for edge in fan_ins {
                    fusions.insert(edge.target.clone());
                    consumed_fan_ins.push((edge.source.clone(), edge.target.clone()));
                    found_any = true;
                }
                continue;
            }
            if outgoing.iter().any(|e| e.kind == EdgeKind::ParallelFanOut) {
                let (inner, inner_consumed) = resolve_block_inner(graph, &node, resolving)?;
                consumed_fan_ins.extend(inner_consumed);
                queue.push_back(inner.fusion);
                continue;
            }
            for edge in &outgoing {
                match edge.kind {
                    EdgeKind::Sequential | EdgeKind::ConditionalBranch => {
                        queue.push_back(edge.target.clone())
                    }
                    EdgeKind::LoopBack => {} // backward jump, not forward progress
                    _ => {}
                }
            }
        }
        if !found_any {
            resolving.remove(source);
            return Err(format!("arm starting at {arm} never fans back in"));
        }
    }
    resolving.remove(source);

    if fusions.len() != 1 {
        return Err(format!(
            "arms of the block at {source} fan in to {} different nodes: {}",
            fusions.len(),
            fusions.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    let fusion = fusions.into_iter().next().expect("single fusion");
    Ok((ParallelBlock { source: source.to_string(), arms, fusion }, consumed_fan_ins))
}

fn check_parallel_blocks(graph: &WorkflowGraph, out: &mut Vec<Violation>) {
    let sources: BTreeSet<&str> = graph
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::ParallelFanOut)
        .map(|e| e.source.as_str())
        .collect();

    let mut consumed: BTreeSet<(String, String)> = BTreeSet::new();
    for source in sources {
        let mut resolving = BTreeSet::new();
        match resolve_block_inner(graph, source, &mut resolving) {
            Ok((block, fan_ins)) => {
                consumed.extend(fan_ins);
                // Fusion conflicts surface as Err; a resolved block is sound.
                let _ = block;
            }
            Err(message) => {
                let rule = if message.contains("different nodes") {
                    RuleId::ParallelFusionConflict
                } else {
                    RuleId::UnmatchedFanOut
                };
                out.push(Violation::new(rule, message, vec![source.to_string()]));
            }
        }
    }

    for edge in graph.edges.iter().filter(|e| e.kind == EdgeKind::ParallelFanIn) {
        if !consumed.contains(&(edge.source.clone(), edge.target.clone())) {
            out.push(Violation::new(
                RuleId::UnmatchedFanIn,
                format!(
                    "fan-in edge {} -> {} does not belong to any parallel block",
                    edge.source, edge.target
                ),
                vec![format!("{} -> {}", edge.source, edge.target)],
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{EdgeSpec, NodeSpec, WorkflowGraph};
    use super::*;

    fn basic(id: &str) -> NodeSpec {
        NodeSpec::basic(id, format!("{id} name"), format!("{id} does things"), "sys", "hum {{image_ref}}")
    }

    fn chain(ids: &[&str]) -> WorkflowGraph {
        let mut g = WorkflowGraph::new("t", ids[0], ids[ids.len() - 1]);
        for id in ids {
            g.nodes.push(basic(id));
        }
        for pair in ids.windows(2) {
            g.edges.push(EdgeSpec::sequential(pair[0], pair[1]));
        }
        g
    }

    #[test]
    fn single_node_baseline_is_valid() {
        let report = validate_graph(&WorkflowGraph::baseline("g"));
        assert!(report.ok, "{}", report.summary());
        assert!(report.violations.is_empty());
    }

    #[test]
    fn duplicate_edge_across_kinds_is_flagged() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::conditional("a", "b", "default", "always"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::DuplicateEdge));
    }

    #[test]
    fn reverse_direction_is_not_a_duplicate() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::loop_back("b", "a", "stable", 2));
        let report = validate_graph(&g);
        assert!(!report.has_rule(RuleId::DuplicateEdge), "{}", report.summary());
        assert!(report.ok, "{}", report.summary());
    }

    #[test]
    fn cycle_without_loopback_is_flagged() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::sequential("b", "a"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::CycleWithoutExit), "{}", report.summary());
    }

    #[test]
    fn cycle_with_two_loopbacks_is_flagged() {
        let mut g = chain(&["a", "b", "c"]);
        g.edges.push(EdgeSpec::loop_back("c", "a", "done", 2));
        assert!(validate_graph(&g).ok);
        // Replace a -> b with a LoopBack so the triangle carries two.
        g.edges[0] = EdgeSpec::loop_back("a", "b", "done", 2);
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::CycleMultipleLoopbacks), "{}", report.summary());
    }

    #[test]
    fn loopback_must_close_a_cycle() {
        let mut g = chain(&["a", "b", "c"]);
        g.edges.push(EdgeSpec::loop_back("a", "c", "done", 2));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::LoopbackWithoutCycle), "{}", report.summary());
    }

    #[test]
    fn self_loopback_is_valid() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::loop_back("b", "b", "refined", 3));
        let report = validate_graph(&g);
        assert!(report.ok, "{}", report.summary());
    }

    #[test]
    fn loop_missing_exit_condition_and_bound() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec {
            condition: None,
            ..EdgeSpec::loop_back("b", "a", "x", 0)
        });
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::MissingExitCondition));
        assert!(report.has_rule(RuleId::InvalidLoopBound));
    }

    #[test]
    fn unreachable_node_is_flagged() {
        let mut g = chain(&["a", "b"]);
        g.nodes.push(basic("stray"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::UnreachableNode));
    }

    #[test]
    fn dead_end_terminal_is_allowed_but_nonterminal_must_reach_output() {
        // a -> b (terminal, not output) and a -> c (output): valid.
        let mut g = WorkflowGraph::new("t", "a", "c");
        for id in ["a", "b", "c"] {
            g.nodes.push(basic(id));
        }
        g.edges.push(EdgeSpec::conditional("a", "b", "default", "pick"));
        g.edges.push(EdgeSpec::conditional("a", "c", "continue", "pick"));
        let report = validate_graph(&g);
        assert!(report.ok, "{}", report.summary());

        // b -> d: b is now non-terminal and cannot reach the output.
        g.nodes.push(basic("d"));
        g.edges.push(EdgeSpec::sequential("b", "d"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::OutputNotReachable), "{}", report.summary());
    }

    #[test]
    fn entry_incoming_sequential_is_flagged() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::sequential("b", "a"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::EntryHasIncoming));
    }

    #[test]
    fn conditional_requires_default_branch() {
        let mut g = WorkflowGraph::new("t", "a", "c");
        for id in ["a", "b", "c"] {
            g.nodes.push(basic(id));
        }
        g.edges.push(EdgeSpec::conditional("a", "b", "unclear", "is it unclear"));
        g.edges.push(EdgeSpec::conditional("a", "c", "clear", "is it unclear"));
        g.edges.push(EdgeSpec::sequential("b", "c"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::NoDefaultBranch));
    }

    #[test]
    fn parallel_block_resolves_fusion() {
        let g = parallel_fixture();
        let report = validate_graph(&g);
        assert!(report.ok, "{}", report.summary());
        let block = resolve_parallel_block(&g, "src").unwrap();
        assert_eq!(block.arms, vec!["arm1".to_string(), "arm2".to_string()]);
        assert_eq!(block.fusion, "fuse");
    }

    #[test]
    fn single_arm_after_removal_is_still_valid() {
        let mut g = parallel_fixture();
        g.nodes.retain(|n| n.node_id != "arm2");
        g.edges.retain(|e| e.source != "arm2" && e.target != "arm2");
        let report = validate_graph(&g);
        assert!(report.ok, "{}", report.summary());
    }

    #[test]
    fn arm_without_fan_in_is_flagged() {
        let mut g = parallel_fixture();
        g.edges.retain(|e| !(e.source == "arm2" && e.target == "fuse"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::UnmatchedFanOut), "{}", report.summary());
    }

    #[test]
    fn conflicting_fusion_nodes_are_flagged() {
        let mut g = parallel_fixture();
        g.nodes.push(basic("other"));
        g.edges.retain(|e| !(e.source == "arm2" && e.target == "fuse"));
        g.edges.push(EdgeSpec::fan_in("arm2", "other"));
        g.edges.push(EdgeSpec::sequential("other", "out"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::ParallelFusionConflict), "{}", report.summary());
    }

    #[test]
    fn orphan_fan_in_is_flagged() {
        let mut g = chain(&["a", "b", "c"]);
        g.edges[1] = EdgeSpec::fan_in("b", "c");
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::UnmatchedFanIn), "{}", report.summary());
    }

    #[test]
    fn mixed_outgoing_is_flagged() {
        let mut g = chain(&["a", "b", "c"]);
        g.edges.push(EdgeSpec::conditional("a", "c", "default", "pick"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::MixedOutgoing), "{}", report.summary());
    }

    #[test]
    fn unknown_ids_skip_topology_passes() {
        let mut g = chain(&["a", "b"]);
        g.edges.push(EdgeSpec::sequential("b", "ghost"));
        let report = validate_graph(&g);
        assert!(report.has_rule(RuleId::UnknownEdgeEndpoint));
        assert!(!report.has_rule(RuleId::UnreachableNode));
    }

    fn parallel_fixture() -> WorkflowGraph {
        let mut g = WorkflowGraph::new("t", "src", "out");
        for id in ["src", "arm1", "arm2", "fuse", "out"] {
            g.nodes.push(basic(id));
        }
        g.edges.push(EdgeSpec::fan_out("src", "arm1"));
        g.edges.push(EdgeSpec::fan_out("src", "arm2"));
        g.edges.push(EdgeSpec::fan_in("arm1", "fuse"));
        g.edges.push(EdgeSpec::fan_in("arm2", "fuse"));
        g.edges.push(EdgeSpec::sequential("fuse", "out"));
        g
    }
}
