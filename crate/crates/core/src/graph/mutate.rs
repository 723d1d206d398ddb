//! Pure graph mutators. Each call returns a fresh graph with the version
//! bumped by one; the input is never touched.

use super::validate::validate_graph;
use super::{EdgeKind, EdgeSpec, GraphError, NodeSpec, WorkflowGraph};
use serde::{Deserialize, Serialize};

/// Structural counters used for cost/complexity reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    /// Number of distinct nodes with outgoing ConditionalBranch edges.
    pub branch_count: usize,
    pub loop_count: usize,
    pub parallel_block_count: usize,
}

impl WorkflowGraph {
    /// Appends a node. The result may still be unreachable until edges are
    /// added; compound operations validate the final graph.
    pub fn add_node(&self, spec: NodeSpec) -> Result<WorkflowGraph, GraphError> {
        let problems = spec.problems();
        if !problems.is_empty() {
            return Err(GraphError::InvalidNodeSpec { node_id: spec.node_id, problems });
        }
        if self.has_node(&spec.node_id) {
            return Err(GraphError::DuplicateNodeId(spec.node_id));
        }
        let mut next = self.clone();
        next.nodes.push(spec);
        next.version += 1;
        Ok(next)
    }

    /// Removes a node and its incident edges. Predecessors are spliced onto
    /// the removed node's unique Sequential successor when one exists;
    /// otherwise their edges are dropped. The result must validate.
    pub fn remove_node(&self, node_id: &str) -> Result<WorkflowGraph, GraphError> {
        if !self.has_node(node_id) {
            return Err(GraphError::NodeNotFound(node_id.to_string()));
        }
        if node_id == self.entry_node || node_id == self.output_node {
            return Err(GraphError::ProtectedNode(node_id.to_string()));
        }

        let sequential_successors: Vec<&EdgeSpec> = self
            .outgoing(node_id)
            .into_iter()
            .filter(|e| e.kind == EdgeKind::Sequential && e.target != node_id)
            .collect();
        let splice_target = match sequential_successors.as_slice() {
            [only] => Some(only.target.clone()),
            _ => None,
        };

        let mut next = self.clone();
        next.nodes.retain(|n| n.node_id != node_id);
        next.edges.retain(|e| e.source != node_id && e.target != node_id);
        if let Some(target) = splice_target {
            let incoming: Vec<EdgeSpec> = self
                .incoming(node_id)
                .into_iter()
                .filter(|e| e.source != node_id)
                .cloned()
                .collect();
            for mut edge in incoming {
                if edge.source == target || next.has_edge(&edge.source, &target) {
                    continue;
                }
                edge.target = target.clone();
                next.edges.push(edge);
            }
        }
        next.version += 1;

        let report = validate_graph(&next);
        if !report.ok {
            return Err(GraphError::WouldDisconnect { report });
        }
        Ok(next)
    }

    /// Adds one edge. A cycle-closing edge must be a LoopBack; the
    /// direction-sensitive `(source, target)` pair must be new.
    pub fn add_edge(&self, spec: EdgeSpec) -> Result<WorkflowGraph, GraphError> {
        for endpoint in [&spec.source, &spec.target] {
            if !self.has_node(endpoint) {
                return Err(GraphError::UnknownNode(endpoint.clone()));
            }
        }
        if self.has_edge(&spec.source, &spec.target) {
            return Err(GraphError::DuplicateEdge { source_id: spec.source, target_id: spec.target });
        }
        let closes_cycle = spec.source == spec.target || self.reaches(&spec.target, &spec.source);
        if closes_cycle && spec.kind != EdgeKind::LoopBack {
            return Err(GraphError::CycleWithoutLoopBack {
                source_id: spec.source,
                target_id: spec.target,
            });
        }
        let mut next = self.clone();
        next.edges.push(spec);
        next.version += 1;
        Ok(next)
    }

    /// Removes one edge by its `(source, target)` pair.
    pub fn remove_edge(&self, source: &str, target: &str) -> Result<WorkflowGraph, GraphError> {
        if !self.has_edge(source, target) {
            return Err(GraphError::EdgeNotFound {
                source_id: source.to_string(),
                target_id: target.to_string(),
            });
        }
        let mut next = self.clone();
        next.edges.retain(|e| !(e.source == source && e.target == target));
        next.version += 1;
        Ok(next)
    }

    pub fn stats(&self) -> GraphStats {
        let mut branch_sources = std::collections::BTreeSet::new();
        let mut parallel_sources = std::collections::BTreeSet::new();
        let mut loop_count = 0usize;
        for edge in &self.edges {
            match edge.kind {
                EdgeKind::ConditionalBranch => {
                    branch_sources.insert(edge.source.as_str());
                }
                EdgeKind::ParallelFanOut => {
                    parallel_sources.insert(edge.source.as_str());
                }
                EdgeKind::LoopBack => loop_count += 1,
                _ => {}
            }
        }
        GraphStats {
            node_count: self.nodes.len(),
            branch_count: branch_sources.len(),
            loop_count,
            parallel_block_count: parallel_sources.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::validate::validate_graph;
    use super::*;
    use std::collections::BTreeMap;

    fn basic(id: &str) -> NodeSpec {
        NodeSpec::basic(id, format!("{id} name"), format!("{id} step"), "sys", "hum")
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
    fn add_tool_node_appends_and_bumps_version() {
        let g = WorkflowGraph::baseline("g");
        let next = g
            .add_node(NodeSpec::tool("img_search", "Image search", "finds neighbors", "image_search", BTreeMap::new()))
            .unwrap();
        assert_eq!(next.nodes.len(), 2);
        assert_eq!(next.version, g.version + 1);
        assert_eq!(g.nodes.len(), 1, "input graph untouched");
    }

    #[test]
    fn add_node_rejects_duplicate_id() {
        let g = WorkflowGraph::baseline("g");
        let err = g.add_node(basic("diagnoser")).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateNodeId(_)));
    }

    #[test]
    fn add_node_rejects_empty_system_prompt() {
        let g = WorkflowGraph::baseline("g");
        let mut spec = basic("x");
        spec.system_prompt = Some(String::new());
        let err = g.add_node(spec).unwrap_err();
        assert!(matches!(err, GraphError::InvalidNodeSpec { .. }));
    }

    #[test]
    fn remove_middle_node_splices_chain() {
        let g = chain(&["a", "b", "c"]);
        let next = g.remove_node("b").unwrap();
        assert!(next.has_edge("a", "c"));
        assert_eq!(next.edge("a", "c").unwrap().kind, EdgeKind::Sequential);
        // Brute-force reachability oracle: everything still reachable.
        let reachable = next.reachable_from("a");
        assert!(next.nodes.iter().all(|n| reachable.contains(&n.node_id)));
        assert!(validate_graph(&next).ok);
    }

    #[test]
    fn remove_entry_is_protected() {
        let g = chain(&["a", "b"]);
        assert!(matches!(g.remove_node("a").unwrap_err(), GraphError::ProtectedNode(_)));
        assert!(matches!(g.remove_node("b").unwrap_err(), GraphError::ProtectedNode(_)));
    }

    #[test]
    fn remove_missing_node() {
        let g = chain(&["a", "b"]);
        assert!(matches!(g.remove_node("zz").unwrap_err(), GraphError::NodeNotFound(_)));
    }

    #[test]
    fn remove_parallel_arm_keeps_block_valid() {
        let mut g = WorkflowGraph::new("t", "src", "out");
        for id in ["src", "arm1", "arm2", "fuse", "out"] {
            g.nodes.push(basic(id));
        }
        g.edges.push(EdgeSpec::fan_out("src", "arm1"));
        g.edges.push(EdgeSpec::fan_out("src", "arm2"));
        g.edges.push(EdgeSpec::fan_in("arm1", "fuse"));
        g.edges.push(EdgeSpec::fan_in("arm2", "fuse"));
        g.edges.push(EdgeSpec::sequential("fuse", "out"));
        assert!(validate_graph(&g).ok);

        let next = g.remove_node("arm2").unwrap();
        assert!(validate_graph(&next).ok);
        assert!(next.has_edge("arm1", "fuse"));
        assert!(!next.has_edge("src", "arm2"));
    }

    #[test]
    fn remove_that_would_disconnect_fails_and_preserves_input() {
        // a branches to b and c; both rejoin d. Removing c's rejoin target
        // would be fine, but removing the only path node breaks validity.
        let mut g = WorkflowGraph::new("t", "a", "c");
        for id in ["a", "b", "c"] {
            g.nodes.push(basic(id));
        }
        g.edges.push(EdgeSpec::fan_out("a", "b"));
        g.edges.push(EdgeSpec::fan_in("b", "c"));
        assert!(validate_graph(&g).ok);
        let before = g.to_json_string();
        let err = g.remove_node("b").unwrap_err();
        assert!(matches!(err, GraphError::WouldDisconnect { .. }));
        assert_eq!(g.to_json_string(), before, "failed mutation left input bit-identical");
    }

    #[test]
    fn add_edge_rejects_duplicate_and_allows_reverse() {
        let g = chain(&["a", "b"]);
        let err = g.add_edge(EdgeSpec::sequential("a", "b")).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateEdge { .. }));
        // Reverse direction is a new pair, but closes a cycle: must be LoopBack.
        let err = g.add_edge(EdgeSpec::sequential("b", "a")).unwrap_err();
        assert!(matches!(err, GraphError::CycleWithoutLoopBack { .. }));
        let next = g.add_edge(EdgeSpec::loop_back("b", "a", "stable output", 3)).unwrap();
        assert!(validate_graph(&next).ok);
    }

    #[test]
    fn add_edge_unknown_node() {
        let g = chain(&["a", "b"]);
        let err = g.add_edge(EdgeSpec::sequential("a", "ghost")).unwrap_err();
        assert!(matches!(err, GraphError::UnknownNode(_)));
    }

    #[test]
    fn add_then_remove_edge_restores_structure() {
        let g = chain(&["a", "b", "c"]);
        let added = g.add_edge(EdgeSpec::loop_back("c", "a", "stable", 2)).unwrap();
        let restored = added.remove_edge("c", "a").unwrap();
        assert!(restored.same_structure(&g));
        assert_eq!(restored.version, g.version + 2);
    }

    #[test]
    fn stats_counts() {
        let baseline = WorkflowGraph::baseline("g");
        assert_eq!(
            baseline.stats(),
            GraphStats { node_count: 1, branch_count: 0, loop_count: 0, parallel_block_count: 0 }
        );

        // Chain of 3 plus a conditional with 2 branches from the middle node.
        let mut g = chain(&["a", "b", "c"]);
        for id in ["d", "e"] {
            g.nodes.push(basic(id));
        }
        g.edges.retain(|e| !(e.source == "b" && e.target == "c"));
        g.edges.push(EdgeSpec::conditional("b", "d", "default", "route"));
        g.edges.push(EdgeSpec::conditional("b", "e", "alternate", "route"));
        g.edges.push(EdgeSpec::sequential("d", "c"));
        g.edges.push(EdgeSpec::sequential("e", "c"));
        assert!(validate_graph(&g).ok);
        let stats = g.stats();
        assert_eq!(stats.node_count, 5);
        assert_eq!(stats.branch_count, 1);
        assert_eq!(stats.loop_count, 0);
    }

    #[test]
    fn mutators_do_not_mutate_input() {
        let g = chain(&["a", "b"]);
        let snapshot = g.to_json_string();
        let _ = g.add_node(basic("x"));
        let _ = g.add_edge(EdgeSpec::loop_back("b", "a", "done", 1));
        let _ = g.remove_node("b");
        let _ = g.remove_edge("a", "b");
        assert_eq!(g.to_json_string(), snapshot);
        assert!(matches!(
            g.remove_edge("b", "a").unwrap_err(),
            GraphError::EdgeNotFound { .. }
        ));
    }
}
