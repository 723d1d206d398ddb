//! The hierarchical search space: node-level, structural-level, and
//! framework-level operations, each applied as one validated, atomic step.
//!
//! Every function here is pure — it returns a fresh graph or an error and
//! never touches its input. One successful operation advances the graph
//! version by exactly one, regardless of how many primitive mutations it
//! composes. No invalid graph ever escapes this module.

use crate::graph::{
    validate_graph, EdgeKind, EdgeSpec, GraphError, NodeKind, NodeSpec, RuleId, ValidationReport,
    Violation, WorkflowGraph,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Loop bound used when a suggestion gives none.
pub const DEFAULT_MAX_ITERATIONS: u32 = 3;

/// Suffixes appended by the ChainOfThought template.
pub const COT_SYSTEM_SUFFIX: &str = "\nAlways reason step by step: describe what you observe, \
     weigh the candidate conditions against each other, and only then commit to an answer.";
pub const COT_HUMAN_SUFFIX: &str =
    "\nThink step by step and write out your reasoning before the final ranked answer.";

/// Exit condition attached to the Reflexion loop.
pub const REFLEXION_EXIT_CONDITION: &str = "critic approves";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    AddNode,
    RemoveNode,
    ModifyPrompts,
    AddConditional,
    AddLoop,
    AddParallel,
    ExpandFramework,
}

/// Where an operation came from: seeded by configuration, produced by the
/// suggestion pipeline, or entered by hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpOrigin {
    Seed,
    Suggestion,
    Manual,
}

/// The standardized operation envelope: `{op_kind, payload, origin}`.
/// This is the machine-validated format suggestions are reformulated into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowOperation {
    pub op_kind: OpKind,
    pub payload: serde_json::Value,
    pub origin: OpOrigin,
}

impl WorkflowOperation {
    pub fn new(op_kind: OpKind, payload: serde_json::Value, origin: OpOrigin) -> Self {
        WorkflowOperation { op_kind, payload, origin }
    }

    pub fn from_json_str(json: &str) -> Result<Self, OpError> {
        serde_json::from_str(json).map_err(|e| OpError::MalformedEnvelope(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("operation serializes")
    }
}

#[derive(Debug, Error)]
pub enum OpError {
    #[error("incomplete {op_kind:?} payload: {message}")]
    IncompletePayload { op_kind: OpKind, message: String },
    #[error("operation rejected by validation: {}", report.summary())]
    ValidationRejected { report: ValidationReport },
    #[error("operation references unknown node {node_id}")]
    UnknownNode { node_id: String },
    #[error("node {node_id} is the entry or output node and cannot be removed")]
    ProtectedNode { node_id: String },
    #[error("conditional needs at least two branches, one labeled \"default\"")]
    NeedDefaultBranch,
    #[error("unsupported framework template: {message}")]
    UnsupportedTemplate { message: String },
    #[error("malformed operation envelope: {0}")]
    MalformedEnvelope(String),
}

impl OpError {
    /// The validation report carried by a rejection, if any.
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            OpError::ValidationRejected { report } => Some(report),
            _ => None,
        }
    }
}

fn reject(rule_id: RuleId, message: String, offending: Vec<String>) -> OpError {
    OpError::ValidationRejected {
        report: ValidationReport::from_violations(vec![Violation { rule_id, message, offending }]),
    }
}

fn map_graph_error(err: GraphError) -> OpError {
    match err {
        GraphError::DuplicateNodeId(node_id) => reject(
            RuleId::DuplicateNodeId,
            format!("node id {node_id} already exists"),
            vec![node_id],
        ),
        GraphError::InvalidNodeSpec { node_id, problems } => reject(
            RuleId::NodeSpecInvalid,
            format!("node {node_id}: {}", problems.join("; ")),
            vec![node_id],
        ),
        GraphError::NodeNotFound(node_id) | GraphError::UnknownNode(node_id) => {
            OpError::UnknownNode { node_id }
        }
        GraphError::ProtectedNode(node_id) => OpError::ProtectedNode { node_id },
        GraphError::WouldDisconnect { report } => OpError::ValidationRejected { report },
        GraphError::DuplicateEdge { source_id, target_id } => reject(
            RuleId::DuplicateEdge,
            format!("{source_id} and {target_id} are already connected in that direction"),
            vec![format!("{source_id} -> {target_id}")],
        ),
        GraphError::CycleWithoutLoopBack { source_id, target_id } => reject(
            RuleId::CycleWithoutExit,
            format!("edge {source_id} -> {target_id} would close a cycle without a LoopBack"),
            vec![format!("{source_id} -> {target_id}")],
        ),
        GraphError::EdgeNotFound { source_id, target_id } => reject(
            RuleId::UnknownEdgeEndpoint,
            format!("edge {source_id} -> {target_id} does not exist"),
            vec![format!("{source_id} -> {target_id}")],
        ),
    }
}

/// Normalizes the version to exactly input+1 and runs full validation.
fn finish(input: &WorkflowGraph, mut next: WorkflowGraph) -> Result<WorkflowGraph, OpError> {
    next.version = input.version + 1;
    let report = validate_graph(&next);
    if !report.ok {
        return Err(OpError::ValidationRejected { report });
    }
    Ok(next)
}

fn require_node(graph: &WorkflowGraph, node_id: &str) -> Result<(), OpError> {
    if graph.has_node(node_id) {
        Ok(())
    } else {
        Err(OpError::UnknownNode { node_id: node_id.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Payloads (the wire format under `payload` for each op_kind)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddNodePayload {
    pub node: NodeSpec,
    /// The new node is inserted into the Sequential flow after this node.
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoveNodePayload {
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifyPromptsPayload {
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub branch_label: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddConditionalPayload {
    pub source: String,
    pub condition: String,
    pub branches: Vec<BranchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddLoopPayload {
    pub body_entry: String,
    pub body_exit: String,
    pub exit_condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddParallelPayload {
    pub source: String,
    pub arms: Vec<NodeSpec>,
    pub fusion: NodeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandFrameworkPayload {
    pub anchor: String,
    pub template: FrameworkTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateId {
    ChainOfThought,
    Reflexion,
    RoundTable,
    #[serde(rename = "CMD")]
    Cmd,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParams {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expert_roles: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_reflections: Option<u32>,
}

/// A pre-defined multi-agent collaboration pattern plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameworkTemplate {
    pub template_id: TemplateId,
    #[serde(default)]
    pub parameters: TemplateParams,
}

impl FrameworkTemplate {
    pub fn chain_of_thought() -> Self {
        FrameworkTemplate {
            template_id: TemplateId::ChainOfThought,
            parameters: TemplateParams::default(),
        }
    }

    pub fn reflexion(max_reflections: u32) -> Self {
        FrameworkTemplate {
            template_id: TemplateId::Reflexion,
            parameters: TemplateParams {
                max_reflections: Some(max_reflections),
                ..TemplateParams::default()
            },
        }
    }

    pub fn round_table(expert_roles: &[&str], rounds: u32) -> Self {
        FrameworkTemplate {
            template_id: TemplateId::RoundTable,
            parameters: TemplateParams {
                expert_roles: expert_roles.iter().map(|r| r.to_string()).collect(),
                rounds: Some(rounds),
                ..TemplateParams::default()
            },
        }
    }

    pub fn cmd(expert_roles: &[&str], rounds: u32) -> Self {
        FrameworkTemplate {
            template_id: TemplateId::Cmd,
            ..Self::round_table(expert_roles, rounds)
        }
    }
}

// ---------------------------------------------------------------------------
// Node-level operations
// ---------------------------------------------------------------------------

/// Inserts `node` into the Sequential flow directly after `after`: the
/// existing `after -> X` Sequential edge (if any) becomes
/// `after -> node -> X`. When `after` is the output node with no outgoing
/// flow, the new node becomes the output.
pub fn add_node_after(
    graph: &WorkflowGraph,
    node: NodeSpec,
    after: &str,
) -> Result<WorkflowGraph, OpError> {
    require_node(graph, after)?;
    let node_id = node.node_id.clone();
    let mut next = graph.add_node(node).map_err(map_graph_error)?;

    let sequential_target = graph
        .outgoing(after)
        .into_iter()
        .find(|e| e.kind == EdgeKind::Sequential)
        .map(|e| e.target.clone());
    match sequential_target {
        Some(target) => {
            next = next.remove_edge(after, &target).map_err(map_graph_error)?;
            next = next.add_edge(EdgeSpec::sequential(after, &node_id)).map_err(map_graph_error)?;
            next = next.add_edge(EdgeSpec::sequential(&node_id, target)).map_err(map_graph_error)?;
        }
        None => {
            next = next.add_edge(EdgeSpec::sequential(after, &node_id)).map_err(map_graph_error)?;
            if after == graph.output_node {
                next.output_node = node_id;
            }
        }
    }
    finish(graph, next)
}

/// Removes a node via the graph-core splice rule.
pub fn remove_node(graph: &WorkflowGraph, node_id: &str) -> Result<WorkflowGraph, OpError> {
    let next = graph.remove_node(node_id).map_err(map_graph_error)?;
    finish(graph, next)
}

/// Replaces the given prompt fields on one node, leaving everything else
/// untouched.
pub fn modify_prompts(
    graph: &WorkflowGraph,
    node_id: &str,
    system_prompt: Option<&str>,
    human_prompt: Option<&str>,
) -> Result<WorkflowGraph, OpError> {
    require_node(graph, node_id)?;
    if system_prompt.is_none() && human_prompt.is_none() {
        return Err(OpError::IncompletePayload {
            op_kind: OpKind::ModifyPrompts,
            message: "at least one of system_prompt or human_prompt is required".to_string(),
        });
    }
    let mut next = graph.clone();
    let node = next
        .nodes
        .iter_mut()
        .find(|n| n.node_id == node_id)
        .expect("presence checked above");
    if let Some(text) = system_prompt {
        node.system_prompt = Some(text.to_string());
    }
    if let Some(text) = human_prompt {
        node.human_prompt = Some(text.to_string());
    }
    finish(graph, next)
}

// ---------------------------------------------------------------------------
// Structural-level operations
// ---------------------------------------------------------------------------

/// Turns `source` into a router: one ConditionalBranch edge per branch, all
/// sharing `condition`. A pre-existing Sequential edge out of `source` is
/// replaced by the branch structure, so its target must stay reachable
/// through one of the branches.
pub fn add_conditional(
    graph: &WorkflowGraph,
    source: &str,
    branches: &[BranchSpec],
    condition: &str,
) -> Result<WorkflowGraph, OpError> {
    require_node(graph, source)?;
    if branches.len() < 2 || !branches.iter().any(|b| b.branch_label == "default") {
        return Err(OpError::NeedDefaultBranch);
    }

    let mut next = graph.clone();
    if let Some(edge) = graph
        .outgoing(source)
        .into_iter()
        .find(|e| e.kind == EdgeKind::Sequential)
    {
        let target = edge.target.clone();
        next = next.remove_edge(source, &target).map_err(map_graph_error)?;
    }
    for branch in branches {
        next = next
            .add_edge(EdgeSpec::conditional(source, &branch.target, &branch.branch_label, condition))
            .map_err(map_graph_error)?;
    }
    finish(graph, next)
}

/// Closes a loop: LoopBack edge `body_exit -> body_entry` with the exit
/// condition and iteration bound.
pub fn add_loop(
    graph: &WorkflowGraph,
    body_entry: &str,
    body_exit: &str,
    exit_condition: &str,
    max_iterations: u32,
) -> Result<WorkflowGraph, OpError> {
    if max_iterations == 0 {
        return Err(OpError::IncompletePayload {
            op_kind: OpKind::AddLoop,
            message: "max_iterations must be at least 1".to_string(),
        });
    }
    require_node(graph, body_entry)?;
    require_node(graph, body_exit)?;
    let next = graph
        .add_edge(EdgeSpec::loop_back(body_exit, body_entry, exit_condition, max_iterations))
        .map_err(map_graph_error)?;
    finish(graph, next)
}

/// Inserts a parallel block after `source`: fan-out to each new arm node,
/// fan-in from each arm to the new fusion node. `source`'s previous
/// outgoing edges are re-sourced to the fusion node so the block sits
/// inside the existing flow; if `source` was the output, the fusion node
/// becomes the output. Arm output placeholders are appended to the fusion
/// node's human prompt when missing.
pub fn add_parallel(
    graph: &WorkflowGraph,
    source: &str,
    arm_nodes: Vec<NodeSpec>,
    fusion_node: NodeSpec,
) -> Result<WorkflowGraph, OpError> {
    require_node(graph, source)?;
    if arm_nodes.len() < 2 {
        return Err(OpError::IncompletePayload {
            op_kind: OpKind::AddParallel,
            message: format!("a parallel block needs at least two arms, got {}", arm_nodes.len()),
        });
    }

    let mut fusion_node = fusion_node;
    if fusion_node.kind == NodeKind::Basic {
        let mut human = fusion_node.human_prompt.take().unwrap_or_default();
        for arm in &arm_nodes {
            let placeholder = format!("{{{{{}}}}}", arm.node_id);
            if !human.contains(&placeholder) {
                human.push_str(&format!("\n{}: {placeholder}", arm.node_name));
            }
        }
        fusion_node.human_prompt = Some(human);
    }
    let fusion_id = fusion_node.node_id.clone();

    let mut next = graph.clone();
    for edge in next.edges.iter_mut().filter(|e| e.source == source) {
        edge.source = fusion_id.clone();
    }
    if source == graph.output_node {
        next.output_node = fusion_id.clone();
    }

    let arm_ids: Vec<String> = arm_nodes.iter().map(|n| n.node_id.clone()).collect();
    for arm in arm_nodes {
        next = next.add_node(arm).map_err(map_graph_error)?;
    }
    next = next.add_node(fusion_node).map_err(map_graph_error)?;
    for arm_id in &arm_ids {
        next = next.add_edge(EdgeSpec::fan_out(source, arm_id)).map_err(map_graph_error)?;
        next = next.add_edge(EdgeSpec::fan_in(arm_id, &fusion_id)).map_err(map_graph_error)?;
    }
    finish(graph, next)
}

// ---------------------------------------------------------------------------
// Framework-level operations
// ---------------------------------------------------------------------------

/// Expands a collaboration template at `anchor`.
pub fn expand_framework(
    graph: &WorkflowGraph,
    anchor: &str,
    template: &FrameworkTemplate,
) -> Result<WorkflowGraph, OpError> {
    require_node(graph, anchor)?;
    match template.template_id {
        TemplateId::ChainOfThought => expand_chain_of_thought(graph, anchor),
        TemplateId::Reflexion => expand_reflexion(graph, anchor, &template.parameters),
        TemplateId::RoundTable => expand_round_table(graph, anchor, &template.parameters),
        TemplateId::Cmd => expand_cmd(graph, anchor, &template.parameters),
    }
}

fn expand_chain_of_thought(graph: &WorkflowGraph, anchor: &str) -> Result<WorkflowGraph, OpError> {
    let node = graph.node(anchor).expect("presence checked");
    let system = format!("{}{COT_SYSTEM_SUFFIX}", node.system_prompt.as_deref().unwrap_or(""));
    let human = format!("{}{COT_HUMAN_SUFFIX}", node.human_prompt.as_deref().unwrap_or(""));
    modify_prompts(graph, anchor, Some(&system), Some(&human))
}

fn expand_reflexion(
    graph: &WorkflowGraph,
    anchor: &str,
    params: &TemplateParams,
) -> Result<WorkflowGraph, OpError> {
    let max_reflections = match params.max_reflections {
        Some(n) if n >= 1 => n,
        _ => {
            return Err(OpError::IncompletePayload {
                op_kind: OpKind::ExpandFramework,
                message: "Reflexion requires max_reflections >= 1".to_string(),
            })
        }
    };
    let anchor_name = graph.node(anchor).expect("presence checked").node_name.clone();
    let critic_id = format!("{anchor}_critic");
    let critic = NodeSpec::basic(
        &critic_id,
        "Critic",
        format!("Critically reviews the output of {anchor_name} and can send the case back."),
        "You are a meticulous clinical reviewer.",
        format!(
            "Case image: {{{{image_ref}}}}\nProposed answer from {anchor_name}:\n{{{{{anchor}}}}}\n\
             Judge whether the answer is well supported by the case. Reply APPROVED when \
             satisfied; otherwise state exactly what must be reconsidered."
        ),
    );

    let mut next = graph.clone();
    let sequential_target = graph
        .outgoing(anchor)
        .into_iter()
        .find(|e| e.kind == EdgeKind::Sequential)
        .map(|e| e.target.clone());
    if let Some(target) = &sequential_target {
        next = next.remove_edge(anchor, target).map_err(map_graph_error)?;
    }
    next = next.add_node(critic).map_err(map_graph_error)?;
    next = next.add_edge(EdgeSpec::sequential(anchor, &critic_id)).map_err(map_graph_error)?;
    next = next
        .add_edge(EdgeSpec::loop_back(&critic_id, anchor, REFLEXION_EXIT_CONDITION, max_reflections))
        .map_err(map_graph_error)?;
    if let Some(target) = sequential_target {
        next = next.add_edge(EdgeSpec::sequential(&critic_id, target)).map_err(map_graph_error)?;
    }
    finish(graph, next)
}

fn role_slug(role: &str) -> String {
    role.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn role_title(role: &str) -> String {
    let mut chars = role.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn round_table_params(params: &TemplateParams) -> Result<(&[String], u32), OpError> {
    let incomplete = |message: &str| OpError::IncompletePayload {
        op_kind: OpKind::ExpandFramework,
        message: message.to_string(),
    };
    if params.expert_roles.len() < 2 {
        return Err(incomplete("RoundTable requires at least two expert_roles"));
    }
    let rounds = params.rounds.unwrap_or(0);
    if rounds < 1 {
        return Err(incomplete("RoundTable requires rounds >= 1"));
    }
    Ok((&params.expert_roles, rounds))
}

/// RoundTable(E experts, R rounds): round 1 runs all experts in parallel
/// from the anchor; rounds 2..R are sequential refinement chains in role
/// order, each node seeing every earlier opinion; a single aggregator
/// produces the outcome. E·R + 1 new nodes. The anchor's previous outgoing
/// edges are re-sourced to the aggregator.
fn expand_round_table(
    graph: &WorkflowGraph,
    anchor: &str,
    params: &TemplateParams,
) -> Result<WorkflowGraph, OpError> {
    let (roles, rounds) = round_table_params(params)?;

    let expert_id = |role: &str, round: u32| format!("{anchor}_{}_r{round}", role_slug(role));
    let case_header = "Case image: {{image_ref}}\nPossible diagnoses: {{label_vocabulary}}";
    let opinion_lines = |experts: &[(String, String)]| {
        experts
            .iter()
            .map(|(id, name)| format!("{name}: {{{{{id}}}}}"))
            .collect::<Vec<_>>()
            .join("\n")
    };

    // (node_id, display name) of every expert created so far, in creation
    // order — each refinement node receives all of these as placeholders.
    let mut created: Vec<(String, String)> = Vec::new();
    let mut expert_nodes: Vec<NodeSpec> = Vec::new();
    for round in 1..=rounds {
        for role in roles {
            let id = expert_id(role, round);
            let name = format!("{} (round {round})", role_title(role));
            let (description, human) = if round == 1 {
                (
                    format!("Round 1 {role}: gives an independent initial diagnosis."),
                    format!(
                        "{case_header}\nGive your independent ranked differential diagnosis, \
                         most likely first."
                    ),
                )
            } else {
                (
                    format!("Round {round} {role}: refines the discussion seeing all prior opinions."),
                    format!(
                        "{case_header}\nOpinions so far:\n{}\nRefine your ranked differential \
                         diagnosis in light of the discussion, most likely first.",
                        opinion_lines(&created)
                    ),
                )
            };
            expert_nodes.push(NodeSpec::basic(
                &id,
                name.clone(),
                description,
                format!("You are a {role} in a multi-expert case discussion."),
                human,
            ));
            created.push((id, name));
        }
    }
    let aggregator_id = format!("{anchor}_aggregator");
    let aggregator = NodeSpec::basic(
        &aggregator_id,
        "Aggregator",
        "Merges all expert opinions into one final ranking.",
        "You chair a multi-expert case discussion and produce its final answer.",
        format!(
            "{case_header}\nExpert opinions:\n{}\nProduce the final ranked differential \
             diagnosis, most likely first.",
            opinion_lines(&created)
        ),
    );

    let mut next = graph.clone();
    let previous_outgoing: Vec<EdgeSpec> = graph.outgoing(anchor).into_iter().cloned().collect();
    next.edges.retain(|e| e.source != anchor);
    if anchor == graph.output_node {
        next.output_node = aggregator_id.clone();
    }

    for node in expert_nodes {
        next = next.add_node(node).map_err(map_graph_error)?;
    }
    next = next.add_node(aggregator).map_err(map_graph_error)?;

    let round_one: Vec<String> = roles.iter().map(|r| expert_id(r, 1)).collect();
    let fusion_target = if rounds == 1 { aggregator_id.clone() } else { expert_id(&roles[0], 2) };
    for id in &round_one {
        next = next.add_edge(EdgeSpec::fan_out(anchor, id)).map_err(map_graph_error)?;
        next = next.add_edge(EdgeSpec::fan_in(id, &fusion_target)).map_err(map_graph_error)?;
    }

    let mut chain: Vec<String> = Vec::new();
    for round in 2..=rounds {
        for role in roles {
            chain.push(expert_id(role, round));
        }
    }
    chain.push(aggregator_id.clone());
    for pair in chain.windows(2) {
        next = next
            .add_edge(EdgeSpec::sequential(&pair[0], &pair[1]))
            .map_err(map_graph_error)?;
    }

    for mut edge in previous_outgoing {
        edge.source = aggregator_id.clone();
        next = next.add_edge(edge).map_err(map_graph_error)?;
    }
    finish(graph, next)
}

/// CMD: two independent discussion groups — each a RoundTable over the
/// same roles — run in parallel and a merge node reconciles their
/// conclusions.
fn expand_cmd(
    graph: &WorkflowGraph,
    anchor: &str,
    params: &TemplateParams,
) -> Result<WorkflowGraph, OpError> {
    round_table_params(params)?;

    let group_ids = [format!("{anchor}_group1"), format!("{anchor}_group2")];
    let group_nodes: Vec<NodeSpec> = group_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            NodeSpec::basic(
                id,
                format!("Discussion group {} lead", i + 1),
                format!("Frames the case for discussion group {}.", i + 1),
                "You lead one of two independent case discussion groups.",
                "Case image: {{image_ref}}\nPossible diagnoses: {{label_vocabulary}}\n\
                 Frame the case for your group and give your initial reading.",
            )
        })
        .collect();
    let merge = NodeSpec::basic(
        format!("{anchor}_cmd_merge"),
        "Merge",
        "Merges the conclusions of both discussion groups.",
        "You reconcile the conclusions of two independent expert groups.",
        format!(
            "Case image: {{{{image_ref}}}}\nGroup 1 conclusion:\n{{{{{}_aggregator}}}}\n\
             Group 2 conclusion:\n{{{{{}_aggregator}}}}\nProduce the final ranked differential \
             diagnosis, most likely first.",
            group_ids[0], group_ids[1]
        ),
    );

    let round_table = FrameworkTemplate {
        template_id: TemplateId::RoundTable,
        parameters: params.clone(),
    };
    let next = add_parallel(graph, anchor, group_nodes, merge)?;
    let next = expand_framework(&next, &group_ids[0], &round_table)?;
    let next = expand_framework(&next, &group_ids[1], &round_table)?;
    finish(graph, next)
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Applies one standardized operation atomically: either every constituent
/// mutation succeeds and a validated graph at version input+1 is returned,
/// or the error leaves the input untouched.
pub fn apply_operation(
    graph: &WorkflowGraph,
    op: &WorkflowOperation,
) -> Result<WorkflowGraph, OpError> {
    fn parse<T: serde::de::DeserializeOwned>(
        op_kind: OpKind,
        payload: &serde_json::Value,
    ) -> Result<T, OpError> {
        serde_json::from_value(payload.clone())
            .map_err(|e| OpError::IncompletePayload { op_kind, message: e.to_string() })
    }

    match op.op_kind {
        OpKind::AddNode => {
            let p: AddNodePayload = parse(op.op_kind, &op.payload)?;
            add_node_after(graph, p.node, &p.after)
        }
        OpKind::RemoveNode => {
            let p: RemoveNodePayload = parse(op.op_kind, &op.payload)?;
            remove_node(graph, &p.node_id)
        }
        OpKind::ModifyPrompts => {
            let p: ModifyPromptsPayload = parse(op.op_kind, &op.payload)?;
            modify_prompts(graph, &p.node_id, p.system_prompt.as_deref(), p.human_prompt.as_deref())
        }
        OpKind::AddConditional => {
            let p: AddConditionalPayload = parse(op.op_kind, &op.payload)?;
            add_conditional(graph, &p.source, &p.branches, &p.condition)
        }
        OpKind::AddLoop => {
            let p: AddLoopPayload = parse(op.op_kind, &op.payload)?;
            add_loop(
                graph,
                &p.body_entry,
                &p.body_exit,
                &p.exit_condition,
                p.max_iterations.unwrap_or(DEFAULT_MAX_ITERATIONS),
            )
        }
        OpKind::AddParallel => {
            let p: AddParallelPayload = parse(op.op_kind, &op.payload)?;
            add_parallel(graph, &p.source, p.arms, p.fusion)
        }
        OpKind::ExpandFramework => {
            let p: ExpandFrameworkPayload = parse(op.op_kind, &op.payload)?;
            expand_framework(graph, &p.anchor, &p.template)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basic(id: &str) -> NodeSpec {
        NodeSpec::basic(
            id,
            format!("{id} name"),
            format!("{id} does things"),
            "sys",
            "hum {{image_ref}}",
        )
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
    fn modify_prompts_changes_only_named_fields() {
        let g = WorkflowGraph::baseline("g");
        let before = g.to_json_string();
        let next = modify_prompts(&g, "diagnoser", None, Some("new human {{image_ref}}")).unwrap();
        assert_eq!(next.version, g.version + 1);
        assert_eq!(next.node("diagnoser").unwrap().human_prompt.as_deref(), Some("new human {{image_ref}}"));
        assert_eq!(
            next.node("diagnoser").unwrap().system_prompt,
            g.node("diagnoser").unwrap().system_prompt
        );
        assert_eq!(g.to_json_string(), before, "input graph must be untouched");
    }

    #[test]
    fn modify_prompts_rejects_empty_text() {
        let g = WorkflowGraph::baseline("g");
        let err = modify_prompts(&g, "diagnoser", Some(""), None).unwrap_err();
        assert!(err.report().is_some_and(|r| r.has_rule(RuleId::NodeSpecInvalid)));
    }

    #[test]
    fn modify_prompts_needs_at_least_one_field() {
        let g = WorkflowGraph::baseline("g");
        assert!(matches!(
            modify_prompts(&g, "diagnoser", None, None),
            Err(OpError::IncompletePayload { .. })
        ));
    }

    #[test]
    fn add_node_splices_into_sequential_flow() {
        let g = chain(&["a", "b"]);
        let next = add_node_after(&g, basic("mid"), "a").unwrap();
        assert!(next.has_edge("a", "mid") && next.has_edge("mid", "b"));
        assert!(!next.has_edge("a", "b"));
        assert_eq!(next.version, g.version + 1);
    }

    #[test]
    fn add_node_after_output_extends_chain() {
        let g = chain(&["a", "b"]);
        let next = add_node_after(&g, basic("tail"), "b").unwrap();
        assert!(next.has_edge("b", "tail"));
        assert_eq!(next.output_node, "tail");
    }

    #[test]
    fn remove_node_protected_and_unknown() {
        let g = chain(&["a", "b", "c"]);
        assert!(matches!(remove_node(&g, "a"), Err(OpError::ProtectedNode { .. })));
        assert!(matches!(remove_node(&g, "ghost"), Err(OpError::UnknownNode { .. })));
        let next = remove_node(&g, "b").unwrap();
        assert!(next.has_edge("a", "c"));
    }

    #[test]
    fn add_conditional_builds_branch_edges() {
        let mut g = chain(&["a", "b"]);
        g.nodes.push(basic("re"));
        g.edges.push(EdgeSpec::sequential("re", "b"));
        // a currently flows to b; branch "image_unclear" detours through re.
        let branches = vec![
            BranchSpec { branch_label: "image_unclear".into(), target: "re".into() },
            BranchSpec { branch_label: "default".into(), target: "b".into() },
        ];
        let next = add_conditional(&g, "a", &branches, "is the image unclear").unwrap();
        assert_eq!(next.stats().branch_count, 1);
        assert!(!next.has_edge("a", "b") || next.edge("a", "b").unwrap().kind == EdgeKind::ConditionalBranch);
        assert_eq!(next.version, g.version + 1);
    }

    #[test]
    fn add_conditional_requires_default_and_two_branches() {
        let g = chain(&["a", "b"]);
        let single = vec![BranchSpec { branch_label: "default".into(), target: "b".into() }];
        assert!(matches!(
            add_conditional(&g, "a", &single, "c"),
            Err(OpError::NeedDefaultBranch)
        ));
        let no_default = vec![
            BranchSpec { branch_label: "x".into(), target: "b".into() },
            BranchSpec { branch_label: "y".into(), target: "b".into() },
        ];
        assert!(matches!(
            add_conditional(&g, "a", &no_default, "c"),
            Err(OpError::NeedDefaultBranch)
        ));
    }

    #[test]
    fn add_conditional_self_target_rejected() {
        let g = chain(&["a", "b"]);
        let branches = vec![
            BranchSpec { branch_label: "again".into(), target: "a".into() },
            BranchSpec { branch_label: "default".into(), target: "b".into() },
        ];
        let err = add_conditional(&g, "a", &branches, "retry").unwrap_err();
        assert!(err.report().is_some_and(|r| r.has_rule(RuleId::CycleWithoutExit)));
    }

    #[test]
    fn add_loop_happy_path_and_bounds() {
        let g = chain(&["a", "refine_description", "out"]);
        let next = add_loop(&g, "refine_description", "refine_description", "output stable", 3).unwrap();
        assert_eq!(next.stats().loop_count, 1);

        assert!(matches!(
            add_loop(&g, "a", "out", "done", 0),
            Err(OpError::IncompletePayload { .. })
        ));
    }

    #[test]
    fn add_loop_duplicate_back_edge_rejected_atomically() {
        let g = chain(&["a", "b"]);
        let looped = add_loop(&g, "a", "b", "stable", 2).unwrap();
        let before = looped.to_json_string();
        let err = add_loop(&looped, "a", "b", "stable", 2).unwrap_err();
        assert!(err.report().is_some_and(|r| r.has_rule(RuleId::DuplicateEdge)));
        assert_eq!(looped.to_json_string(), before);
    }

    #[test]
    fn add_loop_empty_exit_condition_rejected() {
        let g = chain(&["a", "b"]);
        let err = add_loop(&g, "a", "b", "  ", 2).unwrap_err();
        assert!(err.report().is_some_and(|r| r.has_rule(RuleId::MissingExitCondition)));
    }

    #[test]
    fn add_parallel_inserts_block_and_reroutes_flow() {
        let g = chain(&["a", "out"]);
        let arms = vec![basic("symptom_describer"), basic("differential_lister")];
        let next = add_parallel(&g, "a", arms, basic("integrator")).unwrap();
        assert_eq!(next.nodes.len(), g.nodes.len() + 3);
        assert_eq!(next.edges.len(), g.edges.len() - 1 + 4 + 1);
        assert_eq!(next.stats().parallel_block_count, 1);
        assert!(next.has_edge("integrator", "out"), "old flow re-sourced to fusion");
        let fusion_prompt = next.node("integrator").unwrap().human_prompt.clone().unwrap();
        assert!(fusion_prompt.contains("{{symptom_describer}}"));
        assert!(fusion_prompt.contains("{{differential_lister}}"));
    }

    #[test]
    fn add_parallel_requires_two_arms() {
        let g = chain(&["a", "b"]);
        assert!(matches!(
            add_parallel(&g, "a", vec![basic("only")], basic("fuse")),
            Err(OpError::IncompletePayload { .. })
        ));
    }

    #[test]
    fn chain_of_thought_rewrites_prompts_only() {
        let g = WorkflowGraph::baseline("g");
        let next = expand_framework(&g, "diagnoser", &FrameworkTemplate::chain_of_thought()).unwrap();
        assert_eq!(next.nodes.len(), g.nodes.len());
        assert_eq!(next.edges, g.edges);
        assert_eq!(next.entry_node, g.entry_node);
        assert_eq!(next.output_node, g.output_node);
        let (old, new) = (g.node("diagnoser").unwrap(), next.node("diagnoser").unwrap());
        assert_ne!(old.system_prompt, new.system_prompt);
        assert_ne!(old.human_prompt, new.human_prompt);
        assert!(new.system_prompt.as_deref().unwrap().starts_with(old.system_prompt.as_deref().unwrap()));
        assert_eq!((old.node_name.clone(), old.description.clone()), (new.node_name.clone(), new.description.clone()));
    }

    #[test]
    fn reflexion_adds_one_loopback_with_bound() {
        let g = chain(&["diagnoser", "formatter"]);
        let next = expand_framework(&g, "diagnoser", &FrameworkTemplate::reflexion(2)).unwrap();
        let loopbacks: Vec<&EdgeSpec> =
            next.edges.iter().filter(|e| e.kind == EdgeKind::LoopBack).collect();
        assert_eq!(loopbacks.len(), 1);
        assert_eq!(loopbacks[0].max_iterations, Some(2));
        assert_eq!(loopbacks[0].condition.as_deref(), Some(REFLEXION_EXIT_CONDITION));
        assert!(next.has_edge("diagnoser", "diagnoser_critic"));
        assert!(next.has_edge("diagnoser_critic", "formatter"), "onward flow moves to the critic");
        assert!(!next.has_edge("diagnoser", "formatter"));
        assert_eq!(next.nodes.len(), g.nodes.len() + 1);
    }

    #[test]
    fn reflexion_requires_max_reflections() {
        let g = WorkflowGraph::baseline("g");
        let template = FrameworkTemplate {
            template_id: TemplateId::Reflexion,
            parameters: TemplateParams::default(),
        };
        assert!(matches!(
            expand_framework(&g, "diagnoser", &template),
            Err(OpError::IncompletePayload { .. })
        ));
    }

    #[test]
    fn round_table_three_experts_two_rounds_adds_seven_nodes() {
        let g = WorkflowGraph::baseline("g");
        let template = FrameworkTemplate::round_table(&["dermatologist", "radiologist", "pathologist"], 2);
        let next = expand_framework(&g, "diagnoser", &template).unwrap();
        assert_eq!(next.nodes.len(), g.nodes.len() + 7);
        assert_eq!(next.stats().parallel_block_count, 1);
        assert_eq!(next.output_node, "diagnoser_aggregator");
        // Round 2 refines in role order before aggregation.
        assert!(next.has_edge("diagnoser_dermatologist_r2", "diagnoser_radiologist_r2"));
        assert!(next.has_edge("diagnoser_radiologist_r2", "diagnoser_pathologist_r2"));
        assert!(next.has_edge("diagnoser_pathologist_r2", "diagnoser_aggregator"));
    }

    #[test]
    fn round_table_single_round_fans_into_aggregator() {
        let g = WorkflowGraph::baseline("g");
        let template = FrameworkTemplate::round_table(&["dermatologist", "radiologist"], 1);
        let next = expand_framework(&g, "diagnoser", &template).unwrap();
        assert_eq!(next.nodes.len(), g.nodes.len() + 3);
        assert!(next.has_edge("diagnoser_dermatologist_r1", "diagnoser_aggregator"));
        assert_eq!(
            next.edge("diagnoser_dermatologist_r1", "diagnoser_aggregator").unwrap().kind,
            EdgeKind::ParallelFanIn
        );
    }

    #[test]
    fn round_table_parameter_validation() {
        let g = WorkflowGraph::baseline("g");
        for template in [
            FrameworkTemplate::round_table(&["solo"], 2),
            FrameworkTemplate::round_table(&["a", "b"], 0),
        ] {
            assert!(matches!(
                expand_framework(&g, "diagnoser", &template),
                Err(OpError::IncompletePayload { .. })
            ));
        }
    }

    proptest! {
        #[test]
        fn round_table_node_count_is_experts_times_rounds_plus_one(
            experts in 2usize..=5,
            rounds in 1u32..=4,
        ) {
            let roles: Vec<String> = (0..experts).map(|i| format!("expert role {i}")).collect();
            let role_refs: Vec<&str> = roles.iter().map(String::as_str).collect();
            let g = WorkflowGraph::baseline("g");
            let template = FrameworkTemplate::round_table(&role_refs, rounds);
            let next = expand_framework(&g, "diagnoser", &template).unwrap();
            prop_assert_eq!(next.nodes.len(), g.nodes.len() + experts * rounds as usize + 1);
            prop_assert_eq!(next.version, g.version + 1);
            prop_assert!(validate_graph(&next).ok);
        }
    }

    #[test]
    fn cmd_builds_two_groups_and_merge() {
        let g = WorkflowGraph::baseline("g");
        let template = FrameworkTemplate::cmd(&["dermatologist", "radiologist"], 2);
        let next = expand_framework(&g, "diagnoser", &template).unwrap();
        // 2 group leads + 1 merge + 2 × (2·2 + 1) experts/aggregators.
        assert_eq!(next.nodes.len(), g.nodes.len() + 3 + 2 * 5);
        assert_eq!(next.stats().parallel_block_count, 3);
        assert_eq!(next.output_node, "diagnoser_cmd_merge");
        assert_eq!(next.version, g.version + 1);
        assert!(next.has_edge("diagnoser_group1_aggregator", "diagnoser_cmd_merge"));
    }

    #[test]
    fn apply_operation_round_trips_wire_format() {
        let g = chain(&["a", "b"]);
        let json = r#"{
            "op_kind": "AddLoop",
            "payload": {"body_entry": "a", "body_exit": "b", "exit_condition": "stable output"},
            "origin": "Suggestion"
        }"#;
        let op = WorkflowOperation::from_json_str(json).unwrap();
        assert_eq!(op.op_kind, OpKind::AddLoop);
        let next = apply_operation(&g, &op).unwrap();
        assert_eq!(next.stats().loop_count, 1);
        let edge = next.edges.iter().find(|e| e.kind == EdgeKind::LoopBack).unwrap();
        assert_eq!(edge.max_iterations, Some(DEFAULT_MAX_ITERATIONS));
        assert_eq!(next.version, g.version + 1);

        let reparsed = WorkflowOperation::from_json_str(&op.to_json_string()).unwrap();
        assert_eq!(reparsed, op);
    }

    #[test]
    fn apply_operation_schema_violations_are_incomplete_payload() {
        let g = WorkflowGraph::baseline("g");
        // AddNode whose NodeSpec is missing node_name.
        let op = WorkflowOperation::new(
            OpKind::AddNode,
            serde_json::json!({
                "node": {"node_id": "x", "kind": "Basic", "description": "d"},
                "after": "diagnoser"
            }),
            OpOrigin::Suggestion,
        );
        assert!(matches!(
            apply_operation(&g, &op),
            Err(OpError::IncompletePayload { op_kind: OpKind::AddNode, .. })
        ));

        let unknown_field = WorkflowOperation::new(
            OpKind::RemoveNode,
            serde_json::json!({"node_id": "diagnoser", "force": true}),
            OpOrigin::Manual,
        );
        assert!(matches!(
            apply_operation(&g, &unknown_field),
            Err(OpError::IncompletePayload { .. })
        ));
    }

    #[test]
    fn every_successful_op_is_valid_and_version_plus_one() {
        let g = chain(&["a", "b", "c"]);
        let ops = vec![
            WorkflowOperation::new(
                OpKind::ModifyPrompts,
                serde_json::json!({"node_id": "b", "human_prompt": "updated {{image_ref}}"}),
                OpOrigin::Suggestion,
            ),
            WorkflowOperation::new(
                OpKind::AddNode,
                serde_json::to_value(AddNodePayload { node: basic("mid"), after: "a".into() })
                    .unwrap(),
                OpOrigin::Suggestion,
            ),
            WorkflowOperation::new(
                OpKind::AddLoop,
                serde_json::json!({
                    "body_entry": "b", "body_exit": "c",
                    "exit_condition": "stable", "max_iterations": 2
                }),
                OpOrigin::Seed,
            ),
            WorkflowOperation::new(
                OpKind::ExpandFramework,
                serde_json::json!({
                    "anchor": "b",
                    "template": {"template_id": "ChainOfThought"}
                }),
                OpOrigin::Manual,
            ),
        ];
        for op in ops {
            let next = apply_operation(&g, &op).unwrap_or_else(|e| panic!("{:?}: {e}", op.op_kind));
            assert_eq!(next.version, g.version + 1, "{:?}", op.op_kind);
            assert!(validate_graph(&next).ok, "{:?}", op.op_kind);
        }
    }

    #[test]
    fn template_wire_names_are_stable() {
        for (id, expected) in [
            (TemplateId::ChainOfThought, "\"ChainOfThought\""),
            (TemplateId::Reflexion, "\"Reflexion\""),
            (TemplateId::RoundTable, "\"RoundTable\""),
            (TemplateId::Cmd, "\"CMD\""),
        ] {
            assert_eq!(serde_json::to_string(&id).unwrap(), expected);
        }
    }
}
