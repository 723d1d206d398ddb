//! Executes a validated workflow graph on one case: schedules nodes,
//! renders prompts, calls the LLM and tool backends, evaluates branch and
//! loop-exit conditions, fuses parallel arms, and records a full trace.
//!
//! Execution always halts: loops are bounded by their `max_iterations` and
//! the whole run by a global step budget. Failures never panic — they
//! surface as a `Failed` trace carrying the partial step list.

use crate::graph::{resolve_parallel_block, validate_graph, EdgeKind, NodeKind, WorkflowGraph};
use crate::llm::{render_prompt, LlmClient, LlmRequest, LlmResponse};
use crate::tools::ToolRegistry;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};
use thiserror::Error;

/// One labeled case to diagnose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_ref: String,
    pub label: String,
    pub label_vocabulary: Vec<String>,
    /// Precomputed embedding for the case image, consumed by the
    /// image-search tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embedding: Option<Vec<f64>>,
}

impl CaseRecord {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.case_id.trim().is_empty() {
            out.push("case_id is empty".to_string());
        }
        if self.label_vocabulary.is_empty() {
            out.push("label_vocabulary is empty".to_string());
        }
        if !self.label_vocabulary.contains(&self.label) {
            out.push(format!("label {} is not in label_vocabulary", self.label));
        }
        out
    }
}

/// One executed step: a node call (LLM or tool) or a router consultation.
/// Router steps carry the source node id with a `::router` or `::exit`
/// suffix so they never collide with node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub node_id: String,
    pub rendered_system_prompt: String,
    /// The rendered human prompt, or the tool call for tool nodes.
    pub rendered_human_prompt: String,
    pub raw_output: String,
    pub parsed_output: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceStatus {
    Completed,
    Truncated,
    Failed,
}

/// Complete record of one case execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub case_id: String,
    pub graph_version: u64,
    pub steps: Vec<StepRecord>,
    pub loop_iteration_counts: BTreeMap<String, u32>,
    pub branch_choices: BTreeMap<String, String>,
    pub final_ranking: Vec<String>,
    pub status: TraceStatus,
    /// True when any backend reply was a refusal; the evaluation layer
    /// excludes such cases.
    pub refused: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExecutionTrace {
    pub fn total_prompt_tokens(&self) -> u64 {
        self.steps.iter().map(|s| s.prompt_tokens).sum()
    }

    pub fn total_completion_tokens(&self) -> u64 {
        self.steps.iter().map(|s| s.completion_tokens).sum()
    }
}

/// Runtime limits and sampling knobs threaded through every backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub max_total_steps: u32,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub concurrent_arms: bool,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits {
            max_total_steps: 64,
            timeout_secs: 120,
            retries: 2,
            retry_backoff_ms: 100,
            concurrent_arms: true,
            temperature: 1.0,
            seed: Some(42),
        }
    }
}

/// Named values available for `{{placeholder}}` substitution: case fields,
/// upstream node outputs by node id, tool results, the current loop
/// iteration, and `latest_output` (the most recent step's text).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeContext {
    values: BTreeMap<String, String>,
}

impl NodeContext {
    pub fn for_case(case: &CaseRecord) -> Self {
        let mut ctx = NodeContext::default();
        ctx.set("case_id", &case.case_id);
        ctx.set("image_ref", &case.image_ref);
        ctx.set("label_vocabulary", case.label_vocabulary.join(", "));
        ctx.set("loop_iteration", "1");
        ctx.set("latest_output", "");
        if let Some(embedding) = &case.query_embedding {
            ctx.set(
                "query_embedding",
                serde_json::to_string(embedding).expect("serializable vector"),
            );
        }
        ctx
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.values.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no ranking entries matched the label vocabulary")]
    EmptyRanking,
}

const ROUTER_SYSTEM_PROMPT: &str = "You are the routing controller of a diagnostic workflow. \
     Answer with exactly one of the offered labels and nothing else.";
const EXIT_SYSTEM_PROMPT: &str = "You are the loop controller of a diagnostic workflow. \
     Answer yes or no and nothing else.";

/// Picks a branch label for a condition. Off-list or unparseable replies
/// and backend failures all fall back to `"default"`; nothing is surfaced.
pub fn evaluate_condition(
    condition: &str,
    ctx: &NodeContext,
    branch_labels: &[String],
    llm: &dyn LlmClient,
) -> String {
    route_condition(condition, ctx, branch_labels, llm, &ExecLimits::default()).0
}

fn route_condition(
    condition: &str,
    ctx: &NodeContext,
    branch_labels: &[String],
    llm: &dyn LlmClient,
    limits: &ExecLimits,
) -> (String, Option<(LlmRequest, LlmResponse)>) {
    let human = format!(
        "Condition: {condition}\nLatest output:\n{}\nLabels: {}\nWhich label applies? \
         Reply with exactly one label.",
        ctx.get("latest_output").unwrap_or(""),
        branch_labels.join(", ")
    );
    let req = request(ROUTER_SYSTEM_PROMPT, &human, limits);
    match llm.complete(&req) {
        Ok(resp) => {
            let label = match_label(&resp.text, branch_labels);
            (label, Some((req, resp)))
        }
        Err(_) => ("default".to_string(), None),
    }
}

fn match_label(reply: &str, branch_labels: &[String]) -> String {
    let normalized = reply.trim().to_lowercase();
    if let Some(label) = branch_labels.iter().find(|l| l.trim().to_lowercase() == normalized) {
        return label.clone();
    }
    let contained: Vec<&String> = branch_labels
        .iter()
        .filter(|l| normalized.contains(&l.trim().to_lowercase()))
        .collect();
    match contained.as_slice() {
        [only] => (*only).clone(),
        _ => "default".to_string(),
    }
}

/// Decides whether a loop exits after a body pass. The iteration bound
/// dominates; otherwise the router's yes/no answer decides, with
/// unparseable output exiting (fail-safe).
pub fn evaluate_exit(
    condition: &str,
    ctx: &NodeContext,
    iteration: u32,
    max_iterations: u32,
    llm: &dyn LlmClient,
) -> bool {
    route_exit(condition, ctx, iteration, max_iterations, llm, &ExecLimits::default()).0
}

fn route_exit(
    condition: &str,
    ctx: &NodeContext,
    iteration: u32,
    max_iterations: u32,
    llm: &dyn LlmClient,
    limits: &ExecLimits,
) -> (bool, Option<(LlmRequest, LlmResponse)>) {
    if iteration >= max_iterations {
        return (true, None);
    }
    let human = format!(
        "Exit condition: {condition}\nIteration {iteration} of {max_iterations}.\n\
         Latest output:\n{}\nHas the exit condition been satisfied? Answer yes or no.",
        ctx.get("latest_output").unwrap_or("")
    );
    let req = request(EXIT_SYSTEM_PROMPT, &human, limits);
    match llm.complete(&req) {
        Ok(resp) => {
            let exit = parse_yes_no(&resp.text).unwrap_or(true);
            (exit, Some((req, resp)))
        }
        Err(_) => (true, None),
    }
}

pub(crate) fn parse_yes_no(reply: &str) -> Option<bool> {
    reply
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .find_map(|token| match token {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
}

fn request(system: &str, human: &str, limits: &ExecLimits) -> LlmRequest {
    let mut req = LlmRequest::new(system, human);
    req.temperature = limits.temperature;
    req.seed = limits.seed;
    req
}

/// Extracts an ordered label ranking from the output node's reply: split on
/// numbering and list separators, map entries to the vocabulary by
/// normalized exact match then unique-substring match, drop the rest,
/// deduplicate preserving order. Short lists are allowed.
pub fn parse_final_ranking(raw_output: &str, vocab: &[String]) -> Result<Vec<String>, ExecError> {
    let numbering = regex::Regex::new(r"\d+\s*[.):]\s*").expect("valid regex");
    let delimited = numbering.replace_all(raw_output, "\n");
    let mut ranking: Vec<String> = Vec::new();
    for piece in delimited.split(['\n', ',', ';']) {
        let entry = piece.trim().trim_matches(['*', '-', '#', '.', ':']).trim().to_lowercase();
        if entry.is_empty() {
            continue;
        }
        let exact = vocab.iter().find(|label| label.trim().to_lowercase() == entry);
        let matched = exact.or_else(|| {
            let hits: Vec<&String> = vocab
                .iter()
                .filter(|label| {
                    let l = label.trim().to_lowercase();
                    l.contains(&entry) || entry.contains(&l)
                })
                .collect();
            match hits.as_slice() {
                [only] => Some(*only),
                _ => None,
            }
        });
        if let Some(label) = matched {
            if !ranking.contains(label) {
                ranking.push(label.clone());
            }
        }
    }
    if ranking.is_empty() {
        return Err(ExecError::EmptyRanking);
    }
    Ok(ranking)
}

/// Runs one case through the graph and records everything. Never panics on
/// backend behavior: failures produce a `Failed` trace with the partial
/// step list; truncation by the step budget produces `Truncated`.
pub fn execute(
    graph: &WorkflowGraph,
    case: &CaseRecord,
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    limits: &ExecLimits,
) -> ExecutionTrace {
    let mut trace = ExecutionTrace {
        case_id: case.case_id.clone(),
        graph_version: graph.version,
        steps: Vec::new(),
        loop_iteration_counts: BTreeMap::new(),
        branch_choices: BTreeMap::new(),
        final_ranking: Vec::new(),
        status: TraceStatus::Completed,
        refused: false,
        failure: None,
    };

    let report = validate_graph(graph);
    if !report.ok {
        trace.status = TraceStatus::Failed;
        trace.failure = Some(format!("graph failed validation: {}", report.summary()));
        return trace;
    }
    if limits.max_total_steps == 0 {
        trace.status = TraceStatus::Failed;
        trace.failure = Some("max_total_steps must be at least 1".to_string());
        return trace;
    }

    let engine = Engine { graph, case, llm, tools, limits };
    let mut state = RunState {
        ctx: NodeContext::for_case(case),
        steps: Vec::new(),
        loop_counts: BTreeMap::new(),
        branch_choices: BTreeMap::new(),
        steps_used: 0,
        budget: limits.max_total_steps,
        refused: false,
    };
    let end = engine.walk(&graph.entry_node, &mut state, None);

    trace.steps = state.steps;
    trace.loop_iteration_counts = state.loop_counts;
    trace.branch_choices = state.branch_choices;
    trace.refused = state.refused;
    match end {
        WalkEnd::Finished => trace.status = TraceStatus::Completed,
        WalkEnd::Truncated => trace.status = TraceStatus::Truncated,
        WalkEnd::Failed(message) => {
            trace.status = TraceStatus::Failed;
            trace.failure = Some(message);
        }
    }
    if trace.status != TraceStatus::Failed {
        if let Some(step) = trace.steps.iter().rev().find(|s| s.node_id == graph.output_node) {
            if let Ok(ranking) = parse_final_ranking(&step.raw_output, &case.label_vocabulary) {
                trace.final_ranking = ranking;
            }
        }
    }
    trace
}

enum WalkEnd {
    Finished,
    Truncated,
    Failed(String),
}

struct RunState {
    ctx: NodeContext,
    steps: Vec<StepRecord>,
    loop_counts: BTreeMap<String, u32>,
    branch_choices: BTreeMap<String, String>,
    steps_used: u32,
    budget: u32,
    refused: bool,
}

struct Engine<'a> {
    graph: &'a WorkflowGraph,
    case: &'a CaseRecord,
    llm: &'a dyn LlmClient,
    tools: &'a ToolRegistry,
    limits: &'a ExecLimits,
}

impl Engine<'_> {
    /// Walks from `start` until the flow ends, fails, or runs out of
    /// budget. Inside a parallel arm, `boundary` is the fusion node and the
    /// walk ends at the arm's fan-in edge.
    fn walk(&self, start: &str, state: &mut RunState, boundary: Option<&str>) -> WalkEnd {
        let mut current = start.to_string();
        loop {
            if state.steps_used >= state.budget {
                return WalkEnd::Truncated;
            }
            if let Err(message) = self.execute_node(&current, state) {
                return WalkEnd::Failed(message);
            }

            let outgoing = self.graph.outgoing(&current);
            if outgoing.is_empty() {
                return WalkEnd::Finished;
            }

            if outgoing.iter().any(|e| e.kind == EdgeKind::ParallelFanOut) {
                match self.run_parallel_block(&current, state) {
                    Ok(fusion) => {
                        current = fusion;
                        continue;
                    }
                    Err(end) => return end,
                }
            }

            if let Some(fan_in) = outgoing.iter().find(|e| e.kind == EdgeKind::ParallelFanIn) {
                debug_assert_eq!(boundary, Some(fan_in.target.as_str()));
                return WalkEnd::Finished;
            }

            if let Some(loopback) = outgoing.iter().find(|e| e.kind == EdgeKind::LoopBack) {
                let count = state.loop_counts.entry(current.clone()).or_insert(0);
                *count += 1;
                let iteration = *count;
                let max = loopback.max_iterations.unwrap_or(1);
                let condition = loopback.condition.clone().unwrap_or_default();
                let (exit, consulted) =
                    route_exit(&condition, &state.ctx, iteration, max, self.llm, self.limits);
                if let Some((req, resp)) = consulted {
                    self.record_router_step(state, &format!("{current}::exit"), &req, &resp);
                }
                if exit {
                    match outgoing.iter().find(|e| e.kind == EdgeKind::Sequential) {
                        Some(edge) => current = edge.target.clone(),
                        None => return WalkEnd::Finished,
                    }
                } else {
                    state.ctx.set("loop_iteration", (iteration + 1).to_string());
                    current = loopback.target.clone();
                }
                continue;
            }

            let branches: Vec<_> =
                outgoing.iter().filter(|e| e.kind == EdgeKind::ConditionalBranch).collect();
            if !branches.is_empty() {
                let labels: Vec<String> = branches
                    .iter()
                    .filter_map(|e| e.branch_label.clone())
                    .collect();
                let condition = branches[0].condition.clone().unwrap_or_default();
                let (label, consulted) =
                    route_condition(&condition, &state.ctx, &labels, self.llm, self.limits);
                if let Some((req, resp)) = consulted {
                    self.record_router_step(state, &format!("{current}::router"), &req, &resp);
                }
                state.branch_choices.insert(current.clone(), label.clone());
                let chosen = branches
                    .iter()
                    .find(|e| e.branch_label.as_deref() == Some(label.as_str()))
                    .expect("validation guarantees the chosen label exists");
                current = chosen.target.clone();
                continue;
            }

            let sequential = outgoing
                .iter()
                .find(|e| e.kind == EdgeKind::Sequential)
                .expect("validation guarantees a coherent continuation");
            current = sequential.target.clone();
        }
    }

    fn execute_node(&self, node_id: &str, state: &mut RunState) -> Result<(), String> {
        let node = self
            .graph
            .node(node_id)
            .ok_or_else(|| format!("node {node_id} disappeared from the graph"))?;
        let started = Instant::now();
        let step = match node.kind {
            NodeKind::Basic => {
                let system = render_prompt(
                    node.system_prompt.as_deref().unwrap_or(""),
                    state.ctx.values(),
                )
                .map_err(|e| format!("node {node_id}: {e}"))?;
                let human = render_prompt(
                    node.human_prompt.as_deref().unwrap_or(""),
                    state.ctx.values(),
                )
                .map_err(|e| format!("node {node_id}: {e}"))?;
                let mut req = request(&system, &human, self.limits);
                req.image_ref = Some(self.case.image_ref.clone());
                let resp = self
                    .with_retries(|| self.llm.complete(&req).map_err(|e| e.to_string()))
                    .map_err(|e| format!("node {node_id}: backend failure: {e}"))?;
                if resp.refused {
                    state.refused = true;
                }
                StepRecord {
                    node_id: node_id.to_string(),
                    rendered_system_prompt: system,
                    rendered_human_prompt: human,
                    raw_output: resp.text.clone(),
                    parsed_output: resp.text.trim().to_string(),
                    prompt_tokens: resp.prompt_tokens,
                    completion_tokens: resp.completion_tokens,
                    wall_time_ms: started.elapsed().as_millis() as u64,
                }
            }
            NodeKind::Tool => {
                let tool_name = node.tool_name.clone().unwrap_or_default();
                let params = node.tool_params.clone().unwrap_or_default();
                let call = format!(
                    "{tool_name}({})",
                    serde_json::to_string(&params).expect("serializable params")
                );
                let output = self
                    .with_retries(|| {
                        self.tools
                            .invoke(&tool_name, &params, state.ctx.values())
                            .map_err(|e| e.to_string())
                    })
                    .map_err(|e| format!("node {node_id}: backend failure: {e}"))?;
                StepRecord {
                    node_id: node_id.to_string(),
                    rendered_system_prompt: String::new(),
                    rendered_human_prompt: call,
                    raw_output: output.clone(),
                    parsed_output: output.trim().to_string(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    wall_time_ms: started.elapsed().as_millis() as u64,
                }
            }
        };
        state.ctx.set(node_id, step.parsed_output.clone());
        state.ctx.set("latest_output", step.parsed_output.clone());
        state.steps.push(step);
        state.steps_used += 1;
        Ok(())
    }

    fn record_router_step(
        &self,
        state: &mut RunState,
        step_id: &str,
        req: &LlmRequest,
        resp: &LlmResponse,
    ) {
        if resp.refused {
            state.refused = true;
        }
        state.steps.push(StepRecord {
            node_id: step_id.to_string(),
            rendered_system_prompt: req.system_prompt.clone(),
            rendered_human_prompt: req.human_prompt.clone(),
            raw_output: resp.text.clone(),
            parsed_output: resp.text.trim().to_string(),
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
            wall_time_ms: 0,
        });
        state.steps_used += 1;
    }

    fn with_retries<T>(&self, call: impl Fn() -> Result<T, String>) -> Result<T, String> {
        let mut attempt = 0u32;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(_) if attempt < self.limits.retries => {
                    let backoff = self.limits.retry_backoff_ms << attempt;
                    if backoff > 0 {
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                    attempt += 1;
                }
                Err(message) => return Err(message),
            }
        }
    }

    /// Runs every arm of the block at `source` on a snapshot of the
    /// context, then merges results in node insertion order so serial and
    /// concurrent execution are indistinguishable.
    fn run_parallel_block(&self, source: &str, state: &mut RunState) -> Result<String, WalkEnd> {
        let block = resolve_parallel_block(self.graph, source)
            .map_err(|m| WalkEnd::Failed(format!("parallel block at {source}: {m}")))?;
        let mut arms = block.arms.clone();
        let insertion_rank = |id: &str| {
            self.graph
                .nodes
                .iter()
                .position(|n| n.node_id == id)
                .expect("arm nodes exist")
        };
        arms.sort_by_key(|id| insertion_rank(id));

        let snapshot = state.ctx.clone();
        let arm_budget = state.budget - state.steps_used;
        let run_arm = |arm: &String| {
            let mut sub = RunState {
                ctx: snapshot.clone(),
                steps: Vec::new(),
                loop_counts: BTreeMap::new(),
                branch_choices: BTreeMap::new(),
                steps_used: 0,
                budget: arm_budget,
                refused: false,
            };
            let end = self.walk(arm, &mut sub, Some(&block.fusion));
            (sub, end)
        };

        let results: Vec<(RunState, WalkEnd)> = if self.limits.concurrent_arms {
            std::thread::scope(|scope| {
                let handles: Vec<_> =
                    arms.iter().map(|arm| scope.spawn(|| run_arm(arm))).collect();
                handles.into_iter().map(|h| h.join().expect("arm thread")).collect()
            })
        } else {
            arms.iter().map(run_arm).collect()
        };

        let mut failure: Option<WalkEnd> = None;
        for (sub, end) in results {
            state.steps.extend(sub.steps);
            state.steps_used += sub.steps_used;
            state.loop_counts.extend(sub.loop_counts);
            state.branch_choices.extend(sub.branch_choices);
            state.refused |= sub.refused;
            for (key, value) in sub.ctx.values() {
                if snapshot.get(key) != Some(value.as_str()) {
                    state.ctx.set(key.clone(), value.clone());
                }
            }
            if failure.is_none() {
                match end {
                    WalkEnd::Finished => {}
                    other => failure = Some(other),
                }
            }
        }
        match failure {
            Some(end) => Err(end),
            None => Ok(block.fusion),
        }
    }
}
