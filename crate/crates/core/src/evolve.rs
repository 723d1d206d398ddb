//! The evolution loop: run a training batch, classify failures, turn root
//! causes into suggestions, filter out infeasible ones, reformulate the
//! rest into structured operations, apply what survives validation, and
//! stop when validation accuracy converges.
//!
//! Every sub-step degrades to "no change" on failure — a bad analyzer
//! reply, an unparseable reformulation, or a rejected operation never
//! aborts the loop. All analysis prompts live in editable text files under
//! `prompts/`; [`PromptLibrary::builtin`] carries compiled-in copies.

use crate::exec::{CaseRecord, ExecLimits, ExecutionTrace};
use crate::graph::{EdgeKind, WorkflowGraph};
use crate::llm::{render_prompt, LlmClient, LlmRequest};
use crate::mermaid::to_mermaid;
use crate::metrics::{self, EvalConfig};
use crate::ops::{self, OpKind, OpOrigin, WorkflowOperation};
use crate::tools::ToolRegistry;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCategory {
    ImageUnderstanding,
    Diagnostic,
    None,
}

/// One case's failure analysis. Correct (or refused) cases get category
/// `None` and never reach the analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub case_id: String,
    pub category: ErrorCategory,
    pub root_cause: String,
    pub implicated_nodes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuggestionKind {
    Structural,
    Prompt,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub suggestion_id: String,
    pub text: String,
    pub kind: SuggestionKind,
    pub source_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedOperation {
    pub operation: WorkflowOperation,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationAccuracy {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

/// Everything that happened in one evolution iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub graph_version_before: u64,
    pub graph_version_after: u64,
    pub batch_case_ids: Vec<String>,
    pub error_reports: Vec<ErrorReport>,
    pub suggestions: Vec<Suggestion>,
    pub applied_operations: Vec<WorkflowOperation>,
    pub rejected_operations: Vec<RejectedOperation>,
    pub validation_accuracy: ValidationAccuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    /// Minimum top-1 improvement that still counts as progress.
    pub epsilon: f64,
    /// Consecutive below-epsilon iterations before stopping.
    pub window: u32,
    pub max_iterations: u32,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { epsilon: 0.01, window: 2, max_iterations: 10 }
    }
}

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("reformulation failed: {0}")]
    Reformulation(String),
    #[error("unknown prompt template {0}")]
    UnknownTemplate(String),
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

const BUILTIN_TEMPLATES: [(&str, &str); 5] = [
    ("error_analysis", include_str!("../prompts/error_analysis.txt")),
    ("suggestions", include_str!("../prompts/suggestions.txt")),
    ("feasibility", include_str!("../prompts/feasibility.txt")),
    ("reformulate_prompt", include_str!("../prompts/reformulate_prompt.txt")),
    ("reformulate_structural", include_str!("../prompts/reformulate_structural.txt")),
];

/// Named prompt templates, editable on disk without rebuilding.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        PromptLibrary {
            templates: BUILTIN_TEMPLATES
                .iter()
                .map(|(name, text)| (name.to_string(), text.to_string()))
                .collect(),
        }
    }

    /// Builtins overridden by any `<name>.txt` files found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, EvolveError> {
        let mut library = Self::builtin();
        let entries = fs::read_dir(dir).map_err(|e| EvolveError::Io {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        for entry in entries {
            let path = entry
                .map_err(|e| EvolveError::Io { path: dir.to_path_buf(), message: e.to_string() })?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let name = match path.file_stem().and_then(|s| s.to_str()) {
                Some(stem) => stem.to_string(),
                None => continue,
            };
            let text = fs::read_to_string(&path)
                .map_err(|e| EvolveError::Io { path: path.clone(), message: e.to_string() })?;
            library.templates.insert(name, text);
        }
        Ok(library)
    }

    pub fn render(
        &self,
        name: &str,
        ctx: &BTreeMap<String, String>,
    ) -> Result<String, EvolveError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| EvolveError::UnknownTemplate(name.to_string()))?;
        render_prompt(template, ctx)
            .map_err(|e| EvolveError::Template { name: name.to_string(), message: e.to_string() })
    }
}

/// Mermaid code plus an execution-ordered node listing. Analysis prompts
/// embed this text so the LLM sees execution logic rather than raw edge
/// dumps.
pub fn structure_to_prose(graph: &WorkflowGraph) -> String {
    let mut lines = Vec::new();
    let mut visited = BTreeSet::new();
    let mut counter = 0usize;
    listing(graph, &graph.entry_node, 0, false, &mut visited, &mut lines, &mut counter);
    format!(
        "{}\nExecution order:\n{}\n",
        to_mermaid(graph).code.trim_end(),
        lines.join("\n")
    )
}

fn listing(
    graph: &WorkflowGraph,
    node_id: &str,
    depth: usize,
    via_fan_out: bool,
    visited: &mut BTreeSet<String>,
    lines: &mut Vec<String>,
    counter: &mut usize,
) {
    if !visited.insert(node_id.to_string()) {
        return;
    }
    let node = match graph.node(node_id) {
        Some(node) => node,
        None => return,
    };
    let mut line = if depth == 0 {
        *counter += 1;
        format!("{}. {} ({}) — {}", counter, node.node_id, node.node_name, node.description)
    } else {
        let prefix = if via_fan_out { "- parallel arm: " } else { "- " };
        format!("{}{}{} ({}) — {}", "    ".repeat(depth), prefix, node.node_id, node.node_name, node.description)
    };
    let outgoing = graph.outgoing(node_id);
    if let Some(loop_edge) = outgoing.iter().find(|e| e.kind == EdgeKind::LoopBack) {
        line.push_str(&format!(
            " [loop ≤{} back to {}, exit: {}]",
            loop_edge.max_iterations.unwrap_or(1),
            loop_edge.target,
            loop_edge.condition.as_deref().unwrap_or("")
        ));
    }
    let branches: Vec<String> = outgoing
        .iter()
        .filter(|e| e.kind == EdgeKind::ConditionalBranch)
        .map(|e| format!("{} → {}", e.branch_label.as_deref().unwrap_or(""), e.target))
        .collect();
    if !branches.is_empty() {
        line.push_str(&format!(" [branches: {}]", branches.join(", ")));
    }
    lines.push(line);
    for edge in outgoing {
        match edge.kind {
            EdgeKind::LoopBack => {}
            EdgeKind::ParallelFanOut => {
                listing(graph, &edge.target, depth + 1, true, visited, lines, counter)
            }
            EdgeKind::ParallelFanIn => listing(
                graph,
                &edge.target,
                depth.saturating_sub(1),
                false,
                visited,
                lines,
                counter,
            ),
            _ => listing(graph, &edge.target, depth, false, visited, lines, counter),
        }
    }
}

const ANALYZER_SYSTEM: &str =
    "You audit agent workflow failures and answer strictly in the requested format.";
const SUGGESTER_SYSTEM: &str =
    "You propose concrete workflow improvements in the exact requested line format.";
const FEASIBILITY_SYSTEM: &str =
    "You judge whether a workflow change is implementable. Answer yes or no and nothing else.";
const REFORMULATOR_SYSTEM: &str =
    "You translate improvement advice into one JSON workflow operation and emit only JSON.";

/// Per-case failure analysis. Traces whose top-1 is correct — and refused
/// traces, which the metrics exclude anyway — get `None` without an LLM
/// call. Backend failures and unparseable replies fall back to a
/// `Diagnostic` report with root cause "unparsed analysis".
pub fn classify_errors(
    traces: &[ExecutionTrace],
    cases: &[CaseRecord],
    graph: &WorkflowGraph,
    llm: &dyn LlmClient,
    prompts: &PromptLibrary,
) -> Vec<ErrorReport> {
    let structure = structure_to_prose(graph);
    traces
        .iter()
        .map(|trace| {
            let label = cases
                .iter()
                .find(|c| c.case_id == trace.case_id)
                .map(|c| c.label.as_str())
                .unwrap_or("");
            let correct =
                !label.is_empty() && trace.final_ranking.first().map(String::as_str) == Some(label);
            if correct || trace.refused {
                return ErrorReport {
                    case_id: trace.case_id.clone(),
                    category: ErrorCategory::None,
                    root_cause: String::new(),
                    implicated_nodes: Vec::new(),
                };
            }
            let node_outputs = trace
                .steps
                .iter()
                .map(|s| format!("- {}: {}", s.node_id, s.parsed_output))
                .collect::<Vec<_>>()
                .join("\n");
            let mut ctx = BTreeMap::new();
            ctx.insert("structure".to_string(), structure.clone());
            ctx.insert("case_id".to_string(), trace.case_id.clone());
            ctx.insert("label".to_string(), label.to_string());
            ctx.insert("final_ranking".to_string(), trace.final_ranking.join(", "));
            ctx.insert("node_outputs".to_string(), node_outputs);
            let fallback = || ErrorReport {
                case_id: trace.case_id.clone(),
                category: ErrorCategory::Diagnostic,
                root_cause: "unparsed analysis".to_string(),
                implicated_nodes: Vec::new(),
            };
            let human = match prompts.render("error_analysis", &ctx) {
                Ok(human) => human,
                Err(_) => return fallback(),
            };
            match llm.complete(&LlmRequest::new(ANALYZER_SYSTEM, &human)) {
                Ok(resp) => parse_analysis(&resp.text, graph, &trace.case_id),
                Err(_) => fallback(),
            }
        })
        .collect()
}

fn field_value<'a>(line: &'a str, field: &str) -> Option<&'a str> {
    let trimmed = line.trim();
    if trimmed.len() < field.len() + 1 {
        return None;
    }
    let (head, rest) = trimmed.split_at(field.len());
    if head.eq_ignore_ascii_case(field) && rest.starts_with(':') {
        Some(rest[1..].trim())
    } else {
        None
    }
}

fn parse_analysis(reply: &str, graph: &WorkflowGraph, case_id: &str) -> ErrorReport {
    let mut category = None;
    let mut root_cause = String::new();
    let mut implicated = Vec::new();
    for line in reply.lines() {
        if let Some(value) = field_value(line, "CATEGORY") {
            let token: String =
                value.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
            category = if token.contains("image") {
                Some(ErrorCategory::ImageUnderstanding)
            } else if token.contains("diagnos") {
                Some(ErrorCategory::Diagnostic)
            } else if token == "none" {
                Some(ErrorCategory::None)
            } else {
                None
            };
        } else if let Some(value) = field_value(line, "ROOT_CAUSE") {
            root_cause = value.to_string();
        } else if let Some(value) = field_value(line, "NODES") {
            implicated = value
                .split([',', ';'])
                .map(str::trim)
                .filter(|id| !id.is_empty() && graph.node(id).is_some())
                .map(str::to_string)
                .collect();
        }
    }
    match category {
        Some(ErrorCategory::None) => ErrorReport {
            case_id: case_id.to_string(),
            category: ErrorCategory::None,
            root_cause: String::new(),
            implicated_nodes: Vec::new(),
        },
        Some(category) => ErrorReport {
            case_id: case_id.to_string(),
            category,
            root_cause,
            implicated_nodes: implicated,
        },
        None => ErrorReport {
            case_id: case_id.to_string(),
            category: ErrorCategory::Diagnostic,
            root_cause: "unparsed analysis".to_string(),
            implicated_nodes: Vec::new(),
        },
    }
}

fn category_name(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::ImageUnderstanding => "ImageUnderstanding",
        ErrorCategory::Diagnostic => "Diagnostic",
        ErrorCategory::None => "None",
    }
}

/// One LLM call turning grouped root causes into at most
/// `max_suggestions` improvement suggestions. No failing reports → empty
/// list without a call; backend failure → empty list.
pub fn generate_suggestions(
    reports: &[ErrorReport],
    graph: &WorkflowGraph,
    llm: &dyn LlmClient,
    prompts: &PromptLibrary,
    max_suggestions: usize,
) -> Vec<Suggestion> {
    let failing: Vec<&ErrorReport> =
        reports.iter().filter(|r| r.category != ErrorCategory::None).collect();
    if failing.is_empty() || max_suggestions == 0 {
        return Vec::new();
    }
    let root_causes = failing
        .iter()
        .map(|r| {
            format!(
                "- case {} [{}]: {} (nodes: {})",
                r.case_id,
                category_name(r.category),
                r.root_cause,
                r.implicated_nodes.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut ctx = BTreeMap::new();
    ctx.insert("structure".to_string(), structure_to_prose(graph));
    ctx.insert("root_causes".to_string(), root_causes);
    ctx.insert("max_suggestions".to_string(), max_suggestions.to_string());
    let human = match prompts.render("suggestions", &ctx) {
        Ok(human) => human,
        Err(_) => return Vec::new(),
    };
    let reply = match llm.complete(&LlmRequest::new(SUGGESTER_SYSTEM, &human)) {
        Ok(resp) => resp.text,
        Err(_) => return Vec::new(),
    };
    let source_errors: Vec<String> = failing.iter().map(|r| r.case_id.clone()).collect();
    parse_suggestions(&reply, &source_errors, max_suggestions)
}

fn parse_suggestions(
    reply: &str,
    source_errors: &[String],
    max_suggestions: usize,
) -> Vec<Suggestion> {
    let numbering = regex::Regex::new(r"^\s*\d+\s*[.)]\s*").expect("valid regex");
    let mut out = Vec::new();
    for line in reply.lines() {
        if out.len() == max_suggestions {
            break;
        }
        let line = numbering.replace(line, "");
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        if line.is_empty() {
            continue;
        }
        let (kind, text) = match line.split_once('|') {
            Some((tag, rest)) => (parse_kind_tag(tag), rest.trim().to_string()),
            None => (None, line.to_string()),
        };
        if text.is_empty() {
            continue;
        }
        let kind = kind.unwrap_or_else(|| classify_suggestion_text(&text));
        out.push(Suggestion {
            suggestion_id: format!("s{}", out.len() + 1),
            text,
            kind,
            source_errors: source_errors.to_vec(),
        });
    }
    out
}

fn parse_kind_tag(tag: &str) -> Option<SuggestionKind> {
    let tag = tag.trim().to_lowercase();
    if tag.contains("struct") {
        Some(SuggestionKind::Structural)
    } else if tag.contains("prompt") {
        Some(SuggestionKind::Prompt)
    } else {
        None
    }
}

fn classify_suggestion_text(text: &str) -> SuggestionKind {
    let lower = text.to_lowercase();
    let prompt_markers = ["prompt", "instruction", "wording", "rephrase", "reword", "clarify"];
    if prompt_markers.iter().any(|m| lower.contains(m)) {
        SuggestionKind::Prompt
    } else {
        SuggestionKind::Structural
    }
}

/// Words that the tool/node reference patterns capture but never name a
/// real tool or node ("the X tool", "tool to …", "node for …").
const REFERENCE_STOPWORDS: [&str; 44] = [
    "a", "an", "the", "this", "that", "each", "every", "new", "existing", "another",
    "additional", "external", "prompt", "prompts", "to", "for", "with", "and", "or",
    "from", "into", "by", "of", "so", "then", "which", "when", "where", "after",
    "before", "called", "named", "is", "are", "was", "were", "be", "can", "could",
    "should", "would", "will", "it", "its",
];

fn is_stopword(word: &str) -> bool {
    REFERENCE_STOPWORDS.contains(&word.to_lowercase().as_str())
}

/// Marks infeasible suggestions: references to unregistered tools,
/// modifications of nonexistent nodes, or an explicit "no" from the
/// feasibility check. Feasibility backend failures keep the suggestion.
pub fn filter_suggestions(
    suggestions: Vec<Suggestion>,
    graph: &WorkflowGraph,
    tools: &ToolRegistry,
    llm: &dyn LlmClient,
    prompts: &PromptLibrary,
) -> Vec<Suggestion> {
    let tool_before = regex::Regex::new(r#"(?i)\btool\s+[`"']?([A-Za-z0-9_\-]+)"#).expect("valid");
    let tool_after = regex::Regex::new(r#"(?i)\b([A-Za-z0-9_\-]+)[`"']?\s+tool\b"#).expect("valid");
    let node_before = regex::Regex::new(r#"(?i)\bnode\s+[`"']?([A-Za-z0-9_\-]+)"#).expect("valid");
    let node_after = regex::Regex::new(r#"(?i)\b([A-Za-z0-9_\-]+)[`"']?\s+node\b"#).expect("valid");
    let modify_verb =
        regex::Regex::new(r"(?i)\b(remove|delete|modify|update|change|rewrite|edit)\b")
            .expect("valid");
    let tool_names = tools.tool_names();

    suggestions
        .into_iter()
        .map(|mut suggestion| {
            if suggestion.kind == SuggestionKind::Infeasible {
                return suggestion;
            }
            let captures = |re: &regex::Regex| -> Vec<String> {
                re.captures_iter(&suggestion.text)
                    .map(|c| c[1].to_string())
                    .filter(|w| !is_stopword(w))
                    .collect()
            };
            let mut tool_refs = captures(&tool_before);
            tool_refs.extend(captures(&tool_after));
            if tool_refs.iter().any(|name| !tool_names.contains(&name.as_str())) {
                suggestion.kind = SuggestionKind::Infeasible;
                return suggestion;
            }
            if modify_verb.is_match(&suggestion.text) {
                let mut node_refs = captures(&node_before);
                node_refs.extend(captures(&node_after));
                if node_refs.iter().any(|id| graph.node(id).is_none()) {
                    suggestion.kind = SuggestionKind::Infeasible;
                    return suggestion;
                }
            }
            let mut ctx = BTreeMap::new();
            ctx.insert("suggestion".to_string(), suggestion.text.clone());
            ctx.insert(
                "tools".to_string(),
                if tool_names.is_empty() { "none".to_string() } else { tool_names.join(", ") },
            );
            if let Ok(human) = prompts.render("feasibility", &ctx) {
                if let Ok(resp) = llm.complete(&LlmRequest::new(FEASIBILITY_SYSTEM, &human)) {
                    if crate::exec::parse_yes_no(&resp.text) == Some(false) {
                        suggestion.kind = SuggestionKind::Infeasible;
                    }
                }
            }
            suggestion
        })
        .collect()
}

fn op_kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::AddNode => "AddNode",
        OpKind::RemoveNode => "RemoveNode",
        OpKind::ModifyPrompts => "ModifyPrompts",
        OpKind::AddConditional => "AddConditional",
        OpKind::AddLoop => "AddLoop",
        OpKind::AddParallel => "AddParallel",
        OpKind::ExpandFramework => "ExpandFramework",
    }
}

fn infer_op_kind(suggestion: &Suggestion) -> OpKind {
    if suggestion.kind == SuggestionKind::Prompt {
        return OpKind::ModifyPrompts;
    }
    let lower = suggestion.text.to_lowercase();
    let mentions = |words: &[&str]| words.iter().any(|w| lower.contains(w));
    if mentions(&[
        "round table", "round-table", "panel", "expert", "chain of thought", "chain-of-thought",
        "reflexion", "cmd", "framework",
    ]) {
        OpKind::ExpandFramework
    } else if mentions(&["loop", "verif", "recheck", "re-check", "reflect", "iterat"]) {
        OpKind::AddLoop
    } else if mentions(&["parallel", "simultaneous", "concurrent", "fan out", "fan-out"]) {
        OpKind::AddParallel
    } else if mentions(&["branch", "conditional", "triage", "route"]) {
        OpKind::AddConditional
    } else if mentions(&["remove", "delete", "drop"]) {
        OpKind::RemoveNode
    } else {
        OpKind::AddNode
    }
}

fn payload_schema(kind: OpKind) -> &'static str {
    match kind {
        OpKind::AddNode => {
            r#"{"node": {"node_id": "...", "kind": "Basic", "node_name": "...", "description": "...", "system_prompt": "...", "human_prompt": "..."}, "after": "<existing node id>"}"#
        }
        OpKind::RemoveNode => r#"{"node_id": "<existing node id>"}"#,
        OpKind::ModifyPrompts => {
            r#"{"node_id": "<existing node id>", "system_prompt": "...", "human_prompt": "..."}"#
        }
        OpKind::AddConditional => {
            r#"{"source": "<existing node id>", "condition": "...", "branches": [{"branch_label": "...", "target": "<existing node id>"}, {"branch_label": "default", "target": "<existing node id>"}]}"#
        }
        OpKind::AddLoop => {
            r#"{"body_entry": "<existing node id>", "body_exit": "<existing node id>", "exit_condition": "...", "max_iterations": 3}"#
        }
        OpKind::AddParallel => {
            r#"{"source": "<existing node id>", "arms": [{"node_id": "...", "kind": "Basic", "node_name": "...", "description": "...", "system_prompt": "...", "human_prompt": "..."}], "fusion": {"node_id": "...", "kind": "Basic", "node_name": "...", "description": "...", "system_prompt": "...", "human_prompt": "..."}}"#
        }
        OpKind::ExpandFramework => {
            r#"{"anchor": "<existing node id>", "template": {"template_id": "ChainOfThought" | "Reflexion" | "RoundTable" | "CMD", "parameters": {"expert_roles": ["..."], "rounds": 2, "max_reflections": 2}}}"#
        }
    }
}

/// Pulls the first top-level JSON object out of a reply, tolerating code
/// fences and surrounding prose.
fn extract_json(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (end > start).then(|| &reply[start..=end])
}

/// Turns one feasible suggestion into a validated wire-format operation.
/// The origin is forced to `Suggestion` regardless of what the LLM wrote.
pub fn reformulate(
    suggestion: &Suggestion,
    graph: &WorkflowGraph,
    llm: &dyn LlmClient,
    prompts: &PromptLibrary,
) -> Result<WorkflowOperation, EvolveError> {
    if suggestion.kind == SuggestionKind::Infeasible {
        return Err(EvolveError::Reformulation(
            "infeasible suggestions are never reformulated".to_string(),
        ));
    }
    let op_kind = infer_op_kind(suggestion);
    let mut ctx = BTreeMap::new();
    ctx.insert("structure".to_string(), structure_to_prose(graph));
    ctx.insert("suggestion".to_string(), suggestion.text.clone());
    let template = match suggestion.kind {
        SuggestionKind::Prompt => "reformulate_prompt",
        _ => {
            ctx.insert("op_kind".to_string(), op_kind_name(op_kind).to_string());
            ctx.insert("payload_schema".to_string(), payload_schema(op_kind).to_string());
            "reformulate_structural"
        }
    };
    let human = prompts.render(template, &ctx)?;
    let resp = llm
        .complete(&LlmRequest::new(REFORMULATOR_SYSTEM, &human))
        .map_err(|e| EvolveError::Reformulation(format!("backend failure: {e}")))?;
    let json = extract_json(&resp.text)
        .ok_or_else(|| EvolveError::Reformulation("reply contains no JSON object".to_string()))?;
    let mut op = WorkflowOperation::from_json_str(json)
        .map_err(|e| EvolveError::Reformulation(e.to_string()))?;
    op.origin = OpOrigin::Suggestion;
    Ok(op)
}

/// Knobs for one evolution run.
#[derive(Debug, Clone, Default)]
pub struct EvolveOptions {
    pub prompts: PromptLibrary,
    pub limits: ExecLimits,
    pub max_suggestions: usize,
    /// `None` runs the full training split every iteration.
    pub batch_size: Option<usize>,
}

impl EvolveOptions {
    pub fn new() -> Self {
        EvolveOptions {
            prompts: PromptLibrary::builtin(),
            limits: ExecLimits::default(),
            max_suggestions: 4,
            batch_size: None,
        }
    }
}

fn validation_accuracy(
    graph: &WorkflowGraph,
    val_cases: &[CaseRecord],
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    limits: &ExecLimits,
) -> ValidationAccuracy {
    let cfg = EvalConfig { k_list: vec![1, 3, 5], cons_n: None, limits: limits.clone() };
    match metrics::evaluate(graph, val_cases, llm, tools, &cfg) {
        Ok(report) => ValidationAccuracy {
            top1: report.top_k[&1],
            top3: report.top_k[&3],
            top5: report.top_k[&5],
        },
        Err(_) => ValidationAccuracy { top1: 0.0, top3: 0.0, top5: 0.0 },
    }
}

/// One full iteration: execute the batch, analyze, suggest, filter,
/// reformulate, apply. Prompt operations are applied before Structural
/// ones; rejected operations leave the graph untouched.
pub fn evolve_step(
    graph: &WorkflowGraph,
    iteration: u32,
    batch: &[CaseRecord],
    val_cases: &[CaseRecord],
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    opts: &EvolveOptions,
) -> (WorkflowGraph, IterationRecord) {
    let traces = metrics::run_cases(graph, batch, llm, tools, &opts.limits);
    let reports = classify_errors(&traces, batch, graph, llm, &opts.prompts);
    let generated = generate_suggestions(&reports, graph, llm, &opts.prompts, opts.max_suggestions);
    let suggestions = filter_suggestions(generated, graph, tools, llm, &opts.prompts);

    let mut current = graph.clone();
    let mut applied = Vec::new();
    let mut rejected = Vec::new();
    let prompt_first = suggestions
        .iter()
        .filter(|s| s.kind == SuggestionKind::Prompt)
        .chain(suggestions.iter().filter(|s| s.kind == SuggestionKind::Structural));
    for suggestion in prompt_first {
        let op = match reformulate(suggestion, &current, llm, &opts.prompts) {
            Ok(op) => op,
            Err(_) => continue,
        };
        match ops::apply_operation(&current, &op) {
            Ok(next) => {
                current = next;
                applied.push(op);
            }
            Err(e) => rejected.push(RejectedOperation { operation: op, reason: e.to_string() }),
        }
    }

    let accuracy = validation_accuracy(&current, val_cases, llm, tools, &opts.limits);
    let record = IterationRecord {
        iteration,
        graph_version_before: graph.version,
        graph_version_after: current.version,
        batch_case_ids: batch.iter().map(|c| c.case_id.clone()).collect(),
        error_reports: reports,
        suggestions,
        applied_operations: applied,
        rejected_operations: rejected,
        validation_accuracy: accuracy,
    };
    (current, record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOutcome {
    /// The checkpoint with the best validation top-1 (ties go to the later
    /// iteration), not necessarily the last.
    pub final_graph: WorkflowGraph,
    pub best_iteration: u32,
    pub records: Vec<IterationRecord>,
}

fn select_batch(train: &[CaseRecord], batch_size: Option<usize>, iteration: u32) -> Vec<CaseRecord> {
    match batch_size {
        None => train.to_vec(),
        Some(size) if size >= train.len() => train.to_vec(),
        Some(size) => {
            let start = ((iteration as usize - 1) * size) % train.len();
            (0..size).map(|i| train[(start + i) % train.len()].clone()).collect()
        }
    }
}

/// Runs the loop until validation top-1 stops improving by at least
/// `epsilon` for `window` consecutive iterations, or `max_iterations` is
/// reached. Iteration 0 is a baseline evaluation of the initial graph with
/// no changes. With `out_dir` set, writes `checkpoints/iter_<N>_v<V>.json`,
/// `evolution_log.jsonl` and `accuracy.csv`.
#[allow(clippy::too_many_arguments)]
pub fn run_evolution(
    initial: &WorkflowGraph,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    cfg: &ConvergenceConfig,
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    opts: &EvolveOptions,
    out_dir: Option<&Path>,
) -> Result<EvolutionOutcome, EvolveError> {
    if cfg.max_iterations == 0 {
        return Ok(EvolutionOutcome {
            final_graph: initial.clone(),
            best_iteration: 0,
            records: Vec::new(),
        });
    }

    let mut graphs = vec![initial.clone()];
    let mut records = vec![IterationRecord {
        iteration: 0,
        graph_version_before: initial.version,
        graph_version_after: initial.version,
        batch_case_ids: Vec::new(),
        error_reports: Vec::new(),
        suggestions: Vec::new(),
        applied_operations: Vec::new(),
        rejected_operations: Vec::new(),
        validation_accuracy: validation_accuracy(initial, val_cases, llm, tools, &opts.limits),
    }];

    let mut flat_streak = 0u32;
    for iteration in 1..=cfg.max_iterations {
        let batch = select_batch(train_cases, opts.batch_size, iteration);
        let (next, record) = evolve_step(
            graphs.last().expect("non-empty"),
            iteration,
            &batch,
            val_cases,
            llm,
            tools,
            opts,
        );
        let improvement = record.validation_accuracy.top1
            - records.last().expect("non-empty").validation_accuracy.top1;
        graphs.push(next);
        records.push(record);
        if improvement < cfg.epsilon {
            flat_streak += 1;
        } else {
            flat_streak = 0;
        }
        if flat_streak >= cfg.window {
            break;
        }
    }

    // max_by returns the last maximum, which is exactly the ties-go-later
    // rule.
    let best = records
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.validation_accuracy
                .top1
                .partial_cmp(&b.validation_accuracy.top1)
                .expect("accuracies are finite")
        })
        .map(|(i, _)| i)
        .expect("at least the baseline record");

    if let Some(dir) = out_dir {
        write_outputs(dir, &graphs, &records)?;
    }

    Ok(EvolutionOutcome {
        final_graph: graphs[best].clone(),
        best_iteration: best as u32,
        records,
    })
}

fn write_outputs(
    dir: &Path,
    graphs: &[WorkflowGraph],
    records: &[IterationRecord],
) -> Result<(), EvolveError> {
    let io_err = |path: &Path, e: &dyn std::fmt::Display| EvolveError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let checkpoints = dir.join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(|e| io_err(&checkpoints, &e))?;
    for (iteration, graph) in graphs.iter().enumerate() {
        let path = checkpoints.join(format!("iter_{}_v{}.json", iteration, graph.version));
        let json = serde_json::to_string_pretty(graph).expect("serializable graph");
        fs::write(&path, json).map_err(|e| io_err(&path, &e))?;
    }

    let log_path = dir.join("evolution_log.jsonl");
    let log = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable record"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    fs::write(&log_path, log).map_err(|e| io_err(&log_path, &e))?;

    let csv_path = dir.join("accuracy.csv");
    let mut csv = String::from("iteration,top1,top3,top5\n");
    for record in records {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            record.iteration,
            record.validation_accuracy.top1,
            record.validation_accuracy.top3,
            record.validation_accuracy.top5
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, &e))?;
    Ok(())
}
