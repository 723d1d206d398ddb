//! Evaluation harness: top-k accuracy, per-class consensus (cons@n),
//! per-class accuracy, and cost/complexity accounting over a batch of
//! execution traces.
//!
//! Failed and refused cases are excluded from accuracy denominators; the
//! report carries raw counts so the exclusion is visible. Token means are
//! taken over every executed case, since refused and truncated runs still
//! consume tokens.

use crate::exec::{self, CaseRecord, ExecLimits, ExecutionTrace, TraceStatus};
use crate::graph::WorkflowGraph;
use crate::llm::LlmClient;
use crate::tools::ToolRegistry;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// One case's outcome reduced to what the metrics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub label: String,
    pub final_ranking: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub status: TraceStatus,
    pub refused: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub cases: Vec<CasePrediction>,
}

impl PredictionSet {
    pub fn from_traces(traces: &[ExecutionTrace], cases: &[CaseRecord]) -> Self {
        let labels: BTreeMap<&str, &str> = cases
            .iter()
            .map(|c| (c.case_id.as_str(), c.label.as_str()))
            .collect();
        PredictionSet {
            cases: traces
                .iter()
                .map(|t| CasePrediction {
                    case_id: t.case_id.clone(),
                    label: labels.get(t.case_id.as_str()).copied().unwrap_or("").to_string(),
                    final_ranking: t.final_ranking.clone(),
                    prompt_tokens: t.total_prompt_tokens(),
                    completion_tokens: t.total_completion_tokens(),
                    status: t.status,
                    refused: t.refused,
                })
                .collect(),
        }
    }

    /// Cases that count toward accuracy denominators.
    pub fn scored(&self) -> impl Iterator<Item = &CasePrediction> {
        self.cases
            .iter()
            .filter(|c| c.status != TraceStatus::Failed && !c.refused)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction set is empty (or every case was excluded)")]
    EmptyPredictionSet,
    #[error("k and n must be at least 1")]
    InvalidCount,
    #[error("class {label} has {found} samples, expected {expected}")]
    WrongSampleCount { label: String, expected: usize, found: usize },
}

/// Fraction of scored cases whose true label appears in the first
/// `min(k, len(ranking))` entries.
pub fn top_k_accuracy(preds: &PredictionSet, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidCount);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for case in preds.scored() {
        total += 1;
        let cutoff = k.min(case.final_ranking.len());
        if case.final_ranking[..cutoff].contains(&case.label) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyPredictionSet);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsAtN {
    pub n: usize,
    pub per_class: BTreeMap<String, u8>,
    pub aggregate: f64,
}

/// Majority-vote consensus per class over exactly `n` top-1 predictions.
/// Ties go to the lexicographically smallest predicted label before the
/// comparison against the class label.
pub fn cons_at_n(
    samples_per_class: &BTreeMap<String, Vec<String>>,
    n: usize,
) -> Result<ConsAtN, MetricsError> {
    if n == 0 {
        return Err(MetricsError::InvalidCount);
    }
    if samples_per_class.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }
    let mut per_class = BTreeMap::new();
    for (label, samples) in samples_per_class {
        if samples.len() != n {
            return Err(MetricsError::WrongSampleCount {
                label: label.clone(),
                expected: n,
                found: samples.len(),
            });
        }
        let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
        for sample in samples {
            *tally.entry(sample.as_str()).or_default() += 1;
        }
        // BTreeMap iteration is lexicographic, so the first max is the tie
        // winner.
        let winner = tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l)
            .expect("n >= 1 samples");
        per_class.insert(label.clone(), u8::from(winner == label));
    }
    let aggregate = per_class.values().map(|v| f64::from(*v)).sum::<f64>() / per_class.len() as f64;
    Ok(ConsAtN { n, per_class, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub node_count: usize,
    pub branch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub graph_version: u64,
    pub top_k: BTreeMap<usize, f64>,
    pub per_class_top1: BTreeMap<String, f64>,
    /// Present only when every class has exactly the configured number of
    /// samples.
    pub cons_at_n: Option<ConsAtN>,
    pub cost: CostSummary,
    pub total_cases: usize,
    pub excluded_cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub cons_n: Option<usize>,
    pub limits: ExecLimits,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_list: vec![1, 3, 5], cons_n: None, limits: ExecLimits::default() }
    }
}

/// Executes every case against the graph and returns the traces in case
/// order.
pub fn run_cases(
    graph: &WorkflowGraph,
    cases: &[CaseRecord],
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    limits: &ExecLimits,
) -> Vec<ExecutionTrace> {
    cases
        .iter()
        .map(|case| exec::execute(graph, case, llm, tools, limits))
        .collect()
}

/// Computes the full report from already-collected traces.
pub fn evaluate_traces(
    graph: &WorkflowGraph,
    cases: &[CaseRecord],
    traces: &[ExecutionTrace],
    cfg: &EvalConfig,
) -> Result<EvaluationReport, MetricsError> {
    let preds = PredictionSet::from_traces(traces, cases);
    if preds.cases.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }

    let mut top_k = BTreeMap::new();
    for &k in &cfg.k_list {
        top_k.insert(k, top_k_accuracy(&preds, k)?);
    }

    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for case in preds.scored() {
        let entry = per_class.entry(case.label.clone()).or_default();
        entry.1 += 1;
        if case.final_ranking.first() == Some(&case.label) {
            entry.0 += 1;
        }
    }
    let per_class_top1 = per_class
        .iter()
        .map(|(label, (hits, total))| (label.clone(), *hits as f64 / *total as f64))
        .collect();

    let cons = cfg.cons_n.and_then(|n| {
        let mut samples: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for case in preds.scored() {
            samples
                .entry(case.label.clone())
                .or_default()
                .push(case.final_ranking.first().cloned().unwrap_or_default());
        }
        cons_at_n(&samples, n).ok()
    });

    let total = preds.cases.len();
    let scored = preds.scored().count();
    let stats = graph.stats();
    Ok(EvaluationReport {
        graph_version: graph.version,
        top_k,
        per_class_top1,
        cons_at_n: cons,
        cost: CostSummary {
            mean_prompt_tokens: preds.cases.iter().map(|c| c.prompt_tokens).sum::<u64>() as f64
                / total as f64,
            mean_completion_tokens: preds.cases.iter().map(|c| c.completion_tokens).sum::<u64>()
                as f64
                / total as f64,
            node_count: stats.node_count,
            branch_count: stats.branch_count,
        },
        total_cases: total,
        excluded_cases: total - scored,
    })
}

/// Runs every case and computes the report in one call.
pub fn evaluate(
    graph: &WorkflowGraph,
    cases: &[CaseRecord],
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    cfg: &EvalConfig,
) -> Result<EvaluationReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }
    let traces = run_cases(graph, cases, llm, tools, &cfg.limits);
    evaluate_traces(graph, cases, &traces, cfg)
}
