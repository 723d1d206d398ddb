//! `evoflow` — validate, execute, evaluate, export and evolve workflow
//! graphs from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration error, 4 input
//! data error, 5 validation failure, 6 runtime failure.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use evoflow_core::dataset::{self, DatasetManifest, Split};
use evoflow_core::evolve;
use evoflow_core::exec::{self, CaseRecord, TraceStatus};
use evoflow_core::graph::{validate_graph, WorkflowGraph};
use evoflow_core::mermaid::to_mermaid;
use evoflow_core::metrics::{self, EvalConfig};
use evoflow_core::tools::{format_search_result, EmbeddingIndex};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { code: 3, kind: "config", message }
    }

    pub fn data(message: String) -> Self {
        CliError { code: 4, kind: "data", message }
    }

    pub fn invalid(message: String) -> Self {
        CliError { code: 5, kind: "validation", message }
    }

    pub fn runtime(message: String) -> Self {
        CliError { code: 6, kind: "runtime", message }
    }
}

#[derive(Parser)]
#[command(
    name = "evoflow",
    version,
    about = "Evolving LLM agent workflows over validated graphs"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout and structured errors on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// Override the backend seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structurally validate a workflow checkpoint file.
    Validate {
        /// Workflow checkpoint (JSON).
        workflow: PathBuf,
    },
    /// Execute a single case through a workflow and print the trace.
    Run(RunArgs),
    /// Run the evolution loop described by a config file.
    Evolve {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a workflow over one dataset split.
    Eval(EvalArgs),
    /// Write the Mermaid flowchart for a checkpoint.
    ExportMermaid {
        /// Workflow checkpoint (JSON).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output Mermaid file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or query an embedding index.
    #[command(subcommand)]
    Index(IndexCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Workflow checkpoint (JSON).
    #[arg(long)]
    graph: PathBuf,
    /// Case manifest (JSONL).
    #[arg(long)]
    cases: PathBuf,
    /// Split file; defaults to the manifest's `.splits.json` sibling.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Case id to execute.
    #[arg(long = "case")]
    case_id: String,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Also write the full trace JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Workflow checkpoint (JSON).
    #[arg(long)]
    graph: PathBuf,
    /// Case manifest (JSONL).
    #[arg(long)]
    cases: PathBuf,
    /// Split file; defaults to the manifest's `.splits.json` sibling.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Validate and normalize a raw embedding file into a canonical index.
    Build {
        /// Raw embedding JSONL ({"item_id", "label", "vector"} per line).
        #[arg(long = "in")]
        input: PathBuf,
        /// Canonical index output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an index with an ad-hoc vector or an existing item's vector.
    Query {
        /// Canonical index file.
        #[arg(long)]
        index: PathBuf,
        /// Query vector as a JSON array, e.g. "[0.1, 0.9]".
        #[arg(long, conflicts_with = "item_id")]
        vector: Option<String>,
        /// Use this item's stored vector as the query.
        #[arg(long)]
        item_id: Option<String>,
        /// Number of neighbors.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                let body = serde_json::json!({
                    "error": {"kind": e.kind, "code": e.code, "message": e.message}
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { workflow } => cmd_validate(&workflow, cli.json),
        Command::Run(args) => cmd_run(args, cli.json, cli.seed),
        Command::Evolve { config } => cmd_evolve(&config, cli.json, cli.seed),
        Command::Eval(args) => cmd_eval(args, cli.seed),
        Command::ExportMermaid { input, out } => cmd_export_mermaid(&input, &out, cli.json),
        Command::Index(IndexCommand::Build { input, out }) => cmd_index_build(&input, &out, cli.json),
        Command::Index(IndexCommand::Query { index, vector, item_id, k }) => {
            cmd_index_query(&index, vector.as_deref(), item_id.as_deref(), k, cli.json)
        }
    }
}

fn load_graph(path: &Path) -> Result<WorkflowGraph, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    WorkflowGraph::from_json_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_manifest(cases: &Path, splits: Option<&Path>) -> Result<DatasetManifest, CliError> {
    let splits = match splits {
        Some(p) => p.to_path_buf(),
        None => dataset::sibling_splits_path(cases),
    };
    dataset::load_manifest(cases, &splits).map_err(|e| CliError::data(e.to_string()))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_validate(workflow: &Path, json: bool) -> Result<(), CliError> {
    let graph = load_graph(workflow)?;
    let report = validate_graph(&graph);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
    } else {
        println!("{}", report.summary());
    }
    if report.ok {
        Ok(())
    } else {
        Err(CliError::invalid(format!(
            "{} violation(s) in {}",
            report.violations.len(),
            workflow.display()
        )))
    }
}

fn cmd_run(args: RunArgs, json: bool, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let graph = load_graph(&args.graph)?;
    let manifest = load_manifest(&args.cases, args.splits.as_deref())?;
    let case = manifest
        .case(&args.case_id)
        .ok_or_else(|| CliError::data(format!("unknown case id {}", args.case_id)))?
        .clone();
    let llm = cfg.build_client()?;
    let tools = cfg.build_tools()?;
    let limits = cfg.exec_limits(seed);
    let trace = exec::execute(&graph, &case, llm.as_ref(), &tools, &limits);
    let trace_json = serde_json::to_string_pretty(&trace).expect("serializable trace");
    if let Some(out) = &args.out {
        write_file(out, &trace_json)?;
    }
    if json {
        println!("{trace_json}");
    } else {
        println!("case {} on graph {} v{}: {:?}", trace.case_id, graph.graph_id, graph.version, trace.status);
        println!("ranking: {}", trace.final_ranking.join(", "));
        println!(
            "steps: {} (prompt tokens {}, completion tokens {})",
            trace.steps.len(),
            trace.total_prompt_tokens(),
            trace.total_completion_tokens()
        );
        if trace.refused {
            println!("refused: true");
        }
    }
    match trace.status {
        TraceStatus::Failed => Err(CliError::runtime(format!(
            "execution failed: {}",
            trace.failure.unwrap_or_default()
        ))),
        _ => Ok(()),
    }
}

fn cmd_eval(args: EvalArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let graph = load_graph(&args.graph)?;
    let manifest = load_manifest(&args.cases, args.splits.as_deref())?;
    let split: Split = args.split.parse().map_err(CliError::data)?;
    let cases: Vec<CaseRecord> = manifest.split_cases(split);
    let llm = cfg.build_client()?;
    let tools = cfg.build_tools()?;
    let eval_cfg = EvalConfig {
        k_list: cfg.metrics.k_list.clone(),
        cons_n: cfg.metrics.cons_n,
        limits: cfg.exec_limits(seed),
    };
    let report = metrics::evaluate(&graph, &cases, llm.as_ref(), &tools, &eval_cfg)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let report_json = serde_json::to_string_pretty(&report).expect("serializable report");
    if let Some(out) = &args.out {
        write_file(out, &report_json)?;
    }
    println!("{report_json}");
    Ok(())
}

fn cmd_evolve(config: &Path, json: bool, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let cases_path = cfg
        .paths
        .cases
        .as_ref()
        .ok_or_else(|| CliError::config("paths.cases is required for evolve".to_string()))?;
    let out_dir = cfg
        .paths
        .out_dir
        .as_ref()
        .ok_or_else(|| CliError::config("paths.out_dir is required for evolve".to_string()))?;
    let manifest = load_manifest(cases_path, cfg.paths.splits.as_deref())?;
    let initial = match &cfg.paths.workflow {
        Some(path) => {
            let graph = load_graph(path)?;
            let report = validate_graph(&graph);
            if !report.ok {
                return Err(CliError::invalid(format!(
                    "initial workflow is invalid: {}",
                    report.summary()
                )));
            }
            graph
        }
        None => WorkflowGraph::baseline(&cfg.evolution.graph_id),
    };
    let llm = cfg.build_client()?;
    let tools = cfg.build_tools()?;
    let opts = cfg.evolve_options(seed)?;
    let train = manifest.split_cases(Split::Train);
    let val = manifest.split_cases(Split::Val);
    let outcome = evolve::run_evolution(
        &initial,
        &train,
        &val,
        &cfg.convergence(),
        llm.as_ref(),
        &tools,
        &opts,
        Some(out_dir),
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    let best_path = out_dir.join("best_workflow.json");
    write_file(&best_path, &outcome.final_graph.to_json_string())?;
    let best_top1 = outcome
        .records
        .get(outcome.best_iteration as usize)
        .map(|r| r.validation_accuracy.top1)
        .unwrap_or(0.0);
    if json {
        let body = serde_json::json!({
            "iterations": outcome.records.len(),
            "best_iteration": outcome.best_iteration,
            "best_top1": best_top1,
            "final_graph_version": outcome.final_graph.version,
            "out_dir": out_dir,
        });
        println!("{}", serde_json::to_string_pretty(&body).expect("serializable summary"));
    } else {
        println!("iterations recorded: {}", outcome.records.len());
        println!("best iteration: {} (top-1 {:.3})", outcome.best_iteration, best_top1);
        println!(
            "final graph: v{} with {} node(s)",
            outcome.final_graph.version,
            outcome.final_graph.nodes.len()
        );
        println!("wrote {}", out_dir.display());
    }
    Ok(())
}

fn cmd_export_mermaid(input: &Path, out: &Path, json: bool) -> Result<(), CliError> {
    let graph = load_graph(input)?;
    let doc = to_mermaid(&graph);
    write_file(out, &doc.code)?;
    if json {
        println!("{}", serde_json::json!({"out": out}));
    } else {
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_index_build(input: &Path, out: &Path, json: bool) -> Result<(), CliError> {
    let index = EmbeddingIndex::load(input).map_err(|e| CliError::data(e.to_string()))?;
    index.save(out).map_err(|e| CliError::runtime(e.to_string()))?;
    if json {
        let body = serde_json::json!({
            "entries": index.len(),
            "dimension": index.dimension(),
            "out": out,
        });
        println!("{body}");
    } else {
        println!(
            "indexed {} vector(s) of dimension {} -> {}",
            index.len(),
            index.dimension(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_index_query(
    index_path: &Path,
    vector: Option<&str>,
    item_id: Option<&str>,
    k: usize,
    json: bool,
) -> Result<(), CliError> {
    let index = EmbeddingIndex::load(index_path).map_err(|e| CliError::data(e.to_string()))?;
    let query: Vec<f64> = match (vector, item_id) {
        (Some(text), None) => serde_json::from_str(text)
            .map_err(|e| CliError::data(format!("cannot parse --vector: {e}")))?,
        (None, Some(id)) => index
            .entries()
            .iter()
            .find(|e| e.item_id == id)
            .map(|e| e.vector.clone())
            .ok_or_else(|| CliError::data(format!("unknown item id {id}")))?,
        _ => {
            return Err(CliError::data(
                "exactly one of --vector or --item-id is required".to_string(),
            ))
        }
    };
    let result = index.search(&query, k).map_err(|e| CliError::data(e.to_string()))?;
    if json {
        let hits: Vec<serde_json::Value> = result
            .hits
            .iter()
            .map(|h| serde_json::json!({"item_id": h.item_id, "label": h.label, "score": h.score}))
            .collect();
        println!("{}", serde_json::json!({ "hits": hits }));
    } else {
        println!("{}", format_search_result(&result));
    }
    Ok(())
}
