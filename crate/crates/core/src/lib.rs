//! Graph-based LLM agent workflow engine with an evolving search space.
//!
//! A workflow is a validated directed graph of agent nodes. The engine
//! executes workflows against a pluggable language-model backend, and the
//! evolution loop rewrites their structure and prompts from error analysis
//! of previous runs.
//!
//! Module map:
//! - [`graph`]: the workflow graph data model and structural validation
//! - [`ops`]: node-level, structural-level and framework-level mutations
//! - [`exec`]: the traversal engine producing [`exec::ExecutionTrace`]s
//! - [`llm`]: chat backend abstraction (HTTP client + deterministic mock)
//! - [`tools`]: tool registry and the built-in embedding search tool
//! - [`evolve`]: the iterative error-analysis / refinement loop
//! - [`mermaid`]: deterministic Mermaid flowchart serialization
//! - [`metrics`]: top-k accuracy, consensus and cost accounting
//! - [`dataset`]: labeled-case manifest ingestion with splits

pub mod dataset;
pub mod evolve;
pub mod exec;
pub mod graph;
pub mod llm;
pub mod mermaid;
pub mod metrics;
pub mod ops;
pub mod tools;

pub use evolve::{ConvergenceConfig, EvolutionOutcome, EvolveOptions, IterationRecord};
pub use exec::{CaseRecord, ExecLimits, ExecutionTrace, TraceStatus};
pub use graph::{EdgeKind, EdgeSpec, NodeKind, NodeSpec, ValidationReport, WorkflowGraph};
pub use ops::{OpKind, OpOrigin, WorkflowOperation};
