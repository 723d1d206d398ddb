//! Tool registry for tool nodes, plus the built-in image-search tool:
//! exact top-k nearest labeled cases by cosine similarity over
//! precomputed, unit-normalized embedding vectors.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown tool {tool_name}")]
    UnknownTool { tool_name: String },
    #[error("tool {tool_name} already registered")]
    DuplicateTool { tool_name: String },
    #[error("tool {tool_name} parameter violation: {message}")]
    ParamSchemaViolation { tool_name: String, message: String },
    #[error("tool {tool_name} failed: {message}")]
    ToolFailure { tool_name: String, message: String },
    #[error("embedding file parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("inconsistent embedding dimension for {item_id}: expected {expected}, found {found}")]
    InconsistentDimension { item_id: String, expected: usize, found: usize },
    #[error("zero vector for {item_id} cannot be normalized")]
    ZeroVector { item_id: String },
    #[error("duplicate item_id {item_id} in embedding file")]
    DuplicateItem { item_id: String },
    #[error("query dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Parameter types a tool may declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Integer,
    Number,
    Text,
}

/// One declared parameter; `required = false` means the tool supplies a
/// default when absent.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
}

/// Registry metadata for one tool.
#[derive(Debug, Clone)]
pub struct ToolDescriptor {
    pub tool_name: String,
    pub description: String,
    pub param_schema: Vec<ParamSpec>,
}

/// A callable tool. Params come from the tool node's `tool_params`; the
/// execution context supplies per-case inputs (for example the query
/// embedding).
pub trait Tool: Send + Sync {
    fn descriptor(&self) -> &ToolDescriptor;
    fn invoke(
        &self,
        params: &BTreeMap<String, serde_json::Value>,
        ctx: &BTreeMap<String, String>,
    ) -> Result<String, ToolError>;
}

/// Read-only after startup: register everything, then share freely.
#[derive(Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Box<dyn Tool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) -> Result<(), ToolError> {
        let name = tool.descriptor().tool_name.clone();
        if self.tools.contains_key(&name) {
            return Err(ToolError::DuplicateTool { tool_name: name });
        }
        self.tools.insert(name, tool);
        Ok(())
    }

    pub fn has(&self, tool_name: &str) -> bool {
        self.tools.contains_key(tool_name)
    }

    pub fn tool_names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn descriptors(&self) -> Vec<&ToolDescriptor> {
        self.tools.values().map(|t| t.descriptor()).collect()
    }

    /// Schema-checks `params` against the tool's descriptor, then invokes.
    pub fn invoke(
        &self,
        tool_name: &str,
        params: &BTreeMap<String, serde_json::Value>,
        ctx: &BTreeMap<String, String>,
    ) -> Result<String, ToolError> {
        let tool = self
            .tools
            .get(tool_name)
            .ok_or_else(|| ToolError::UnknownTool { tool_name: tool_name.to_string() })?;
        check_params(tool.descriptor(), params)?;
        tool.invoke(params, ctx)
    }
}

fn check_params(
    descriptor: &ToolDescriptor,
    params: &BTreeMap<String, serde_json::Value>,
) -> Result<(), ToolError> {
    let violation = |message: String| ToolError::ParamSchemaViolation {
        tool_name: descriptor.tool_name.clone(),
        message,
    };
    for spec in &descriptor.param_schema {
        match params.get(&spec.name) {
            None if spec.required => {
                return Err(violation(format!("missing required parameter {}", spec.name)))
            }
            None => {}
            Some(value) => {
                let ok = match spec.kind {
                    ParamKind::Integer => value.is_u64() || value.is_i64(),
                    ParamKind::Number => value.is_number(),
                    ParamKind::Text => value.is_string(),
                };
                if !ok {
                    return Err(violation(format!(
                        "parameter {} has wrong type (got {value})",
                        spec.name
                    )));
                }
            }
        }
    }
    for name in params.keys() {
        if !descriptor.param_schema.iter().any(|s| &s.name == name) {
            return Err(violation(format!("unknown parameter {name}")));
        }
    }
    Ok(())
}

/// One labeled reference case with its embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub item_id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Immutable in-process index of unit-normalized embeddings. Exact search
/// only — no approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    dimension: usize,
}

/// One search hit; `score` is cosine similarity in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub item_id: String,
    pub label: String,
    pub score: f64,
}

/// Hits in non-increasing score order, ties by ascending `item_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

fn norm(vector: &[f64]) -> f64 {
    vector.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(vector: &mut [f64], item_id: &str) -> Result<(), ToolError> {
    let n = norm(vector);
    if n < 1e-12 {
        return Err(ToolError::ZeroVector { item_id: item_id.to_string() });
    }
    for x in vector.iter_mut() {
        *x /= n;
    }
    Ok(())
}

impl EmbeddingIndex {
    /// Validates dimensions and ids, normalizes every vector.
    pub fn from_entries(mut entries: Vec<IndexEntry>) -> Result<Self, ToolError> {
        let dimension = entries.first().map(|e| e.vector.len()).unwrap_or(0);
        let mut seen = std::collections::BTreeSet::new();
        for entry in &mut entries {
            if !seen.insert(entry.item_id.clone()) {
                return Err(ToolError::DuplicateItem { item_id: entry.item_id.clone() });
            }
            if entry.vector.len() != dimension {
                return Err(ToolError::InconsistentDimension {
                    item_id: entry.item_id.clone(),
                    expected: dimension,
                    found: entry.vector.len(),
                });
            }
            normalize(&mut entry.vector, &entry.item_id)?;
        }
        Ok(EmbeddingIndex { entries, dimension })
    }

    /// Loads a JSONL file of `{"item_id","label","vector":[...]}` lines.
    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolError::ParseError {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry =
                serde_json::from_str(line).map_err(|e| ToolError::ParseError {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    /// Writes the normalized entries back out as canonical JSONL.
    pub fn save(&self, path: &Path) -> Result<(), ToolError> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("serializable entry"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| ToolError::ParseError {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    /// Exact top-k by cosine similarity; ties broken by ascending item_id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult, ToolError> {
        if k == 0 {
            return Err(ToolError::InvalidArgument("k must be at least 1".to_string()));
        }
        if query.len() != self.dimension {
            return Err(ToolError::DimensionMismatch {
                expected: self.dimension,
                found: query.len(),
            });
        }
        let mut query = query.to_vec();
        normalize(&mut query, "query")?;
        let mut hits: Vec<SearchHit> = self
            .entries
            .iter()
            .map(|e| SearchHit {
                item_id: e.item_id.clone(),
                label: e.label.clone(),
                score: e.vector.iter().zip(&query).map(|(a, b)| a * b).sum(),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id))
        });
        hits.truncate(k);
        Ok(SearchResult { hits })
    }
}

/// Built-in similarity search over an [`EmbeddingIndex`]. The query vector
/// arrives through the execution context as a JSON array under
/// `query_embedding`; `k` is an optional tool parameter.
pub struct ImageSearchTool {
    index: EmbeddingIndex,
    default_k: usize,
    descriptor: ToolDescriptor,
}

impl ImageSearchTool {
    pub fn new(index: EmbeddingIndex, default_k: usize) -> Self {
        ImageSearchTool {
            index,
            default_k: default_k.max(1),
            descriptor: ToolDescriptor {
                tool_name: "image_search".to_string(),
                description: "Finds the most visually similar labeled reference cases."
                    .to_string(),
                param_schema: vec![ParamSpec {
                    name: "k".to_string(),
                    kind: ParamKind::Integer,
                    required: false,
                }],
            },
        }
    }
}

/// Renders hits as numbered lines: `1. <label> (similarity=0.981)`.
pub fn format_search_result(result: &SearchResult) -> String {
    result
        .hits
        .iter()
        .enumerate()
        .map(|(i, hit)| format!("{}. {} (similarity={:.3})", i + 1, hit.label, hit.score))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Tool for ImageSearchTool {
    fn descriptor(&self) -> &ToolDescriptor {
        &self.descriptor
    }

    fn invoke(
        &self,
        params: &BTreeMap<String, serde_json::Value>,
        ctx: &BTreeMap<String, String>,
    ) -> Result<String, ToolError> {
        let failure = |message: String| ToolError::ToolFailure {
            tool_name: "image_search".to_string(),
            message,
        };
        let k = match params.get("k") {
            None => self.default_k,
            Some(v) => v
                .as_u64()
                .filter(|k| *k >= 1)
                .ok_or_else(|| ToolError::ParamSchemaViolation {
                    tool_name: "image_search".to_string(),
                    message: format!("k must be a positive integer (got {v})"),
                })? as usize,
        };
        let raw = ctx
            .get("query_embedding")
            .ok_or_else(|| failure("context has no query_embedding".to_string()))?;
        let query: Vec<f64> = serde_json::from_str(raw)
            .map_err(|e| failure(format!("query_embedding is not a JSON number array: {e}")))?;
        let result = self.index.search(&query, k)?;
        Ok(format_search_result(&result))
    }
}
