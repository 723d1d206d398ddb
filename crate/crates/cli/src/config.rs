//! Strict TOML run configuration. Unknown keys are rejected at every
//! level, and every file the config references must exist when it loads.
//! Relative paths are resolved against the config file's directory.

use crate::CliError;
use evoflow_core::evolve::{ConvergenceConfig, EvolveOptions, PromptLibrary};
use evoflow_core::exec::ExecLimits;
use evoflow_core::llm::{HttpClient, LlmClient, MockClient, MockScript};
use evoflow_core::tools::{EmbeddingIndex, ImageSearchTool, ToolRegistry};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    #[serde(default = "default_backend")]
    pub backend: Backend,
    pub script_path: Option<PathBuf>,
    pub endpoint_url: Option<String>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: Option<u64>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_backend() -> Backend {
    Backend::Mock
}

fn default_model_id() -> String {
    "mock".to_string()
}

fn default_temperature() -> f64 {
    1.0
}

fn default_seed() -> Option<u64> {
    Some(42)
}

fn default_max_in_flight() -> usize {
    4
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            backend: Backend::Mock,
            script_path: None,
            endpoint_url: None,
            model_id: default_model_id(),
            api_key_env: None,
            temperature: default_temperature(),
            seed: default_seed(),
            max_in_flight: default_max_in_flight(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolsSection {
    pub image_search_index: Option<PathBuf>,
    #[serde(default = "default_search_k")]
    pub image_search_k: usize,
}

fn default_search_k() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    #[serde(default = "default_max_total_steps")]
    pub max_total_steps: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_concurrent_arms")]
    pub concurrent_arms: bool,
}

fn default_max_total_steps() -> u32 {
    64
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

fn default_retry_backoff_ms() -> u64 {
    100
}

fn default_concurrent_arms() -> bool {
    true
}

impl Default for LimitsSection {
    fn default() -> Self {
        LimitsSection {
            max_total_steps: default_max_total_steps(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            retry_backoff_ms: default_retry_backoff_ms(),
            concurrent_arms: default_concurrent_arms(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: u32,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
}

fn default_epsilon() -> f64 {
    0.01
}

fn default_window() -> u32 {
    2
}

fn default_max_iterations() -> u32 {
    10
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            epsilon: default_epsilon(),
            window: default_window(),
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    pub batch_size: Option<usize>,
    #[serde(default = "default_max_suggestions")]
    pub max_suggestions: usize,
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "default_graph_id")]
    pub graph_id: String,
}

fn default_max_suggestions() -> usize {
    4
}

fn default_graph_id() -> String {
    "workflow".to_string()
}

impl Default for EvolutionSection {
    fn default() -> Self {
        EvolutionSection {
            batch_size: None,
            max_suggestions: default_max_suggestions(),
            prompts_dir: None,
            graph_id: default_graph_id(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    pub cons_n: Option<usize>,
}

fn default_k_list() -> Vec<usize> {
    vec![1, 3, 5]
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { k_list: default_k_list(), cons_n: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub workflow: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub tools: ToolsSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub evolution: EvolutionSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parses, resolves relative paths against the config's directory, and
    /// verifies that every referenced file already exists.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in [
            &mut cfg.llm.script_path,
            &mut cfg.tools.image_search_index,
            &mut cfg.evolution.prompts_dir,
            &mut cfg.paths.workflow,
            &mut cfg.paths.cases,
            &mut cfg.paths.splits,
        ] {
            if let Some(p) = entry {
                let resolved = resolve(base, p);
                if !resolved.exists() {
                    return Err(CliError::config(format!(
                        "referenced path does not exist: {}",
                        resolved.display()
                    )));
                }
                *entry = Some(resolved);
            }
        }
        if let Some(p) = &mut cfg.paths.out_dir {
            *p = resolve(base, p);
        }
        match cfg.llm.backend {
            Backend::Mock => {
                if cfg.llm.script_path.is_none() {
                    return Err(CliError::config(
                        "llm.script_path is required for the mock backend".to_string(),
                    ));
                }
            }
            Backend::Http => {
                if cfg.llm.endpoint_url.is_none() {
                    return Err(CliError::config(
                        "llm.endpoint_url is required for the http backend".to_string(),
                    ));
                }
            }
        }
        Ok(cfg)
    }

    pub fn exec_limits(&self, seed_override: Option<u64>) -> ExecLimits {
        ExecLimits {
            max_total_steps: self.limits.max_total_steps,
            timeout_secs: self.limits.timeout_secs,
            retries: self.limits.retries,
            retry_backoff_ms: self.limits.retry_backoff_ms,
            concurrent_arms: self.limits.concurrent_arms,
            temperature: self.llm.temperature,
            seed: seed_override.or(self.llm.seed),
        }
    }

    pub fn convergence(&self) -> ConvergenceConfig {
        ConvergenceConfig {
            epsilon: self.convergence.epsilon,
            window: self.convergence.window,
            max_iterations: self.convergence.max_iterations,
        }
    }

    pub fn build_client(&self) -> Result<Box<dyn LlmClient>, CliError> {
        match self.llm.backend {
            Backend::Mock => {
                let path = self.llm.script_path.as_ref().expect("checked at load");
                let script = MockScript::from_path(path)
                    .map_err(|e| CliError::data(e.to_string()))?;
                Ok(Box::new(MockClient::new(script).with_model_id(&self.llm.model_id)))
            }
            Backend::Http => {
                let endpoint = self.llm.endpoint_url.as_ref().expect("checked at load");
                let client = HttpClient::new(
                    endpoint,
                    &self.llm.model_id,
                    self.llm.api_key_env.as_deref(),
                    self.llm.max_in_flight,
                )
                .map_err(|e| CliError::runtime(e.to_string()))?;
                Ok(Box::new(client))
            }
        }
    }

    pub fn build_tools(&self) -> Result<ToolRegistry, CliError> {
        let mut registry = ToolRegistry::new();
        if let Some(path) = &self.tools.image_search_index {
            let index =
                EmbeddingIndex::load(path).map_err(|e| CliError::data(e.to_string()))?;
            registry
                .register(Box::new(ImageSearchTool::new(index, self.tools.image_search_k)))
                .map_err(|e| CliError::data(e.to_string()))?;
        }
        Ok(registry)
    }

    pub fn evolve_options(&self, seed_override: Option<u64>) -> Result<EvolveOptions, CliError> {
        let prompts = match &self.evolution.prompts_dir {
            Some(dir) => PromptLibrary::from_dir(dir)
                .map_err(|e| CliError::config(e.to_string()))?,
            None => PromptLibrary::builtin(),
        };
        Ok(EvolveOptions {
            prompts,
            limits: self.exec_limits(seed_override),
            max_suggestions: self.evolution.max_suggestions,
            batch_size: self.evolution.batch_size,
        })
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
