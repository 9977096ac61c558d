//! Pipeline configuration file (TOML). Relative paths are resolved against
//! the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentConfig;
use crate::gateway::TransportMode;
use crate::model::{sha256_hex, AgentRole, BOX_SCHEMA_VERSION};
use crate::prompts;
use crate::sandbox::SandboxConfig;

pub const DEFAULT_TEACHER_MODEL: &str = "gpt-4o";
pub const DEFAULT_STUDENT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {reason}")]
    Invalid { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AgentSection {
    model_id: Option<String>,
    captioner_model_id: Option<String>,
    max_steps: u32,
    system_prompt_id: Option<String>,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self { model_id: None, captioner_model_id: None, max_steps: 8, system_prompt_id: None }
    }
}

impl AgentSection {
    fn into_config(self, role: AgentRole, default_model: &str) -> AgentConfig {
        AgentConfig {
            role,
            model_id: self.model_id.unwrap_or_else(|| default_model.to_string()),
            captioner_model_id: self.captioner_model_id,
            max_steps: self.max_steps,
            system_prompt_id: self.system_prompt_id,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    transport: Option<TransportMode>,
    sandbox: Option<SandboxConfig>,
    teacher: AgentSection,
    student: AgentSection,
    builder_model_id: Option<String>,
    retry_budget: Option<u32>,
    output_root: Option<PathBuf>,
    search_provider: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub transport: TransportMode,
    pub sandbox: SandboxConfig,
    pub teacher: AgentConfig,
    pub student: AgentConfig,
    /// Model for abstraction, clustering and consolidation. Defaults to the
    /// teacher's model.
    pub builder_model_id: String,
    /// Extra attempts per abstraction / consolidation after the first.
    pub retry_budget: u32,
    pub output_root: PathBuf,
    /// Command for open-source search; search is disabled when unset.
    pub search_provider: Option<Vec<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_file(ConfigFile::default(), Path::new(""))
    }
}

impl PipelineConfig {
    fn from_file(f: ConfigFile, base: &Path) -> Self {
        let resolve = |p: PathBuf| if p.is_absolute() || base.as_os_str().is_empty() { p } else { base.join(p) };
        let mut transport = f.transport.unwrap_or_default();
        transport.cache_path = transport.cache_path.map(resolve);
        let mut sandbox = f.sandbox.unwrap_or_default();
        sandbox.working_dir = sandbox.working_dir.map(resolve);
        sandbox.log_dir = sandbox.log_dir.map(resolve);
        let teacher = f.teacher.into_config(AgentRole::Teacher, DEFAULT_TEACHER_MODEL);
        let student = f.student.into_config(AgentRole::Student, DEFAULT_STUDENT_MODEL);
        Self {
            builder_model_id: f.builder_model_id.unwrap_or_else(|| teacher.model_id.clone()),
            transport,
            sandbox,
            teacher,
            student,
            retry_budget: f.retry_budget.unwrap_or(2),
            output_root: resolve(f.output_root.unwrap_or_else(|| PathBuf::from("out"))),
            search_provider: f.search_provider,
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let cfg = Self::from_file(file, base);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|reason| ConfigError::Invalid { path: path.display().to_string(), reason })
    }

    pub fn check(&self) -> Result<(), String> {
        self.teacher.check().map_err(|e| format!("teacher: {e}"))?;
        self.student.check().map_err(|e| format!("student: {e}"))?;
        if self.sandbox.interpreter.is_empty() {
            return Err("sandbox.interpreter is empty".into());
        }
        if self.sandbox.max_parallel == 0 {
            return Err("sandbox.max_parallel must be at least 1".into());
        }
        Ok(())
    }

    /// Digest of everything that determines distillation outputs: prompt
    /// assets, model ids, sandbox behavior and retry budget. Paths and the
    /// transport are excluded so a replayed run matches its recording.
    pub fn pipeline_config_digest(&self) -> String {
        let view = serde_json::json!({
            "schema_version": BOX_SCHEMA_VERSION,
            "prompts": prompts::digests(),
            "teacher_model_id": self.teacher.model_id,
            "student_model_id": self.student.model_id,
            "builder_model_id": self.builder_model_id,
            "sandbox": self.sandbox.digest_view(),
            "retry_budget": self.retry_budget,
        });
        sha256_hex(view.to_string().as_bytes())
    }
}
