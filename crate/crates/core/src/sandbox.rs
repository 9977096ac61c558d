//! How tool scripts are launched: interpreter, environment, working directory
//! and time bounds.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

pub const DEFAULT_PROTOCOL_VERSION: &str = "2024-11-05";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// argv prefix; the script path is appended.
    pub interpreter: Vec<String>,
    /// Working directory for every launched script. A fresh temporary
    /// directory per process when unset.
    pub working_dir: Option<PathBuf>,
    /// Bound for launch + initialize + tools/list.
    pub timeout_ms: u64,
    /// Bound for a single tools/call.
    pub call_timeout_ms: u64,
    /// Wait after closing stdin before the process is killed.
    pub shutdown_grace_ms: u64,
    /// Environment variables passed through to scripts; everything else is dropped.
    pub env_allowlist: Vec<String>,
    pub max_parallel: usize,
    /// Directory for per-server stderr logs. Temporary when unset.
    pub log_dir: Option<PathBuf>,
    pub protocol_version: String,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: vec!["python3".into()],
            working_dir: None,
            timeout_ms: 10_000,
            call_timeout_ms: 30_000,
            shutdown_grace_ms: 2_000,
            env_allowlist: ["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "SYSTEMROOT"]
                .into_iter()
                .map(String::from)
                .collect(),
            max_parallel: 4,
            log_dir: None,
            protocol_version: DEFAULT_PROTOCOL_VERSION.into(),
        }
    }
}

impl SandboxConfig {
    /// Command for running `script` with piped stdio, a filtered environment
    /// and `cwd` as working directory. Stderr is left for the caller to set.
    pub(crate) fn command(&self, script: &Path, cwd: &Path) -> Result<Command, String> {
        let (program, args) = self
            .interpreter
            .split_first()
            .ok_or_else(|| "sandbox interpreter is empty".to_string())?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .arg(script)
            .current_dir(cwd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .env_clear()
            // Keeps output line-buffered for interpreters that honor it.
            .env("PYTHONUNBUFFERED", "1")
            .env("PYTHONDONTWRITEBYTECODE", "1");
        for key in &self.env_allowlist {
            if let Some(val) = std::env::var_os(key) {
                cmd.env(key, val);
            }
        }
        Ok(cmd)
    }

    /// Fields that influence pipeline outputs; folded into the config digest.
    pub(crate) fn digest_view(&self) -> serde_json::Value {
        serde_json::json!({
            "interpreter": self.interpreter,
            "timeout_ms": self.timeout_ms,
            "call_timeout_ms": self.call_timeout_ms,
            "protocol_version": self.protocol_version,
        })
    }
}
