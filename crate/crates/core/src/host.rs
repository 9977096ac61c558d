//! MCP host: launches tool-server scripts and speaks JSON-RPC 2.0 with them
//! over stdio, one JSON object per line.
//!
//! A handle moves through `Starting -> Ready -> Stopped`, or into `Failed`
//! on timeout, protocol violation or premature exit. A dedicated thread drains
//! each server's stdout; callers block on the matching response id.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tempfile::TempDir;
use thiserror::Error;

use crate::model::{McpBox, ToolParameter, ToolSchema};
use crate::sandbox::SandboxConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerState {
    Starting,
    Ready,
    Failed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub is_error: bool,
    pub content: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error("launch failure: {detail}")]
    LaunchFailure { detail: String },
    #[error("timed out after {after_ms} ms waiting for `{method}`")]
    Timeout { method: String, after_ms: u64 },
    #[error("protocol violation: {detail}")]
    ProtocolViolation { detail: String },
    #[error("server exited before answering `{method}`: {detail}")]
    ServerExited { method: String, detail: String },
    #[error("json-rpc error {code}: {message}")]
    Rpc { code: i64, message: String },
    #[error("operation not allowed in state {0:?}")]
    InvalidState(ServerState),
    #[error("i/o error talking to server: {0}")]
    Io(#[from] std::io::Error),
}

/// A live tool-server subprocess.
pub struct ToolServerHandle {
    cluster_name: String,
    state: ServerState,
    tools: Vec<ToolSchema>,
    child: Option<Child>,
    pid: u32,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    next_id: i64,
    stderr_path: PathBuf,
    handshake_timeout: Duration,
    call_timeout: Duration,
    grace: Duration,
    protocol_version: String,
    // Owned scratch space (working dir and/or stderr log); removed on drop.
    _scratch: Option<TempDir>,
}

impl std::fmt::Debug for ToolServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolServerHandle")
            .field("cluster_name", &self.cluster_name)
            .field("pid", &self.pid)
            .field("state", &self.state)
            .field("tools", &self.tools.len())
            .finish()
    }
}

/// Start `script_path` under the sandbox interpreter. The returned handle is
/// in state `Starting`; call [`ToolServerHandle::initialize`] next.
pub fn spawn_server(
    script_path: &Path,
    cluster_name: &str,
    sandbox: &SandboxConfig,
) -> Result<ToolServerHandle, HostError> {
    let launch = |detail: String| HostError::LaunchFailure { detail };
    if !script_path.is_file() {
        return Err(launch(format!("script `{}` does not exist", script_path.display())));
    }
    let script = script_path
        .canonicalize()
        .map_err(|e| launch(format!("{}: {e}", script_path.display())))?;

    let scratch = tempfile::Builder::new()
        .prefix("mcpbox-server-")
        .tempdir()
        .map_err(|e| launch(format!("cannot create scratch dir: {e}")))?;
    let cwd = sandbox
        .working_dir
        .clone()
        .unwrap_or_else(|| scratch.path().to_path_buf());
    let log_dir = sandbox
        .log_dir
        .clone()
        .unwrap_or_else(|| scratch.path().to_path_buf());
    std::fs::create_dir_all(&log_dir).map_err(|e| launch(format!("cannot create log dir: {e}")))?;
    let stem = script.file_stem().and_then(|s| s.to_str()).unwrap_or("server");
    let stderr_path = unique_log_path(&log_dir, stem);
    let stderr = File::create(&stderr_path).map_err(|e| launch(format!("cannot create stderr log: {e}")))?;

    let mut cmd = sandbox.command(&script, &cwd).map_err(launch)?;
    cmd.stderr(stderr);
    let mut child = cmd.spawn().map_err(|e| {
        launch(format!(
            "cannot start `{}`: {e}",
            sandbox.interpreter.first().map(String::as_str).unwrap_or("")
        ))
    })?;
    let pid = child.id();
    let stdout = child.stdout.take().expect("stdout is piped");
    let stdin = child.stdin.take().expect("stdin is piped");

    let (tx, rx) = mpsc::channel();
    std::thread::Builder::new()
        .name(format!("mcp-stdout-{pid}"))
        .spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        })
        .map_err(|e| launch(format!("cannot start reader thread: {e}")))?;

    Ok(ToolServerHandle {
        cluster_name: cluster_name.to_string(),
        state: ServerState::Starting,
        tools: Vec::new(),
        child: Some(child),
        pid,
        stdin: Some(stdin),
        lines: rx,
        next_id: 1,
        stderr_path,
        handshake_timeout: Duration::from_millis(sandbox.timeout_ms),
        call_timeout: Duration::from_millis(sandbox.call_timeout_ms),
        grace: Duration::from_millis(sandbox.shutdown_grace_ms),
        protocol_version: sandbox.protocol_version.clone(),
        _scratch: Some(scratch),
    })
}

fn unique_log_path(dir: &Path, stem: &str) -> PathBuf {
    let base = dir.join(format!("{stem}.stderr.log"));
    if !base.exists() {
        return base;
    }
    (2..)
        .map(|n| dir.join(format!("{stem}-{n}.stderr.log")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

impl ToolServerHandle {
    pub fn cluster_name(&self) -> &str {
        &self.cluster_name
    }

    pub fn state(&self) -> ServerState {
        self.state
    }

    pub fn tools(&self) -> &[ToolSchema] {
        &self.tools
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn stderr_log(&self) -> &Path {
        &self.stderr_path
    }

    /// Last few lines of the server's stderr, for diagnostics.
    pub fn stderr_tail(&self) -> String {
        let text = std::fs::read_to_string(&self.stderr_path).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        let start = lines.len().saturating_sub(20);
        lines[start..].join("\n")
    }

    /// `initialize`, `notifications/initialized`, then `tools/list`. The
    /// handshake as a whole is bounded by the sandbox timeout.
    pub fn initialize(&mut self) -> Result<ServerInfo, HostError> {
        if self.state != ServerState::Starting {
            return Err(HostError::InvalidState(self.state));
        }
        let deadline = Instant::now() + self.handshake_timeout;
        let params = json!({
            "protocolVersion": self.protocol_version,
            "capabilities": {},
            "clientInfo": {"name": "mcpbox", "version": env!("CARGO_PKG_VERSION")},
        });
        let result = self
            .request("initialize", params, deadline)
            .map_err(|e| self.handshake_error(e))?;
        let info = result
            .get("serverInfo")
            .map(|v| ServerInfo {
                name: v.get("name").and_then(Value::as_str).unwrap_or_default().to_string(),
                version: v.get("version").and_then(Value::as_str).unwrap_or_default().to_string(),
            })
            .unwrap_or(ServerInfo { name: String::new(), version: String::new() });
        self.notify("notifications/initialized", json!({}))?;

        let listing = self
            .request("tools/list", json!({}), deadline)
            .map_err(|e| self.handshake_error(e))?;
        let tools = match parse_tool_listing(&listing) {
            Ok(t) => t,
            Err(detail) => return Err(self.fail(HostError::ProtocolViolation { detail })),
        };
        if tools.is_empty() {
            return Err(self.fail(HostError::ProtocolViolation {
                detail: "server lists no tools".into(),
            }));
        }
        self.tools = tools;
        self.state = ServerState::Ready;
        Ok(info)
    }

    /// Invoke one tool. Tool-side failures (including unknown tool names)
    /// come back as `is_error = true`, not as a host error.
    pub fn call_tool(&mut self, tool_name: &str, arguments: Value) -> Result<ToolResult, HostError> {
        if self.state != ServerState::Ready {
            return Err(HostError::InvalidState(self.state));
        }
        let started = Instant::now();
        let params = json!({"name": tool_name, "arguments": arguments});
        let outcome = self.request("tools/call", params, started + self.call_timeout);
        let elapsed_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(result) => {
                let is_error = result.get("isError").and_then(Value::as_bool).unwrap_or(false);
                Ok(ToolResult { is_error, content: render_content(&result), elapsed_ms })
            }
            Err(HostError::Rpc { code, message }) => Ok(ToolResult {
                is_error: true,
                content: format!("error {code}: {message}"),
                elapsed_ms,
            }),
            Err(e) => Err(e),
        }
    }

    /// Close stdin, wait up to the grace period, then kill. Idempotent.
    pub fn shutdown(&mut self) {
        if self.state == ServerState::Stopped {
            return;
        }
        drop(self.stdin.take());
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + self.grace;
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        self.state = ServerState::Stopped;
    }

    fn kill(&mut self) {
        drop(self.stdin.take());
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    fn handshake_error(&mut self, err: HostError) -> HostError {
        match err {
            HostError::Rpc { code, message } => self.fail(HostError::ProtocolViolation {
                detail: format!("handshake rejected with json-rpc error {code}: {message}"),
            }),
            other if self.state != ServerState::Failed => self.fail(other),
            other => other,
        }
    }

    fn fail(&mut self, err: HostError) -> HostError {
        self.kill();
        self.state = ServerState::Failed;
        err
    }

    fn send(&mut self, msg: &Value) -> Result<(), HostError> {
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(HostError::InvalidState(self.state));
        };
        let mut line = msg.to_string();
        line.push('\n');
        let written = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        if let Err(e) = written {
            // A closed pipe means the server died; report it with its stderr.
            let detail = format!("{e}; stderr: {}", self.wait_exit_detail());
            let method = msg.get("method").and_then(Value::as_str).unwrap_or("").to_string();
            return Err(self.fail(HostError::ServerExited { method, detail }));
        }
        Ok(())
    }

    fn notify(&mut self, method: &str, params: Value) -> Result<(), HostError> {
        self.send(&json!({"jsonrpc": "2.0", "method": method, "params": params}))
    }

    fn request(&mut self, method: &str, params: Value, deadline: Instant) -> Result<Value, HostError> {
        let id = self.next_id;
        self.next_id += 1;
        self.send(&json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params}))?;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(remaining) {
                Ok(line) => line,
                Err(RecvTimeoutError::Timeout) => {
                    let after_ms = self.timeout_for(method).as_millis() as u64;
                    return Err(self.fail(HostError::Timeout { method: method.into(), after_ms }));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let detail = self.wait_exit_detail();
                    return Err(self.fail(HostError::ServerExited { method: method.into(), detail }));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let msg: Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => {
                    return Err(self.fail(HostError::ProtocolViolation {
                        detail: format!("malformed JSON from server ({e}): {}", truncate(&line, 200)),
                    }))
                }
            };
            match classify(&msg, id) {
                Incoming::Notification => {
                    tracing::debug!(cluster = %self.cluster_name, %line, "ignoring server notification");
                }
                Incoming::ServerRequest => {
                    tracing::debug!(cluster = %self.cluster_name, %line, "ignoring server-initiated request");
                }
                Incoming::Result(v) => return Ok(v),
                Incoming::Error { code, message } => return Err(HostError::Rpc { code, message }),
                Incoming::Violation(detail) => return Err(self.fail(HostError::ProtocolViolation { detail })),
            }
        }
    }

    fn timeout_for(&self, method: &str) -> Duration {
        if method == "tools/call" {
            self.call_timeout
        } else {
            self.handshake_timeout
        }
    }

    /// After stdout closed: give the process a moment to exit and describe it.
    fn wait_exit_detail(&mut self) -> String {
        let mut status = None;
        if let Some(child) = self.child.as_mut() {
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(s)) = child.try_wait() {
                    status = Some(s);
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        let tail = self.stderr_tail();
        match status {
            Some(s) => format!("exited with {s}; stderr: {tail}"),
            None => format!("closed stdout; stderr: {tail}"),
        }
    }
}

impl Drop for ToolServerHandle {
    fn drop(&mut self) {
        if self.child.is_some() {
            self.kill();
        }
    }
}

enum Incoming {
    Notification,
    ServerRequest,
    Result(Value),
    Error { code: i64, message: String },
    Violation(String),
}

fn classify(msg: &Value, expected_id: i64) -> Incoming {
    let Some(obj) = msg.as_object() else {
        return Incoming::Violation(format!("expected a JSON object, got {msg}"));
    };
    let has_method = obj.contains_key("method");
    match obj.get("id") {
        None if has_method => return Incoming::Notification,
        None => return Incoming::Violation("message has neither id nor method".into()),
        Some(_) if has_method => return Incoming::ServerRequest,
        Some(id) if id.as_i64() != Some(expected_id) => {
            return Incoming::Violation(format!("response id {id} does not match pending request {expected_id}"))
        }
        Some(_) => {}
    }
    if let Some(err) = obj.get("error") {
        let code = err.get("code").and_then(Value::as_i64).unwrap_or(0);
        let message = err.get("message").and_then(Value::as_str).unwrap_or("").to_string();
        return Incoming::Error { code, message };
    }
    match obj.get("result") {
        Some(v) => Incoming::Result(v.clone()),
        None => Incoming::Violation(format!("response {expected_id} has neither result nor error")),
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Map a `tools/list` result onto [`ToolSchema`]s.
pub fn parse_tool_listing(result: &Value) -> Result<Vec<ToolSchema>, String> {
    let tools = result
        .get("tools")
        .and_then(Value::as_array)
        .ok_or("tools/list result has no `tools` array")?;
    let mut out: Vec<ToolSchema> = Vec::with_capacity(tools.len());
    for tool in tools {
        let name = tool
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.is_empty())
            .ok_or("tool entry without a name")?;
        if out.iter().any(|t| t.name == name) {
            return Err(format!("duplicate tool name `{name}`"));
        }
        let description = tool.get("description").and_then(Value::as_str).unwrap_or("").to_string();
        let parameters = tool.get("inputSchema").map(schema_parameters).unwrap_or_default();
        out.push(ToolSchema { name: name.to_string(), description, parameters });
    }
    Ok(out)
}

fn schema_parameters(schema: &Value) -> Vec<ToolParameter> {
    let required: Vec<&str> = schema
        .get("required")
        .and_then(Value::as_array)
        .map(|r| r.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let Some(props) = schema.get("properties").and_then(Value::as_object) else {
        return Vec::new();
    };
    props
        .iter()
        .map(|(name, prop)| {
            let type_tag = match prop.get("type") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Array(ts)) => ts.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("|"),
                _ => "any".to_string(),
            };
            ToolParameter {
                name: name.clone(),
                type_tag,
                required: required.contains(&name.as_str()),
                description: prop.get("description").and_then(Value::as_str).unwrap_or("").to_string(),
            }
        })
        .collect()
}

fn render_content(result: &Value) -> String {
    let Some(items) = result.get("content").and_then(Value::as_array) else {
        return result.to_string();
    };
    items
        .iter()
        .map(|item| match item.get("type").and_then(Value::as_str) {
            Some("text") => item.get("text").and_then(Value::as_str).unwrap_or("").to_string(),
            Some(other) => format!("[{other} content]"),
            None => item.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountFailure {
    pub cluster_name: String,
    pub tool_script_path: String,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct MountedBox {
    pub handles: Vec<ToolServerHandle>,
    pub failures: Vec<MountFailure>,
}

impl MountedBox {
    /// Every tool offered by every ready handle, paired with its cluster.
    pub fn offered_tools(&self) -> impl Iterator<Item = (&str, &ToolSchema)> {
        self.handles
            .iter()
            .flat_map(|h| h.tools().iter().map(move |t| (h.cluster_name(), t)))
    }

    pub fn shutdown(&mut self) {
        for h in &mut self.handles {
            h.shutdown();
        }
    }
}

impl Drop for MountedBox {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Spawn and initialize every entry of the box. Entries that fail are
/// reported and skipped; no entry is ever left out for any other reason.
pub fn mount_box(mcp_box: &McpBox, box_root: &Path, sandbox: &SandboxConfig) -> MountedBox {
    let mut mounted = MountedBox::default();
    for entry in &mcp_box.entries {
        let path = box_root.join(&entry.tool_script_path);
        let started = spawn_server(&path, &entry.cluster_name, sandbox).and_then(|mut h| {
            h.initialize()?;
            Ok(h)
        });
        match started {
            Ok(h) => mounted.handles.push(h),
            Err(e) => {
                tracing::warn!(cluster = %entry.cluster_name, error = %e, "box entry failed to mount");
                mounted.failures.push(MountFailure {
                    cluster_name: entry.cluster_name.clone(),
                    tool_script_path: entry.tool_script_path.clone(),
                    detail: e.to_string(),
                });
            }
        }
    }
    mounted
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_matches_ids() {
        let ok = json!({"jsonrpc": "2.0", "id": 3, "result": {"x": 1}});
        assert!(matches!(classify(&ok, 3), Incoming::Result(_)));
        assert!(matches!(classify(&ok, 4), Incoming::Violation(_)));
        let err = json!({"jsonrpc": "2.0", "id": 3, "error": {"code": -32601, "message": "nope"}});
        assert!(matches!(classify(&err, 3), Incoming::Error { code: -32601, .. }));
        let note = json!({"jsonrpc": "2.0", "method": "notifications/progress"});
        assert!(matches!(classify(&note, 3), Incoming::Notification));
        let empty = json!({"jsonrpc": "2.0", "id": 3});
        assert!(matches!(classify(&empty, 3), Incoming::Violation(_)));
        assert!(matches!(classify(&json!([1]), 3), Incoming::Violation(_)));
    }

    #[test]
    fn listing_maps_input_schema() {
        let listing = json!({"tools": [{
            "name": "solve",
            "description": "d",
            "inputSchema": {
                "type": "object",
                "properties": {
                    "numbers": {"type": "array", "description": "four ints"},
                    "target": {"type": ["integer", "null"]},
                    "mode": {}
                },
                "required": ["numbers"]
            }
        }]});
        let tools = parse_tool_listing(&listing).unwrap();
        assert_eq!(tools.len(), 1);
        let p = &tools[0].parameters;
        assert_eq!(p.len(), 3);
        let numbers = p.iter().find(|x| x.name == "numbers").unwrap();
        assert!(numbers.required);
        assert_eq!(numbers.type_tag, "array");
        assert_eq!(numbers.description, "four ints");
        assert_eq!(p.iter().find(|x| x.name == "target").unwrap().type_tag, "integer|null");
        assert_eq!(p.iter().find(|x| x.name == "mode").unwrap().type_tag, "any");
        assert_eq!(tools[0].signature(), "solve(mode?: any, numbers: array, target?: integer|null)");
    }

    #[test]
    fn listing_rejects_duplicates_and_missing_names() {
        let dup = json!({"tools": [{"name": "a"}, {"name": "a"}]});
        assert!(parse_tool_listing(&dup).is_err());
        assert!(parse_tool_listing(&json!({"tools": [{"description": "x"}]})).is_err());
        assert!(parse_tool_listing(&json!({})).is_err());
    }

    #[test]
    fn content_rendering() {
        let r = json!({"content": [{"type": "text", "text": "a"}, {"type": "image", "data": ""}, {"type": "text", "text": "b"}]});
        assert_eq!(render_content(&r), "a\n[image content]\nb");
    }
}
