//! Teacher and student agent loops.
//!
//! Tools are offered to the model as text: every schema is rendered into the
//! system prompt and the model calls a tool with a fenced `tool_call` block
//! holding `{"tool": ..., "arguments": {...}}`. A reply without a call (and,
//! for the teacher, without tool scripts) is the final answer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::eval::is_correct;
use crate::extraction::{extract_blocks, fenced_blocks, validate_script};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::host::{mount_box, spawn_server, HostError, MountedBox, ToolServerHandle};
use crate::model::{sha256_hex, AgentRole, McpBox, TaskExample, TaskKind, ToolSchema, Trajectory, TrajectoryStep};
use crate::prompts;
use crate::sandbox::SandboxConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub role: AgentRole,
    pub model_id: String,
    #[serde(default)]
    pub captioner_model_id: Option<String>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Prompt asset id; defaults to the role name.
    #[serde(default)]
    pub system_prompt_id: Option<String>,
}

fn default_max_steps() -> u32 {
    8
}

impl AgentConfig {
    pub fn teacher(model_id: impl Into<String>) -> Self {
        Self { role: AgentRole::Teacher, model_id: model_id.into(), captioner_model_id: None, max_steps: 8, system_prompt_id: None }
    }

    pub fn student(model_id: impl Into<String>) -> Self {
        Self { role: AgentRole::Student, model_id: model_id.into(), captioner_model_id: None, max_steps: 8, system_prompt_id: None }
    }

    pub fn prompt_id(&self) -> &str {
        match (&self.system_prompt_id, self.role) {
            (Some(id), _) => id,
            (None, AgentRole::Teacher) => "teacher",
            (None, AgentRole::Student) => "student",
        }
    }

    pub fn check(&self) -> Result<(), AgentError> {
        if self.max_steps == 0 {
            return Err(AgentError::Config("max_steps must be at least 1".into()));
        }
        if self.model_id.is_empty() {
            return Err(AgentError::Config("model_id is empty".into()));
        }
        if prompts::asset(self.prompt_id()).is_none() {
            return Err(AgentError::Config(format!("unknown system prompt `{}`", self.prompt_id())));
        }
        Ok(())
    }

    fn system_prompt(&self) -> &'static str {
        prompts::asset(self.prompt_id()).expect("checked prompt id")
    }
}

/// Digest of everything that defines the policy: model ids and the prompt
/// asset. Episodes never change it.
pub fn policy_digest(config: &AgentConfig) -> String {
    let view = serde_json::json!({
        "model_id": config.model_id,
        "captioner_model_id": config.captioner_model_id,
        "system_prompt_id": config.prompt_id(),
        "system_prompt_sha256": prompts::asset(config.prompt_id()).map(|p| sha256_hex(p.as_bytes())),
    });
    sha256_hex(view.to_string().as_bytes())
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no caption for {image_ref}: no sidecar caption and no captioner model configured")]
    CaptionUnavailable { image_ref: String },
    #[error("cannot read image {path}: {source}")]
    Image { path: String, source: std::io::Error },
    #[error("agent configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool_name: String,
    pub arguments: Map<String, Value>,
    /// The block the call was parsed from, fences included.
    pub raw_span: String,
}

/// The first `tool_call` block in `text`. A block that is not a JSON object
/// with a non-empty `tool` string is logged and ignored.
pub fn parse_tool_invocation(text: &str) -> Option<ToolInvocation> {
    let (body, raw_span) = first_tool_call_block(text)?;
    let parsed: Result<Value, _> = serde_json::from_str(body.trim());
    let invocation = match parsed {
        Ok(Value::Object(mut obj)) => {
            let name = obj.get("tool").and_then(Value::as_str).unwrap_or("").to_string();
            let arguments = match obj.remove("arguments") {
                Some(Value::Object(a)) => Some(a),
                None | Some(Value::Null) => Some(Map::new()),
                Some(_) => None,
            };
            match arguments {
                Some(arguments) if !name.is_empty() => Some(ToolInvocation { tool_name: name, arguments, raw_span }),
                _ => None,
            }
        }
        _ => None,
    };
    if invocation.is_none() {
        tracing::warn!(block = %body.trim(), "ignoring malformed tool_call block");
    }
    invocation
}

const TOOL_CALL_FENCE: &str = "```tool_call";

/// Body and full span of the first tool_call block. Accepts the block on one
/// line (```tool_call {...}```) or spread over several.
fn first_tool_call_block(text: &str) -> Option<(String, String)> {
    let start = text.find(TOOL_CALL_FENCE)?;
    let after = &text[start + TOOL_CALL_FENCE.len()..];
    let (body, span_len) = match after.find("```") {
        Some(end) => (&after[..end], TOOL_CALL_FENCE.len() + end + 3),
        None => (after, text.len() - start),
    };
    Some((body.to_string(), text[start..start + span_len].to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub cluster_name: String,
    pub tool_name: String,
    pub arguments_digest: String,
    pub is_error: bool,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub final_answer: String,
    pub correct: bool,
    pub steps_used: u32,
    pub tool_calls: Vec<ToolCallRecord>,
    pub trajectory: Trajectory,
}

/// Text after the last `answer:` (any case) on its line, else the whole reply.
pub fn extract_final_answer(reply: &str) -> String {
    for line in reply.lines().rev() {
        let lower = line.to_lowercase();
        if let Some(pos) = lower.find("answer:") {
            return line[pos + "answer:".len()..].trim().to_string();
        }
    }
    reply.trim().to_string()
}

/// The user turn that poses `task`.
pub fn task_message(task: &TaskExample, caption: Option<&str>) -> String {
    match task.task_kind {
        TaskKind::Game24 => format!(
            "Numbers: {}\nUse each number exactly once with + - * / and parentheses to make 24.",
            task.input_text
        ),
        TaskKind::Vqa | TaskKind::Freeform => match caption {
            Some(c) => format!("Image description:\n{}\n\nQuestion: {}", c.trim_end(), task.input_text),
            None => format!("Question: {}", task.input_text),
        },
    }
}

fn sidecar_paths(image: &Path) -> Vec<PathBuf> {
    let mut paths = vec![PathBuf::from(format!("{}.caption.txt", image.display()))];
    if image.extension().is_some() {
        paths.push(image.with_extension("caption.txt"));
    }
    paths
}

/// Caption for an image: a sidecar `<image>.caption.txt` (or with the
/// extension replaced) verbatim, otherwise the configured captioner model.
pub fn caption_image(image_ref: &str, config: &AgentConfig, gateway: &Gateway) -> Result<String, AgentError> {
    let image = Path::new(image_ref);
    for sidecar in sidecar_paths(image) {
        if let Ok(text) = std::fs::read_to_string(&sidecar) {
            return Ok(text);
        }
    }
    let Some(captioner) = &config.captioner_model_id else {
        return Err(AgentError::CaptionUnavailable { image_ref: image_ref.into() });
    };
    let url = if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        image_ref.to_string()
    } else {
        let bytes = std::fs::read(image).map_err(|source| AgentError::Image { path: image_ref.into(), source })?;
        let mime = match image.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
    };
    let mut message = ChatMessage::user("Describe this image in detail, including anything needed to answer questions about it.");
    message.image_urls.push(url);
    Ok(gateway.complete(&ChatRequest::new(captioner.clone(), vec![message]))?.content)
}

fn caption_for(task: &TaskExample, config: &AgentConfig, gateway: &Gateway) -> Result<Option<String>, AgentError> {
    match &task.image_ref {
        Some(image) => caption_image(image, config, gateway).map(Some),
        None => Ok(None),
    }
}

/// Tool listing for the student system prompt.
pub fn render_tool_listing<'a>(tools: impl IntoIterator<Item = (&'a str, &'a ToolSchema)>) -> String {
    let mut out = String::new();
    for (cluster, tool) in tools {
        out.push_str(&format!("- {} (group: {cluster}): {}\n", tool.name, tool.description.trim()));
        for p in &tool.parameters {
            let need = if p.required { "required" } else { "optional" };
            let desc = if p.description.is_empty() { String::new() } else { format!(": {}", p.description.trim()) };
            out.push_str(&format!("    {} ({}, {need}){desc}\n", p.name, p.type_tag));
        }
    }
    if out.is_empty() {
        out.push_str("No tools are available.\n");
    }
    out.trim_end().to_string()
}

/// The system prompt a student sees with this set of mounted tools.
pub fn student_system_prompt(config: &AgentConfig, mounted: &MountedBox) -> String {
    prompts::render(config.system_prompt(), &[("tools", &render_tool_listing(mounted.offered_tools()))])
}

fn arguments_digest(arguments: &Map<String, Value>) -> String {
    sha256_hex(Value::Object(arguments.clone()).to_string().as_bytes())
}

/// Route a call to the first handle offering `tool_name`.
fn dispatch(handles: &mut [ToolServerHandle], call: &ToolInvocation) -> (String, Option<ToolCallRecord>) {
    let Some(handle) = handles.iter_mut().find(|h| h.tools().iter().any(|t| t.name == call.tool_name)) else {
        return (format!("Observation (tool {}, error):\nunknown tool `{}`", call.tool_name, call.tool_name), None);
    };
    let args = Value::Object(call.arguments.clone());
    let (content, is_error, elapsed_ms) = match handle.call_tool(&call.tool_name, args) {
        Ok(r) => (r.content, r.is_error, r.elapsed_ms),
        Err(e) => (host_error_text(&e), true, 0),
    };
    let record = ToolCallRecord {
        cluster_name: handle.cluster_name().to_string(),
        tool_name: call.tool_name.clone(),
        arguments_digest: arguments_digest(&call.arguments),
        is_error,
        elapsed_ms,
    };
    let tag = if is_error { ", error" } else { "" };
    (format!("Observation (tool {}{tag}):\n{content}", call.tool_name), Some(record))
}

fn host_error_text(e: &HostError) -> String {
    format!("tool server failure: {e}")
}

/// Split a reply at the first line that opens a structured block.
fn split_reasoning(reply: &str, first_block_line: Option<usize>) -> (String, String) {
    match first_block_line {
        Some(n) => {
            let lines: Vec<&str> = reply.lines().collect();
            (lines[..n].join("\n").trim().to_string(), lines[n..].join("\n"))
        }
        None => (reply.trim().to_string(), String::new()),
    }
}

fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.trim_start().starts_with(needle))
}

/// Student episode with the whole box mounted; no tool is ever withheld.
pub fn run_student_episode(
    task: &TaskExample,
    mcp_box: &McpBox,
    box_root: &Path,
    config: &AgentConfig,
    gateway: &Gateway,
    sandbox: &SandboxConfig,
) -> Result<EpisodeResult, AgentError> {
    config.check()?;
    let caption = caption_for(task, config, gateway)?;
    let mut mounted = mount_box(mcp_box, box_root, sandbox);
    let schemas: Vec<ToolSchema> = mounted.offered_tools().map(|(_, t)| t.clone()).collect();
    let mut messages = vec![
        ChatMessage::system(student_system_prompt(config, &mounted)),
        ChatMessage::user(task_message(task, caption.as_deref())),
    ];
    let mut steps = Vec::new();
    let mut tool_calls = Vec::new();
    let mut final_answer = None;
    for index in 1..=config.max_steps {
        let mut request = ChatRequest::new(config.model_id.clone(), messages.clone());
        request.tool_schemas = (!schemas.is_empty()).then(|| schemas.clone());
        let response = gateway.complete(&request)?;
        match &response.tool_invocation {
            Some(call) => {
                let (observation, record) = dispatch(&mut mounted.handles, call);
                tool_calls.extend(record);
                let (reasoning, _) = split_reasoning(&response.content, line_of(&response.content, TOOL_CALL_FENCE));
                steps.push(TrajectoryStep { index, reasoning, action: call.raw_span.clone(), observation: observation.clone() });
                messages.push(ChatMessage::assistant(response.content.clone()));
                messages.push(ChatMessage::user(observation));
            }
            None => {
                let answer = extract_final_answer(&response.content);
                steps.push(TrajectoryStep {
                    index,
                    reasoning: response.content.trim().to_string(),
                    action: format!("answer: {answer}"),
                    observation: String::new(),
                });
                final_answer = Some(answer);
                break;
            }
        }
    }
    mounted.shutdown();
    Ok(finish(task, AgentRole::Student, final_answer, steps, tool_calls))
}

fn finish(
    task: &TaskExample,
    role: AgentRole,
    final_answer: Option<String>,
    steps: Vec<TrajectoryStep>,
    tool_calls: Vec<ToolCallRecord>,
) -> EpisodeResult {
    let final_answer = final_answer.unwrap_or_default();
    let correct = !final_answer.is_empty() && is_correct(&final_answer, task);
    EpisodeResult {
        task_id: task.id.clone(),
        correct,
        steps_used: steps.len() as u32,
        tool_calls,
        trajectory: Trajectory { task_id: task.id.clone(), agent_role: role, final_answer: final_answer.clone(), steps },
        final_answer,
    }
}

/// Last line of a validation detail, which for interpreter errors names the
/// exception and stays stable across interpreter versions.
fn short_detail(detail: &str) -> &str {
    detail.lines().rev().find(|l| !l.trim().is_empty()).map(str::trim).unwrap_or("")
}

/// Teacher episode. Tool scripts in a reply are validated at once; valid
/// ones stay mounted for the rest of the episode so the teacher can call
/// them. Validation results come back as the step's observation.
pub fn run_teacher_episode(
    task: &TaskExample,
    config: &AgentConfig,
    gateway: &Gateway,
    sandbox: &SandboxConfig,
    search_provider: Option<&[String]>,
) -> Result<EpisodeResult, AgentError> {
    config.check()?;
    let caption = caption_for(task, config, gateway)?;
    let scripts_dir = tempfile::Builder::new()
        .prefix("mcpbox-teacher-")
        .tempdir()
        .map_err(|e| AgentError::Config(format!("cannot create scratch directory: {e}")))?;
    let mut handles: Vec<ToolServerHandle> = Vec::new();
    let mut messages = vec![
        ChatMessage::system(config.system_prompt()),
        ChatMessage::user(task_message(task, caption.as_deref())),
    ];
    let mut steps = Vec::new();
    let mut tool_calls = Vec::new();
    let mut final_answer = None;
    let mut script_count = 0usize;

    for index in 1..=config.max_steps {
        let response = gateway.complete(&ChatRequest::new(config.model_id.clone(), messages.clone()))?;
        let reply = response.content;
        let blocks = extract_blocks(&reply);
        let call = parse_tool_invocation(&reply);
        let search = fenced_blocks(&reply).into_iter().find(|b| b.info == "search");

        if blocks.is_empty() && call.is_none() && search.is_none() {
            let answer = extract_final_answer(&reply);
            steps.push(TrajectoryStep {
                index,
                reasoning: reply.trim().to_string(),
                action: format!("answer: {answer}"),
                observation: String::new(),
            });
            final_answer = Some(answer);
            break;
        }

        let mut observation = Vec::new();
        if !blocks.is_empty() {
            observation.push("MCP validation results:".to_string());
            for (n, block) in blocks.iter().enumerate() {
                let v = validate_script(&block.body, sandbox);
                if v.is_valid() {
                    script_count += 1;
                    let path = scripts_dir.path().join(format!("tool-{script_count}.tool"));
                    let mounted = std::fs::write(&path, &block.body)
                        .map_err(|e| HostError::Io(e))
                        .and_then(|_| spawn_server(&path, &format!("teacher-{script_count}"), sandbox))
                        .and_then(|mut h| h.initialize().map(|_| h));
                    match mounted {
                        Ok(h) => handles.push(h),
                        Err(e) => tracing::warn!(error = %e, "validated script failed to mount"),
                    }
                    observation.push(format!("- block {}: valid; {}", n + 1, v.report.detail));
                } else {
                    let outcome = serde_json::to_value(v.report.outcome).expect("outcome serializes");
                    observation.push(format!(
                        "- block {}: {}: {}",
                        n + 1,
                        outcome.as_str().unwrap_or("invalid"),
                        short_detail(&v.report.detail)
                    ));
                }
            }
        }
        if let Some(call) = &call {
            let (text, record) = dispatch(&mut handles, call);
            tool_calls.extend(record);
            observation.push(text);
        }
        if let Some(query) = &search {
            let hits = open_source_search(query.body.trim(), search_provider);
            observation.push(format!("Search results:\n{}", serde_json::to_string_pretty(&hits).expect("hits serialize")));
        }

        let first_structured = [
            blocks.first().map(|b| b.start_line),
            line_of(&reply, TOOL_CALL_FENCE),
            search.as_ref().map(|b| b.start_line),
        ]
        .into_iter()
        .flatten()
        .min();
        let (reasoning, action) = split_reasoning(&reply, first_structured);
        let observation = observation.join("\n");
        steps.push(TrajectoryStep { index, reasoning, action, observation: observation.clone() });
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(observation));
    }
    for h in &mut handles {
        h.shutdown();
    }
    Ok(finish(task, AgentRole::Teacher, final_answer, steps, tool_calls))
}

/// Teacher episodes over `tasks` on at most `max_parallel` threads, in task
/// order. The first error aborts the batch.
pub fn run_teacher_batch(
    tasks: &[TaskExample],
    config: &AgentConfig,
    gateway: &Gateway,
    sandbox: &SandboxConfig,
    search_provider: Option<&[String]>,
) -> Result<Vec<EpisodeResult>, AgentError> {
    crate::parallel::map_bounded(tasks, sandbox.max_parallel, |t| {
        run_teacher_episode(t, config, gateway, sandbox, search_provider)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

/// Open-source code search. Disabled unless a provider command is configured;
/// the provider receives the query as its last argument and must print a JSON
/// array of `{title, url, snippet}`.
pub fn open_source_search(query: &str, provider: Option<&[String]>) -> Vec<SearchHit> {
    let Some((program, args)) = provider.and_then(|p| p.split_first()) else {
        tracing::info!("open-source search is disabled; no provider configured");
        return Vec::new();
    };
    let output = std::process::Command::new(program)
        .args(args)
        .arg(query)
        .stdin(std::process::Stdio::null())
        .output();
    let output = match output {
        Ok(o) if o.status.success() => o,
        Ok(o) => {
            tracing::warn!(status = %o.status, "search provider failed");
            return Vec::new();
        }
        Err(e) => {
            tracing::warn!(error = %e, "search provider could not be started");
            return Vec::new();
        }
    };
    match serde_json::from_slice::<Vec<SearchHit>>(&output.stdout) {
        Ok(hits) => hits,
        Err(e) => {
            tracing::warn!(error = %e, "search provider printed invalid JSON");
            Vec::new()
        }
    }
}

/// Count of tool calls per tool name, for reports.
pub fn tool_call_histogram(results: &[EpisodeResult]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in results {
        for c in &r.tool_calls {
            *out.entry(c.tool_name.clone()).or_insert(0) += 1;
        }
    }
    out
}
