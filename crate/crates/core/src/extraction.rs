//! From teacher trajectories to a validated, deduplicated pool of raw tool
//! scripts.
//!
//! A script block is either the lines between a `<mcp>` line and a `</mcp>`
//! line, or a fenced code block whose body contains `@mcp.tool(`.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::is_correct;
use crate::host::{spawn_server, HostError};
use crate::model::{normalize_script, sha256_hex, McpCandidate, TaskExample, ToolSchema, Trajectory};
use crate::parallel::map_bounded;
use crate::sandbox::SandboxConfig;

const FASTMCP_MARKER: &str = "@mcp.tool(";

/// A script block found in free text. Lines are 0-based, `end_line` exclusive
/// and includes the closing delimiter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptBlock {
    pub start_line: usize,
    pub end_line: usize,
    pub body: String,
}

fn fence_open(line: &str) -> Option<(char, usize)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let ch = rest.chars().next().filter(|c| *c == '`' || *c == '~')?;
    let len = rest.chars().take_while(|c| *c == ch).count();
    if len < 3 {
        return None;
    }
    // Backtick fences may not carry backticks in the info string.
    if ch == '`' && rest[len..].contains('`') {
        return None;
    }
    Some((ch, len))
}

fn fence_close(line: &str, ch: char, min_len: usize) -> bool {
    let t = line.trim();
    !t.is_empty() && t.chars().all(|c| c == ch) && t.chars().count() >= min_len
}

/// Strip one fenced code block wrapping the whole of `body`, if present.
fn unwrap_fence(body: &str) -> String {
    let lines: Vec<&str> = body.lines().collect();
    let first = lines.iter().position(|l| !l.trim().is_empty());
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    if let (Some(f), Some(l)) = (first, last) {
        if f < l {
            if let Some((ch, len)) = fence_open(lines[f]) {
                if fence_close(lines[l], ch, len) {
                    return lines[f + 1..l].join("\n");
                }
            }
        }
    }
    body.to_string()
}

/// A fenced code block with its info string (first word, lowercased).
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct FencedBlock {
    pub info: String,
    pub body: String,
    pub start_line: usize,
}

/// Every fenced code block in `text`; an unclosed fence runs to the end.
pub(crate) fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut out = Vec::new();
    let mut open: Option<(char, usize, String, usize, Vec<&str>)> = None;
    for (i, line) in text.lines().enumerate() {
        open = match open {
            None => fence_open(line).map(|(ch, len)| {
                let rest = line.trim_start_matches(' ');
                let info = rest[len..].split_whitespace().next().unwrap_or("").to_ascii_lowercase();
                (ch, len, info, i, Vec::new())
            }),
            Some((ch, len, info, start, mut body)) => {
                if fence_close(line, ch, len) {
                    out.push(FencedBlock { info, body: body.join("\n"), start_line: start });
                    None
                } else {
                    body.push(line);
                    Some((ch, len, info, start, body))
                }
            }
        };
    }
    if let Some((_, _, info, start, body)) = open {
        out.push(FencedBlock { info, body: body.join("\n"), start_line: start });
    }
    out
}

/// Find every script block in `text`, in order of appearance.
pub fn extract_blocks(text: &str) -> Vec<ScriptBlock> {
    enum State {
        Outside,
        Mcp { start: usize, body: Vec<String> },
        Fence { start: usize, ch: char, len: usize, body: Vec<String> },
    }
    let mut blocks = Vec::new();
    let mut state = State::Outside;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        state = match state {
            State::Outside => {
                if line.trim() == "<mcp>" {
                    State::Mcp { start: i, body: Vec::new() }
                } else if let Some((ch, len)) = fence_open(line) {
                    State::Fence { start: i, ch, len, body: Vec::new() }
                } else {
                    State::Outside
                }
            }
            State::Mcp { start, mut body } => {
                if line.trim() == "</mcp>" {
                    let script = unwrap_fence(&body.join("\n"));
                    if !script.trim().is_empty() {
                        blocks.push(ScriptBlock { start_line: start, end_line: i + 1, body: script });
                    }
                    State::Outside
                } else {
                    body.push(line.to_string());
                    State::Mcp { start, body }
                }
            }
            State::Fence { start, ch, len, mut body } => {
                if fence_close(line, ch, len) {
                    let script = body.join("\n");
                    if script.contains(FASTMCP_MARKER) {
                        blocks.push(ScriptBlock { start_line: start, end_line: i + 1, body: script });
                    }
                    State::Outside
                } else {
                    body.push(line.to_string());
                    State::Fence { start, ch, len, body }
                }
            }
        };
    }
    match state {
        // An unclosed fence runs to the end of the text.
        State::Fence { start, body, .. } => {
            let script = body.join("\n");
            if script.contains(FASTMCP_MARKER) {
                blocks.push(ScriptBlock { start_line: start, end_line: lines.len(), body: script });
            }
        }
        State::Mcp { start, .. } => {
            tracing::debug!(line = start + 1, "ignoring unterminated <mcp> block");
        }
        State::Outside => {}
    }
    blocks
}

/// One candidate per script block in each step's action, in step order then
/// in-step order.
pub fn extract_candidates(trajectory: &Trajectory) -> Vec<McpCandidate> {
    trajectory
        .steps
        .iter()
        .flat_map(|step| {
            extract_blocks(&step.action)
                .into_iter()
                .map(move |b| McpCandidate::new(trajectory.task_id.clone(), step.index, b.body))
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("trajectory references unknown task `{task_id}`")]
    UnknownTask { task_id: String },
}

/// Keep the trajectories whose final answer is correct for their task.
pub fn filter_successful(
    trajectories: &[Trajectory],
    dataset: &[TaskExample],
) -> Result<Vec<Trajectory>, ExtractionError> {
    let by_id: HashMap<&str, &TaskExample> = dataset.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut kept = Vec::new();
    for t in trajectories {
        let task = by_id
            .get(t.task_id.as_str())
            .ok_or_else(|| ExtractionError::UnknownTask { task_id: t.task_id.clone() })?;
        if is_correct(&t.final_answer, task) {
            kept.push(t.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationOutcome {
    Valid,
    SyntaxError,
    LaunchFailure,
    Timeout,
    ProtocolViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub candidate_digest: String,
    pub outcome: ValidationOutcome,
    pub detail: String,
    pub elapsed_ms: u64,
}

/// Result of the handshake check: the report plus, when valid, the tools the
/// live server listed.
#[derive(Debug, Clone)]
pub struct ScriptValidation {
    pub report: ValidationReport,
    pub tools: Vec<ToolSchema>,
}

impl ScriptValidation {
    pub fn is_valid(&self) -> bool {
        self.report.outcome == ValidationOutcome::Valid
    }
}

const SANDBOX_PLACEHOLDER: &str = "<sandbox>";

/// Launch `script_text` as a tool server in a fresh directory and complete
/// `initialize` + `tools/list` within the sandbox timeout. The process is
/// always terminated before returning. Paths of the scratch directory are
/// replaced by `<sandbox>` in the detail so reports are reproducible.
pub fn validate_script(script_text: &str, sandbox: &SandboxConfig) -> ScriptValidation {
    let digest = crate::model::content_digest(script_text);
    let started = Instant::now();
    let report = |outcome, detail: String| ValidationReport {
        candidate_digest: digest.clone(),
        outcome,
        detail,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    let dir = match tempfile::Builder::new().prefix("mcpbox-validate-").tempdir() {
        Ok(d) => d,
        Err(e) => {
            return ScriptValidation {
                report: report(ValidationOutcome::LaunchFailure, format!("cannot create sandbox dir: {e}")),
                tools: Vec::new(),
            }
        }
    };
    let script_path = dir.path().join("candidate.tool");
    if let Err(e) = std::fs::write(&script_path, script_text) {
        return ScriptValidation {
            report: report(ValidationOutcome::LaunchFailure, format!("cannot write script: {e}")),
            tools: Vec::new(),
        };
    }
    let mut local = sandbox.clone();
    if local.working_dir.is_none() {
        local.working_dir = Some(dir.path().to_path_buf());
    }

    let outcome = spawn_server(&script_path, "validation", &local).and_then(|mut handle| {
        let result = handle.initialize().map(|_| handle.tools().to_vec());
        handle.shutdown();
        result
    });
    let scrub = |s: String| sanitize_paths(&s, dir.path());
    match outcome {
        Ok(tools) => {
            let names: Vec<&str> = tools.iter().map(|t| t.name.as_str()).collect();
            let detail = format!("tools: {}", names.join(", "));
            ScriptValidation { report: report(ValidationOutcome::Valid, detail), tools }
        }
        Err(err) => {
            let outcome = match &err {
                HostError::ServerExited { detail, .. }
                    if detail.contains("SyntaxError") || detail.contains("IndentationError") =>
                {
                    ValidationOutcome::SyntaxError
                }
                HostError::ServerExited { .. } | HostError::LaunchFailure { .. } | HostError::Io(_) => {
                    ValidationOutcome::LaunchFailure
                }
                HostError::Timeout { .. } => ValidationOutcome::Timeout,
                HostError::ProtocolViolation { .. } | HostError::Rpc { .. } | HostError::InvalidState(_) => {
                    ValidationOutcome::ProtocolViolation
                }
            };
            ScriptValidation { report: report(outcome, scrub(err.to_string())), tools: Vec::new() }
        }
    }
}

fn sanitize_paths(text: &str, dir: &Path) -> String {
    let mut out = text.to_string();
    let mut forms = vec![dir.display().to_string()];
    if let Ok(canon) = dir.canonicalize() {
        forms.push(canon.display().to_string());
    }
    forms.sort_by_key(|f| std::cmp::Reverse(f.len()));
    for f in forms {
        out = out.replace(&f, SANDBOX_PLACEHOLDER);
    }
    out
}

pub fn validate_candidate(candidate: &McpCandidate, sandbox: &SandboxConfig) -> ValidationReport {
    validate_script(&candidate.script_text, sandbox).report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_task_id: String,
    pub step_index: u32,
    pub report: ValidationReport,
}

/// A valid candidate dropped because an earlier one had the same digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duplicate {
    pub content_digest: String,
    pub source_task_id: String,
    pub step_index: u32,
    pub kept_task_id: String,
    pub kept_step_index: u32,
    /// Same digest but different normalized text. Never expected with
    /// SHA-256, reported rather than silently merged.
    pub digest_collision: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McpPool {
    pub candidates: Vec<McpCandidate>,
    pub rejected: Vec<Rejection>,
    pub duplicates: Vec<Duplicate>,
    pub source_log_digest: String,
}

impl McpPool {
    /// Occurrences accounted for: kept + rejected + deduplicated.
    pub fn accounted(&self) -> usize {
        self.candidates.len() + self.rejected.len() + self.duplicates.len()
    }
}

/// Success filter, then extraction, handshake validation and exact dedup
/// (first occurrence wins). Each distinct script is validated once;
/// validation runs on up to `sandbox.max_parallel` workers but the pool is
/// assembled in (trajectory, step, in-step) order.
pub fn build_pool(
    trajectories: &[Trajectory],
    dataset: &[TaskExample],
    sandbox: &SandboxConfig,
) -> Result<McpPool, ExtractionError> {
    let successful = filter_successful(trajectories, dataset)?;
    let extracted: Vec<McpCandidate> = successful.iter().flat_map(extract_candidates).collect();

    let mut seen = HashSet::new();
    let distinct: Vec<&McpCandidate> = extracted
        .iter()
        .filter(|c| seen.insert(c.content_digest.clone()))
        .collect();
    let validations = map_bounded(&distinct, sandbox.max_parallel, |c| validate_candidate(c, sandbox));
    let reports: HashMap<String, ValidationReport> = distinct
        .iter()
        .map(|c| c.content_digest.clone())
        .zip(validations)
        .collect();

    let mut pool = McpPool {
        candidates: Vec::new(),
        rejected: Vec::new(),
        duplicates: Vec::new(),
        source_log_digest: log_digest(trajectories),
    };
    let mut kept: HashMap<String, (String, u32, String)> = HashMap::new();
    for cand in extracted {
        let report = &reports[cand.content_digest.as_str()];
        if report.outcome != ValidationOutcome::Valid {
            pool.rejected.push(Rejection {
                source_task_id: cand.source_task_id.clone(),
                step_index: cand.step_index,
                report: report.clone(),
            });
            continue;
        }
        let normalized = normalize_script(&cand.script_text);
        match kept.get(&cand.content_digest) {
            Some((task, step, text)) => pool.duplicates.push(Duplicate {
                content_digest: cand.content_digest.clone(),
                source_task_id: cand.source_task_id.clone(),
                step_index: cand.step_index,
                kept_task_id: task.clone(),
                kept_step_index: *step,
                digest_collision: *text != normalized,
            }),
            None => {
                kept.insert(
                    cand.content_digest.clone(),
                    (cand.source_task_id.clone(), cand.step_index, normalized),
                );
                pool.candidates.push(cand);
            }
        }
    }
    Ok(pool)
}

/// Digest of the canonical serialization of a trajectory list.
pub fn log_digest(trajectories: &[Trajectory]) -> String {
    let mut buf = Vec::new();
    crate::model::write_trajectory_log(trajectories, &mut buf).expect("writing to memory");
    sha256_hex(&buf)
}
