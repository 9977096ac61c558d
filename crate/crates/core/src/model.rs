//! Domain types shared by every pipeline stage, plus the trajectory log format.
//!
//! Trajectory logs are newline-delimited JSON: one [`Trajectory`] object per
//! line with keys `task_id`, `agent_role`, `final_answer` and `steps`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version string written to and accepted from `box.json`.
pub const BOX_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Game24,
    Vqa,
    Freeform,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "game24" => Ok(TaskKind::Game24),
            "vqa" => Ok(TaskKind::Vqa),
            "freeform" => Ok(TaskKind::Freeform),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// One supervision pair: the task input and its ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub label: String,
    pub task_kind: TaskKind,
}

impl TaskExample {
    /// The four puzzle numbers of a Game-of-24 task, if `input_text` holds
    /// exactly four positive integers.
    pub fn game24_numbers(&self) -> Option<[i64; 4]> {
        parse_four_numbers(&self.input_text)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty task id".into());
        }
        if self.label.trim().is_empty() {
            return Err(format!("task `{}` has an empty label", self.id));
        }
        if self.task_kind == TaskKind::Game24 && self.game24_numbers().is_none() {
            return Err(format!(
                "task `{}` is game24 but `{}` is not four positive integers",
                self.id, self.input_text
            ));
        }
        Ok(())
    }
}

pub(crate) fn parse_four_numbers(text: &str) -> Option<[i64; 4]> {
    let nums: Vec<i64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<i64>().ok().filter(|n| *n > 0))
        .collect::<Option<_>>()?;
    nums.try_into().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Teacher,
    Student,
}

/// One (reasoning, action, observation) step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: u32,
    pub reasoning: String,
    pub action: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub agent_role: AgentRole,
    pub final_answer: String,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    fn check(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("trajectory has no steps".into());
        }
        for pair in self.steps.windows(2) {
            if pair[1].index <= pair[0].index {
                return Err(format!(
                    "step indices not strictly increasing ({} then {})",
                    pair[0].index, pair[1].index
                ));
            }
        }
        Ok(())
    }
}

/// A raw tool script lifted from one trajectory step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McpCandidate {
    pub source_task_id: String,
    pub step_index: u32,
    pub script_text: String,
    pub content_digest: String,
}

impl McpCandidate {
    pub fn new(source_task_id: impl Into<String>, step_index: u32, script_text: impl Into<String>) -> Self {
        let script_text = script_text.into();
        let content_digest = content_digest(&script_text);
        Self {
            source_task_id: source_task_id.into(),
            step_index,
            script_text,
            content_digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolParameter {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: String,
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ToolParameter>,
}

impl ToolSchema {
    /// One-line rendering used in prompts and `inspect` output.
    pub fn signature(&self) -> String {
        let params: Vec<String> = self
            .parameters
            .iter()
            .map(|p| {
                let opt = if p.required { "" } else { "?" };
                format!("{}{}: {}", p.name, opt, p.type_tag)
            })
            .collect();
        format!("{}({})", self.name, params.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxEntry {
    pub tool_script_path: String,
    pub cluster_name: String,
    pub tool_schemas: Vec<ToolSchema>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_log_digest: String,
    /// UTC, RFC 3339.
    pub created_at: String,
    pub pipeline_config_digest: String,
}

/// The persisted box manifest (`box.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McpBox {
    pub schema_version: String,
    pub entries: Vec<BoxEntry>,
    pub provenance: Provenance,
}

impl McpBox {
    /// A box with no entries, used when a student runs without tools.
    pub fn empty() -> Self {
        Self {
            schema_version: BOX_SCHEMA_VERSION.into(),
            entries: Vec::new(),
            provenance: Provenance {
                source_log_digest: String::new(),
                created_at: String::new(),
                pipeline_config_digest: String::new(),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line_number}: {reason}")]
    Parse { line_number: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parse a newline-delimited trajectory log. Any malformed line rejects the
/// whole stream; blank lines are skipped.
pub fn parse_trajectory_log(reader: impl BufRead) -> Result<Vec<Trajectory>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| LogError::Parse {
            line_number,
            reason: e.to_string(),
        })?;
        traj.check()
            .map_err(|reason| LogError::Parse { line_number, reason })?;
        out.push(traj);
    }
    Ok(out)
}

/// Write trajectories one per line; returns the number of bytes written.
pub fn write_trajectory_log(trajectories: &[Trajectory], mut sink: impl Write) -> std::io::Result<u64> {
    let mut written = 0u64;
    for t in trajectories {
        let mut line = serde_json::to_string(t).map_err(std::io::Error::other)?;
        line.push('\n');
        sink.write_all(line.as_bytes())?;
        written += line.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Canonical form used for digests: LF line endings, no trailing whitespace
/// on any line, no trailing blank lines.
pub fn normalize_script(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim_end_matches('\n').to_string()
}

/// SHA-256 (hex) of the normalized script text.
pub fn content_digest(script_text: &str) -> String {
    sha256_hex(normalize_script(script_text).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn traj(task: &str, n: u32) -> Trajectory {
        Trajectory {
            task_id: task.into(),
            agent_role: AgentRole::Teacher,
            final_answer: "answer: 1".into(),
            steps: (0..n)
                .map(|i| TrajectoryStep {
                    index: i,
                    reasoning: format!("think {i}"),
                    action: "act\nwith newline".into(),
                    observation: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn parse_two_records_in_order() {
        let mut buf = Vec::new();
        write_trajectory_log(&[traj("a", 1), traj("b", 2)], &mut buf).unwrap();
        let parsed = parse_trajectory_log(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].task_id, "a");
        assert_eq!(parsed[1].task_id, "b");
    }

    #[test]
    fn empty_stream_is_empty_list() {
        assert!(parse_trajectory_log(&b""[..]).unwrap().is_empty());
        let mut buf = Vec::new();
        assert_eq!(write_trajectory_log(&[], &mut buf).unwrap(), 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn missing_final_answer_reports_line() {
        let good = serde_json::to_string(&traj("a", 1)).unwrap();
        let bad = r#"{"task_id":"c","agent_role":"teacher","steps":[{"index":0,"reasoning":"","action":"","observation":""}]}"#;
        let text = format!("{good}\n{good}\n{bad}\n");
        match parse_trajectory_log(text.as_bytes()) {
            Err(LogError::Parse { line_number, reason }) => {
                assert_eq!(line_number, 3);
                assert!(reason.contains("final_answer"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_increasing_steps() {
        let mut t = traj("a", 2);
        t.steps[1].index = 0;
        let line = serde_json::to_string(&t).unwrap();
        assert!(matches!(
            parse_trajectory_log(line.as_bytes()),
            Err(LogError::Parse { line_number: 1, .. })
        ));
        let mut t = traj("a", 1);
        t.steps.clear();
        let line = serde_json::to_string(&t).unwrap();
        assert!(parse_trajectory_log(line.as_bytes()).is_err());
    }

    #[test]
    fn hundred_trajectories_hundred_lines() {
        let xs: Vec<_> = (0..100).map(|i| traj(&format!("t{i}"), 1 + i % 3)).collect();
        let mut buf = Vec::new();
        let n = write_trajectory_log(&xs, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 100);
        assert_eq!(parse_trajectory_log(buf.as_slice()).unwrap(), xs);
    }

    #[test]
    fn digest_normalizes_line_endings() {
        assert_eq!(content_digest("a()\n"), content_digest("a()\r\n"));
        assert_eq!(content_digest("a()  \nb()\t\n"), content_digest("a()\nb()"));
        assert_ne!(content_digest("a()"), content_digest("b()"));
        // Leading indentation is significant.
        assert_ne!(content_digest(" a()"), content_digest("a()"));
    }

    #[test]
    fn digest_is_stable_across_processes() {
        // Frozen value: `printf 'a()' | sha256sum`.
        let frozen = "a95a430608fb6e9ab984c01c1a9dc039cefd2776356781efc924f02ab583a32e";
        assert_eq!(content_digest("a()\r\n"), frozen);
        assert_eq!(content_digest("a()"), frozen);
    }

    #[test]
    fn game24_number_parsing() {
        assert_eq!(parse_four_numbers("4 4 6 8"), Some([4, 4, 6, 8]));
        assert_eq!(parse_four_numbers("4,4,6,8"), Some([4, 4, 6, 8]));
        assert_eq!(parse_four_numbers("4 4 6"), None);
        assert_eq!(parse_four_numbers("4 4 6 0"), None);
        assert_eq!(parse_four_numbers("4 4 6 x"), None);
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(
            tasks in proptest::collection::vec(("[a-z0-9-]{1,8}", "\\PC{0,20}", proptest::collection::vec(("\\PC{0,30}", "\\PC{0,30}", "\\PC{0,30}"), 1..4)), 0..8)
        ) {
            let xs: Vec<Trajectory> = tasks.into_iter().map(|(id, ans, steps)| Trajectory {
                task_id: id,
                agent_role: AgentRole::Student,
                final_answer: ans,
                steps: steps.into_iter().enumerate().map(|(i, (r, a, o))| TrajectoryStep {
                    index: i as u32 * 2,
                    reasoning: r,
                    action: a,
                    observation: o,
                }).collect(),
            }).collect();
            let mut buf = Vec::new();
            write_trajectory_log(&xs, &mut buf).unwrap();
            prop_assert_eq!(parse_trajectory_log(buf.as_slice()).unwrap(), xs);
        }
    }

    #[test]
    fn no_collisions_among_short_scripts() {
        use proptest::strategy::ValueTree;
        use proptest::test_runner::TestRunner;
        let mut runner = TestRunner::deterministic();
        let strategy = "[ -~\n]{0,64}";
        let mut seen: HashMap<String, String> = HashMap::new();
        for _ in 0..10_000 {
            let text = strategy.new_tree(&mut runner).unwrap().current();
            let norm = normalize_script(&text);
            let digest = content_digest(&text);
            if let Some(prev) = seen.insert(digest, norm.clone()) {
                assert_eq!(prev, norm, "digest collision between distinct normalized texts");
            }
        }
    }
}
