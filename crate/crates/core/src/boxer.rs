//! Box construction: abstraction of pool scripts into parameterized tools,
//! clustering by functionality, consolidation of each cluster into one tool
//! server, and persistence of the result.
//!
//! Box layout: `box.json` plus `tools/<slug>.tool`, and `report.json` with
//! every failure and flag of the run that produced it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::extraction::{build_pool, extract_blocks, fenced_blocks, validate_script, Duplicate, ExtractionError, ScriptValidation};
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::model::{BoxEntry, McpBox, McpCandidate, Provenance, TaskExample, ToolSchema, Trajectory, BOX_SCHEMA_VERSION};
use crate::parallel::map_bounded;
use crate::prompts;
use crate::sandbox::SandboxConfig;

/// Soft bound on exposed parameters per abstracted tool.
pub const MAX_EXPOSED_PARAMETERS: usize = 3;

pub const MANIFEST_FILE: &str = "box.json";
pub const REPORT_FILE: &str = "report.json";
pub const TOOLS_DIR: &str = "tools";

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("abstraction of {digest} failed after {attempts} attempts: {detail}")]
    AbstractionFailed { digest: String, attempts: u32, detail: String },
    #[error("consolidation of cluster `{cluster_name}` failed after {attempts} attempts: {detail}")]
    ConsolidationFailed { cluster_name: String, attempts: u32, detail: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error("unsupported box schema version `{found}` (supported: {BOX_SCHEMA_VERSION})")]
    UnsupportedSchema { found: String },
    #[error("box references missing tool file {path}")]
    MissingTool { path: String },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BoxError + '_ {
    move |source| BoxError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposedParameter {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractedMcp {
    pub origin_digest: String,
    pub script_text: String,
    pub exposed_parameters: Vec<ExposedParameter>,
    pub summary: String,
    /// Tools the abstracted script lists when launched.
    pub tools: Vec<ToolSchema>,
    /// More than [`MAX_EXPOSED_PARAMETERS`] parameters survived the retry.
    pub over_parameter_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McpCluster {
    pub cluster_name: String,
    pub members: Vec<AbstractedMcp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidatedMcp {
    pub cluster_name: String,
    pub script_text: String,
    /// As reported by the live server.
    pub tool_schemas: Vec<ToolSchema>,
    pub member_digests: Vec<String>,
}

/// What every model-driven box stage needs.
#[derive(Debug, Clone, Copy)]
pub struct BuildContext<'a> {
    pub gateway: &'a Gateway,
    pub model_id: &'a str,
    pub sandbox: &'a SandboxConfig,
    pub retry_budget: u32,
}

impl BuildContext<'_> {
    fn ask(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        Ok(self.gateway.complete(&ChatRequest::new(self.model_id, messages.to_vec()))?.content)
    }
}

/// The script in a model reply: the first `python`/`py` block, else the
/// first `<mcp>` block, else the first untagged block.
fn reply_script(reply: &str) -> Option<String> {
    let fences = fenced_blocks(reply);
    fences
        .iter()
        .find(|b| matches!(b.info.as_str(), "python" | "py" | "python3"))
        .map(|b| b.body.clone())
        .or_else(|| extract_blocks(reply).into_iter().next().map(|b| b.body))
        .or_else(|| fences.iter().find(|b| b.info.is_empty()).map(|b| b.body.clone()))
        .filter(|s| !s.trim().is_empty())
}

/// The first `json` block, or the whole reply if it is a JSON document.
fn reply_json(reply: &str) -> Option<Value> {
    fenced_blocks(reply)
        .into_iter()
        .filter(|b| b.info == "json")
        .find_map(|b| serde_json::from_str(&b.body).ok())
        .or_else(|| serde_json::from_str(reply.trim()).ok())
}

fn short_detail(v: &ScriptValidation) -> String {
    let last = v.report.detail.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    let outcome = serde_json::to_value(v.report.outcome).expect("outcome serializes");
    format!("{}: {last}", outcome.as_str().unwrap_or("invalid"))
}

#[derive(Deserialize)]
struct AbstractionMeta {
    #[serde(default)]
    summary: String,
    #[serde(default)]
    parameters: Vec<ExposedParameter>,
}

/// Parse and validate one abstraction reply; `Err` holds feedback for the
/// model.
fn accept_abstraction(reply: &str, candidate: &McpCandidate, sandbox: &SandboxConfig) -> Result<AbstractedMcp, String> {
    let script = reply_script(reply).ok_or_else(|| {
        "Your reply did not contain the rewritten script in a `python` block. Reply with the json block and the complete script.".to_string()
    })?;
    let v = validate_script(&script, sandbox);
    if !v.is_valid() {
        return Err(format!(
            "The rewritten script failed validation ({}). Fix it and reply in the same format.",
            short_detail(&v)
        ));
    }
    let meta: Option<AbstractionMeta> = reply_json(reply).and_then(|j| serde_json::from_value(j).ok());
    let (summary, exposed_parameters) = match meta {
        Some(m) => (m.summary, m.parameters),
        None => (String::new(), Vec::new()),
    };
    let summary = if summary.trim().is_empty() {
        v.tools.first().map(|t| t.description.clone()).unwrap_or_default()
    } else {
        summary.trim().to_string()
    };
    let exposed_parameters = if exposed_parameters.is_empty() {
        let mut seen = HashSet::new();
        v.tools
            .iter()
            .flat_map(|t| &t.parameters)
            .filter(|p| seen.insert(p.name.clone()))
            .map(|p| ExposedParameter { name: p.name.clone(), description: p.description.clone() })
            .collect()
    } else {
        exposed_parameters
    };
    Ok(AbstractedMcp {
        origin_digest: candidate.content_digest.clone(),
        script_text: script,
        over_parameter_bound: exposed_parameters.len() > MAX_EXPOSED_PARAMETERS,
        exposed_parameters,
        summary,
        tools: v.tools,
    })
}

/// Rewrite one pool script into a task-agnostic tool. Failed attempts are
/// retried with the failure appended to the conversation; one retry is spent
/// on trimming more than three parameters, after which the tool is kept and
/// flagged.
pub fn abstract_mcp(candidate: &McpCandidate, ctx: &BuildContext) -> Result<AbstractedMcp, BoxError> {
    let attempts = 1 + ctx.retry_budget;
    let prompt = prompts::render(prompts::ABSTRACT, &[("script", candidate.script_text.trim_end())]);
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut flagged: Option<AbstractedMcp> = None;
    let mut detail = String::new();
    for attempt in 1..=attempts {
        let reply = ctx.ask(&messages)?;
        let feedback = match accept_abstraction(&reply, candidate, ctx.sandbox) {
            Ok(a) if !a.over_parameter_bound => return Ok(a),
            Ok(a) if flagged.is_none() && attempt < attempts => {
                let n = a.exposed_parameters.len();
                flagged = Some(a);
                format!("The tool exposes {n} parameters. Keep at most {MAX_EXPOSED_PARAMETERS}, the most important ones, and reply in the same format.")
            }
            Ok(a) => return Ok(a),
            Err(feedback) => feedback,
        };
        detail = feedback.clone();
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(feedback));
    }
    // The trimming retry produced nothing usable; keep the flagged version.
    if let Some(a) = flagged {
        return Ok(a);
    }
    Err(BoxError::AbstractionFailed { digest: candidate.content_digest.clone(), attempts, detail })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    None,
    Model,
    Repaired,
    Fallback,
}

fn cluster_items(abstracted: &[AbstractedMcp]) -> String {
    abstracted
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let names: Vec<&str> = a.tools.iter().map(|t| t.name.as_str()).collect();
            format!(
                "### Tool {}\nSummary: {}\nTools: {}\n```python\n{}\n```",
                i + 1,
                a.summary,
                names.join(", "),
                a.script_text.trim_end()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// A total assignment of 1-based tool numbers to named groups, as member
/// index lists (0-based, ascending) ordered by smallest member.
fn parse_assignment(reply: &str, n: usize) -> Result<Vec<(String, Vec<usize>)>, String> {
    let v = reply_json(reply).ok_or("no JSON found")?;
    let clusters = v.get("clusters").and_then(Value::as_array).ok_or("missing `clusters` array")?;
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for c in clusters {
        let name = c.get("name").and_then(Value::as_str).map(str::trim).unwrap_or("");
        if name.is_empty() {
            return Err("a group has no name".into());
        }
        let members = c.get("members").and_then(Value::as_array).ok_or_else(|| format!("group `{name}` has no members list"))?;
        if members.is_empty() {
            return Err(format!("group `{name}` is empty"));
        }
        let mut idx = Vec::new();
        for m in members {
            let k = m.as_u64().filter(|k| (1..=n as u64).contains(k)).ok_or_else(|| format!("`{m}` is not a tool number"))?;
            let i = (k - 1) as usize;
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("tool {k} is in more than one group"));
            }
            idx.push(i);
        }
        idx.sort_unstable();
        out.push((name.to_string(), idx));
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(format!("tool {} is in no group", missing + 1));
    }
    out.sort_by_key(|(_, idx)| idx[0]);
    Ok(out)
}

/// Identifier tokens of a tool name: split on non-alphanumerics and
/// lower-to-upper case changes, lowercased, with simple suffix stemming.
pub fn name_tokens(name: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in name.chars() {
        if !c.is_ascii_alphanumeric() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if c.is_ascii_uppercase() && prev_lower && !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
        cur.push(c.to_ascii_lowercase());
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.into_iter().map(|w| stem(&w)).collect()
}

fn stem(word: &str) -> String {
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(root) = word.strip_suffix(suffix) {
            // "class" must not become "clas".
            if root.len() >= 3 && !(suffix == "s" && root.ends_with('s')) {
                return root.to_string();
            }
        }
    }
    word.to_string()
}

/// Deterministic grouping used when the model's grouping is unusable: items
/// with the same multiset of name tokens share a group, labelled by its most
/// frequent token (ties broken alphabetically).
pub fn fallback_clusters(abstracted: &[AbstractedMcp]) -> Vec<McpCluster> {
    let mut groups: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
    for (i, a) in abstracted.iter().enumerate() {
        let mut tokens: Vec<String> = a.tools.iter().flat_map(|t| name_tokens(&t.name)).collect();
        tokens.sort();
        match groups.iter_mut().find(|(k, _)| *k == tokens) {
            Some((_, members)) => members.push(i),
            None => groups.push((tokens, vec![i])),
        }
    }
    groups
        .into_iter()
        .map(|(tokens, members)| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            // max_by_key keeps the last maximum; iterate in reverse so ties go to the alphabetically first.
            let label = counts
                .iter()
                .rev()
                .max_by_key(|(_, n)| **n)
                .map(|(t, _)| t.to_string())
                .unwrap_or_else(|| "tools".into());
            McpCluster { cluster_name: label, members: members.into_iter().map(|i| abstracted[i].clone()).collect() }
        })
        .collect()
}

/// Group abstracted tools by functionality. An unusable reply gets one repair
/// round; if that fails too, [`fallback_clusters`] decides.
pub fn cluster_mcps(abstracted: &[AbstractedMcp], ctx: &BuildContext) -> Result<Vec<McpCluster>, BoxError> {
    cluster_mcps_detailed(abstracted, ctx).map(|(c, _)| c)
}

pub fn cluster_mcps_detailed(
    abstracted: &[AbstractedMcp],
    ctx: &BuildContext,
) -> Result<(Vec<McpCluster>, ClusterMethod), BoxError> {
    if abstracted.is_empty() {
        return Ok((Vec::new(), ClusterMethod::None));
    }
    let n = abstracted.len();
    let prompt = prompts::render(
        prompts::CLUSTER,
        &[("count", &n.to_string()), ("items", &cluster_items(abstracted))],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    for method in [ClusterMethod::Model, ClusterMethod::Repaired] {
        let reply = ctx.ask(&messages)?;
        match parse_assignment(&reply, n) {
            Ok(groups) => {
                let clusters = groups
                    .into_iter()
                    .map(|(name, idx)| McpCluster {
                        cluster_name: name,
                        members: idx.into_iter().map(|i| abstracted[i].clone()).collect(),
                    })
                    .collect();
                return Ok((clusters, method));
            }
            Err(reason) => {
                tracing::warn!(%reason, "unusable clustering reply");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "The grouping was not usable: {reason}. Every tool number from 1 to {n} must appear in exactly one group. Reply with the json block only."
                )));
            }
        }
    }
    Ok((fallback_clusters(abstracted), ClusterMethod::Fallback))
}

fn consolidation_members(cluster: &McpCluster) -> String {
    cluster
        .members
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let sigs: Vec<String> = a.tools.iter().map(ToolSchema::signature).collect();
            format!(
                "## Member {}: {}\nTools: {}\n```python\n{}\n```",
                i + 1,
                a.summary,
                sigs.join("; "),
                a.script_text.trim_end()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Merge a cluster into one tool server. The result is revalidated and its
/// schemas are taken from the live server.
pub fn consolidate_cluster(cluster: &McpCluster, ctx: &BuildContext) -> Result<ConsolidatedMcp, BoxError> {
    let attempts = 1 + ctx.retry_budget;
    let prompt = prompts::render(
        prompts::CONSOLIDATE,
        &[("cluster_name", &cluster.cluster_name), ("members", &consolidation_members(cluster))],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut detail = String::new();
    for _ in 0..attempts {
        let reply = ctx.ask(&messages)?;
        let feedback = match reply_script(&reply) {
            None => "Your reply did not contain the merged script in a `python` block. Reply with the complete script.".to_string(),
            Some(script) => {
                let v = validate_script(&script, ctx.sandbox);
                if v.is_valid() {
                    return Ok(ConsolidatedMcp {
                        cluster_name: cluster.cluster_name.clone(),
                        script_text: script,
                        tool_schemas: v.tools,
                        member_digests: cluster.members.iter().map(|m| m.origin_digest.clone()).collect(),
                    });
                }
                format!("The merged script failed validation ({}). Fix it and reply with the complete script.", short_detail(&v))
            }
        };
        detail = feedback.clone();
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(feedback));
    }
    Err(BoxError::ConsolidationFailed { cluster_name: cluster.cluster_name.clone(), attempts, detail })
}

/// Lowercase, every run of non-alphanumerics becomes one `-`, no leading or
/// trailing `-`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let s = out.trim_matches('-').to_string();
    if s.is_empty() {
        "cluster".into()
    } else {
        s
    }
}

fn unique(base: &str, taken: &mut HashSet<String>) -> String {
    let mut name = base.to_string();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}-{k}");
        k += 1;
    }
    taken.insert(name.clone());
    name
}

/// Write each consolidated script under `tools/` and the manifest. Repeated
/// cluster names (and colliding slugs) get `-2`, `-3`, … in input order;
/// entries are ordered by cluster name.
pub fn assemble_box(consolidated: &[ConsolidatedMcp], provenance: Provenance, box_root: &Path) -> Result<McpBox, BoxError> {
    let tools_dir = box_root.join(TOOLS_DIR);
    std::fs::create_dir_all(&tools_dir).map_err(io_err(&tools_dir))?;
    let mut names = HashSet::new();
    let mut slugs = HashSet::new();
    let mut entries = Vec::new();
    for c in consolidated {
        let name = unique(c.cluster_name.trim(), &mut names);
        let file_stem = unique(&slug(&name), &mut slugs);
        let rel = format!("{TOOLS_DIR}/{file_stem}.tool");
        let path = box_root.join(&rel);
        let mut text = c.script_text.clone();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(io_err(&path))?;
        entries.push(BoxEntry { tool_script_path: rel, cluster_name: name, tool_schemas: c.tool_schemas.clone() });
    }
    entries.sort_by(|a, b| a.cluster_name.cmp(&b.cluster_name));
    let mcp_box = McpBox { schema_version: BOX_SCHEMA_VERSION.into(), entries, provenance };
    save_box(&mcp_box, box_root)?;
    Ok(mcp_box)
}

/// Write `box.json`. Tool files are the caller's responsibility.
pub fn save_box(mcp_box: &McpBox, box_root: &Path) -> Result<(), BoxError> {
    std::fs::create_dir_all(box_root).map_err(io_err(box_root))?;
    let path = box_root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(mcp_box).expect("manifests serialize") + "\n";
    std::fs::write(&path, text).map_err(io_err(&path))
}

fn is_confined(rel: &str) -> bool {
    let p = Path::new(rel);
    !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

/// Read and check `box.json`: supported version, unique cluster names, and
/// every tool file present inside the box.
pub fn load_box(box_root: &Path) -> Result<McpBox, BoxError> {
    let path = box_root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let parse = |reason: String| BoxError::Parse { path: path.display().to_string(), reason };
    let raw: Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    match raw.get("schema_version").and_then(Value::as_str) {
        Some(BOX_SCHEMA_VERSION) => {}
        Some(other) => return Err(BoxError::UnsupportedSchema { found: other.into() }),
        None => return Err(parse("missing schema_version".into())),
    }
    let mcp_box: McpBox = serde_json::from_value(raw).map_err(|e| parse(e.to_string()))?;
    let mut names = HashSet::new();
    for e in &mcp_box.entries {
        if !names.insert(e.cluster_name.as_str()) {
            return Err(parse(format!("duplicate cluster name `{}`", e.cluster_name)));
        }
        if !is_confined(&e.tool_script_path) {
            return Err(parse(format!("tool path `{}` escapes the box", e.tool_script_path)));
        }
        if !box_root.join(&e.tool_script_path).is_file() {
            return Err(BoxError::MissingTool { path: e.tool_script_path.clone() });
        }
    }
    Ok(mcp_box)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub source_task_id: String,
    pub step_index: u32,
    pub content_digest: String,
    pub outcome: crate::extraction::ValidationOutcome,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub successful_trajectories: usize,
    pub extracted: usize,
    pub kept: Vec<String>,
    pub rejected: Vec<RejectedCandidate>,
    pub duplicates: Vec<Duplicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub subject: String,
    pub attempts: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionSummary {
    pub origin_digest: String,
    pub summary: String,
    pub exposed_parameters: Vec<String>,
    pub over_parameter_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_name: String,
    pub member_digests: Vec<String>,
}

/// Everything a distillation run dropped or flagged. Contains no timings, so
/// replayed runs write identical reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillReport {
    pub source_log_digest: String,
    pub pipeline_config_digest: String,
    pub pool: PoolSummary,
    pub abstracted: Vec<AbstractionSummary>,
    pub abstraction_failures: Vec<StageFailure>,
    pub flagged_over_parameter_bound: usize,
    pub cluster_method: ClusterMethod,
    pub clusters: Vec<ClusterSummary>,
    pub consolidation_failures: Vec<StageFailure>,
    pub box_entries: usize,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub mcp_box: McpBox,
    pub report: DistillReport,
}

fn clear_outputs(out: &Path) -> Result<(), BoxError> {
    let tools = out.join(TOOLS_DIR);
    if tools.is_dir() {
        std::fs::remove_dir_all(&tools).map_err(io_err(&tools))?;
    }
    for f in [MANIFEST_FILE, REPORT_FILE] {
        let p = out.join(f);
        if p.exists() {
            std::fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

/// Pool → abstraction → clustering → consolidation → box at `out`. Items
/// that fail a stage are dropped and reported; only input, output and
/// transport errors abort the run.
pub fn run_distill(
    trajectories: &[Trajectory],
    dataset: &[TaskExample],
    config: &PipelineConfig,
    gateway: &Gateway,
    out: &Path,
    created_at: &str,
) -> Result<DistillOutcome, BoxError> {
    let sandbox = &config.sandbox;
    let pool = build_pool(trajectories, dataset, sandbox)?;
    let successful = crate::extraction::filter_successful(trajectories, dataset)?.len();
    let ctx = BuildContext {
        gateway,
        model_id: &config.builder_model_id,
        sandbox,
        retry_budget: config.retry_budget,
    };

    let mut abstracted = Vec::new();
    let mut abstraction_failures = Vec::new();
    for r in map_bounded(&pool.candidates, sandbox.max_parallel, |c| abstract_mcp(c, &ctx)) {
        match r {
            Ok(a) => abstracted.push(a),
            Err(BoxError::AbstractionFailed { digest, attempts, detail }) => {
                tracing::warn!(%digest, "abstraction failed");
                abstraction_failures.push(StageFailure { subject: digest, attempts, detail });
            }
            Err(e) => return Err(e),
        }
    }

    let (clusters, cluster_method) = cluster_mcps_detailed(&abstracted, &ctx)?;

    let mut consolidated = Vec::new();
    let mut consolidation_failures = Vec::new();
    for r in map_bounded(&clusters, sandbox.max_parallel, |c| consolidate_cluster(c, &ctx)) {
        match r {
            Ok(c) => consolidated.push(c),
            Err(BoxError::ConsolidationFailed { cluster_name, attempts, detail }) => {
                tracing::warn!(cluster = %cluster_name, "consolidation failed");
                consolidation_failures.push(StageFailure { subject: cluster_name, attempts, detail });
            }
            Err(e) => return Err(e),
        }
    }

    let provenance = Provenance {
        source_log_digest: pool.source_log_digest.clone(),
        created_at: created_at.to_string(),
        pipeline_config_digest: config.pipeline_config_digest(),
    };
    clear_outputs(out)?;
    let mcp_box = assemble_box(&consolidated, provenance, out)?;

    let report = DistillReport {
        source_log_digest: pool.source_log_digest.clone(),
        pipeline_config_digest: mcp_box.provenance.pipeline_config_digest.clone(),
        pool: PoolSummary {
            successful_trajectories: successful,
            extracted: pool.accounted(),
            kept: pool.candidates.iter().map(|c| c.content_digest.clone()).collect(),
            rejected: pool
                .rejected
                .iter()
                .map(|r| RejectedCandidate {
                    source_task_id: r.source_task_id.clone(),
                    step_index: r.step_index,
                    content_digest: r.report.candidate_digest.clone(),
                    outcome: r.report.outcome,
                    detail: r.report.detail.clone(),
                })
                .collect(),
            duplicates: pool.duplicates.clone(),
        },
        flagged_over_parameter_bound: abstracted.iter().filter(|a| a.over_parameter_bound).count(),
        abstracted: abstracted
            .iter()
            .map(|a| AbstractionSummary {
                origin_digest: a.origin_digest.clone(),
                summary: a.summary.clone(),
                exposed_parameters: a.exposed_parameters.iter().map(|p| p.name.clone()).collect(),
                over_parameter_bound: a.over_parameter_bound,
            })
            .collect(),
        abstraction_failures,
        cluster_method,
        clusters: clusters
            .iter()
            .map(|c| ClusterSummary {
                cluster_name: c.cluster_name.clone(),
                member_digests: c.members.iter().map(|m| m.origin_digest.clone()).collect(),
            })
            .collect(),
        consolidation_failures,
        box_entries: mcp_box.entries.len(),
    };
    let report_path = out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
    std::fs::write(&report_path, text).map_err(io_err(&report_path))?;
    Ok(DistillOutcome { mcp_box, report })
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot_dir(root: &Path) -> std::io::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

/// Tools offered by a box, grouped by cluster name.
pub fn box_tool_index(mcp_box: &McpBox) -> HashMap<&str, Vec<&str>> {
    mcp_box
        .entries
        .iter()
        .map(|e| (e.cluster_name.as_str(), e.tool_schemas.iter().map(|t| t.name.as_str()).collect()))
        .collect()
}
