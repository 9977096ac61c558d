use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{run_student_episode, AgentConfig, AgentError, EpisodeResult};
use crate::boxer::{load_box, BoxError};
use crate::eval::dataset::{infer_kind, load_dataset, DatasetError};
use crate::gateway::Gateway;
use crate::model::{McpBox, TaskExample, TaskKind};
use crate::parallel::map_bounded;
use crate::sandbox::SandboxConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no episode results to aggregate")]
    EmptyResults,
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("benchmark specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Percentage of correct episodes.
pub fn compute_accuracy(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    percentage(results, |r| r.correct)
}

/// Percentage of episodes with at least one tool call.
pub fn compute_calling_rate(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    percentage(results, |r| !r.tool_calls.is_empty())
}

fn percentage(results: &[EpisodeResult], pred: impl Fn(&EpisodeResult) -> bool) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let hits = results.iter().filter(|r| pred(r)).count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub runs: u32,
    pub correct_runs: u32,
    pub tool_calling_runs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_pct: f64,
    /// Population standard deviation of the per-repeat accuracies.
    pub accuracy_std: f64,
    pub calling_rate_pct: f64,
    pub n_episodes: usize,
    #[serde(default)]
    pub per_task: Vec<TaskSummary>,
}

/// One episode together with the pass it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatEpisode {
    pub repeat: u32,
    #[serde(flatten)]
    pub result: EpisodeResult,
}

/// Aggregate episodes from one or more passes. The fold is over episodes
/// sorted by (task id, repeat), so input order never matters.
pub fn aggregate(episodes: &[RepeatEpisode]) -> Result<Metrics, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let mut sorted: Vec<&RepeatEpisode> = episodes.iter().collect();
    sorted.sort_by(|a, b| (&a.result.task_id, a.repeat).cmp(&(&b.result.task_id, b.repeat)));

    let mut by_repeat: BTreeMap<u32, Vec<EpisodeResult>> = BTreeMap::new();
    let mut by_task: BTreeMap<&str, TaskSummary> = BTreeMap::new();
    for e in &sorted {
        by_repeat.entry(e.repeat).or_default().push(e.result.clone());
        let s = by_task.entry(&e.result.task_id).or_insert_with(|| TaskSummary {
            task_id: e.result.task_id.clone(),
            runs: 0,
            correct_runs: 0,
            tool_calling_runs: 0,
        });
        s.runs += 1;
        s.correct_runs += e.result.correct as u32;
        s.tool_calling_runs += !e.result.tool_calls.is_empty() as u32;
    }
    let per_repeat: Vec<f64> = by_repeat
        .values()
        .map(|rs| compute_accuracy(rs))
        .collect::<Result<_, _>>()?;
    let (mean, std) = mean_and_population_std(&per_repeat);
    let all: Vec<EpisodeResult> = sorted.iter().map(|e| e.result.clone()).collect();
    Ok(Metrics {
        accuracy_pct: mean,
        accuracy_std: std,
        calling_rate_pct: compute_calling_rate(&all)?,
        n_episodes: all.len(),
        per_task: by_task.into_values().collect(),
    })
}

pub fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    // Identical samples must give exactly zero.
    let std = if xs.iter().all(|x| *x == xs[0]) { 0.0 } else { var.sqrt() };
    (mean, std)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sort key of dataset position `index` under `seed`. Depends only on the
/// pair, so a task's rank is the same on every platform.
pub fn sample_key(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The `sample_size` tasks with the smallest keys, returned in dataset
/// order. `None` keeps the whole dataset.
pub fn sample_tasks(tasks: &[TaskExample], sample_size: Option<usize>, seed: u64) -> Result<Vec<TaskExample>, String> {
    let Some(n) = sample_size else {
        return Ok(tasks.to_vec());
    };
    if n > tasks.len() {
        return Err(format!("sample size {n} exceeds dataset size {}", tasks.len()));
    }
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| (sample_key(seed, i as u64), i));
    let mut chosen: Vec<usize> = order.into_iter().take(n).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| tasks[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub dataset_path: PathBuf,
    /// Inferred from the file when unset.
    pub kind: Option<TaskKind>,
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub repeats: u32,
    pub agent: AgentConfig,
    pub box_root: Option<PathBuf>,
    pub max_parallel: usize,
    /// Stop after this many episodes in total (cheap smoke runs).
    pub max_episodes: Option<usize>,
}

impl BenchmarkSpec {
    pub fn new(dataset_path: impl Into<PathBuf>, agent: AgentConfig) -> Self {
        Self {
            dataset_path: dataset_path.into(),
            kind: None,
            sample_size: None,
            seed: 0,
            repeats: 3,
            agent,
            box_root: None,
            max_parallel: 4,
            max_episodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub metrics: Metrics,
    /// Sorted by (task id, repeat).
    pub episodes: Vec<RepeatEpisode>,
}

/// Sample, run `repeats` passes of student episodes with the box (if any)
/// mounted, and aggregate.
pub fn run_benchmark(spec: &BenchmarkSpec, gateway: &Gateway, sandbox: &SandboxConfig) -> Result<BenchmarkRun, BenchmarkError> {
    if spec.repeats == 0 {
        return Err(BenchmarkError::Spec("repeats must be at least 1".into()));
    }
    let kind = match spec.kind {
        Some(k) => k,
        None => infer_kind(&spec.dataset_path)?,
    };
    let tasks = load_dataset(&spec.dataset_path, kind)?;
    let tasks = sample_tasks(&tasks, spec.sample_size, spec.seed).map_err(BenchmarkError::Spec)?;
    let (mcp_box, root) = match &spec.box_root {
        Some(root) => (load_box(root)?, root.clone()),
        None => (McpBox::empty(), PathBuf::new()),
    };
    let mut jobs: Vec<(u32, &TaskExample)> = (0..spec.repeats)
        .flat_map(|r| tasks.iter().map(move |t| (r, t)))
        .collect();
    if let Some(cap) = spec.max_episodes {
        jobs.truncate(cap);
    }
    if jobs.is_empty() {
        return Err(MetricsError::EmptyResults.into());
    }
    let results = map_bounded(&jobs, spec.max_parallel, |(repeat, task)| {
        run_student_episode(task, &mcp_box, &root, &spec.agent, gateway, sandbox)
            .map(|result| RepeatEpisode { repeat: *repeat, result })
    });
    let mut episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    episodes.sort_by(|a, b| (&a.result.task_id, a.repeat).cmp(&(&b.result.task_id, b.repeat)));
    let metrics = aggregate(&episodes)?;
    Ok(BenchmarkRun { metrics, episodes })
}
