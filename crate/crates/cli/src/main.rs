//! `mcpbox`: teach, distill, inspect, serve, eval and report.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage, config or missing
//! input. Data goes to stdout or `--out`; diagnostics go to stderr.

mod serve;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use mcpbox::agents::run_teacher_batch;
use mcpbox::boxer::{load_box, run_distill};
use mcpbox::config::PipelineConfig;
use mcpbox::eval::{emit_report, infer_kind, load_dataset, run_benchmark, BenchmarkSpec, Metrics};
use mcpbox::gateway::{Gateway, Mode};
use mcpbox::{parse_trajectory_log, write_trajectory_log};

#[derive(Parser)]
#[command(name = "mcpbox", version, about = "Distill teacher tool scripts into a box of MCP servers for a student agent")]
struct Cli {
    /// Pipeline config (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Serve model calls from this cache only; never touch the network.
    #[arg(long, global = true, value_name = "CACHE", conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Call the endpoint and append every new response to this cache.
    #[arg(long, global = true, value_name = "CACHE")]
    record: Option<PathBuf>,
    /// Chat endpoint base URL for live or record mode.
    #[arg(long, global = true, value_name = "URL")]
    endpoint: Option<String>,
    /// Seed for evaluation sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Pin the box provenance timestamp (RFC 3339) for reproducible output.
    #[arg(long, global = true, value_name = "RFC3339")]
    timestamp: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the teacher over a dataset and write its trajectories.
    Teach {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<output_root>/traj.jsonl`.
        #[arg(long, value_name = "TRAJ_JSONL")]
        out: Option<PathBuf>,
    },
    /// Build a box from teacher trajectories.
    Distill {
        #[arg(long, value_name = "TRAJ_JSONL")]
        traj: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<output_root>/box`.
        #[arg(long, value_name = "BOX_DIR")]
        out: Option<PathBuf>,
    },
    /// Print a box manifest, its tool schemas and provenance.
    Inspect {
        #[arg(long = "box", value_name = "BOX_DIR")]
        box_root: PathBuf,
    },
    /// Expose every tool of a box as one MCP server on stdio.
    Serve {
        #[arg(long = "box", value_name = "BOX_DIR")]
        box_root: PathBuf,
    },
    /// Run the student over a dataset, with or without a box.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "box", value_name = "BOX_DIR")]
        box_root: Option<PathBuf>,
        /// Metrics JSON, default `<output_root>/metrics.json`; episodes go
        /// next to it as `<stem>.episodes.jsonl`.
        #[arg(long, value_name = "METRICS_JSON")]
        out: Option<PathBuf>,
        /// Sample this many tasks (seeded by --seed).
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: u32,
        /// Stop after this many episodes in total.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare two metrics files as one before/after row.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value = "student")]
        label: String,
        /// Also write the row as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Usage-class failures exit 2; everything else exits 1.
enum Failure {
    Usage(anyhow::Error),
    Pipeline(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn pipeline(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Pipeline(e.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} not found: {}", path.display())))
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MCPBOX_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Config file plus flag overrides, checked for the subcommands that talk to
/// a model.
fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let config = load_config_unchecked(cli)?;
    config.transport.check().map_err(usage)?;
    Ok(config)
}

fn load_config_unchecked(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(usage)?,
        None => PipelineConfig::default(),
    };
    if let Some(cache) = &cli.replay {
        config.transport.mode = Mode::ReplayStrict;
        config.transport.cache_path = Some(cache.clone());
    }
    if let Some(cache) = &cli.record {
        config.transport.mode = Mode::Record;
        config.transport.cache_path = Some(cache.clone());
    }
    if let Some(endpoint) = &cli.endpoint {
        config.transport.endpoint = Some(endpoint.clone());
    }
    config.check().map_err(|e| usage(anyhow!(e)))?;
    Ok(config)
}

fn gateway(config: &PipelineConfig) -> Result<Gateway, Failure> {
    if config.transport.mode == Mode::ReplayStrict {
        if let Some(cache) = &config.transport.cache_path {
            require_file(cache, "replay cache")?;
        }
    }
    Gateway::new(&config.transport).map_err(usage)
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Teach { dataset, out } => teach(&cli, dataset, out.as_deref()),
        Command::Distill { traj, dataset, out } => distill(&cli, traj, dataset, out.as_deref()),
        Command::Inspect { box_root } => inspect(box_root),
        Command::Serve { box_root } => {
            let config = load_config_unchecked(&cli)?;
            let mcp_box = load_box(box_root).map_err(usage)?;
            serve::serve(&mcp_box, box_root, &config.sandbox).map_err(pipeline)
        }
        Command::Eval { dataset, box_root, out, sample, repeats, episodes } => {
            let mut spec = BenchmarkSpec::new(dataset, mcpbox::agents::AgentConfig::student(""));
            spec.box_root = box_root.clone();
            spec.sample_size = *sample;
            spec.repeats = *repeats;
            spec.max_episodes = *episodes;
            spec.seed = cli.seed;
            eval(&cli, spec, out.as_deref())
        }
        Command::Report { before, after, label, out } => report(before, after, label, out.as_deref()),
    }
}

fn load_tasks(dataset: &Path) -> Result<Vec<mcpbox::TaskExample>, Failure> {
    require_file(dataset, "dataset")?;
    let kind = infer_kind(dataset).map_err(usage)?;
    load_dataset(dataset, kind).map_err(usage)
}

fn out_or(out: Option<&Path>, config: &PipelineConfig, default: &str) -> PathBuf {
    out.map_or_else(|| config.output_root.join(default), Path::to_path_buf)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(pipeline)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(pipeline)
}

fn teach(cli: &Cli, dataset: &Path, out: Option<&Path>) -> Outcome {
    let config = load_config(cli)?;
    let out = &out_or(out, &config, "traj.jsonl");
    let tasks = load_tasks(dataset)?;
    let gateway = gateway(&config)?;
    let results = run_teacher_batch(
        &tasks,
        &config.teacher,
        &gateway,
        &config.sandbox,
        config.search_provider.as_deref(),
    )
    .map_err(pipeline)?;
    let trajectories: Vec<_> = results.iter().map(|r| r.trajectory.clone()).collect();
    let mut sink = create(out)?;
    write_trajectory_log(&trajectories, &mut sink)
        .and_then(|_| sink.flush())
        .with_context(|| format!("writing {}", out.display()))
        .map_err(pipeline)?;
    let correct = results.iter().filter(|r| r.correct).count();
    println!("{} trajectories written to {} ({correct} correct)", results.len(), out.display());
    Ok(())
}

fn distill(cli: &Cli, traj: &Path, dataset: &Path, out: Option<&Path>) -> Outcome {
    let config = load_config(cli)?;
    let out = &out_or(out, &config, "box");
    require_file(traj, "trajectory log")?;
    let tasks = load_tasks(dataset)?;
    let file = File::open(traj).with_context(|| format!("opening {}", traj.display())).map_err(usage)?;
    let trajectories = parse_trajectory_log(BufReader::new(file))
        .with_context(|| format!("reading {}", traj.display()))
        .map_err(usage)?;
    let created_at = match &cli.timestamp {
        Some(t) => chrono::DateTime::parse_from_rfc3339(t)
            .map(|_| t.clone())
            .map_err(|e| usage(anyhow!("--timestamp {t:?} is not RFC 3339: {e}")))?,
        None => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let gateway = gateway(&config)?;
    let outcome = run_distill(&trajectories, &tasks, &config, &gateway, out, &created_at).map_err(pipeline)?;
    let r = &outcome.report;
    println!(
        "box written to {}: {} entries from {} clusters ({} kept, {} rejected, {} duplicate candidates)",
        out.display(),
        r.box_entries,
        r.clusters.len(),
        r.pool.kept.len(),
        r.pool.rejected.len(),
        r.pool.duplicates.len()
    );
    Ok(())
}

fn inspect(box_root: &Path) -> Outcome {
    let mcp_box = load_box(box_root).map_err(usage)?;
    let p = &mcp_box.provenance;
    let mut out = String::new();
    out += &format!("schema_version: {}\n", mcp_box.schema_version);
    out += &format!("created_at: {}\n", p.created_at);
    out += &format!("source_log_digest: {}\n", p.source_log_digest);
    out += &format!("pipeline_config_digest: {}\n", p.pipeline_config_digest);
    out += &format!("entries: {}\n", mcp_box.entries.len());
    for e in &mcp_box.entries {
        out += &format!("\n[{}] {}\n", e.cluster_name, e.tool_script_path);
        for t in &e.tool_schemas {
            out += &format!("  {}\n", t.signature());
            if !t.description.is_empty() {
                out += &format!("    {}\n", t.description);
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn eval(cli: &Cli, mut spec: BenchmarkSpec, out: Option<&Path>) -> Outcome {
    let config = load_config(cli)?;
    let out = &out_or(out, &config, "metrics.json");
    require_file(&spec.dataset_path, "dataset")?;
    if let Some(root) = &spec.box_root {
        load_box(root).map_err(usage)?;
    }
    spec.agent = config.student.clone();
    spec.max_parallel = config.sandbox.max_parallel;
    let gateway = gateway(&config)?;
    let run = run_benchmark(&spec, &gateway, &config.sandbox).map_err(pipeline)?;

    let mut sink = create(out)?;
    let text = serde_json::to_string_pretty(&run.metrics).expect("metrics serialize") + "\n";
    sink.write_all(text.as_bytes()).and_then(|_| sink.flush()).map_err(pipeline)?;
    let episodes_path = episodes_path(out);
    let mut sink = create(&episodes_path)?;
    for e in &run.episodes {
        let line = serde_json::to_string(e).expect("episodes serialize");
        writeln!(sink, "{line}").map_err(pipeline)?;
    }
    sink.flush().map_err(pipeline)?;
    let m = &run.metrics;
    println!(
        "accuracy {:.1}±{:.1}, tool calling {:.1}% over {} episodes",
        m.accuracy_pct, m.accuracy_std, m.calling_rate_pct, m.n_episodes
    );
    Ok(())
}

fn episodes_path(metrics_out: &Path) -> PathBuf {
    let stem = metrics_out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    metrics_out.with_file_name(format!("{stem}.episodes.jsonl"))
}

fn read_metrics(path: &Path) -> Result<Metrics, Failure> {
    require_file(path, "metrics file")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn report(before: &Path, after: &Path, label: &str, out: Option<&Path>) -> Outcome {
    let report = emit_report(&read_metrics(before)?, &read_metrics(after)?, label);
    if let Some(path) = out {
        let mut sink = create(path)?;
        sink.write_all(report.json().as_bytes()).and_then(|_| sink.flush()).map_err(pipeline)?;
    }
    print!("{}", report.text);
    Ok(())
}
