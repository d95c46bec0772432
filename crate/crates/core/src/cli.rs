//! Command-line front end. Exit codes: 0 success, 1 operational failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::agent::{run_fleet, run_fleet_member, summarize, AgentSummary, FleetConfig, StopReason};
use crate::analysis::{project_records, write_embedding_tsv, write_projection_tsv};
use crate::domain::{validate_template, ScoreRecord};
use crate::llm::{ChatBackend, HttpBackend, HttpConfig};
use crate::memory::MemoryStore;
use crate::oracle::{read_column_tsv, CtrDataset, Oracle, OracleConfig, TrainConfig};
use crate::sentinel::{ExtractionCache, Sentinel};
use crate::server::{ServeConfig, DEFAULT_BIND, DEFAULT_LONG_POLL};
use crate::simharness::{gen_world, read_corpus, read_spec, WorldSpec};

#[derive(Debug, Parser)]
#[command(name = "featureloop", version, about = "Multi-agent prompt refinement for multi-value CTR features")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run an agent fleet from a config file.
    Run(RunArgs),
    /// Run one fleet member (used by `run --spawn-processes`).
    #[command(hide = true)]
    Agent(AgentArgs),
    /// Score one prompt or one precomputed feature column.
    Eval(EvalArgs),
    /// Inspect or export the memory log.
    Memory(MemoryArgs),
    /// Generate a synthetic world.
    Simulate(SimulateArgs),
    /// Serve telemetry and control endpoints.
    Serve(ServeArgs),
    /// Write prompt embeddings and their 2-D projection.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run each agent as a child process instead of a thread.
    #[arg(long)]
    pub spawn_processes: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub agent_id: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// File holding the user template.
    #[arg(long, conflicts_with = "column")]
    pub prompt: Option<PathBuf>,
    /// Precomputed column (`doc_id<TAB>tags`) instead of a prompt.
    #[arg(long)]
    pub column: Option<PathBuf>,
    /// World spec; selects the simulated sentinel. Without it the HTTP
    /// backend is configured from the environment.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Extraction cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub repeats: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub parallelism: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[command(subcommand)]
    pub action: MemoryAction,
}

#[derive(Debug, Subcommand)]
pub enum MemoryAction {
    /// Highest-scoring ok records.
    Top(RankArgs),
    /// Lowest-scoring ok records.
    Bottom(RankArgs),
    /// Every record, as TSV or (with --json) one JSON object per line.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this world spec instead of the defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub impressions: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub memory: PathBuf,
    /// Control log; defaults to `<memory>.control`.
    #[arg(long)]
    pub control: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_BIND)]
    pub bind: SocketAddr,
    /// Directory of dashboard assets served under `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LONG_POLL.as_secs())]
    pub long_poll_secs: u64,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&std::env::var("RUST_LOG").unwrap_or(cli.log_level.clone()))
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(a) => run(a),
        Cmd::Agent(a) => agent(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Memory(m) => memory(m.action),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Project(a) => project(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fmt_score(s: Option<f64>) -> String {
    s.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

fn run(a: RunArgs) -> Result<()> {
    let config = FleetConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let summary = if a.spawn_processes {
        let exe = std::env::current_exe().context("locating own executable")?;
        let children: Vec<_> = config
            .agent_ids()
            .into_iter()
            .map(|id| {
                let child = Process::new(&exe)
                    .arg("agent")
                    .arg("--config")
                    .arg(&a.config)
                    .arg("--agent-id")
                    .arg(&id)
                    .stdout(Stdio::piped())
                    .spawn()
                    .with_context(|| format!("spawning agent {id}"));
                (id, child)
            })
            .collect();
        let mut summaries = Vec::new();
        for (id, child) in children {
            let outcome = child.and_then(|c| c.wait_with_output().context("waiting for agent"));
            let parsed = outcome.ok().filter(|o| o.status.success()).and_then(|o| {
                serde_json::from_slice::<AgentSummary>(&o.stdout).ok()
            });
            summaries.push(parsed.unwrap_or_else(|| crashed(&id)));
        }
        summarize(&MemoryStore::open(&config.memory)?, summaries)?
    } else {
        run_fleet(&config)?
    };
    if a.json {
        return print_json(&summary);
    }
    println!("agent\tgenerations\tevaluations\tskipped\tbest\tstop");
    for s in &summary.agents {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:?}",
            s.agent_id,
            s.generations,
            s.evaluations,
            s.skipped_duplicates,
            fmt_score(s.best_score),
            s.stop
        );
    }
    println!("records: {}  best: {}", summary.records, fmt_score(summary.best_score));
    if summary.agents.iter().all(|s| s.stop == StopReason::Crashed || s.stop == StopReason::StorageError) {
        bail!("every agent failed");
    }
    Ok(())
}

fn crashed(id: &str) -> AgentSummary {
    AgentSummary {
        agent_id: id.to_string(),
        generations: 0,
        evaluations: 0,
        skipped_duplicates: 0,
        refinement_failures: 0,
        best_score: None,
        stop: StopReason::Crashed,
        error: Some("agent process failed".into()),
    }
}

fn agent(a: AgentArgs) -> Result<()> {
    let config = FleetConfig::load(&a.config)?;
    let summary = run_fleet_member(&config, &a.agent_id)?;
    print_json(&summary)?;
    if summary.stop == StopReason::StorageError {
        bail!("{}: {}", summary.agent_id, summary.error.unwrap_or_default());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.eval_fraction > 0.0 && a.eval_fraction < 1.0) {
        bail!("--eval-fraction must be in (0, 1)");
    }
    let dataset = CtrDataset::read_tsv(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let config = OracleConfig {
        train: TrainConfig {
            seed: a.seed,
            ..TrainConfig::default()
        },
        eval_fraction: a.eval_fraction,
        repeats: a.repeats,
    };
    let oracle = Oracle::new(&dataset, config)?;
    let column = match (&a.prompt, &a.column) {
        (None, Some(path)) => read_column_tsv(path, "column")?,
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            let template = validate_template(text.trim_end()).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            let corpus_path = a.corpus.as_ref().ok_or_else(|| anyhow!("--prompt needs --corpus"))?;
            let corpus = read_corpus(corpus_path)?;
            let backend: Arc<dyn ChatBackend> = match &a.world {
                Some(w) => Arc::new(Arc::new(gen_world(&read_spec(w)?)?).sentinel_backend()),
                None => Arc::new(HttpBackend::new(HttpConfig::sentinel_from_env().map_err(|e| anyhow!(e))?)),
            };
            let cache = match &a.cache {
                Some(p) => ExtractionCache::open(p)?,
                None => ExtractionCache::in_memory(),
            };
            let mut sentinel = Sentinel::new(backend, Arc::new(cache));
            if a.world.is_none() {
                sentinel.model = std::env::var("FL_SENTINEL_MODEL").unwrap_or_default();
            }
            sentinel.extract_corpus(&template, &corpus, a.parallelism)?
        }
        _ => bail!("exactly one of --prompt or --column is required"),
    };
    let result = oracle.relative_score(Some(&column))?;
    if a.json {
        return print_json(&result);
    }
    println!("baseline_rig\t{:.6}", result.baseline_rig);
    println!("extended_rig\t{:.6}", result.extended_rig);
    println!("relative_score\t{:.6}", result.relative_score);
    println!("eval_size\t{}", result.eval_size);
    println!("coverage\t{:.3}", column.coverage);
    Ok(())
}

fn one_line(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn record_row(r: &ScoreRecord) -> String {
    format!(
        "{}\t{:.6}\t{}\t{}\t{}",
        r.seq,
        r.relative_score,
        r.agent_id,
        r.status.as_str(),
        one_line(&r.prompt_text)
    )
}

fn memory(action: MemoryAction) -> Result<()> {
    match action {
        MemoryAction::Top(a) | MemoryAction::Bottom(a) if !a.memory.exists() => {
            bail!("{} does not exist", a.memory.display())
        }
        MemoryAction::Top(a) => ranked(&a, true),
        MemoryAction::Bottom(a) => ranked(&a, false),
        MemoryAction::Export(a) => {
            if !a.memory.exists() {
                bail!("{} does not exist", a.memory.display());
            }
            let records = MemoryStore::open(&a.memory)?.records()?;
            let mut out = String::new();
            if a.json {
                for r in &records {
                    out.push_str(&serde_json::to_string(r)?);
                    out.push('\n');
                }
            } else {
                out.push_str("seq\tprompt_id\tagent_id\tbaseline_rig\textended_rig\trelative_score\teval_size\trepeats\tstatus\tcreated_at\tprompt_text\n");
                for r in &records {
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        r.seq,
                        r.prompt_id,
                        r.agent_id,
                        r.baseline_rig,
                        r.extended_rig,
                        r.relative_score,
                        r.eval_size,
                        r.repeats,
                        r.status.as_str(),
                        r.created_at.to_rfc3339(),
                        one_line(&r.prompt_text)
                    );
                }
            }
            match &a.out {
                Some(p) => std::fs::write(p, out)?,
                None => std::io::stdout().write_all(out.as_bytes())?,
            }
            Ok(())
        }
    }
}

fn ranked(a: &RankArgs, top: bool) -> Result<()> {
    let store = MemoryStore::open(&a.memory)?;
    let records = if top { store.top_k(a.k)? } else { store.bottom_k(a.k)? };
    if a.json {
        return print_json(&records);
    }
    for r in &records {
        println!("{}", record_row(r));
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => WorldSpec::with_seed(a.seed.unwrap_or(0)),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.docs {
        spec.n_docs = n;
    }
    if let Some(n) = a.impressions {
        spec.n_impressions = n;
    }
    if let Some(n) = a.topics {
        spec.n_topics = n;
        let keep: Vec<&str> = spec.topics().to_vec();
        spec.topic_lift.retain(|t, _| keep.contains(&t.as_str()));
    }
    let world = gen_world(&spec)?;
    world.write_dir(&a.out)?;
    println!(
        "wrote {} documents and {} impressions to {}",
        world.corpus.len(),
        world.dataset.len(),
        a.out.display()
    );
    Ok(())
}

fn default_control(memory: &Path) -> PathBuf {
    let mut p = memory.as_os_str().to_owned();
    p.push(".control");
    PathBuf::from(p)
}

fn serve(a: ServeArgs) -> Result<()> {
    let control = a.control.unwrap_or_else(|| default_control(&a.memory));
    crate::server::serve(ServeConfig {
        memory: a.memory,
        control,
        bind: a.bind,
        static_dir: a.static_dir,
        long_poll: Duration::from_secs(a.long_poll_secs),
    })?;
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    if !a.memory.exists() {
        bail!("{} does not exist", a.memory.display());
    }
    let records = MemoryStore::open(&a.memory)?.records()?;
    std::fs::create_dir_all(&a.out_dir)?;
    let n = write_embedding_tsv(a.out_dir.join("embeddings.tsv"), &records)?;
    let points = project_records(&records);
    write_projection_tsv(a.out_dir.join("projection.tsv"), &points)?;
    if a.json {
        return print_json(&points);
    }
    println!("projected {n} prompts into {}", a.out_dir.display());
    Ok(())
}
