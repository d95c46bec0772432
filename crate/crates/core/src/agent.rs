//! The per-agent refinement loop and the fleet runner. The memory store is
//! the only state agents share; the control log carries supervisor commands.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architect::{select_base, Architect, ArchitectError};
use crate::control::ControlLog;
use crate::domain::{keyed_rng, validate_template, Document, EvalStatus, PromptTemplate, ScoreDraft};
use crate::llm::{ChatBackend, HttpBackend, HttpConfig};
use crate::memory::{MemoryError, MemoryStore};
use crate::oracle::{CtrDataset, Oracle, OracleConfig, OracleError, TrainConfig};
use crate::sentinel::{ExtractionCache, Sentinel, RAW_USER_PROMPT_TEMPLATE};
use crate::simharness::{gen_world, read_corpus, read_spec, World, WorldError};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub agent_id: String,
    pub seed_prompt: PromptTemplate,
    pub sentinel_temperature: f64,
    pub architect_temperature: f64,
    pub epsilon: f64,
    pub max_generations: u32,
    pub wall_clock_budget: Duration,
    pub dedup: bool,
    /// Externally togglable; OR-ed with the control log's pause state.
    pub paused: Arc<AtomicBool>,
    pub parallelism: usize,
    pub poll_interval: Duration,
    pub rng_seed: u64,
}

impl AgentConfig {
    pub fn new(agent_id: impl Into<String>) -> Self {
        let agent_id = agent_id.into();
        Self {
            seed_prompt: validate_template(RAW_USER_PROMPT_TEMPLATE)
                .expect("seed template is valid")
                .with_agent(agent_id.clone()),
            agent_id,
            sentinel_temperature: 0.2,
            architect_temperature: 1.0,
            epsilon: 0.2,
            max_generations: 30,
            wall_clock_budget: Duration::from_secs(3600),
            dedup: true,
            paused: Arc::new(AtomicBool::new(false)),
            parallelism: 8,
            poll_interval: Duration::from_millis(200),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [
            ("sentinel_temperature", self.sentinel_temperature),
            ("architect_temperature", self.architect_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return Err(format!("{name} must be in [0, 2]"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err("epsilon must be in [0, 1]".into());
        }
        if self.max_generations == 0 || self.wall_clock_budget.is_zero() {
            return Err("budgets must be positive".into());
        }
        if self.parallelism == 0 {
            return Err("parallelism must be >= 1".into());
        }
        if self.agent_id.is_empty() || self.agent_id.contains(|c: char| c.is_whitespace() || c == '/') {
            return Err(format!("bad agent id {:?}", self.agent_id));
        }
        Ok(())
    }
}

/// Everything an agent works against besides its config.
#[derive(Clone)]
pub struct AgentResources {
    pub memory: Arc<MemoryStore>,
    pub control: Option<Arc<ControlLog>>,
    pub sentinel: Sentinel,
    pub architect: Architect,
    pub corpus: Arc<Vec<Document>>,
    pub oracle: Arc<Oracle>,
}

/// Runs extraction and scoring for one template. Failures become statuses.
pub fn evaluate_prompt(
    template: &PromptTemplate,
    agent_id: &str,
    corpus: &[Document],
    oracle: &Oracle,
    sentinel: &Sentinel,
    parallelism: usize,
) -> ScoreDraft {
    let column = match sentinel.extract_corpus(template, corpus, parallelism) {
        Ok(c) => c,
        Err(e) => {
            warn!("{agent_id}: extraction failed for {}: {e}", &template.id[..12]);
            return ScoreDraft::failed(template, agent_id, EvalStatus::ExtractionFailed);
        }
    };
    match oracle.relative_score(Some(&column)) {
        Ok(r) => ScoreDraft::ok(
            template,
            agent_id,
            r.baseline_rig,
            r.extended_rig,
            r.eval_size as u64,
            oracle.config().repeats,
        ),
        Err(e) => {
            warn!("{agent_id}: evaluation failed for {}: {e}", &template.id[..12]);
            ScoreDraft::failed(template, agent_id, EvalStatus::EvalFailed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxGenerations,
    Budget,
    StorageError,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: String,
    pub generations: u32,
    pub evaluations: u32,
    pub skipped_duplicates: u32,
    pub refinement_failures: u32,
    pub best_score: Option<f64>,
    pub stop: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AgentSummary {
    fn new(agent_id: &str) -> Self {
        Self {
            agent_id: agent_id.to_string(),
            generations: 0,
            evaluations: 0,
            skipped_duplicates: 0,
            refinement_failures: 0,
            best_score: None,
            stop: StopReason::MaxGenerations,
            error: None,
        }
    }

    fn saw(&mut self, draft: &ScoreDraft) {
        self.evaluations += 1;
        if draft.status == EvalStatus::Ok {
            self.best_score = Some(self.best_score.map_or(draft.relative_score, |b| b.max(draft.relative_score)));
        }
    }

    fn abort(mut self, e: impl fmt::Display) -> Self {
        self.stop = StopReason::StorageError;
        self.error = Some(e.to_string());
        self
    }
}

struct Knobs {
    paused: bool,
    temperature: f64,
    epsilon: f64,
}

fn knobs(config: &AgentConfig, control: Option<&ControlLog>) -> Knobs {
    let mut k = Knobs {
        paused: config.paused.load(Ordering::SeqCst),
        temperature: config.architect_temperature,
        epsilon: config.epsilon,
    };
    if let Some(c) = control {
        match c.state() {
            Ok(state) => {
                let a = state.agent(&config.agent_id);
                k.paused |= a.paused;
                k.temperature = a.temperature.unwrap_or(k.temperature);
                k.epsilon = a.epsilon.unwrap_or(k.epsilon);
            }
            Err(e) => warn!("{}: control log unreadable: {e}", config.agent_id),
        }
    }
    k
}

fn next_seed(control: Option<&ControlLog>, consumed: &mut usize, agent_id: &str) -> Option<PromptTemplate> {
    let seeds = control?.state().ok()?.seeds;
    let seed = seeds.get(*consumed)?;
    *consumed += 1;
    validate_template(&seed.user_template).ok().map(|t| t.with_agent(agent_id))
}

/// The closed loop for one agent. Generation 0 scores the seed prompt when
/// memory lacks it; each later generation refines (or takes a supervisor
/// seed), skips known prompts when dedup is on, and appends the result.
pub fn run_agent(config: &AgentConfig, res: &AgentResources) -> AgentSummary {
    let id = config.agent_id.as_str();
    let started = Instant::now();
    let over_budget = || started.elapsed() >= config.wall_clock_budget;
    let mut summary = AgentSummary::new(id);
    let control = res.control.as_deref();
    if let Some(c) = control {
        if let Err(e) = c.register(id) {
            warn!("{id}: could not register with control log: {e}");
        }
    }
    let sentinel = res.sentinel.clone().with_temperature(config.sentinel_temperature);
    let mut rng = keyed_rng(config.rng_seed, &["agent", id]);
    // Templates this agent has produced, for generation bookkeeping.
    let mut lineage: HashMap<String, PromptTemplate> = HashMap::new();
    lineage.insert(config.seed_prompt.id.clone(), config.seed_prompt.clone());
    let mut consumed_seeds = 0usize;

    let append = |draft: ScoreDraft, summary: &mut AgentSummary| -> Result<u64, MemoryError> {
        summary.saw(&draft);
        res.memory.append(draft)
    };

    match res.memory.contains(&config.seed_prompt.id) {
        Ok(true) => {}
        Ok(false) => {
            let draft = evaluate_prompt(&config.seed_prompt, id, &res.corpus, &res.oracle, &sentinel, config.parallelism);
            if let Err(e) = append(draft, &mut summary) {
                return summary.abort(e);
            }
        }
        Err(e) => return summary.abort(e),
    }

    while summary.generations < config.max_generations {
        if over_budget() {
            summary.stop = StopReason::Budget;
            return summary;
        }
        let mut k = knobs(config, control);
        while k.paused {
            if over_budget() {
                summary.stop = StopReason::Budget;
                return summary;
            }
            std::thread::sleep(config.poll_interval);
            k = knobs(config, control);
        }
        summary.generations += 1;

        let candidate = match next_seed(control, &mut consumed_seeds, id) {
            Some(seed) => seed,
            None => {
                let base_text = match select_base(&res.memory, &mut rng, k.epsilon, &config.seed_prompt.user_template) {
                    Ok(t) => t,
                    Err(e) => return summary.abort(e),
                };
                let base = match validate_template(&base_text) {
                    Ok(t) => lineage.get(&t.id).cloned().unwrap_or_else(|| t.with_agent(id)),
                    Err(e) => {
                        warn!("{id}: memory holds an invalid template: {e}");
                        summary.refinement_failures += 1;
                        continue;
                    }
                };
                match res.architect.refine(&base, &res.memory, k.temperature) {
                    Ok(t) => t.with_agent(id),
                    Err(ArchitectError::Storage(e)) => return summary.abort(e),
                    Err(e) => {
                        warn!("{id}: refinement failed: {e}");
                        summary.refinement_failures += 1;
                        continue;
                    }
                }
            }
        };

        if config.dedup {
            match res.memory.contains(&candidate.id) {
                Ok(true) => {
                    summary.skipped_duplicates += 1;
                    continue;
                }
                Ok(false) => {}
                Err(e) => return summary.abort(e),
            }
        }
        let draft = evaluate_prompt(&candidate, id, &res.corpus, &res.oracle, &sentinel, config.parallelism);
        match append(draft, &mut summary) {
            Ok(seq) => info!(
                "{id}: generation {} (lineage depth {}) recorded as seq {seq}",
                summary.generations, candidate.generation
            ),
            Err(e) => return summary.abort(e),
        }
        lineage.entry(candidate.id.clone()).or_insert(candidate);
    }
    summary
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleetSummary {
    pub agents: Vec<AgentSummary>,
    pub records: u64,
    pub best_score: Option<f64>,
}

/// Runs every agent on its own thread. A panicking agent is reported as
/// crashed; the others finish.
pub fn run_agents(agents: Vec<(AgentConfig, AgentResources)>) -> Vec<AgentSummary> {
    std::thread::scope(|s| {
        let handles: Vec<_> = agents
            .iter()
            .map(|(cfg, res)| (cfg.agent_id.clone(), s.spawn(move || run_agent(cfg, res))))
            .collect();
        handles
            .into_iter()
            .map(|(id, h)| {
                h.join().unwrap_or_else(|panic| {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into());
                    AgentSummary {
                        stop: StopReason::Crashed,
                        error: Some(msg),
                        ..AgentSummary::new(&id)
                    }
                })
            })
            .collect()
    })
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("fleet config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("fleet config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Sim,
    Http,
}

/// Settings one agent may override with `agent.<id>.<key>=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub epsilon: f64,
    pub sentinel_temperature: f64,
    pub architect_temperature: f64,
    pub max_generations: u32,
    pub budget_secs: u64,
    pub dedup: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetConfig {
    pub n_agents: usize,
    pub memory: PathBuf,
    pub control: PathBuf,
    pub corpus: PathBuf,
    pub dataset: PathBuf,
    pub cache_dir: PathBuf,
    pub backend: BackendKind,
    /// World spec for the simulated backends.
    pub world: Option<PathBuf>,
    pub seed_prompt: String,
    pub seed: u64,
    pub parallelism: usize,
    pub eval_fraction: f64,
    pub repeats: u32,
    pub defaults: AgentSettings,
    pub overrides: HashMap<String, Vec<(String, String)>>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

fn set_agent_key(s: &mut AgentSettings, key: &str, value: &str) -> Result<(), String> {
    match key {
        "epsilon" => s.epsilon = parse_value(key, value)?,
        "sentinel_temperature" => s.sentinel_temperature = parse_value(key, value)?,
        "architect_temperature" => s.architect_temperature = parse_value(key, value)?,
        "max_generations" => s.max_generations = parse_value(key, value)?,
        "budget_secs" => s.budget_secs = parse_value(key, value)?,
        "dedup" => s.dedup = parse_value(key, value)?,
        _ => return Err(format!("unknown key {key}")),
    }
    Ok(())
}

impl FleetConfig {
    pub fn agent_ids(&self) -> Vec<String> {
        (1..=self.n_agents).map(|i| format!("a{i}")).collect()
    }

    /// Parses `key=value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, FleetError> {
        let mut kv: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(FleetError::Config {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            kv.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base_dir.join(p) }
        };
        let mut defaults = AgentSettings {
            epsilon: 0.2,
            sentinel_temperature: 0.2,
            architect_temperature: 1.0,
            max_generations: 30,
            budget_secs: 3600,
            dedup: true,
        };
        let mut n_agents = None;
        let (mut memory, mut control, mut corpus, mut dataset, mut cache_dir, mut world) =
            (None, None, None, None, None, None);
        let mut backend = BackendKind::Sim;
        let mut seed_prompt = RAW_USER_PROMPT_TEMPLATE.to_string();
        let (mut seed, mut parallelism, mut eval_fraction, mut repeats) = (0u64, 8usize, 0.2f64, 3u32);
        let mut overrides: HashMap<String, Vec<(String, String)>> = HashMap::new();
        for (line, k, v) in kv {
            let err = |message: String| FleetError::Config { line, message };
            match k.as_str() {
                "n_agents" => n_agents = Some(parse_value::<usize>(&k, &v).map_err(err)?),
                "memory" => memory = Some(path(&v)),
                "control" => control = Some(path(&v)),
                "corpus" => corpus = Some(path(&v)),
                "dataset" => dataset = Some(path(&v)),
                "cache_dir" => cache_dir = Some(path(&v)),
                "world" => world = Some(path(&v)),
                "backend" => {
                    backend = match v.as_str() {
                        "sim" => BackendKind::Sim,
                        "http" => BackendKind::Http,
                        other => return Err(err(format!("unknown backend {other}"))),
                    }
                }
                "seed_prompt" => seed_prompt = v,
                "seed_prompt_file" => seed_prompt = std::fs::read_to_string(path(&v))?.trim_end().to_string(),
                "seed" => seed = parse_value(&k, &v).map_err(err)?,
                "parallelism" => parallelism = parse_value(&k, &v).map_err(err)?,
                "eval_fraction" => eval_fraction = parse_value(&k, &v).map_err(err)?,
                "repeats" => repeats = parse_value(&k, &v).map_err(err)?,
                other => match other.strip_prefix("agent.").and_then(|r| r.split_once('.')) {
                    Some((agent, key)) => {
                        let mut probe = defaults.clone();
                        set_agent_key(&mut probe, key, &v).map_err(err)?;
                        overrides.entry(agent.to_string()).or_default().push((key.to_string(), v));
                    }
                    None => set_agent_key(&mut defaults, other, &v).map_err(err)?,
                },
            }
        }
        let missing = |name: &str| FleetError::Invalid(format!("missing {name}"));
        let memory = memory.ok_or_else(|| missing("memory"))?;
        let config = Self {
            n_agents: n_agents.ok_or_else(|| missing("n_agents"))?,
            control: control.unwrap_or_else(|| {
                let mut p = memory.as_os_str().to_owned();
                p.push(".control");
                PathBuf::from(p)
            }),
            cache_dir: cache_dir.unwrap_or_else(|| memory.parent().unwrap_or(Path::new(".")).join("cache")),
            memory,
            corpus: corpus.ok_or_else(|| missing("corpus"))?,
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            backend,
            world,
            seed_prompt,
            seed,
            parallelism,
            eval_fraction,
            repeats,
            defaults,
            overrides,
        };
        config.check()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FleetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check(&self) -> Result<(), FleetError> {
        let invalid = |m: String| Err(FleetError::Invalid(m));
        if self.n_agents == 0 {
            return invalid("n_agents must be >= 1".into());
        }
        if self.backend == BackendKind::Sim && self.world.is_none() {
            return invalid("backend=sim needs world=<world.json>".into());
        }
        if let Err(e) = validate_template(&self.seed_prompt) {
            return invalid(format!("seed prompt: {e}"));
        }
        let ids = self.agent_ids();
        if let Some(unknown) = self.overrides.keys().find(|a| !ids.contains(a)) {
            return invalid(format!("override for unknown agent {unknown}"));
        }
        for id in &ids {
            self.agent_config(id).validate().map_err(FleetError::Invalid)?;
        }
        Ok(())
    }

    pub fn agent_settings(&self, agent_id: &str) -> AgentSettings {
        let mut s = self.defaults.clone();
        for (k, v) in self.overrides.get(agent_id).into_iter().flatten() {
            set_agent_key(&mut s, k, v).expect("checked at parse time");
        }
        s
    }

    pub fn agent_config(&self, agent_id: &str) -> AgentConfig {
        let s = self.agent_settings(agent_id);
        let mut c = AgentConfig::new(agent_id);
        c.seed_prompt = validate_template(&self.seed_prompt)
            .map(|t| t.with_agent(agent_id))
            .unwrap_or(c.seed_prompt);
        c.sentinel_temperature = s.sentinel_temperature;
        c.architect_temperature = s.architect_temperature;
        c.epsilon = s.epsilon;
        c.max_generations = s.max_generations;
        c.wall_clock_budget = Duration::from_secs(s.budget_secs);
        c.dedup = s.dedup;
        c.parallelism = self.parallelism;
        c.rng_seed = self.seed;
        c
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            train: TrainConfig {
                seed: self.seed,
                ..TrainConfig::default()
            },
            eval_fraction: self.eval_fraction,
            repeats: self.repeats,
        }
    }
}

/// Loaded, process-wide inputs shared by all in-process agents.
pub struct FleetInputs {
    pub memory: Arc<MemoryStore>,
    pub control: Arc<ControlLog>,
    pub corpus: Arc<Vec<Document>>,
    pub oracle: Arc<Oracle>,
    world: Option<Arc<World>>,
}

impl FleetInputs {
    pub fn load(config: &FleetConfig) -> Result<Self, FleetError> {
        let corpus = read_corpus(&config.corpus)?;
        let dataset = CtrDataset::read_tsv(&config.dataset)?;
        let world = match (&config.world, config.backend) {
            (Some(path), BackendKind::Sim) => Some(Arc::new(gen_world(&read_spec(path)?)?)),
            _ => None,
        };
        Ok(Self {
            memory: Arc::new(MemoryStore::open(&config.memory)?),
            control: Arc::new(ControlLog::open(&config.control)?),
            corpus: Arc::new(corpus),
            oracle: Arc::new(Oracle::new(&dataset, config.oracle_config())?),
            world,
        })
    }

    /// Backends, private cache and sentinel/architect for one agent.
    pub fn resources(&self, config: &FleetConfig, agent_id: &str) -> Result<AgentResources, FleetError> {
        let (sentinel_backend, architect_backend): (Arc<dyn ChatBackend>, Arc<dyn ChatBackend>) =
            match config.backend {
                BackendKind::Sim => {
                    let world = self.world.as_ref().expect("sim fleet has a world");
                    let agent_seed = keyed_seed(config.seed, agent_id);
                    (
                        Arc::new(world.sentinel_backend()),
                        Arc::new(world.architect_backend_with_seed(agent_seed)),
                    )
                }
                BackendKind::Http => {
                    let s = HttpConfig::sentinel_from_env().map_err(FleetError::Invalid)?;
                    let a = HttpConfig::architect_from_env().map_err(FleetError::Invalid)?;
                    (Arc::new(HttpBackend::new(s)), Arc::new(HttpBackend::new(a)))
                }
            };
        let cache = ExtractionCache::open(config.cache_dir.join(format!("{agent_id}.cache")))?;
        let mut sentinel = Sentinel::new(sentinel_backend, Arc::new(cache));
        let mut architect = Architect::new(architect_backend);
        if config.backend == BackendKind::Http {
            sentinel.model = std::env::var("FL_SENTINEL_MODEL").unwrap_or_default();
            architect.model = std::env::var("FL_ARCHITECT_MODEL").unwrap_or_default();
        }
        Ok(AgentResources {
            memory: Arc::clone(&self.memory),
            control: Some(Arc::clone(&self.control)),
            sentinel,
            architect,
            corpus: Arc::clone(&self.corpus),
            oracle: Arc::clone(&self.oracle),
        })
    }
}

fn keyed_seed(seed: u64, agent_id: &str) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, &["architect-seed", agent_id]).next_u64()
}

pub fn summarize(memory: &MemoryStore, agents: Vec<AgentSummary>) -> Result<FleetSummary, MemoryError> {
    Ok(FleetSummary {
        agents,
        records: memory.len()?,
        best_score: memory.best_score()?,
    })
}

/// In-process fleet: one thread per agent over shared inputs.
pub fn run_fleet(config: &FleetConfig) -> Result<FleetSummary, FleetError> {
    let inputs = FleetInputs::load(config)?;
    let mut agents = Vec::new();
    for id in config.agent_ids() {
        agents.push((config.agent_config(&id), inputs.resources(config, &id)?));
    }
    let summaries = run_agents(agents);
    Ok(summarize(&inputs.memory, summaries)?)
}

/// Runs a single fleet member; the entry point for process-per-agent mode.
pub fn run_fleet_member(config: &FleetConfig, agent_id: &str) -> Result<AgentSummary, FleetError> {
    if !config.agent_ids().iter().any(|a| a == agent_id) {
        return Err(FleetError::Invalid(format!("{agent_id} is not a member of this fleet")));
    }
    let inputs = FleetInputs::load(config)?;
    let res = inputs.resources(config, agent_id)?;
    Ok(run_agent(&config.agent_config(agent_id), &res))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fleet_config_parsing() {
        let text = "# fleet\nn_agents=2\nmemory=run/memory.log\ncorpus=w/corpus.jsonl\ndataset=w/dataset.tsv\n\
                    world=w/world.json\nepsilon=0.3 # more exploration\nagent.a2.architect_temperature=1.5\n";
        let c = FleetConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.n_agents, 2);
        assert_eq!(c.memory, PathBuf::from("/base/run/memory.log"));
        assert_eq!(c.control, PathBuf::from("/base/run/memory.log.control"));
        assert_eq!(c.cache_dir, PathBuf::from("/base/run/cache"));
        assert_eq!(c.agent_config("a1").epsilon, 0.3);
        assert_eq!(c.agent_config("a1").architect_temperature, 1.0);
        assert_eq!(c.agent_config("a2").architect_temperature, 1.5);
        assert_eq!(c.agent_ids(), vec!["a1", "a2"]);
    }

    #[test]
    fn fleet_config_errors() {
        let base = "n_agents=1\nmemory=m\ncorpus=c\ndataset=d\nworld=w\n";
        let p = |extra: &str| FleetConfig::parse(&format!("{base}{extra}"), Path::new("/"));
        assert!(p("").is_ok());
        assert!(matches!(p("bogus=1\n"), Err(FleetError::Config { line: 6, .. })));
        assert!(matches!(p("epsilon=lots\n"), Err(FleetError::Config { .. })));
        assert!(matches!(p("agent.a1.colour=red\n"), Err(FleetError::Config { .. })));
        assert!(matches!(p("agent.a5.epsilon=0.1\n"), Err(FleetError::Invalid(_))));
        assert!(matches!(p("epsilon=1.5\n"), Err(FleetError::Invalid(_))));
        assert!(matches!(p("seed_prompt=no placeholder\n"), Err(FleetError::Invalid(_))));
        assert!(matches!(p("just words\n"), Err(FleetError::Config { .. })));
        assert!(FleetConfig::parse("memory=m\ncorpus=c\ndataset=d\nworld=w\n", Path::new("/")).is_err());
    }
}
