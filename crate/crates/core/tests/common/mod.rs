#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use featureloop::agent::AgentResources;
use featureloop::architect::Architect;
use featureloop::control::ControlLog;
use featureloop::domain::{validate_template, ScoreDraft};
use featureloop::llm::ChatBackend;
use featureloop::memory::MemoryStore;
use featureloop::oracle::{Oracle, OracleConfig};
use featureloop::sentinel::{ExtractionCache, Sentinel};
use featureloop::simharness::{gen_world, World, WorldSpec};

pub fn small_world(seed: u64) -> Arc<World> {
    let spec = WorldSpec {
        n_docs: 200,
        n_impressions: 6000,
        ..WorldSpec::with_seed(seed)
    };
    Arc::new(gen_world(&spec).expect("world"))
}

pub fn resources(world: &Arc<World>, dir: &Path, architect: Arc<dyn ChatBackend>) -> AgentResources {
    let oracle = Oracle::new(&world.dataset, OracleConfig::default()).expect("oracle");
    AgentResources {
        memory: Arc::new(MemoryStore::open(dir.join("memory.log")).expect("memory")),
        control: Some(Arc::new(ControlLog::open(dir.join("control.log")).expect("control"))),
        sentinel: Sentinel::new(Arc::new(world.sentinel_backend()), Arc::new(ExtractionCache::in_memory())),
        architect: Architect::new(architect),
        corpus: Arc::new(world.corpus.clone()),
        oracle: Arc::new(oracle),
    }
}

pub fn ok_draft(text: &str, agent: &str, score: f64) -> ScoreDraft {
    let t = validate_template(&format!("{text} {{raw_text}}")).expect("template");
    ScoreDraft::ok(&t, agent, 0.1, 0.1 + score, 100, 3)
}
