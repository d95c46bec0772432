//! Deterministic synthetic world with a known fitness landscape: a corpus
//! whose documents carry hidden topics, CTR labels driven by those topics,
//! and simulated extraction/refinement behaviors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use std::sync::{Arc, LazyLock};

use rand::seq::IndexedRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architect::{BEST_HEADER, EMPTY_CONTEXT, WORST_HEADER};
use crate::domain::{content_hash, keyed_rng, Document, TagList, PLACEHOLDER};
use crate::llm::{Behavior, ChatRequest, LlmError, SimulatedBackend};
use crate::oracle::{write_column_tsv, CtrDataset, Impression, OracleError};
use crate::sentinel::FeatureColumn;

pub const TOPICS: [&str; 16] = [
    "sports", "finance", "politics", "travel", "cooking", "science", "music", "health",
    "fashion", "gaming", "movies", "weather", "gardening", "aviation", "theater", "robotics",
];

/// Disjoint from topics, keywords and filler.
pub const NOISE_TAGS: [&str; 20] = [
    "misc", "general", "news", "update", "bulletin", "digest", "brief", "summary", "entry",
    "post", "note", "item", "piece", "feature", "column", "segment", "dispatch", "snippet",
    "roundup", "recap",
];

const FILLER: [&str; 24] = [
    "the", "a", "city", "people", "said", "on", "today", "new", "local", "year", "week",
    "after", "before", "while", "with", "more", "some", "many", "from", "into", "officials",
    "residents", "plans", "morning",
];

pub const DEFAULT_KEYWORDS: [&str; 6] =
    ["topic", "entity", "audience", "intent", "sentiment", "lowercase"];

const DEVICES: [&str; 3] = ["mobile", "desktop", "tablet"];
const N_PUBLISHERS: usize = 25;

pub const BASE_FIELDS: [&str; 3] = ["device", "hour", "publisher"];

/// Fidelity loses this much per 100 words over [`LENGTH_THRESHOLD`].
pub const LENGTH_PENALTY: f64 = 0.05;
pub const LENGTH_THRESHOLD: usize = 200;
pub const ADD_KEYWORD_PROBABILITY: f64 = 0.7;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_topics: usize,
    pub n_docs: usize,
    pub n_impressions: usize,
    pub base_ctr: f64,
    pub topic_lift: BTreeMap<String, f64>,
    pub keyword_set: Vec<String>,
}

impl WorldSpec {
    /// Default world for `seed`: 12 topics with lifts spread over [-1.5, 1.5].
    pub fn with_seed(seed: u64) -> Self {
        let n_topics = 12;
        let topic_lift = TOPICS[..n_topics]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let x = -1.5 + 3.0 * i as f64 / (n_topics - 1) as f64;
                (t.to_string(), x)
            })
            .collect();
        Self {
            seed,
            n_topics,
            n_docs: 1500,
            n_impressions: 50_000,
            base_ctr: 0.1,
            topic_lift,
            keyword_set: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidSpec(m.into()));
        if self.n_topics == 0 || self.n_topics > TOPICS.len() {
            return bad("n_topics must be in 1..=16");
        }
        if self.n_docs == 0 || self.n_impressions < 2 {
            return bad("n_docs must be >= 1 and n_impressions >= 2");
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return bad("base_ctr must be in (0,1)");
        }
        if self.keyword_set.is_empty() {
            return bad("keyword_set is empty");
        }
        if self.keyword_set.iter().any(|k| k.trim().is_empty()) {
            return bad("blank keyword");
        }
        if let Some(t) = self.topic_lift.keys().find(|t| !self.topics().contains(&t.as_str())) {
            return Err(WorldError::InvalidSpec(format!("lift for unknown topic {t}")));
        }
        if self.topic_lift.values().any(|v| !v.is_finite()) {
            return bad("non-finite lift");
        }
        Ok(())
    }

    pub fn topics(&self) -> &'static [&'static str] {
        &TOPICS[..self.n_topics.min(TOPICS.len())]
    }

    fn lift(&self, topic: &str) -> f64 {
        self.topic_lift.get(topic).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub corpus: Vec<Document>,
    pub dataset: CtrDataset,
    /// Document id to its true topic tags.
    pub truth: BTreeMap<String, TagList>,
    /// Story number to corpus index.
    stories: HashMap<usize, usize>,
}

fn story_marker(n: usize) -> String {
    format!("[story {n}]")
}

static STORY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[story (\d+)\]").expect("story regex"));

fn doc_text(rng: &mut impl Rng, n: usize, topics: &[&str]) -> String {
    let mut words: Vec<&str> = (0..30).map(|_| *FILLER.choose(rng).expect("filler")).collect();
    for t in topics {
        for _ in 0..2 {
            let at = rng.random_range(0..=words.len());
            words.insert(at, t);
        }
    }
    format!("{} {}.", story_marker(n), words.join(" "))
}

pub fn gen_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let topics = spec.topics();
    let mut rng = keyed_rng(spec.seed, &["world", "docs"]);
    let mut corpus = Vec::with_capacity(spec.n_docs);
    let mut truth = BTreeMap::new();
    let mut doc_logit = Vec::with_capacity(spec.n_docs);
    let mut publishers = Vec::with_capacity(spec.n_docs);
    let mut stories = HashMap::new();
    for n in 0..spec.n_docs {
        let primary = *topics.choose(&mut rng).expect("topics");
        let mut doc_topics = vec![primary];
        if topics.len() > 1 && rng.random_bool(0.5) {
            let second = *topics.iter().filter(|t| **t != primary).collect::<Vec<_>>().choose(&mut rng).expect("topics");
            doc_topics.push(second);
        }
        let mut meta = BTreeMap::new();
        let publisher = format!("pub{:02}", rng.random_range(0..N_PUBLISHERS));
        meta.insert("publisher".to_string(), publisher.clone());
        let mut doc = Document::new(doc_text(&mut rng, n, &doc_topics)).expect("non-empty");
        doc.meta = Some(meta);
        truth.insert(
            doc.id.clone(),
            TagList::new(doc_topics.iter().map(|t| t.to_string()).collect()).expect("topic tags are clean"),
        );
        doc_logit.push(doc_topics.iter().map(|t| spec.lift(t)).sum::<f64>());
        publishers.push(publisher);
        stories.insert(n, corpus.len());
        corpus.push(doc);
    }

    let mut rng = keyed_rng(spec.seed, &["world", "impressions"]);
    let base = (spec.base_ctr / (1.0 - spec.base_ctr)).ln();
    let device_lift = [0.0, -0.2, 0.1];
    let mut impressions = Vec::with_capacity(spec.n_impressions);
    for t in 0..spec.n_impressions {
        let d = rng.random_range(0..spec.n_docs);
        let dev = rng.random_range(0..DEVICES.len());
        let hour: u32 = rng.random_range(0..24);
        let hour_lift = if (18..23).contains(&hour) { 0.15 } else { 0.0 };
        let z = base + doc_logit[d] + device_lift[dev] + hour_lift;
        let p = 1.0 / (1.0 + (-z).exp());
        let label = u8::from(rng.random_bool(p));
        let context = BTreeMap::from([
            ("device".to_string(), DEVICES[dev].to_string()),
            ("hour".to_string(), hour.to_string()),
            ("publisher".to_string(), publishers[d].clone()),
        ]);
        impressions.push(Impression {
            document_id: corpus[d].id.clone(),
            time_index: t as u64,
            context,
            label,
        });
    }
    let dataset = CtrDataset::new(impressions, BASE_FIELDS.iter().map(|s| s.to_string()).collect())?;
    Ok(World {
        spec: spec.clone(),
        corpus,
        dataset,
        truth,
        stories,
    })
}

impl World {
    pub fn truth_column(&self) -> FeatureColumn {
        FeatureColumn::from_values("truth", self.truth.clone())
    }

    /// Each document gets 1-3 tags drawn uniformly from a small vocabulary,
    /// independent of its content.
    pub fn random_column(&self, seed: u64) -> FeatureColumn {
        const VOCAB: [&str; 8] = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
        let values = self
            .corpus
            .iter()
            .map(|d| {
                let mut rng = keyed_rng(seed, &["random-column", &d.id]);
                let k = rng.random_range(1..=3);
                let tags = VOCAB.choose_multiple(&mut rng, k).map(|s| s.to_string()).collect();
                (d.id.clone(), TagList::new(tags).expect("vocab tags are clean"))
            })
            .collect();
        FeatureColumn::from_values("random", values)
    }

    /// The publisher of each document as a single tag; duplicates a base field.
    pub fn publisher_column(&self) -> FeatureColumn {
        let values = self
            .corpus
            .iter()
            .map(|d| {
                let p = d.meta.as_ref().and_then(|m| m.get("publisher")).expect("publisher meta");
                (d.id.clone(), TagList::new(vec![p.clone()]).expect("clean"))
            })
            .collect();
        FeatureColumn::from_values("publisher", values)
    }

    fn story(&self, text: &str) -> Option<&Document> {
        let n: usize = STORY.captures(text)?[1].parse().ok()?;
        self.stories.get(&n).map(|&i| &self.corpus[i])
    }

    pub fn sentinel_backend(self: &Arc<Self>) -> SimulatedBackend {
        SimulatedBackend::new(self.spec.seed, Arc::new(SimSentinel(Arc::clone(self))))
    }

    pub fn architect_backend(self: &Arc<Self>) -> SimulatedBackend {
        self.architect_backend_with_seed(self.spec.seed)
    }

    /// Architect whose mutations are drawn from `seed` instead of the world
    /// seed, so fleet members explore differently.
    pub fn architect_backend_with_seed(self: &Arc<Self>, seed: u64) -> SimulatedBackend {
        SimulatedBackend::new(seed, Arc::new(SimArchitect(Arc::clone(self))))
    }

    /// Writes `world.json`, `corpus.jsonl`, `dataset.tsv` and `truth.tsv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), WorldError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("world.json"), serde_json::to_string_pretty(&self.spec)? + "\n")?;
        write_corpus(dir.join("corpus.jsonl"), &self.corpus)?;
        self.dataset.write_tsv(dir.join("dataset.tsv"), None)?;
        write_column_tsv(dir.join("truth.tsv"), &self.truth_column())?;
        Ok(())
    }
}

pub fn read_spec(path: impl AsRef<Path>) -> Result<WorldSpec, WorldError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One JSON document per line.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Document]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for doc in corpus {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_corpus(path: impl AsRef<Path>) -> io::Result<Vec<Document>> {
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let doc: Document = serde_json::from_str(line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("corpus line {}: {e}", i + 1)))?;
        if doc.raw_text.is_empty() || doc.id != content_hash(&doc.raw_text) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("corpus line {}: id does not match text", i + 1),
            ));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Fraction of distinct keywords present (case-insensitive) minus the
/// length penalty, clamped to [0, 1].
pub fn fidelity(template_text: &str, keywords: &[String]) -> f64 {
    let lower = template_text.to_lowercase();
    let mut distinct: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    distinct.sort();
    distinct.dedup();
    let present = distinct.iter().filter(|k| lower.contains(k.as_str())).count();
    let words = template_text.split_whitespace().count();
    let penalty = LENGTH_PENALTY * words.saturating_sub(LENGTH_THRESHOLD) as f64 / 100.0;
    (present as f64 / distinct.len() as f64 - penalty).clamp(0.0, 1.0)
}

struct SimSentinel(Arc<World>);

impl Behavior for SimSentinel {
    fn respond(&self, seed: u64, request: &ChatRequest) -> Result<String, LlmError> {
        let world = &self.0;
        let Some(doc) = world.story(&request.user) else {
            return Ok("unspecified".into());
        };
        let template = request.user.replacen(&doc.raw_text, "", 1);
        let f = fidelity(&template, &world.spec.keyword_set);
        let mut rng = keyed_rng(seed, &["sentinel", &content_hash(&template), &doc.id]);
        let mut out: Vec<&str> = Vec::new();
        for tag in world.truth[&doc.id].tags() {
            if rng.random_bool(f) {
                out.push(tag);
            } else {
                out.push(NOISE_TAGS.choose(&mut rng).expect("noise"));
            }
        }
        if out.is_empty() {
            return Ok("unspecified".into());
        }
        Ok(out.join(", "))
    }
}

/// Splits after `.`, `!` or `?` followed by whitespace.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|n| n.is_whitespace()) {
            out.push(current.trim().to_string());
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

/// The best prompt and the base prompt named in an instruction.
pub fn parse_instruction(instruction: &str) -> (Option<String>, Option<String>) {
    let base = instruction
        .rsplit_once("\n---\nOriginal USER prompt: ")
        .map(|(_, rest)| rest.strip_suffix("\n---").unwrap_or(rest).to_string());
    let best = instruction
        .split_once(&format!("{BEST_HEADER}\n"))
        .and_then(|(_, rest)| rest.split(&format!("\n{WORST_HEADER}")).next())
        .and_then(|section| section.split("\n---\n").next())
        .and_then(|entry| entry.split_once("] "))
        .map(|(_, text)| text.to_string());
    debug_assert!(best.is_some() || instruction.contains(EMPTY_CONTEXT) || base.is_none());
    (best, base)
}

/// One mutation step of the simulated architect.
pub fn mutate(prompt: &str, keywords: &[String], rng: &mut impl Rng) -> String {
    let lower = prompt.to_lowercase();
    let missing: Vec<&String> = keywords.iter().filter(|k| !lower.contains(&k.to_lowercase())).collect();
    let mut parts = sentences(prompt);
    if !missing.is_empty() && rng.random_bool(ADD_KEYWORD_PROBABILITY) {
        let kw = missing.choose(rng).expect("non-empty");
        let at = parts.iter().position(|s| s.contains(PLACEHOLDER)).unwrap_or(parts.len());
        parts.insert(at, format!("Prioritize {kw} tags."));
        return parts.join(" ");
    }
    let prunable: Vec<usize> = parts
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let l = s.to_lowercase();
            !s.contains(PLACEHOLDER) && !keywords.iter().any(|k| l.contains(&k.to_lowercase()))
        })
        .map(|(i, _)| i)
        .collect();
    if let Some(&i) = prunable.choose(rng) {
        parts.remove(i);
    }
    parts.join(" ")
}

struct SimArchitect(Arc<World>);

impl Behavior for SimArchitect {
    fn respond(&self, seed: u64, request: &ChatRequest) -> Result<String, LlmError> {
        let (best, base) = parse_instruction(&request.user);
        let Some(target) = best.or(base) else {
            return Err(LlmError::MalformedResponse("instruction has no prompt".into()));
        };
        let mut rng = keyed_rng(seed, &["architect", &content_hash(&request.user)]);
        let out = mutate(&target, &self.0.spec.keyword_set, &mut rng);
        if rng.random_bool(0.3) {
            Ok(format!("Here is the prompt:\n```\n{out}\n```"))
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentinel::RAW_USER_PROMPT_TEMPLATE;

    fn small() -> WorldSpec {
        WorldSpec {
            n_docs: 50,
            n_impressions: 2000,
            ..WorldSpec::with_seed(3)
        }
    }

    fn kws() -> Vec<String> {
        DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn deterministic() {
        let a = gen_world(&small()).unwrap();
        let b = gen_world(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let c = gen_world(&WorldSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn seed_prompt_has_no_keywords() {
        assert_eq!(fidelity(RAW_USER_PROMPT_TEMPLATE, &kws()), 0.0);
    }

    #[test]
    fn fidelity_bounds_and_penalty() {
        let all = "topic entity audience intent sentiment lowercase {raw_text}";
        assert_eq!(fidelity(all, &kws()), 1.0);
        let long = format!("{all} {}", "word ".repeat(300));
        let words = long.split_whitespace().count();
        let expected = 1.0 - 0.05 * (words - 200) as f64 / 100.0;
        assert!((fidelity(&long, &kws()) - expected).abs() < 1e-12);
        assert_eq!(fidelity(&"x ".repeat(5000), &kws()), 0.0);
    }

    #[test]
    fn sentinel_ceiling_and_floor() {
        let world = Arc::new(gen_world(&small()).unwrap());
        let backend = world.sentinel_backend();
        let doc = &world.corpus[7];
        let ask = |t: &str| {
            let user = t.replace(PLACEHOLDER, &doc.raw_text);
            crate::llm::ChatBackend::complete(&backend, &ChatRequest {
                system: "s".into(),
                user,
                temperature: 0.0,
                max_output_tokens: 64,
                model: String::new(),
            })
            .unwrap()
            .text
        };
        let perfect = ask("topic entity audience intent sentiment lowercase: {raw_text}");
        assert_eq!(perfect, world.truth[&doc.id].tags().join(", "));
        let floor = ask("Tags please: {raw_text}");
        for tag in floor.split(", ") {
            assert!(NOISE_TAGS.contains(&tag), "{tag}");
        }
        assert_eq!(floor, ask("Tags please: {raw_text}"));
    }

    #[test]
    fn mutation_adds_missing_keyword_or_prunes() {
        let kw = kws();
        let base = "Be brief. Use the topic and entity. Here it is: {raw_text}";
        let mut added = 0;
        for s in 0..200u64 {
            let mut rng = keyed_rng(s, &["t"]);
            let out = mutate(base, &kw, &mut rng);
            assert_eq!(out.matches(PLACEHOLDER).count(), 1);
            let before = fidelity(base, &kw);
            let after = fidelity(&out, &kw);
            if after > before {
                added += 1;
                assert!((after - before - 1.0 / 6.0).abs() < 1e-12);
            } else {
                assert_eq!(out, "Use the topic and entity. Here it is: {raw_text}");
            }
        }
        assert!((120..=160).contains(&added), "{added}");
    }

    #[test]
    fn saturated_prompt_only_prunes() {
        let kw = kws();
        let full = "Filler sentence. topic entity audience intent sentiment lowercase. Go {raw_text}";
        let mut rng = keyed_rng(1, &["t"]);
        assert_eq!(
            mutate(full, &kw, &mut rng),
            "topic entity audience intent sentiment lowercase. Go {raw_text}"
        );
    }

    #[test]
    fn instruction_parsing() {
        use crate::architect::{build_instruction, FeedbackContext};
        let ctx = FeedbackContext {
            best: vec![(0.02, "Best one. {raw_text}".into()), (0.01, "Second {raw_text}".into())],
            worst: vec![(0.01, "Second {raw_text}".into())],
        };
        let ins = build_instruction("Base {raw_text}", &ctx.render());
        assert_eq!(
            parse_instruction(&ins),
            (Some("Best one. {raw_text}".into()), Some("Base {raw_text}".into()))
        );
        let ins = build_instruction("Base {raw_text}", EMPTY_CONTEXT);
        assert_eq!(parse_instruction(&ins), (None, Some("Base {raw_text}".into())));
    }

    #[test]
    fn world_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let world = gen_world(&small()).unwrap();
        world.write_dir(dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path().join("corpus.jsonl")).unwrap(), world.corpus);
        assert_eq!(read_spec(dir.path().join("world.json")).unwrap(), world.spec);
        let ds = CtrDataset::read_tsv(dir.path().join("dataset.tsv")).unwrap();
        assert_eq!(ds, world.dataset);
    }
}
