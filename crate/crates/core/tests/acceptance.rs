//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Re-executes itself as the child appender for the multi-process
//! memory check.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use featureloop::agent::{run_agents, AgentConfig, AgentResources};
use featureloop::architect::Architect;
use featureloop::control::ControlLog;
use featureloop::domain::{keyed_rng, validate_template, EvalStatus, ScoreDraft, TagList, MAX_TAGS};
use featureloop::linelog::verify;
use featureloop::llm::CountingBackend;
use featureloop::memory::{MemoryError, MemoryStore};
use featureloop::oracle::{cross_entropy, objective, objective_gradient, rig, Oracle, OracleConfig, SparseRow, TrainConfig};
use featureloop::sentinel::{parse_tags, ExtractionCache, Sentinel, RAW_USER_PROMPT_TEMPLATE};
use featureloop::simharness::{gen_world, WorldSpec};
use rand::seq::SliceRandom;
use rand::Rng;

const CHILD_ENV: &str = "FL_ACCEPTANCE_CHILD";

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

// RIG metric exactness.
fn rig_exactness() -> Check {
    let started = Instant::now();
    let mut rng = keyed_rng(11, &["rig"]);
    for _ in 0..50 {
        let n = rng.random_range(2..200);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let ctr = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / n as f64;
        let r = rig(&vec![ctr; n], &labels).map_err(|e| e.to_string())?;
        ensure(r.abs() < 1e-12, || format!("constant predictor gave {r:e}"))?;
        let exact: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let r = rig(&exact, &labels).map_err(|e| e.to_string())?;
        ensure(r == 1.0, || format!("exact match gave {r}"))?;
    }
    // Frozen from a direct summation in a scratch script.
    let cases: [(&[f64], &[u8], f64); 2] = [
        (&[0.8, 0.3, 0.6, 0.1], &[1, 0, 1, 0], 0.5686325111679058),
        (&[0.7, 0.2, 0.4, 0.1], &[1, 0, 0, 0], 0.4682865520136136),
    ];
    for (p, y, expected) in cases {
        let r = rig(p, y).map_err(|e| e.to_string())?;
        ensure((r - expected).abs() < 1e-9, || format!("4-point case: {r} vs {expected}"))?;
    }
    let ce = cross_entropy(&[0.8, 0.3, 0.6, 0.1], &[1, 0, 1, 0]).map_err(|e| e.to_string())?;
    ensure((ce - 0.2990011586691898).abs() < 1e-12, || format!("cross-entropy {ce}"))?;
    for _ in 0..100 {
        let n = rng.random_range(2..100);
        let mut pairs: Vec<(f64, u8)> = (0..n)
            .map(|_| (rng.random_range(0.01..0.99), u8::from(rng.random_bool(0.5))))
            .collect();
        pairs[0].1 = 1;
        pairs[1].1 = 0;
        let split = |v: &[(f64, u8)]| (v.iter().map(|p| p.0).collect::<Vec<_>>(), v.iter().map(|p| p.1).collect::<Vec<_>>());
        let (p, y) = split(&pairs);
        let a = rig(&p, &y).map_err(|e| e.to_string())?;
        pairs.shuffle(&mut rng);
        let (p, y) = split(&pairs);
        let b = rig(&p, &y).map_err(|e| e.to_string())?;
        ensure((a - b).abs() < 1e-12, || format!("permutation changed RIG: {a} vs {b}"))?;
    }
    within(started.elapsed(), Duration::from_secs(1))?;
    Ok(format!("100 permutations, 2 hand cases, {:.0?}", started.elapsed()))
}

// Analytic gradient against central differences.
fn gradient_check() -> Check {
    let started = Instant::now();
    let mut rng = keyed_rng(12, &["grad"]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(2..=32usize);
        let n = rng.random_range(5..40);
        let rows: Vec<SparseRow> = (0..n)
            .map(|_| {
                let k = rng.random_range(1..=d.min(6));
                let mut idx: Vec<u32> = (0..d as u32).collect();
                idx.shuffle(&mut rng);
                idx[..k].iter().map(|&i| (i, rng.random_range(-2.0..2.0))).collect()
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let l2 = rng.random_range(0.0..0.1);
        let (gw, gb) = objective_gradient(&w, b, &rows, &labels, l2);
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(d + 1);
        for j in 0..d {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[j] += h;
            minus[j] -= h;
            numeric.push((objective(&plus, b, &rows, &labels, l2) - objective(&minus, b, &rows, &labels, l2)) / (2.0 * h));
        }
        numeric.push((objective(&w, b + h, &rows, &labels, l2) - objective(&w, b - h, &rows, &labels, l2)) / (2.0 * h));
        let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    within(started.elapsed(), Duration::from_secs(5))?;
    Ok(format!("20 instances, max relative error {worst:.2e}"))
}

// Truth column separates from a random column.
fn oracle_signal_null() -> Check {
    let started = Instant::now();
    let world = gen_world(&WorldSpec::with_seed(0)).map_err(|e| e.to_string())?;
    ensure(world.dataset.len() == 50_000, || "world size".into())?;
    let oracle = Oracle::new(&world.dataset, OracleConfig::default()).map_err(|e| e.to_string())?;
    ensure(oracle.config().repeats == 3, || "repeats".into())?;
    let truth = oracle.relative_score(Some(&world.truth_column())).map_err(|e| e.to_string())?.relative_score;
    let random = oracle.relative_score(Some(&world.random_column(99))).map_err(|e| e.to_string())?.relative_score;
    ensure(truth > 0.01, || format!("truth scored {truth:.5}"))?;
    ensure(random.abs() < 0.005, || format!("random scored {random:.5}"))?;
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!("truth {truth:.5}, random {random:+.5}, {:.1?}", started.elapsed()))
}

// Four simulated agents for thirty generations per seed.
fn closed_loop() -> Check {
    let started = Instant::now();
    let mut reached = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let world = Arc::new(gen_world(&WorldSpec::with_seed(seed)).map_err(|e| e.to_string())?);
        let config = OracleConfig {
            train: TrainConfig { seed, ..TrainConfig::default() },
            ..OracleConfig::default()
        };
        let oracle = Arc::new(Oracle::new(&world.dataset, config).map_err(|e| e.to_string())?);
        let truth = oracle.relative_score(Some(&world.truth_column())).map_err(|e| e.to_string())?.relative_score;
        let memory = Arc::new(MemoryStore::open(dir.path().join("memory.log")).map_err(|e| e.to_string())?);
        let control = Arc::new(ControlLog::open(dir.path().join("control.log")).map_err(|e| e.to_string())?);
        let corpus = Arc::new(world.corpus.clone());
        let agents = (1..=4u64)
            .map(|i| {
                let id = format!("a{i}");
                let mut cfg = AgentConfig::new(&id);
                cfg.rng_seed = seed;
                cfg.max_generations = 30;
                let res = AgentResources {
                    memory: Arc::clone(&memory),
                    control: Some(Arc::clone(&control)),
                    sentinel: Sentinel::new(Arc::new(world.sentinel_backend()), Arc::new(ExtractionCache::in_memory())),
                    architect: Architect::new(Arc::new(world.architect_backend_with_seed(seed * 1000 + i))),
                    corpus: Arc::clone(&corpus),
                    oracle: Arc::clone(&oracle),
                };
                (cfg, res)
            })
            .collect();
        let summaries = run_agents(agents);
        ensure(summaries.iter().all(|s| s.generations == 30), || format!("seed {seed}: agents stopped early"))?;
        let records = memory.records().map_err(|e| e.to_string())?;
        let mut best = f64::NEG_INFINITY;
        let mut trace = Vec::new();
        for r in records.iter().filter(|r| r.is_ok()) {
            best = best.max(r.relative_score);
            trace.push(best);
        }
        ensure(trace.windows(2).all(|w| w[1] >= w[0]), || format!("seed {seed}: best-so-far decreased"))?;
        let ratio = best / truth;
        if ratio >= 0.6 {
            reached += 1;
        }
        notes.push(format!("{ratio:.2}"));
    }
    ensure(reached >= 4, || format!("only {reached}/5 seeds reached 60% (ratios {})", notes.join(" ")))?;
    within(started.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{reached}/5 seeds, best/truth {}, {:.1?}", notes.join(" "), started.elapsed()))
}

// Second pass over an unchanged (template, corpus) never reaches the backend.
fn cache_contract() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let world = Arc::new(gen_world(&WorldSpec { n_docs: 200, n_impressions: 2000, ..WorldSpec::with_seed(5) }).map_err(|e| e.to_string())?);
    let backend = Arc::new(CountingBackend::new(world.sentinel_backend()));
    let template = validate_template(RAW_USER_PROMPT_TEMPLATE).map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("a1.cache");
    let cache = Arc::new(ExtractionCache::open(&cache_path).map_err(|e| e.to_string())?);
    let sentinel = Sentinel::new(backend.clone(), cache);
    let first = sentinel.extract_corpus(&template, &world.corpus, 4).map_err(|e| e.to_string())?;
    let cold = backend.calls();
    ensure(cold == 200, || format!("first pass made {cold} calls"))?;
    let second = sentinel.extract_corpus(&template, &world.corpus, 4).map_err(|e| e.to_string())?;
    ensure(backend.calls() == cold, || format!("second pass made {} calls", backend.calls() - cold))?;
    ensure(first.values == second.values, || "cached column differs".into())?;
    let reopened = Sentinel::new(backend.clone(), Arc::new(ExtractionCache::open(&cache_path).map_err(|e| e.to_string())?));
    let third = reopened.extract_corpus(&template, &world.corpus, 4).map_err(|e| e.to_string())?;
    ensure(backend.calls() == cold, || "reopened cache missed".into())?;
    ensure(third.values == first.values, || "reopened column differs".into())?;
    Ok(format!("{cold} calls cold, 0 warm, 0 after reopen"))
}

fn child_appender(spec: &str) {
    let mut parts = spec.splitn(3, '|');
    let (path, agent, count) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    let store = MemoryStore::open(path).expect("open");
    for i in 0..count.parse::<usize>().expect("count") {
        let t = validate_template(&format!("{agent} prompt {i} {{raw_text}}")).expect("template");
        store.append(ScoreDraft::ok(&t, agent, 0.1, 0.1 + i as f64 * 1e-4, 10, 1)).expect("append");
    }
}

// Four OS processes append concurrently; a torn tail is then recovered.
fn memory_concurrency() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("memory.log");
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let children: Vec<_> = (0..4)
        .map(|p| {
            Command::new(&exe)
                .env(CHILD_ENV, format!("{}|p{p}|250", path.display()))
                .spawn()
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    for mut c in children {
        let status = c.wait().map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("child failed: {status}"))?;
    }
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines.len() == 1000, || format!("{} lines", lines.len()))?;
    ensure(lines.iter().all(|l| verify(l)), || "a line fails its checksum".into())?;
    let store = MemoryStore::open(&path).map_err(|e| e.to_string())?;
    let records = store.records().map_err(|e| e.to_string())?;
    ensure(records.len() == 1000, || format!("{} records", records.len()))?;
    ensure(records.iter().enumerate().all(|(i, r)| r.seq == i as u64), || "seq not strictly increasing from 0".into())?;
    let got: HashSet<String> = records.iter().map(|r| r.prompt_text.clone()).collect();
    let want: HashSet<String> = (0..4)
        .flat_map(|p| (0..250).map(move |i| format!("p{p} prompt {i} {{raw_text}}")))
        .collect();
    ensure(got == want, || "record set differs from inputs".into())?;

    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(b"{\"seq\":1000,\"prompt_id\":\"ab"))
        .map_err(|e| e.to_string())?;
    let fresh = MemoryStore::open(&path).map_err(|e| e.to_string())?;
    match fresh.check_tail() {
        Err(MemoryError::CorruptTail { last_valid_seq: Some(999), .. }) => {}
        other => return Err(format!("torn tail not detected: {other:?}")),
    }
    ensure(fresh.len().map_err(|e| e.to_string())? == 1000, || "torn tail visible to readers".into())?;
    let recovery = fresh.recover().map_err(|e| e.to_string())?;
    ensure(recovery.valid_records == 1000, || "recovery lost records".into())?;
    let t = validate_template("after recovery {raw_text}").map_err(|e| e.to_string())?;
    let seq = fresh.append(ScoreDraft::ok(&t, "p9", 0.1, 0.2, 10, 1)).map_err(|e| e.to_string())?;
    ensure(seq == 1000, || format!("append after recovery got seq {seq}"))?;
    ensure(store.len().map_err(|e| e.to_string())? == 1001, || "reader did not see new record".into())?;
    Ok(format!("1000 records from 4 processes, {} torn bytes recovered", recovery.truncated_bytes))
}

fn fuzz_output(rng: &mut impl Rng) -> String {
    const PIECES: [&str; 24] = [
        ",", ",,", " , ", "|", "\n", "\r\n", "\t", "  ", "\"", "'", "- ", "* ", "1. ", "Tags:", "```",
        "unspecified", "sports", "Sports", "ÜBER café", "🙂", "multi word tag here", "a b c d e f g h",
        "x", "\u{00a0}",
    ];
    let mut s = String::new();
    for _ in 0..rng.random_range(0..60) {
        if rng.random_bool(0.2) {
            let len = rng.random_range(1..8);
            s.extend((0..len).map(|_| rng.random_range('!'..='~')));
        } else {
            s.push_str(PIECES[rng.random_range(0..PIECES.len())]);
        }
    }
    s
}

fn tag_list_valid(tags: &TagList) -> bool {
    (1..=MAX_TAGS).contains(&tags.len()) && TagList::new(tags.tags().to_vec()).as_ref() == Ok(tags)
}

// Reference line plus fuzzed malformed outputs.
fn parser_corpus() -> Check {
    let line = "create account, log in, donate, chatgpt, auto-gpt, waymo, camel, carcraft, multi-agent reinforcement learning, jade";
    let expected = [
        "create account", "log in", "donate", "chatgpt", "auto-gpt", "waymo", "camel", "carcraft",
        "multi-agent reinforcement learning", "jade",
    ];
    let parsed = parse_tags(line);
    ensure(parsed.tags() == expected, || format!("reference line parsed to {:?}", parsed.tags()))?;
    let mut rng = keyed_rng(13, &["fuzz"]);
    let mut unspecified = 0;
    for i in 0..200 {
        let raw = fuzz_output(&mut rng);
        let tags = std::panic::catch_unwind(|| parse_tags(&raw)).map_err(|_| format!("parser panicked on case {i}"))?;
        ensure(tag_list_valid(&tags), || format!("case {i}: invalid TagList {:?} from {raw:?}", tags.tags()))?;
        unspecified += usize::from(tags.is_unspecified());
    }
    Ok(format!("10/10 reference tags, 200 fuzz cases valid ({unspecified} fell back)"))
}

// top_k / bottom_k against a full sort.
fn ranking_oracle() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = MemoryStore::open(dir.path().join("m.log")).map_err(|e| e.to_string())?;
    let mut rng = keyed_rng(14, &["rank"]);
    let mut scores = BTreeMap::new();
    for i in 0..1000u64 {
        let t = validate_template(&format!("r{i} {{raw_text}}")).map_err(|e| e.to_string())?;
        // Few distinct values so ties are common.
        let draft = if rng.random_bool(0.1) {
            ScoreDraft::failed(&t, "a", EvalStatus::EvalFailed)
        } else {
            let ext = 0.1 + f64::from(rng.random_range(-20..20i32)) / 1000.0;
            ScoreDraft::ok(&t, "a", 0.1, ext, 10, 1)
        };
        let ok = draft.status == EvalStatus::Ok;
        let score = draft.relative_score;
        let seq = store.append(draft).map_err(|e| e.to_string())?;
        if ok {
            scores.insert(seq, score);
        }
    }
    let mut desc: Vec<(u64, f64)> = scores.iter().map(|(&s, &v)| (s, v)).collect();
    let mut asc = desc.clone();
    desc.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    asc.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let distinct: HashSet<u64> = scores.values().map(|v| v.to_bits()).collect();
    ensure(distinct.len() < scores.len(), || "no ties generated".into())?;
    for k in [0usize, 1, 5, 10, 37, 500, 1000, 5000] {
        let top: Vec<u64> = store.top_k(k).map_err(|e| e.to_string())?.iter().map(|r| r.seq).collect();
        let bottom: Vec<u64> = store.bottom_k(k).map_err(|e| e.to_string())?.iter().map(|r| r.seq).collect();
        let want_top: Vec<u64> = desc.iter().take(k).map(|p| p.0).collect();
        let want_bottom: Vec<u64> = asc.iter().take(k).map(|p| p.0).collect();
        ensure(top == want_top, || format!("top_{k} differs"))?;
        ensure(bottom == want_bottom, || format!("bottom_{k} differs"))?;
    }
    Ok(format!("{} ok records, {} distinct scores, 8 k values", scores.len(), distinct.len()))
}

fn main() {
    if let Ok(spec) = std::env::var(CHILD_ENV) {
        child_appender(&spec);
        return;
    }
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 8] = [
        ("rig_exactness", rig_exactness),
        ("gradient_check", gradient_check),
        ("oracle_signal_null", oracle_signal_null),
        ("closed_loop_improvement", closed_loop),
        ("cache_contract", cache_contract),
        ("memory_concurrency", memory_concurrency),
        ("parser_corpus", parser_corpus),
        ("top_bottom_k_oracle", ranking_oracle),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name:<26} {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name:<26} {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name:<26} panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
