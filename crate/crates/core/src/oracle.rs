//! Scores a feature column by the RIG it adds to a small CTR model.
//!
//! The model is hashed logistic regression trained by SGD: every context
//! field and the candidate multi-value field get their own hash namespace.
//! A column's relative score is the paired RIG difference between a model
//! trained with the column and one trained without it, on the same temporal
//! holdout with the same seeds.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{content_digest, keyed_rng, TagList};
use crate::sentinel::FeatureColumn;

/// Hash namespace of the candidate multi-value field.
pub const MV_FIELD: &str = "mv";
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("evaluation slice has a single label class")]
    DegenerateEval,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("training diverged: non-finite weight after epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One labeled CTR example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub document_id: String,
    pub time_index: u64,
    pub context: BTreeMap<String, String>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrDataset {
    impressions: Vec<Impression>,
    base_fields: Vec<String>,
}

impl CtrDataset {
    /// Sorts by time index and checks labels, uniqueness of time indices and
    /// that every impression carries exactly the base fields.
    pub fn new(mut impressions: Vec<Impression>, base_fields: Vec<String>) -> Result<Self, OracleError> {
        if impressions.is_empty() {
            return Err(OracleError::InvalidDataset("no impressions".into()));
        }
        impressions.sort_by_key(|i| i.time_index);
        for pair in impressions.windows(2) {
            if pair[0].time_index == pair[1].time_index {
                return Err(OracleError::InvalidDataset(format!(
                    "duplicate time_index {}",
                    pair[0].time_index
                )));
            }
        }
        for imp in &impressions {
            if imp.label > 1 {
                return Err(OracleError::InvalidDataset(format!("label {} is not binary", imp.label)));
            }
            if imp.context.len() != base_fields.len()
                || !base_fields.iter().all(|f| imp.context.contains_key(f))
            {
                return Err(OracleError::InvalidDataset(format!(
                    "impression {} does not match base fields {:?}",
                    imp.time_index, base_fields
                )));
            }
        }
        Ok(Self {
            impressions,
            base_fields,
        })
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn base_fields(&self) -> &[String] {
        &self.base_fields
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    /// Reads the tab-separated dataset format: header `time_index`, `label`,
    /// `doc_id`, then one column per context field.
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self, OracleError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| OracleError::InvalidDataset("missing header".into()))?
            .split('\t')
            .collect();
        if header.len() < 3 || header[..3] != ["time_index", "label", "doc_id"] {
            return Err(OracleError::InvalidDataset(
                "header must start with time_index, label, doc_id".into(),
            ));
        }
        let fields: Vec<String> = header[3..].iter().map(|s| s.to_string()).collect();
        let mut impressions = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != header.len() {
                return Err(OracleError::InvalidDataset(format!(
                    "row {} has {} cells, expected {}",
                    n + 2,
                    cells.len(),
                    header.len()
                )));
            }
            let bad = |what: &str| OracleError::InvalidDataset(format!("row {}: bad {what}", n + 2));
            impressions.push(Impression {
                time_index: cells[0].parse().map_err(|_| bad("time_index"))?,
                label: match cells[1] {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(bad("label")),
                },
                document_id: cells[2].to_string(),
                context: fields
                    .iter()
                    .cloned()
                    .zip(cells[3..].iter().map(|s| s.to_string()))
                    .collect(),
            });
        }
        Self::new(impressions, fields)
    }

    /// Writes the dataset; with `column`, appends a multi-value column whose
    /// cells join tags with `|`.
    pub fn write_tsv(
        &self,
        path: impl AsRef<Path>,
        column: Option<(&str, &FeatureColumn)>,
    ) -> io::Result<()> {
        let mut out = String::from("time_index\tlabel\tdoc_id");
        for f in &self.base_fields {
            out.push('\t');
            out.push_str(f);
        }
        if let Some((name, _)) = column {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for imp in &self.impressions {
            let _ = write!(out, "{}\t{}\t{}", imp.time_index, imp.label, imp.document_id);
            for f in &self.base_fields {
                out.push('\t');
                out.push_str(&imp.context[f]);
            }
            if let Some((_, col)) = column {
                out.push('\t');
                let tags = col
                    .get(&imp.document_id)
                    .map(|t| t.tags().join("|"))
                    .unwrap_or_default();
                out.push_str(&tags);
            }
            out.push('\n');
        }
        fs::write(path, out)
    }
}

/// Writes a column as `doc_id<TAB>tag|tag|...` rows under a header.
pub fn write_column_tsv(path: impl AsRef<Path>, column: &FeatureColumn) -> io::Result<()> {
    let mut out = String::from("doc_id\ttags\n");
    for (doc, tags) in &column.values {
        let _ = writeln!(out, "{doc}\t{}", tags.tags().join("|"));
    }
    fs::write(path, out)
}

pub fn read_column_tsv(path: impl AsRef<Path>, template_id: &str) -> Result<FeatureColumn, OracleError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("doc_id\ttags") {
        return Err(OracleError::InvalidDataset("column header must be doc_id<TAB>tags".into()));
    }
    let mut values = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (doc, tags) = line
            .split_once('\t')
            .ok_or_else(|| OracleError::InvalidDataset(format!("bad column row {line:?}")))?;
        let list = TagList::new(tags.split('|').map(str::to_string).collect())
            .map_err(|e| OracleError::InvalidDataset(format!("{doc}: {e}")))?;
        values.insert(doc.to_string(), list);
    }
    Ok(FeatureColumn::from_values(template_id, values))
}

/// Splits off the last `ceil(n * eval_fraction)` impressions as the
/// evaluation slice. No shuffling.
pub fn temporal_split(
    dataset: &CtrDataset,
    eval_fraction: f64,
) -> Result<(&[Impression], &[Impression]), OracleError> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(OracleError::InvalidConfig(format!(
            "eval_fraction {eval_fraction} outside (0, 1)"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(OracleError::InvalidDataset("need at least two impressions".into()));
    }
    // the epsilon absorbs representation error such as 10 * 0.2 > 2
    let eval_len = ((n as f64 * eval_fraction - 1e-9).ceil() as usize).clamp(1, n - 1);
    let (train, eval) = dataset.impressions.split_at(n - eval_len);
    let positives = eval.iter().filter(|i| i.label == 1).count();
    if positives == 0 || positives == eval.len() {
        return Err(OracleError::DegenerateEval);
    }
    Ok((train, eval))
}

/// Bucket of `field=value` in a `hash_dim`-sized space.
pub fn hash_index(field: &str, value: &str, hash_dim: usize) -> u32 {
    debug_assert!(hash_dim.is_power_of_two());
    let digest = content_digest(&format!("{field}={value}"));
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (h & (hash_dim as u64 - 1)) as u32
}

/// Sparse (index, value) row sorted by index with duplicates summed.
pub type SparseRow = Vec<(u32, f64)>;

fn compact(mut row: SparseRow) -> SparseRow {
    row.sort_by_key(|&(i, _)| i);
    let mut out: SparseRow = Vec::with_capacity(row.len());
    for (i, v) in row {
        match out.last_mut() {
            Some((j, w)) if *j == i => *w += v,
            _ => out.push((i, v)),
        }
    }
    out
}

fn tag_features(tags: &TagList, hash_dim: usize) -> SparseRow {
    let w = 1.0 / tags.len() as f64;
    tags.tags()
        .iter()
        .map(|t| (hash_index(MV_FIELD, t, hash_dim), w))
        .collect()
}

/// One indicator per context field value plus, when tags are given, an
/// ℓ1-normalized bag over the multi-value field.
pub fn featurize(impression: &Impression, tags: Option<&TagList>, hash_dim: usize) -> SparseRow {
    let mut row: SparseRow = impression
        .context
        .iter()
        .map(|(f, v)| (hash_index(f, v, hash_dim), 1.0))
        .collect();
    if let Some(tags) = tags {
        row.extend(tag_features(tags, hash_dim));
    }
    compact(row)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub hash_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hash_dim: 1 << 16,
            learning_rate: 0.05,
            epochs: 3,
            l2: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.hash_dim < 2 || !self.hash_dim.is_power_of_two() || self.hash_dim > 1 << 30 {
            return Err(OracleError::InvalidConfig(format!(
                "hash_dim {} must be a power of two >= 2",
                self.hash_dim
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.l2.is_nan() || self.l2 < 0.0 {
            return Err(OracleError::InvalidConfig("learning_rate must be > 0 and l2 >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub hash_dim: usize,
    pub config: TrainConfig,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logit(weights: &[f64], bias: f64, row: &[(u32, f64)]) -> f64 {
    bias + row.iter().map(|&(i, v)| weights[i as usize] * v).sum::<f64>()
}

/// Log-loss of one example given its logit, computed without clamping.
fn example_loss(z: f64, label: u8) -> f64 {
    if label == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Full-batch objective: mean log-loss plus `l2/2 * |w|^2`.
pub fn objective(weights: &[f64], bias: f64, rows: &[SparseRow], labels: &[u8], l2: f64) -> f64 {
    let data: f64 = rows
        .iter()
        .zip(labels)
        .map(|(row, &y)| example_loss(logit(weights, bias, row), y))
        .sum::<f64>()
        / rows.len() as f64;
    data + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`objective`]: (d/dw, d/db).
pub fn objective_gradient(
    weights: &[f64],
    bias: f64,
    rows: &[SparseRow],
    labels: &[u8],
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut gw: Vec<f64> = weights.iter().map(|w| l2 * w).collect();
    let mut gb = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        let g = (sigmoid(logit(weights, bias, row)) - f64::from(y)) / n;
        for &(i, v) in row {
            gw[i as usize] += g * v;
        }
        gb += g;
    }
    (gw, gb)
}

impl CtrModel {
    pub fn zeros(config: TrainConfig) -> Self {
        Self {
            weights: vec![0.0; config.hash_dim],
            bias: 0.0,
            hash_dim: config.hash_dim,
            config,
        }
    }

    /// Clamped click probability for a featurized row.
    pub fn predict_row(&self, row: &[(u32, f64)]) -> f64 {
        sigmoid(logit(&self.weights, self.bias, row)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    pub fn predict(&self, impression: &Impression, tags: Option<&TagList>) -> f64 {
        self.predict_row(&featurize(impression, tags, self.hash_dim))
    }

    pub fn mean_log_loss(&self, rows: &[SparseRow], labels: &[u8]) -> f64 {
        objective(&self.weights, self.bias, rows, labels, 0.0)
    }
}

/// SGD on log-loss with L2 applied to the active coordinates of each example.
/// Each epoch visits the rows in a shuffle order derived from the seed.
/// Returns the model and the mean training log-loss after each epoch.
pub fn train_rows(
    rows: &[SparseRow],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<(CtrModel, Vec<f64>), OracleError> {
    config.validate()?;
    if rows.is_empty() {
        return Err(OracleError::Empty);
    }
    if rows.len() != labels.len() {
        return Err(OracleError::LengthMismatch(rows.len(), labels.len()));
    }
    let mut model = CtrModel::zeros(config.clone());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let lr = config.learning_rate;
    for epoch in 0..config.epochs {
        let mut rng = keyed_rng(config.seed, &["epoch", &epoch.to_string()]);
        order.shuffle(&mut rng);
        for &k in &order {
            let row = &rows[k];
            let g = sigmoid(logit(&model.weights, model.bias, row)) - f64::from(labels[k]);
            for &(i, v) in row {
                let w = &mut model.weights[i as usize];
                *w -= lr * (g * v + config.l2 * *w);
            }
            model.bias -= lr * g;
        }
        if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(OracleError::NonFinite { epoch });
        }
        losses.push(model.mean_log_loss(rows, labels));
    }
    Ok((model, losses))
}

/// Trains on impressions, adding the column's tags when given.
pub fn train(
    impressions: &[Impression],
    column: Option<&FeatureColumn>,
    config: &TrainConfig,
) -> Result<CtrModel, OracleError> {
    config.validate()?;
    let rows: Vec<SparseRow> = impressions
        .iter()
        .map(|imp| featurize(imp, column.and_then(|c| c.get(&imp.document_id)), config.hash_dim))
        .collect();
    let labels: Vec<u8> = impressions.iter().map(|i| i.label).collect();
    Ok(train_rows(&rows, &labels, config)?.0)
}

/// Mean binary cross-entropy. Only the term selected by each label is
/// evaluated, so exact 0/1 predictions on matching labels cost nothing.
pub fn cross_entropy(preds: &[f64], labels: &[u8]) -> Result<f64, OracleError> {
    if preds.len() != labels.len() {
        return Err(OracleError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(OracleError::Empty);
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(total / preds.len() as f64)
}

/// `1 - CE(preds) / CE(constant mean label)`.
pub fn rig(preds: &[f64], labels: &[u8]) -> Result<f64, OracleError> {
    if labels.is_empty() {
        return Err(OracleError::Empty);
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(OracleError::DegenerateLabels);
    }
    let ctr = positives as f64 / labels.len() as f64;
    let baseline = cross_entropy(&vec![ctr; labels.len()], labels)?;
    Ok(1.0 - cross_entropy(preds, labels)? / baseline)
}

/// Model family the oracle trains; the hashed logistic model is the default.
pub trait Learner: Send + Sync {
    fn fit(&self, rows: &[SparseRow], labels: &[u8], seed: u64) -> Result<Box<dyn Scorer>, OracleError>;
    fn hash_dim(&self) -> usize;
}

pub trait Scorer: Send + Sync {
    fn score(&self, row: &[(u32, f64)]) -> f64;
}

impl Scorer for CtrModel {
    fn score(&self, row: &[(u32, f64)]) -> f64 {
        self.predict_row(row)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LogisticLearner {
    pub config: TrainConfig,
}

impl Learner for LogisticLearner {
    fn fit(&self, rows: &[SparseRow], labels: &[u8], seed: u64) -> Result<Box<dyn Scorer>, OracleError> {
        let config = TrainConfig {
            seed,
            ..self.config.clone()
        };
        Ok(Box::new(train_rows(rows, labels, &config)?.0))
    }

    fn hash_dim(&self) -> usize {
        self.config.hash_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleConfig {
    pub train: TrainConfig,
    pub eval_fraction: f64,
    pub repeats: u32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval_fraction: 0.2,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepeatScore {
    pub seed: u64,
    pub baseline_rig: f64,
    pub extended_rig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub baseline_rig: f64,
    pub extended_rig: f64,
    /// Mean over repeats of the paired difference.
    pub relative_score: f64,
    pub per_repeat: Vec<RepeatScore>,
    pub eval_size: usize,
}

/// A dataset prepared for repeated scoring: split, base features hashed once,
/// and baseline RIGs memoized per repeat.
pub struct Oracle {
    config: OracleConfig,
    learner: Box<dyn Learner>,
    train_rows: Vec<SparseRow>,
    eval_rows: Vec<SparseRow>,
    train_labels: Vec<u8>,
    eval_labels: Vec<u8>,
    train_docs: Vec<String>,
    eval_docs: Vec<String>,
    baseline: OnceLock<Vec<f64>>,
}

impl Oracle {
    pub fn new(dataset: &CtrDataset, config: OracleConfig) -> Result<Self, OracleError> {
        let learner = LogisticLearner {
            config: config.train.clone(),
        };
        Self::with_learner(dataset, config, Box::new(learner))
    }

    pub fn with_learner(
        dataset: &CtrDataset,
        config: OracleConfig,
        learner: Box<dyn Learner>,
    ) -> Result<Self, OracleError> {
        config.train.validate()?;
        if config.repeats == 0 {
            return Err(OracleError::InvalidConfig("repeats must be >= 1".into()));
        }
        let (train, eval) = temporal_split(dataset, config.eval_fraction)?;
        let dim = learner.hash_dim();
        let rows = |s: &[Impression]| s.iter().map(|i| featurize(i, None, dim)).collect::<Vec<_>>();
        let labels = |s: &[Impression]| s.iter().map(|i| i.label).collect::<Vec<_>>();
        let docs = |s: &[Impression]| s.iter().map(|i| i.document_id.clone()).collect::<Vec<_>>();
        Ok(Self {
            train_rows: rows(train),
            eval_rows: rows(eval),
            train_labels: labels(train),
            eval_labels: labels(eval),
            train_docs: docs(train),
            eval_docs: docs(eval),
            config,
            learner,
            baseline: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn eval_size(&self) -> usize {
        self.eval_rows.len()
    }

    fn repeat_seed(&self, r: u32) -> u64 {
        self.config.train.seed.wrapping_add(u64::from(r))
    }

    fn fit_and_rig(&self, train: &[SparseRow], eval: &[SparseRow], seed: u64) -> Result<f64, OracleError> {
        let model = self.learner.fit(train, &self.train_labels, seed)?;
        let preds: Vec<f64> = eval.iter().map(|row| model.score(row)).collect();
        rig(&preds, &self.eval_labels)
    }

    fn run_repeats(&self, train: &[SparseRow], eval: &[SparseRow]) -> Result<Vec<f64>, OracleError> {
        std::thread::scope(|s| {
            let handles: Vec<_> = (1..=self.config.repeats)
                .map(|r| s.spawn(move || self.fit_and_rig(train, eval, self.repeat_seed(r))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("repeat panicked"))
                .collect()
        })
    }

    // Concurrent first callers may both compute; the results are identical.
    fn baseline_rigs(&self) -> Result<Vec<f64>, OracleError> {
        if let Some(rigs) = self.baseline.get() {
            return Ok(rigs.clone());
        }
        let rigs = self.run_repeats(&self.train_rows, &self.eval_rows)?;
        Ok(self.baseline.get_or_init(|| rigs).clone())
    }

    fn extend(&self, rows: &[SparseRow], docs: &[String], features: &HashMap<&str, SparseRow>) -> Vec<SparseRow> {
        rows.iter()
            .zip(docs)
            .map(|(row, doc)| match features.get(doc.as_str()) {
                Some(extra) => {
                    let mut r = row.clone();
                    r.extend_from_slice(extra);
                    compact(r)
                }
                None => row.clone(),
            })
            .collect()
    }

    /// Paired relative score of `column` (absent column = baseline against
    /// itself, exactly 0 per repeat).
    pub fn relative_score(&self, column: Option<&FeatureColumn>) -> Result<EvalResult, OracleError> {
        let baseline = self.baseline_rigs()?;
        let extended = match column {
            None => baseline.clone(),
            Some(col) => {
                let dim = self.learner.hash_dim();
                let features: HashMap<&str, SparseRow> = col
                    .values
                    .iter()
                    .map(|(doc, tags)| (doc.as_str(), tag_features(tags, dim)))
                    .collect();
                let train = self.extend(&self.train_rows, &self.train_docs, &features);
                let eval = self.extend(&self.eval_rows, &self.eval_docs, &features);
                self.run_repeats(&train, &eval)?
            }
        };
        let n = f64::from(self.config.repeats);
        let per_repeat: Vec<RepeatScore> = (1..=self.config.repeats)
            .zip(baseline.iter().zip(&extended))
            .map(|(r, (&b, &e))| RepeatScore {
                seed: self.repeat_seed(r),
                baseline_rig: b,
                extended_rig: e,
            })
            .collect();
        Ok(EvalResult {
            baseline_rig: baseline.iter().sum::<f64>() / n,
            extended_rig: extended.iter().sum::<f64>() / n,
            relative_score: per_repeat
                .iter()
                .map(|r| r.extended_rig - r.baseline_rig)
                .sum::<f64>()
                / n,
            per_repeat,
            eval_size: self.eval_size(),
        })
    }
}

/// One-shot scoring of a column against a dataset.
pub fn relative_score(
    dataset: &CtrDataset,
    column: Option<&FeatureColumn>,
    config: &OracleConfig,
) -> Result<EvalResult, OracleError> {
    Oracle::new(dataset, config.clone())?.relative_score(column)
}
