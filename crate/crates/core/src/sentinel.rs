//! The extraction side of the loop: ground a template over each document,
//! ask the fast backend for tags, normalize them, and cache the result.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    now, rfc3339, Document, PromptTemplate, SystemPrompt, TagList, MAX_TAGS, PLACEHOLDER,
};
use crate::linelog::{self, LineLog};
use crate::llm::{ChatBackend, ChatRequest, LlmError};

pub const RAW_SYS_PROMPT: &str = "You are a data scientist researcher. Your job is to extract comma-separated information from text.";

/// The generic seed template every fresh fleet starts from.
pub const RAW_USER_PROMPT_TEMPLATE: &str = "Extract up to ten comma-separated pieces of information from the input text provided next. The information can be anything you deem relevant as a feature for building a recommender system. Here is the text for processing: <begin raw text input> {raw_text} <end raw text input>.";

/// Tags with more words than this are dropped by the parser.
pub const MAX_TAG_WORDS: usize = 6;

/// Share of failed documents above which a whole column is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SentinelError {
    #[error("extraction failed for document {document_id}: {source}")]
    ExtractionFailed {
        document_id: String,
        #[source]
        source: LlmError,
    },
    #[error("feature column failed: {:.1}% of documents could not be extracted", .0 * 100.0)]
    ColumnFailed(f64),
    #[error("extraction cache: {0}")]
    Cache(#[from] io::Error),
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
}

/// Substitutes the document text for the placeholder, once, verbatim.
pub fn ground(template: &PromptTemplate, document: &Document) -> String {
    template.user_template.replacen(PLACEHOLDER, &document.raw_text, 1)
}

/// Total parser for the sentinel's comma-separated output. Malformed input
/// degrades to `["unspecified"]`.
pub fn parse_tags(raw_output: &str) -> TagList {
    let Some(line) = raw_output.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return TagList::unspecified();
    };
    let mut seen = HashSet::new();
    let mut tags = Vec::new();
    for piece in line.split(',') {
        let cleaned = piece.replace('|', " ");
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        if words.is_empty() || words.len() > MAX_TAG_WORDS {
            continue;
        }
        let tag = words.join(" ");
        if seen.insert(tag.to_lowercase()) {
            tags.push(tag);
            if tags.len() == MAX_TAGS {
                break;
            }
        }
    }
    TagList::new(tags).unwrap_or_else(|_| TagList::unspecified())
}

#[derive(Serialize)]
struct CacheLine<'a> {
    template_id: &'a str,
    document_id: &'a str,
    tags: &'a TagList,
    created_at: String,
}

#[derive(Deserialize)]
struct StoredCacheLine {
    template_id: String,
    document_id: String,
    tags: TagList,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedTags {
    pub tags: TagList,
    pub created_at: DateTime<Utc>,
}

/// Persistent (template_id, document_id) → TagList map. Safe for concurrent
/// use within one process; each agent owns its own file.
#[derive(Debug, Default)]
pub struct ExtractionCache {
    entries: RwLock<HashMap<(String, String), CachedTags>>,
    file: Option<Mutex<File>>,
}

impl ExtractionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads the cache file at `path`, creating it if missing and dropping any
    /// torn tail.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let log = LineLog::open(path.as_ref())?;
        let scan = log.read_from(0, 0, &|_, line| {
            serde_json::from_str::<StoredCacheLine>(line).is_ok()
        })?;
        if scan.tail_bytes > 0 {
            warn!(
                "{}: dropping {} unreadable cache bytes",
                path.as_ref().display(),
                scan.tail_bytes
            );
            let guard = log.lock()?;
            log.truncate_to(&guard, scan.valid_end)?;
        }
        let mut entries = HashMap::new();
        for line in &scan.lines {
            let stored: StoredCacheLine = serde_json::from_str(line).expect("validated above");
            entries.insert(
                (stored.template_id, stored.document_id),
                CachedTags {
                    tags: stored.tags,
                    created_at: stored.created_at,
                },
            );
        }
        let file = OpenOptions::new().append(true).open(path.as_ref())?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn get(&self, template_id: &str, document_id: &str) -> Option<TagList> {
        self.entries
            .read()
            .expect("cache poisoned")
            .get(&(template_id.to_string(), document_id.to_string()))
            .map(|c| c.tags.clone())
    }

    /// Records an extraction. Existing entries are kept: the cache only grows.
    pub fn put(&self, template_id: &str, document_id: &str, tags: &TagList) -> io::Result<()> {
        let key = (template_id.to_string(), document_id.to_string());
        let mut entries = self.entries.write().expect("cache poisoned");
        if entries.contains_key(&key) {
            return Ok(());
        }
        let created_at = now();
        if let Some(file) = &self.file {
            let line = CacheLine {
                template_id,
                document_id,
                tags,
                created_at: rfc3339(&created_at),
            };
            let sealed = linelog::seal(&serde_json::to_string(&line).expect("cache line serializes"));
            file.lock().expect("cache file poisoned").write_all(sealed.as_bytes())?;
        }
        entries.insert(
            key,
            CachedTags {
                tags: tags.clone(),
                created_at,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One feature: a tag list for every corpus document.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub template_id: String,
    pub values: BTreeMap<String, TagList>,
    /// Fraction of documents whose value is not `["unspecified"]`.
    pub coverage: f64,
    pub failures: usize,
}

impl FeatureColumn {
    pub fn from_values(template_id: impl Into<String>, values: BTreeMap<String, TagList>) -> Self {
        let covered = values.values().filter(|t| !t.is_unspecified()).count();
        let coverage = if values.is_empty() {
            0.0
        } else {
            covered as f64 / values.len() as f64
        };
        Self {
            template_id: template_id.into(),
            values,
            coverage,
            failures: 0,
        }
    }

    pub fn get(&self, document_id: &str) -> Option<&TagList> {
        self.values.get(document_id)
    }
}

/// Extraction settings and collaborators for one agent.
#[derive(Clone)]
pub struct Sentinel {
    pub backend: Arc<dyn ChatBackend>,
    pub cache: Arc<ExtractionCache>,
    pub system: SystemPrompt,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model: String,
}

impl Sentinel {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<ExtractionCache>) -> Self {
        Self {
            backend,
            cache,
            system: SystemPrompt::default(),
            temperature: 0.2,
            max_output_tokens: 128,
            model: String::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Tags for one document; a cache hit never reaches the backend.
    pub fn extract(
        &self,
        template: &PromptTemplate,
        document: &Document,
    ) -> Result<TagList, SentinelError> {
        if let Some(tags) = self.cache.get(&template.id, &document.id) {
            return Ok(tags);
        }
        let request = ChatRequest {
            system: self.system.text().to_string(),
            user: ground(template, document),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            model: self.model.clone(),
        };
        let response =
            self.backend
                .complete(&request)
                .map_err(|source| SentinelError::ExtractionFailed {
                    document_id: document.id.clone(),
                    source,
                })?;
        let tags = parse_tags(&response.text);
        self.cache.put(&template.id, &document.id, &tags)?;
        Ok(tags)
    }

    /// Builds the feature column for `template` over `documents` with at most
    /// `parallelism` backend calls in flight. Documents sharing an id are
    /// extracted once. Failed documents get `["unspecified"]`; more than 20%
    /// failures rejects the column.
    pub fn extract_corpus(
        &self,
        template: &PromptTemplate,
        documents: &[Document],
        parallelism: usize,
    ) -> Result<FeatureColumn, SentinelError> {
        if parallelism == 0 {
            return Err(SentinelError::InvalidParallelism);
        }
        let mut seen = HashSet::new();
        let unique: Vec<&Document> = documents
            .iter()
            .filter(|d| seen.insert(d.id.as_str()))
            .collect();
        let results: Vec<Mutex<Option<Result<TagList, SentinelError>>>> =
            unique.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = parallelism.min(unique.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= unique.len() {
                        break;
                    }
                    let outcome = self.extract(template, unique[i]);
                    *results[i].lock().expect("result slot poisoned") = Some(outcome);
                });
            }
        });

        let mut values = BTreeMap::new();
        let mut failures = 0usize;
        for (doc, slot) in unique.iter().zip(results) {
            let outcome = slot.into_inner().expect("result slot poisoned");
            let tags = match outcome.expect("every document processed") {
                Ok(tags) => tags,
                Err(SentinelError::Cache(e)) => return Err(SentinelError::Cache(e)),
                Err(e) => {
                    debug!("{e}");
                    failures += 1;
                    TagList::unspecified()
                }
            };
            values.insert(doc.id.clone(), tags);
        }
        let fraction = if unique.is_empty() {
            0.0
        } else {
            failures as f64 / unique.len() as f64
        };
        if fraction > MAX_FAILURE_FRACTION {
            return Err(SentinelError::ColumnFailed(fraction));
        }
        let mut column = FeatureColumn::from_values(template.id.clone(), values);
        column.failures = failures;
        Ok(column)
    }
}
