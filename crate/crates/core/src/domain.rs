//! Domain values shared by every subsystem: prompt templates, documents, tag
//! lists and prompt-score records, plus the content hash that identifies them.

use std::fmt;

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The literal grounding placeholder every user template must carry once.
pub const PLACEHOLDER: &str = "{raw_text}";

/// Tag emitted when a document yields nothing usable.
pub const UNSPECIFIED: &str = "unspecified";

pub const MAX_TAGS: usize = 10;

/// Trims both ends and collapses runs of ASCII spaces to a single space.
/// Case and other whitespace characters are left untouched.
pub fn normalize_text(text: &str) -> String {
    let trimmed = text.trim();
    let mut out = String::with_capacity(trimmed.len());
    let mut prev_space = false;
    for ch in trimmed.chars() {
        if ch == ' ' {
            if !prev_space {
                out.push(ch);
            }
            prev_space = true;
        } else {
            out.push(ch);
            prev_space = false;
        }
    }
    out
}

/// SHA-256 of the normalized text, as 64 lowercase hex characters.
pub fn content_hash(text: &str) -> String {
    hex::encode(content_digest(text))
}

pub(crate) fn content_digest(text: &str) -> [u8; 32] {
    Sha256::digest(normalize_text(text).as_bytes()).into()
}

/// A ChaCha stream keyed by a numeric seed and a list of text parts. Used
/// wherever output must be a pure function of (seed, inputs).
pub fn keyed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Current time at the millisecond precision records are stored with.
pub fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(3)
}

pub(crate) fn rfc3339(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template has no {PLACEHOLDER} placeholder")]
    MissingPlaceholder,
    #[error("template has {0} {PLACEHOLDER} placeholders, expected exactly one")]
    DuplicatePlaceholder(usize),
}

/// A user-prompt template; the unit of search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub user_template: String,
    pub parent_id: Option<String>,
    pub agent_id: String,
    pub generation: u32,
    pub created_at: DateTime<Utc>,
}

/// Accepts `text` as a seed template (generation 0, no parent) iff it holds
/// exactly one placeholder.
pub fn validate_template(text: &str) -> Result<PromptTemplate, TemplateError> {
    match text.matches(PLACEHOLDER).count() {
        0 => Err(TemplateError::MissingPlaceholder),
        1 => Ok(PromptTemplate {
            id: content_hash(text),
            user_template: text.to_string(),
            parent_id: None,
            agent_id: String::new(),
            generation: 0,
            created_at: now(),
        }),
        n => Err(TemplateError::DuplicatePlaceholder(n)),
    }
}

impl PromptTemplate {
    pub fn with_agent(mut self, agent_id: impl Into<String>) -> Self {
        self.agent_id = agent_id.into();
        self
    }

    /// Marks this template as refined from `parent`.
    pub fn refined_from(mut self, parent: &PromptTemplate) -> Self {
        self.parent_id = Some(parent.id.clone());
        self.generation = parent.generation + 1;
        self
    }

    pub fn is_seed(&self) -> bool {
        self.parent_id.is_none()
    }
}

/// The fixed system-role text sent with every extraction request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemPrompt(String);

impl SystemPrompt {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl Default for SystemPrompt {
    fn default() -> Self {
        Self::new(crate::sentinel::RAW_SYS_PROMPT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("tag list must hold 1 to {MAX_TAGS} tags, got {0}")]
    Count(usize),
    #[error("malformed tag {0:?}")]
    Malformed(String),
    #[error("duplicate tag {0:?}")]
    Duplicate(String),
}

/// One multi-value feature value: an ordered, case-insensitively distinct list
/// of 1 to 10 clean tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagList(Vec<String>);

impl TagList {
    pub fn new(tags: Vec<String>) -> Result<Self, TagError> {
        if tags.is_empty() || tags.len() > MAX_TAGS {
            return Err(TagError::Count(tags.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for tag in &tags {
            if !is_clean_tag(tag) {
                return Err(TagError::Malformed(tag.clone()));
            }
            if !seen.insert(tag.to_lowercase()) {
                return Err(TagError::Duplicate(tag.clone()));
            }
        }
        Ok(Self(tags))
    }

    pub fn unspecified() -> Self {
        Self(vec![UNSPECIFIED.to_string()])
    }

    pub fn is_unspecified(&self) -> bool {
        self.0.len() == 1 && self.0[0] == UNSPECIFIED
    }

    pub fn tags(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Comma-and-space rendering, the sentinel's output format.
    pub fn to_line(&self) -> String {
        self.0.join(", ")
    }
}

impl TryFrom<Vec<String>> for TagList {
    type Error = TagError;

    fn try_from(tags: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(tags)
    }
}

impl From<TagList> for Vec<String> {
    fn from(list: TagList) -> Self {
        list.0
    }
}

impl fmt::Display for TagList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

// '|' and tabs are excluded too: they delimit tag cells in TSV exports.
fn is_clean_tag(tag: &str) -> bool {
    !tag.is_empty()
        && !tag.contains([',', '|'])
        && tag.trim() == tag
        && !tag.contains("  ")
        && !tag.chars().any(|c| c.is_whitespace() && c != ' ')
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("document text is empty")]
pub struct EmptyDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<std::collections::BTreeMap<String, String>>,
}

impl Document {
    pub fn new(raw_text: impl Into<String>) -> Result<Self, EmptyDocument> {
        let raw_text = raw_text.into();
        if raw_text.is_empty() {
            return Err(EmptyDocument);
        }
        Ok(Self {
            id: content_hash(&raw_text),
            raw_text,
            meta: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    ExtractionFailed,
    EvalFailed,
}

impl EvalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::ExtractionFailed => "extraction_failed",
            Self::EvalFailed => "eval_failed",
        }
    }
}

impl fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A prompt-score tuple before the store assigns it a sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDraft {
    pub prompt_id: String,
    pub prompt_text: String,
    pub agent_id: String,
    pub baseline_rig: f64,
    pub extended_rig: f64,
    pub relative_score: f64,
    pub eval_size: u64,
    pub repeats: u32,
    pub status: EvalStatus,
    pub created_at: DateTime<Utc>,
}

impl ScoreDraft {
    /// A successful evaluation; the relative score is derived, never supplied.
    pub fn ok(
        template: &PromptTemplate,
        agent_id: &str,
        baseline_rig: f64,
        extended_rig: f64,
        eval_size: u64,
        repeats: u32,
    ) -> Self {
        Self {
            prompt_id: template.id.clone(),
            prompt_text: template.user_template.clone(),
            agent_id: agent_id.to_string(),
            baseline_rig,
            extended_rig,
            relative_score: extended_rig - baseline_rig,
            eval_size,
            repeats,
            status: EvalStatus::Ok,
            created_at: now(),
        }
    }

    pub fn failed(template: &PromptTemplate, agent_id: &str, status: EvalStatus) -> Self {
        Self {
            prompt_id: template.id.clone(),
            prompt_text: template.user_template.clone(),
            agent_id: agent_id.to_string(),
            baseline_rig: 0.0,
            extended_rig: 0.0,
            relative_score: 0.0,
            eval_size: 1,
            repeats: 1,
            status,
            created_at: now(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.baseline_rig, self.extended_rig, self.relative_score]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite score".into());
        }
        if self.baseline_rig > 1.0 || self.extended_rig > 1.0 {
            return Err("RIG above 1".into());
        }
        if self.status == EvalStatus::Ok
            && self.relative_score != self.extended_rig - self.baseline_rig
        {
            return Err("relative_score must equal extended_rig - baseline_rig".into());
        }
        if self.eval_size == 0 || self.repeats == 0 {
            return Err("eval_size and repeats must be positive".into());
        }
        if self.prompt_id.is_empty() {
            return Err("empty prompt_id".into());
        }
        Ok(())
    }
}

/// A prompt-score tuple as stored in the shared memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub seq: u64,
    pub prompt_id: String,
    pub prompt_text: String,
    pub agent_id: String,
    pub baseline_rig: f64,
    pub extended_rig: f64,
    pub relative_score: f64,
    pub eval_size: u64,
    pub repeats: u32,
    pub status: EvalStatus,
    pub created_at: DateTime<Utc>,
}

impl ScoreRecord {
    pub fn from_draft(seq: u64, draft: ScoreDraft) -> Self {
        Self {
            seq,
            prompt_id: draft.prompt_id,
            prompt_text: draft.prompt_text,
            agent_id: draft.agent_id,
            baseline_rig: draft.baseline_rig,
            extended_rig: draft.extended_rig,
            relative_score: draft.relative_score,
            eval_size: draft.eval_size,
            repeats: draft.repeats,
            status: draft.status,
            created_at: draft.created_at,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }
}
