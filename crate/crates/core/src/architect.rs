//! Prompt refinement: feedback from memory plus the base prompt go to the
//! strong backend, whose reply becomes the next candidate template.

use std::sync::Arc;

use rand::Rng;
use regex::Regex;
use std::sync::LazyLock;
use thiserror::Error;

use crate::domain::{validate_template, PromptTemplate, TemplateError, PLACEHOLDER};
use crate::llm::{ChatBackend, ChatRequest, LlmError};
use crate::memory::{MemoryError, MemoryStore};

pub const FEEDBACK_SIZE: usize = 5;

pub const INSTRUCTION_TEMPLATE: &str = "You are tasked with rewriting the following USER prompt to achieve higher accuracy when extracting content for building click-through-rate models and any other comma-separated multi-value feature (topics, persona, etc.). Be creative, keep the output format unchanged. Think outside the scope of the existing prompts linked below. Think hard about the implications of your change. Only return the new USER prompt.
{context_block}
---
Original USER prompt: {base_prompt}
---";

pub const BEST_HEADER: &str = "BEST PROMPTS (score)";
pub const WORST_HEADER: &str = "WORST PROMPTS (score)";
pub const EMPTY_CONTEXT: &str = "No evaluated prompts yet.";
pub const ENTRY_SEPARATOR: &str = "---";

/// Appended to replies that lost the placeholder.
pub const REPAIR_SUFFIX: &str = " <begin_raw_text> {raw_text} <end_raw_text>";

#[derive(Debug, Error)]
pub enum ArchitectError {
    #[error(transparent)]
    Storage(#[from] MemoryError),
    #[error("architect backend: {0}")]
    Backend(#[from] LlmError),
    #[error("refinement rejected: {0}")]
    RefinementRejected(TemplateError),
}

/// Few-shot feedback: best prompts descending, worst ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeedbackContext {
    pub best: Vec<(f64, String)>,
    pub worst: Vec<(f64, String)>,
}

impl FeedbackContext {
    pub fn from_memory(memory: &MemoryStore) -> Result<Self, MemoryError> {
        let pairs = |v: Vec<crate::domain::ScoreRecord>| {
            v.into_iter()
                .map(|r| (r.relative_score, r.prompt_text))
                .collect()
        };
        Ok(Self {
            best: pairs(memory.top_k(FEEDBACK_SIZE)?),
            worst: pairs(memory.bottom_k(FEEDBACK_SIZE)?),
        })
    }

    pub fn render(&self) -> String {
        if self.best.is_empty() && self.worst.is_empty() {
            return EMPTY_CONTEXT.to_string();
        }
        let section = |header: &str, entries: &[(f64, String)]| {
            let body = entries
                .iter()
                .map(|(score, text)| format!("[score={score:.6}] {text}"))
                .collect::<Vec<_>>()
                .join(&format!("\n{ENTRY_SEPARATOR}\n"));
            format!("{header}\n{body}")
        };
        format!(
            "{}\n{}",
            section(BEST_HEADER, &self.best),
            section(WORST_HEADER, &self.worst)
        )
    }
}

pub fn build_context_block(memory: &MemoryStore) -> Result<String, MemoryError> {
    Ok(FeedbackContext::from_memory(memory)?.render())
}

/// Fills the instruction template in one pass: placeholder-like text inside
/// either argument is never expanded.
pub fn build_instruction(base_prompt: &str, context_block: &str) -> String {
    let (head, rest) = INSTRUCTION_TEMPLATE
        .split_once("{context_block}")
        .expect("template has context slot");
    let (middle, tail) = rest.split_once("{base_prompt}").expect("template has base slot");
    [head, context_block, middle, base_prompt, tail].concat()
}

/// Epsilon-greedy choice of the prompt to refine next: the best ok prompt
/// with probability `1 - epsilon`, else a uniformly drawn distinct ok prompt.
/// An empty store yields `seed`.
pub fn select_base(
    memory: &MemoryStore,
    rng: &mut impl Rng,
    epsilon: f64,
    seed: &str,
) -> Result<String, MemoryError> {
    let prompts = memory.ok_prompts()?;
    if prompts.is_empty() {
        return Ok(seed.to_string());
    }
    if rng.random::<f64>() < epsilon {
        return Ok(prompts[rng.random_range(0..prompts.len())].clone());
    }
    Ok(memory
        .top_k(1)?
        .pop()
        .map(|r| r.prompt_text)
        .expect("non-empty ok set has a best record"))
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[^\n`]*\n?(.*?)\n?```").expect("fence regex"));
static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:(?:new|revised|refined|updated|improved|rewritten)\s+)?(?:user\s+)?prompt\s*:\s*")
        .expect("label regex")
});

/// Deterministic cleanup of a decorated reply: one layer of code fences,
/// then a leading "USER prompt:"-style label, then wrapping quotes.
pub fn extract_reply(reply: &str) -> String {
    let mut text = match FENCE.captures(reply) {
        Some(c) => c[1].to_string(),
        None => reply.to_string(),
    };
    text = LABEL.replace(text.trim(), "").to_string();
    let trimmed = text.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('`', '`')] {
        if trimmed.len() >= 2 && trimmed.starts_with(open) && trimmed.ends_with(close) {
            let inner = &trimmed[open.len_utf8()..trimmed.len() - close.len_utf8()];
            return inner.trim().to_string();
        }
    }
    trimmed.to_string()
}

/// Validates an extracted reply, repairing a missing placeholder once.
pub fn accept_reply(text: &str) -> Result<PromptTemplate, TemplateError> {
    match validate_template(text) {
        Err(TemplateError::MissingPlaceholder) => {
            let repaired = format!("{}{REPAIR_SUFFIX}", text.trim_end());
            debug_assert_eq!(repaired.matches(PLACEHOLDER).count(), 1);
            validate_template(&repaired)
        }
        other => other,
    }
}

#[derive(Clone)]
pub struct Architect {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
    pub max_output_tokens: u32,
}

impl Architect {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            model: String::new(),
            max_output_tokens: 2048,
        }
    }

    /// Asks the backend for a rewrite of `base` given the current memory
    /// feedback. The result is a child of `base`.
    pub fn refine(
        &self,
        base: &PromptTemplate,
        memory: &MemoryStore,
        temperature: f64,
    ) -> Result<PromptTemplate, ArchitectError> {
        let context = build_context_block(memory)?;
        let request = ChatRequest {
            system: String::new(),
            user: build_instruction(&base.user_template, &context),
            temperature,
            max_output_tokens: self.max_output_tokens,
            model: self.model.clone(),
        };
        let reply = self.backend.complete(&request)?;
        let candidate =
            accept_reply(&extract_reply(&reply.text)).map_err(ArchitectError::RefinementRejected)?;
        Ok(candidate.refined_from(base).with_agent(base.agent_id.clone()))
    }
}
