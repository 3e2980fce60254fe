//! Claim extraction.
//!
//! Two routes: an instruction-tuned backend decomposes a response into a list
//! of atomic facts (each later rephrased into a question), or an offline
//! shallow tagger pulls named-entity / noun-chunk spans out of the text.

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::corpus::Dataset;
use crate::prompts;
use crate::text::{clean_token, is_stop_word};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClaimError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("extraction output is not a recognizable list: {0:?}")]
    UnparseableExtraction(String),
    #[error("question conversion for claim `{0}` returned an empty question")]
    EmptyQuestion(String),
    #[error("claim `{0}` has empty text")]
    EmptyClaim(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    #[serde(rename = "claim_id")]
    pub id: String,
    pub response_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// Character (not byte) offsets `[start, end)` into the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

pub fn claim_id(response_id: &str, index: usize) -> String {
    format!("{response_id}-c{index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    #[serde(alias = "atomic_llm")]
    Atomic,
    #[serde(alias = "named_entity")]
    Entity,
    #[serde(alias = "noun_chunk")]
    Chunk,
}

impl ExtractionMode {
    pub fn is_offline(self) -> bool {
        !matches!(self, ExtractionMode::Atomic)
    }
}

static LIST_ITEM: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(?:\d+[.)]|-|•)\s+(.+?)\s*$").unwrap());

/// Parses a numbered or bulleted list (`1.`, `-`, `•` markers). Lines
/// without a marker are ignored; blank output is an empty list; non-blank
/// output with no list item at all is an error.
pub fn parse_claim_list(response_id: &str, output: &str) -> Result<Vec<Claim>, ClaimError> {
    let items: Vec<&str> = output
        .lines()
        .filter_map(|l| LIST_ITEM.captures(l).map(|c| c.get(1).unwrap().as_str()))
        .collect();
    if items.is_empty() && !output.trim().is_empty() {
        return Err(ClaimError::UnparseableExtraction(output.to_string()));
    }
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, text)| Claim {
            id: claim_id(response_id, i),
            response_id: response_id.to_string(),
            text: text.to_string(),
            question: None,
            span: None,
        })
        .collect())
}

/// Deterministic request for atomic-fact extraction.
pub fn extraction_request(
    backend: &str,
    response_text: &str,
    max_tokens: u32,
) -> GenerationRequest {
    GenerationRequest::new(
        backend,
        prompts::fill(
            prompts::EXTRACT_ATOMIC,
            &[("response", response_text.trim())],
        ),
    )
    .max_tokens(max_tokens)
}

/// Deterministic request for rephrasing one claim into a question.
pub fn question_request(
    backend: &str,
    claim: &Claim,
    subject: &str,
    object_pronoun: &str,
    dataset: Dataset,
    max_tokens: u32,
) -> GenerationRequest {
    GenerationRequest::new(
        backend,
        prompts::question_prompt(dataset, subject, object_pronoun, &claim.text),
    )
    .max_tokens(max_tokens)
}

/// First non-blank line of the backend output, trimmed.
pub fn parse_question(claim_id: &str, output: &str) -> Result<String, ClaimError> {
    output
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ClaimError::EmptyQuestion(claim_id.to_string()))
}

/// Atomic claims of a response via an instruction-tuned backend. An empty
/// response yields no claims and issues no call.
pub fn extract_claims_llm(
    client: &Client,
    backend: &str,
    response_id: &str,
    response_text: &str,
) -> Result<Vec<Claim>, ClaimError> {
    if response_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let max_tokens = client.backend(backend)?.max_tokens;
    let out = client.generate(&extraction_request(backend, response_text, max_tokens))?;
    parse_claim_list(response_id, &out.text)
}

pub fn claim_to_question(
    client: &Client,
    backend: &str,
    claim: &Claim,
    subject: &str,
    object_pronoun: &str,
    dataset: Dataset,
) -> Result<String, ClaimError> {
    if claim.text.trim().is_empty() {
        return Err(ClaimError::EmptyClaim(claim.id.clone()));
    }
    let max_tokens = client.backend(backend)?.max_tokens;
    let req = question_request(backend, claim, subject, object_pronoun, dataset, max_tokens);
    parse_question(&claim.id, &client.generate(&req)?.text)
}

/// Shallow span tagger. Returns byte ranges into `text`; overlaps are allowed
/// and resolved by [`extract_spans`].
pub trait SpanTagger: Send + Sync {
    fn tag(&self, text: &str) -> Vec<(usize, usize)>;
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    start: usize,
    end: usize,
    core: &'a str,
    sentence_start: bool,
    /// The raw token ends with punctuation that closes a phrase.
    breaks_after: bool,
}

fn tokens(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut sentence_start = true;
    let mut pos = 0;
    for raw in text.split_inclusive(char::is_whitespace) {
        let word = raw.trim_end();
        let lead = word.len()
            - word
                .trim_start_matches(|c: char| !c.is_alphanumeric())
                .len();
        let core = word.trim_matches(|c: char| !c.is_alphanumeric());
        if !core.is_empty() {
            let start = pos + lead;
            let last = word.chars().last().unwrap();
            out.push(Token {
                start,
                end: start + core.len(),
                core,
                sentence_start,
                breaks_after: !last.is_alphanumeric(),
            });
            sentence_start = matches!(last, '.' | '!' | '?');
        }
        pos += raw.len();
    }
    out
}

/// Maximal runs of capitalized tokens. A capitalized sentence-initial word
/// counts only when the next token continues the run; a sentence-initial
/// stop word ("The", "She", "In") never starts an entity.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapitalizedSequenceTagger;

impl SpanTagger for CapitalizedSequenceTagger {
    fn tag(&self, text: &str) -> Vec<(usize, usize)> {
        let toks = tokens(text);
        let capitalized = |t: &Token| t.core.chars().next().is_some_and(char::is_uppercase);
        let mut spans = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            if !capitalized(&toks[i]) {
                i += 1;
                continue;
            }
            let mut j = i;
            while j + 1 < toks.len()
                && !toks[j].breaks_after
                && !toks[j + 1].sentence_start
                && capitalized(&toks[j + 1])
            {
                j += 1;
            }
            let mut first = i;
            if toks[i].sentence_start && (j == i || is_stop_word(&clean_token(toks[i].core))) {
                first = i + 1;
            }
            if first <= j {
                spans.push((toks[first].start, toks[j].end));
            }
            i = j + 1;
        }
        spans
    }
}

/// Fallback noun-chunk chunker: maximal runs of non-stop-word tokens,
/// broken at punctuation. A real noun-phrase chunker can replace it through
/// [`SpanTagger`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ContentRunChunker;

impl SpanTagger for ContentRunChunker {
    fn tag(&self, text: &str) -> Vec<(usize, usize)> {
        let toks = tokens(text);
        let mut spans = Vec::new();
        let mut run: Option<(usize, usize)> = None;
        for t in &toks {
            if is_stop_word(&clean_token(t.core)) {
                if let Some(r) = run.take() {
                    spans.push(r);
                }
                continue;
            }
            run = Some(match run {
                Some((s, _)) if !t.sentence_start => (s, t.end),
                Some(r) => {
                    spans.push(r);
                    (t.start, t.end)
                }
                None => (t.start, t.end),
            });
            if t.breaks_after {
                spans.push(run.take().unwrap());
            }
        }
        spans.extend(run);
        spans
    }
}

pub fn default_tagger(mode: ExtractionMode) -> Box<dyn SpanTagger> {
    match mode {
        ExtractionMode::Chunk => Box::new(ContentRunChunker),
        _ => Box::new(CapitalizedSequenceTagger),
    }
}

/// Resolves overlapping byte spans leftmost-longest, in document order.
pub fn resolve_overlaps(mut spans: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    spans.retain(|(s, e)| s < e);
    spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out: Vec<(usize, usize)> = Vec::new();
    for s in spans {
        if out.last().is_none_or(|last| s.0 >= last.1) {
            out.push(s);
        }
    }
    out
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// Span claims of a response, with `span` set to character offsets.
pub fn extract_spans(
    response_id: &str,
    response_text: &str,
    tagger: &dyn SpanTagger,
) -> Vec<Claim> {
    resolve_overlaps(tagger.tag(response_text))
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| Claim {
            id: claim_id(response_id, i),
            response_id: response_id.to_string(),
            text: response_text[s..e].to_string(),
            question: None,
            span: Some((char_offset(response_text, s), char_offset(response_text, e))),
        })
        .collect()
}

/// Substring addressed by a character-offset span.
pub fn span_text(text: &str, span: (usize, usize)) -> Option<&str> {
    if span.1 < span.0 {
        return None;
    }
    let byte = |n: usize| {
        text.char_indices()
            .map(|(i, _)| i)
            .chain([text.len()])
            .nth(n)
    };
    text.get(byte(span.0)?..byte(span.1)?)
}
