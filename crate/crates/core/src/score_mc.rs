//! Reference-free truthfulness scoring by answer resampling.
//!
//! Each claim's question is answered `n` times at temperature 1.0; answers
//! are binned by equivalence and the claim's confidence is the fraction of
//! answers in the largest bin (or the negated entropy over bin fractions).
//! A response's score is the mean over its claims.

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::claims::{default_tagger, resolve_overlaps, Claim, ExtractionMode, SpanTagger};
use crate::prompts;
use crate::text::ContentWords;
use serde::{Deserialize, Serialize};
use std::fmt;

pub use crate::text::normalize;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("judge output is neither affirmative nor negative: {0:?}")]
    UnparseableJudgment(String),
    #[error("claim `{0}` has no question; atomic scoring needs converted questions")]
    MissingQuestion(String),
    #[error("claim `{0}` has no span; entity scoring needs span claims")]
    MissingSpan(String),
    #[error("n_samples must be >= 2, got {0}")]
    TooFewSamples(usize),
    #[error("cannot bin an empty sample list")]
    EmptySamples,
    #[error("LLM equivalence needs a judge backend")]
    MissingJudge,
}

pub const DEFAULT_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSample {
    pub claim_id: String,
    pub index: usize,
    pub text: String,
    pub normalized: ContentWords,
}

impl AnswerSample {
    pub fn new(claim_id: &str, index: usize, text: &str) -> Self {
        Self {
            claim_id: claim_id.to_string(),
            index,
            text: text.to_string(),
            normalized: normalize(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bin {
    pub representative: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinSet {
    pub claim_id: String,
    pub bins: Vec<Bin>,
    pub n_samples: usize,
}

impl BinSet {
    pub fn sizes(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.members.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimConfidence {
    pub claim_id: String,
    pub max_conf: f64,
    pub neg_entropy: f64,
    pub n_samples: usize,
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    McMaxconf,
    McEntropy,
    Fs,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::McMaxconf => "mc_maxconf",
            ScoreMethod::McEntropy => "mc_entropy",
            ScoreMethod::Fs => "fs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Maxconf,
    Entropy,
}

impl Metric {
    pub fn method(self) -> ScoreMethod {
        match self {
            Metric::Maxconf => ScoreMethod::McMaxconf,
            Metric::Entropy => ScoreMethod::McEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivMode {
    #[default]
    Heuristic,
    Llm,
}

/// Per-claim detail stored alongside a response score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClaimDetail {
    Mc {
        claim_id: String,
        max_conf: f64,
        neg_entropy: f64,
        bins: Vec<usize>,
    },
    Fs {
        claim_id: String,
        supported: bool,
        context_chunk_ids: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthfulnessScore {
    pub response_id: String,
    pub method: ScoreMethod,
    /// `None` when the response has no claims.
    pub value: Option<f64>,
    pub n_claims: usize,
    pub per_claim: Vec<ClaimDetail>,
}

impl TruthfulnessScore {
    pub fn is_scored(&self) -> bool {
        self.value.is_some()
    }

    /// Mean of the chosen metric over claim confidences.
    pub fn from_confidences(response_id: &str, metric: Metric, confs: &[ClaimConfidence]) -> Self {
        let value = (!confs.is_empty()).then(|| {
            let sum: f64 = confs
                .iter()
                .map(|c| match metric {
                    Metric::Maxconf => c.max_conf,
                    Metric::Entropy => c.neg_entropy,
                })
                .sum();
            sum / confs.len() as f64
        });
        Self {
            response_id: response_id.to_string(),
            method: metric.method(),
            value,
            n_claims: confs.len(),
            per_claim: confs
                .iter()
                .map(|c| ClaimDetail::Mc {
                    claim_id: c.claim_id.clone(),
                    max_conf: c.max_conf,
                    neg_entropy: c.neg_entropy,
                    bins: c.bins.clone(),
                })
                .collect(),
        }
    }
}

/// Same content-word set. Two answers with no content words are equivalent.
pub fn heuristic_equiv(a: &AnswerSample, b: &AnswerSample) -> bool {
    a.normalized == b.normalized
}

/// Interprets a yes/no style judgment.
pub fn parse_equivalence(output: &str) -> Result<bool, ScoreError> {
    let o = output.trim().to_lowercase();
    if o.starts_with("yes") || o.starts_with("equivalent") {
        Ok(true)
    } else if o.starts_with("no") {
        Ok(false)
    } else {
        Err(ScoreError::UnparseableJudgment(output.to_string()))
    }
}

pub fn equivalence_request(
    backend: &str,
    question: &str,
    a: &AnswerSample,
    b: &AnswerSample,
) -> GenerationRequest {
    GenerationRequest::new(
        backend,
        prompts::fill(
            prompts::EQUIVALENCE_JUDGE,
            &[
                ("question", question),
                ("answer_a", a.text.trim()),
                ("answer_b", b.text.trim()),
            ],
        ),
    )
    .max_tokens(8)
}

/// Asks a judge backend whether two answers agree. Judgments are cached by
/// the client like any other deterministic request.
pub fn llm_equiv(
    client: &Client,
    judge_backend: &str,
    question: &str,
    a: &AnswerSample,
    b: &AnswerSample,
) -> Result<bool, ScoreError> {
    let out = client.generate(&equivalence_request(judge_backend, question, a, b))?;
    parse_equivalence(&out.text)
}

/// Greedy binning in index order: a sample joins the first bin whose
/// representative it matches, otherwise it founds a new bin.
pub fn bin_answers<F>(samples: &[AnswerSample], mut equiv: F) -> Result<BinSet, ScoreError>
where
    F: FnMut(&AnswerSample, &AnswerSample) -> Result<bool, ScoreError>,
{
    let first = samples.first().ok_or(ScoreError::EmptySamples)?;
    let mut bins: Vec<Bin> = Vec::new();
    for (pos, sample) in samples.iter().enumerate() {
        let mut placed = false;
        for bin in bins.iter_mut() {
            if equiv(sample, &samples[bin.representative])? {
                bin.members.push(pos);
                placed = true;
                break;
            }
        }
        if !placed {
            bins.push(Bin {
                representative: pos,
                members: vec![pos],
            });
        }
    }
    Ok(BinSet {
        claim_id: first.claim_id.clone(),
        bins,
        n_samples: samples.len(),
    })
}

pub fn bin_heuristic(samples: &[AnswerSample]) -> Result<BinSet, ScoreError> {
    bin_answers(samples, |a, b| Ok(heuristic_equiv(a, b)))
}

/// Largest-bin fraction and negated natural-log entropy of the bin fractions.
pub fn claim_confidence(bins: &BinSet) -> ClaimConfidence {
    let sizes = bins.sizes();
    let n = bins.n_samples as f64;
    let largest = sizes.iter().copied().max().unwrap_or(0) as f64;
    let neg_entropy = sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    ClaimConfidence {
        claim_id: bins.claim_id.clone(),
        max_conf: largest / n,
        // A single bin yields exactly 0 rather than -0.
        neg_entropy: if sizes.len() <= 1 { 0.0 } else { neg_entropy },
        n_samples: bins.n_samples,
        bins: sizes,
    }
}

/// Settings shared by both resampling routes.
#[derive(Debug, Clone)]
pub struct McSettings {
    pub answer_backend: String,
    pub judge_backend: Option<String>,
    pub n_samples: usize,
    pub metric: Metric,
    pub equiv: EquivMode,
    pub temperature: f64,
    pub answer_max_tokens: u32,
    pub seed: Option<u64>,
    pub max_in_flight: usize,
}

impl McSettings {
    pub fn new(answer_backend: &str) -> Self {
        Self {
            answer_backend: answer_backend.to_string(),
            judge_backend: None,
            n_samples: DEFAULT_SAMPLES,
            metric: Metric::Maxconf,
            equiv: EquivMode::Heuristic,
            temperature: 1.0,
            answer_max_tokens: 32,
            seed: None,
            max_in_flight: 8,
        }
    }

    fn check(&self) -> Result<(), ScoreError> {
        if self.n_samples < 2 {
            return Err(ScoreError::TooFewSamples(self.n_samples));
        }
        if self.equiv == EquivMode::Llm && self.judge_backend.is_none() {
            return Err(ScoreError::MissingJudge);
        }
        Ok(())
    }

    fn sample_request(
        &self,
        prompt: String,
        index: usize,
        max_tokens: u32,
        stop: Vec<String>,
    ) -> GenerationRequest {
        GenerationRequest::new(&self.answer_backend, prompt)
            .temperature(self.temperature)
            .max_tokens(max_tokens)
            .stop(stop)
            .sample_index(index as u32)
            .seed(self.seed)
    }
}

pub fn answer_prompt(question: &str) -> String {
    prompts::fill(prompts::ANSWER_FEWSHOT, &[("question", question)])
}

/// Bins every claim's samples and averages the chosen metric.
fn score_from_samples(
    client: &Client,
    settings: &McSettings,
    response_id: &str,
    per_claim: Vec<(String, Option<String>, Vec<AnswerSample>)>,
) -> Result<TruthfulnessScore, ScoreError> {
    let mut confs = Vec::with_capacity(per_claim.len());
    for (_, question, samples) in &per_claim {
        let bins = match (settings.equiv, question) {
            (EquivMode::Llm, Some(q)) => {
                let judge = settings
                    .judge_backend
                    .as_deref()
                    .ok_or(ScoreError::MissingJudge)?;
                bin_answers(samples, |a, b| llm_equiv(client, judge, q, a, b))?
            }
            _ => bin_heuristic(samples)?,
        };
        confs.push(claim_confidence(&bins));
    }
    Ok(TruthfulnessScore::from_confidences(
        response_id,
        settings.metric,
        &confs,
    ))
}

/// Atomic-question route: every claim must carry its question.
pub fn score_response_mc(
    client: &Client,
    settings: &McSettings,
    response_id: &str,
    claims: &[Claim],
) -> Result<TruthfulnessScore, ScoreError> {
    settings.check()?;
    let mut reqs = Vec::with_capacity(claims.len() * settings.n_samples);
    for claim in claims {
        let q = claim
            .question
            .as_deref()
            .ok_or_else(|| ScoreError::MissingQuestion(claim.id.clone()))?;
        let prompt = answer_prompt(q);
        for i in 0..settings.n_samples {
            reqs.push(settings.sample_request(
                prompt.clone(),
                i,
                settings.answer_max_tokens,
                vec!["\n".into()],
            ));
        }
    }
    let outs = client.generate_all(&reqs, settings.max_in_flight)?;
    let per_claim = claims
        .iter()
        .zip(outs.chunks(settings.n_samples.max(1)))
        .map(|(claim, chunk)| {
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(i, r)| AnswerSample::new(&claim.id, i, r.text.trim()))
                .collect();
            (claim.id.clone(), claim.question.clone(), samples)
        })
        .collect();
    score_from_samples(client, settings, response_id, per_claim)
}

/// Extra tokens allowed beyond the original span's length when resampling it.
pub const SPAN_TOKEN_SLACK: u32 = 5;

/// Candidate answer inside a continuation: the first span (of the same
/// extraction mode) that reaches past the prefix, or the whole trimmed
/// continuation when none is found.
pub fn continuation_answer(prefix: &str, continuation: &str, tagger: &dyn SpanTagger) -> String {
    let joined = format!("{prefix}{continuation}");
    let boundary = prefix.len();
    resolve_overlaps(tagger.tag(&joined))
        .into_iter()
        .find(|&(_, end)| end > boundary)
        .map(|(start, end)| joined[start.max(boundary)..end].trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| continuation.trim().to_string())
}

/// Span-resampling route: the response is truncated at each span and the
/// backend continues it; the continued span plays the role of the answer.
pub fn score_response_entity(
    client: &Client,
    settings: &McSettings,
    response_id: &str,
    response_text: &str,
    spans: &[Claim],
    mode: ExtractionMode,
) -> Result<TruthfulnessScore, ScoreError> {
    settings.check()?;
    let tagger = default_tagger(mode);
    let mut prefixes = Vec::with_capacity(spans.len());
    let mut reqs = Vec::with_capacity(spans.len() * settings.n_samples);
    for claim in spans {
        let (start, _) = claim
            .span
            .ok_or_else(|| ScoreError::MissingSpan(claim.id.clone()))?;
        let prefix: String = response_text.chars().take(start).collect();
        let cap = claim.text.split_whitespace().count() as u32 + SPAN_TOKEN_SLACK;
        for i in 0..settings.n_samples {
            reqs.push(settings.sample_request(prefix.clone(), i, cap, Vec::new()));
        }
        prefixes.push(prefix);
    }
    let outs = client.generate_all(&reqs, settings.max_in_flight)?;
    let per_claim = spans
        .iter()
        .zip(&prefixes)
        .zip(outs.chunks(settings.n_samples.max(1)))
        .map(|((claim, prefix), chunk)| {
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    AnswerSample::new(
                        &claim.id,
                        i,
                        &continuation_answer(prefix, &r.text, tagger.as_ref()),
                    )
                })
                .collect();
            (claim.id.clone(), None, samples)
        })
        .collect();
    let heuristic = McSettings {
        equiv: EquivMode::Heuristic,
        ..settings.clone()
    };
    score_from_samples(client, &heuristic, response_id, per_claim)
}
