//! Preference pairs and SFT targets from scored responses.
//!
//! For each prompt, every unordered pair of scored responses whose scores
//! differ by more than `tie_epsilon` becomes one preference pair, oriented
//! higher score first. Equal-score pairs are dropped and counted. All
//! sampled responses become SFT targets.

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::corpus::{PromptRecord, Split};
use crate::prompts;
use crate::score_mc::{ScoreMethod, TruthfulnessScore};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum PrefsError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid pairing config: {0}")]
    Config(String),
    #[error("scores mix methods {0} and {1}")]
    MixedMethods(ScoreMethod, ScoreMethod),
    #[error("response `{0}` belongs to the test split and cannot enter a preference pair")]
    TestSplitLeak(String),
    #[error("score for response `{0}` has no matching response")]
    UnknownResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub prompt_id: String,
    pub entity_id: String,
    pub split: Split,
    pub sample_index: u32,
    pub prompt: String,
    pub text: String,
}

pub fn response_id(prompt_id: &str, index: u32) -> String {
    format!("{prompt_id}-r{index}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingConfig {
    pub n_responses: usize,
    pub temperature: f64,
    pub tie_epsilon: f64,
    pub method: ScoreMethod,
}

pub const DEFAULT_TIE_EPSILON: f64 = 1e-9;

impl PairingConfig {
    pub fn new(n_responses: usize, method: ScoreMethod) -> Self {
        Self {
            n_responses,
            temperature: 1.0,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            method,
        }
    }

    pub fn validate(&self) -> Result<(), PrefsError> {
        if self.n_responses < 2 {
            return Err(PrefsError::Config(format!(
                "n_responses must be >= 2, got {}",
                self.n_responses
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(PrefsError::Config("temperature must be >= 0".into()));
        }
        if !self.tie_epsilon.is_finite() || self.tie_epsilon < 0.0 {
            return Err(PrefsError::Config("tie_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sampling knobs that are not part of the pairing contract.
#[derive(Debug, Clone)]
pub struct SamplingOptions {
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub max_in_flight: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            seed: None,
            max_in_flight: 8,
        }
    }
}

/// Draws `cfg.n_responses` responses per prompt with distinct sample
/// indices. Prompts to base models are wrapped in the dataset's few-shot
/// template and stop at the first blank line.
pub fn sample_responses(
    client: &Client,
    backend: &str,
    prompts_in: &[PromptRecord],
    cfg: &PairingConfig,
    opts: &SamplingOptions,
) -> Result<Vec<Response>, PrefsError> {
    cfg.validate()?;
    let base_model = client.backend(backend)?.base_model;
    let mut reqs = Vec::with_capacity(prompts_in.len() * cfg.n_responses);
    for p in prompts_in {
        let (text, stop) = if base_model {
            (
                prompts::fewshot_wrap(p.dataset, &p.text),
                vec!["\n\n".to_string()],
            )
        } else {
            (p.text.clone(), Vec::new())
        };
        for i in 0..cfg.n_responses {
            reqs.push(
                GenerationRequest::new(backend, text.clone())
                    .temperature(cfg.temperature)
                    .max_tokens(opts.max_tokens)
                    .stop(stop.clone())
                    .sample_index(i as u32)
                    .seed(opts.seed),
            );
        }
    }
    let outs = client.generate_all(&reqs, opts.max_in_flight)?;
    let mut out = Vec::with_capacity(outs.len());
    for (p, chunk) in prompts_in.iter().zip(outs.chunks(cfg.n_responses)) {
        for (i, r) in chunk.iter().enumerate() {
            let i = i as u32;
            out.push(Response {
                id: response_id(&p.id, i),
                prompt_id: p.id.clone(),
                entity_id: p.entity_id.clone(),
                split: p.split,
                sample_index: i,
                prompt: p.text.clone(),
                text: r.text.trim().to_string(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub prompt_id: String,
    pub chosen_id: String,
    pub rejected_id: String,
    pub score_chosen: f64,
    pub score_rejected: f64,
    pub method: ScoreMethod,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Pairs dropped because their scores were within `tie_epsilon`.
    pub ties: usize,
    /// Responses left out of pairing because they had no claims.
    pub unscored: usize,
}

/// Orients every pair of scored responses per prompt. Output is grouped by
/// prompt id, then ordered by the (sample index, id) of the two responses.
pub fn build_pairs(
    scored: &[(Response, TruthfulnessScore)],
    cfg: &PairingConfig,
) -> Result<PairSet, PrefsError> {
    cfg.validate()?;
    for (r, s) in scored {
        if s.method != cfg.method {
            return Err(PrefsError::MixedMethods(cfg.method, s.method));
        }
        if s.response_id != r.id {
            return Err(PrefsError::UnknownResponse(s.response_id.clone()));
        }
        if r.split != Split::Train {
            return Err(PrefsError::TestSplitLeak(r.id.clone()));
        }
    }

    let mut by_prompt: BTreeMap<&str, Vec<(&Response, f64)>> = BTreeMap::new();
    let mut set = PairSet::default();
    for (r, s) in scored {
        match s.value {
            Some(v) => by_prompt
                .entry(r.prompt_id.as_str())
                .or_default()
                .push((r, v)),
            None => set.unscored += 1,
        }
    }

    for group in by_prompt.values_mut() {
        group.sort_by(|a, b| (a.0.sample_index, &a.0.id).cmp(&(b.0.sample_index, &b.0.id)));
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, sa) = group[i];
                let (b, sb) = group[j];
                if (sa - sb).abs() <= cfg.tie_epsilon {
                    set.ties += 1;
                    continue;
                }
                let ((w, sw), (l, sl)) = if sa > sb {
                    ((a, sa), (b, sb))
                } else {
                    ((b, sb), (a, sa))
                };
                set.pairs.push(PreferencePair {
                    prompt: w.prompt.clone(),
                    chosen: w.text.clone(),
                    rejected: l.text.clone(),
                    prompt_id: w.prompt_id.clone(),
                    chosen_id: w.id.clone(),
                    rejected_id: l.id.clone(),
                    score_chosen: sw,
                    score_rejected: sl,
                    method: cfg.method,
                });
            }
        }
    }
    Ok(set)
}

/// Joins responses with their scores by response id. Responses without a
/// score are skipped; a score without a response is an error.
pub fn join_scores(
    responses: &[Response],
    scores: &[TruthfulnessScore],
) -> Result<Vec<(Response, TruthfulnessScore)>, PrefsError> {
    let mut by_id: BTreeMap<&str, &TruthfulnessScore> = BTreeMap::new();
    for s in scores {
        by_id.insert(s.response_id.as_str(), s);
    }
    let known: std::collections::HashSet<&str> = responses.iter().map(|r| r.id.as_str()).collect();
    if let Some(orphan) = scores
        .iter()
        .find(|s| !known.contains(s.response_id.as_str()))
    {
        return Err(PrefsError::UnknownResponse(orphan.response_id.clone()));
    }
    Ok(responses
        .iter()
        .filter_map(|r| by_id.get(r.id.as_str()).map(|s| (r.clone(), (*s).clone())))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

/// One SFT record per sampled response, scored or not.
pub fn emit_sft_targets(responses: &[Response]) -> Vec<SftRecord> {
    responses
        .iter()
        .map(|r| SftRecord {
            prompt: r.prompt.clone(),
            completion: r.text.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, MockEntry, MockTransport, ResponseCache};
    use crate::corpus::Dataset;

    fn resp(prompt: &str, i: u32, split: Split) -> Response {
        Response {
            id: response_id(prompt, i),
            prompt_id: prompt.into(),
            entity_id: "e".into(),
            split,
            sample_index: i,
            prompt: format!("prompt {prompt}"),
            text: format!("text {prompt} {i}"),
        }
    }

    fn score(r: &Response, v: Option<f64>) -> TruthfulnessScore {
        TruthfulnessScore {
            response_id: r.id.clone(),
            method: ScoreMethod::Fs,
            value: v,
            n_claims: v.map_or(0, |_| 1),
            per_claim: Vec::new(),
        }
    }

    fn scored(values: &[Option<f64>]) -> Vec<(Response, TruthfulnessScore)> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let r = resp("p", i as u32, Split::Train);
                let s = score(&r, *v);
                (r, s)
            })
            .collect()
    }

    #[test]
    fn tie_is_dropped() {
        let cfg = PairingConfig::new(3, ScoreMethod::Fs);
        let set = build_pairs(&scored(&[Some(0.9), Some(0.9), Some(0.5)]), &cfg).unwrap();
        assert_eq!(set.ties, 1);
        let ids: Vec<_> = set
            .pairs
            .iter()
            .map(|p| (p.chosen_id.as_str(), p.rejected_id.as_str()))
            .collect();
        assert_eq!(ids, [("p-r0", "p-r2"), ("p-r1", "p-r2")]);
    }

    #[test]
    fn all_equal_gives_only_ties() {
        let cfg = PairingConfig::new(5, ScoreMethod::Fs);
        let set = build_pairs(&scored(&[Some(0.5); 5]), &cfg).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.ties, 10);
    }

    #[test]
    fn orientation_is_higher_first() {
        let cfg = PairingConfig::new(2, ScoreMethod::Fs);
        let set = build_pairs(&scored(&[Some(0.2), Some(0.7)]), &cfg).unwrap();
        let p = &set.pairs[0];
        assert_eq!(
            (p.chosen_id.as_str(), p.rejected_id.as_str()),
            ("p-r1", "p-r0")
        );
        assert_eq!((p.score_chosen, p.score_rejected), (0.7, 0.2));
        assert_eq!(p.chosen, "text p 1");
    }

    #[test]
    fn unscored_never_pair() {
        let cfg = PairingConfig::new(3, ScoreMethod::Fs);
        let set = build_pairs(&scored(&[Some(0.2), None, Some(0.7)]), &cfg).unwrap();
        assert_eq!(set.pairs.len(), 1);
        assert_eq!(set.unscored, 1);
    }

    #[test]
    fn epsilon_widens_ties() {
        let mut cfg = PairingConfig::new(2, ScoreMethod::Fs);
        cfg.tie_epsilon = 0.1;
        let set = build_pairs(&scored(&[Some(0.50), Some(0.55)]), &cfg).unwrap();
        assert_eq!((set.pairs.len(), set.ties), (0, 1));
    }

    #[test]
    fn mixed_methods_rejected() {
        let cfg = PairingConfig::new(2, ScoreMethod::Fs);
        let mut items = scored(&[Some(0.2), Some(0.7)]);
        items[1].1.method = ScoreMethod::McMaxconf;
        assert!(matches!(
            build_pairs(&items, &cfg),
            Err(PrefsError::MixedMethods(..))
        ));
    }

    #[test]
    fn test_split_cannot_leak() {
        let cfg = PairingConfig::new(2, ScoreMethod::Fs);
        let r = resp("p", 0, Split::Test);
        let s = score(&r, Some(1.0));
        assert!(matches!(
            build_pairs(&[(r, s)], &cfg),
            Err(PrefsError::TestSplitLeak(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(PairingConfig::new(1, ScoreMethod::Fs).validate().is_err());
        assert!(PairingConfig::new(2, ScoreMethod::Fs).validate().is_ok());
    }

    #[test]
    fn sft_targets_cover_every_response() {
        let responses: Vec<_> = (0..6).map(|i| resp("q", i, Split::Train)).collect();
        assert_eq!(emit_sft_targets(&responses).len(), 6);
        assert!(emit_sft_targets(&[]).is_empty());
    }

    #[test]
    fn prefs_schema() {
        let cfg = PairingConfig::new(2, ScoreMethod::Fs);
        let set = build_pairs(&scored(&[Some(0.25), Some(0.5)]), &cfg).unwrap();
        let json = serde_json::to_string(&set.pairs[0]).unwrap();
        assert_eq!(
            json,
            r#"{"prompt":"prompt p","chosen":"text p 1","rejected":"text p 0","prompt_id":"p","chosen_id":"p-r1","rejected_id":"p-r0","score_chosen":0.5,"score_rejected":0.25,"method":"fs"}"#
        );
    }

    fn sampling_client(base_model: bool) -> Client {
        let texts: Vec<String> = (0..10).map(|i| format!("bio {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let mut c = Client::new(ResponseCache::in_memory());
        let mut cfg = BackendConfig::mock("llama");
        cfg.base_model = base_model;
        c.register(
            cfg,
            Box::new(MockTransport::new(vec![MockEntry::contains(
                "Write a short biography of Yo-Yo Ma.",
                &refs,
            )])),
        )
        .unwrap();
        c
    }

    fn prompt() -> PromptRecord {
        PromptRecord {
            id: "yyma-p0".into(),
            entity_id: "yyma".into(),
            text: "Write a short biography of Yo-Yo Ma.".into(),
            dataset: Dataset::Biographies,
            split: Split::Train,
        }
    }

    #[test]
    fn samples_in_index_order() {
        for base in [false, true] {
            let c = sampling_client(base);
            let cfg = PairingConfig::new(10, ScoreMethod::Fs);
            let out = sample_responses(&c, "llama", &[prompt()], &cfg, &SamplingOptions::default())
                .unwrap();
            let texts: Vec<_> = out.iter().map(|r| r.text.as_str()).collect();
            assert_eq!(
                texts,
                (0..10).map(|i| format!("bio {i}")).collect::<Vec<_>>()
            );
            assert_eq!(out[3].id, "yyma-p0-r3");
            assert_eq!(out[3].prompt, "Write a short biography of Yo-Yo Ma.");
        }
    }

    #[test]
    fn base_model_prompts_are_wrapped() {
        let c = sampling_client(true);
        let cfg = PairingConfig::new(2, ScoreMethod::Fs);
        sample_responses(&c, "llama", &[prompt()], &cfg, &SamplingOptions::default()).unwrap();
        let wrapped = GenerationRequest::new(
            "llama",
            prompts::fewshot_wrap(Dataset::Biographies, &prompt().text),
        )
        .temperature(1.0)
        .stop(vec!["\n\n".into()]);
        assert!(c.generate(&wrapped).unwrap().cached);
    }

    #[test]
    fn one_response_is_a_config_error() {
        let c = sampling_client(false);
        let cfg = PairingConfig::new(1, ScoreMethod::Fs);
        assert!(matches!(
            sample_responses(&c, "llama", &[prompt()], &cfg, &SamplingOptions::default()),
            Err(PrefsError::Config(_))
        ));
    }
}
