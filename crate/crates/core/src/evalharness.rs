//! Per-response correct/incorrect fact counts and the dataset-level report.
//!
//! Each claim is first judged for relevance (when a relevance backend is
//! configured), then relevant claims are judged for support against the
//! reference. The percentage correct divides correct facts by all extracted
//! facts, and the report averages those per-response ratios.

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::claims::Claim;
use crate::corpus::{Dataset, ReferenceDoc};
use crate::prompts;
use crate::score_fs::{judge_all, FsError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Support(#[from] FsError),
    #[error("relevance verdict is not recognizable: {0:?}")]
    UnparseableRelevance(String),
    #[error("no responses with extracted facts to aggregate")]
    EmptyEvalSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub claim_id: String,
    pub relevant: bool,
    /// `None` for irrelevant claims, which are never support-judged.
    pub supported: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEval {
    pub response_id: String,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_irrelevant: usize,
    pub pct_correct: Option<f64>,
    #[serde(default)]
    pub claims: Vec<ClaimVerdict>,
}

impl ResponseEval {
    pub fn from_verdicts(response_id: &str, claims: Vec<ClaimVerdict>) -> Self {
        let n_irrelevant = claims.iter().filter(|c| !c.relevant).count();
        let n_correct = claims.iter().filter(|c| c.supported == Some(true)).count();
        let n_incorrect = claims.iter().filter(|c| c.supported == Some(false)).count();
        let total = n_correct + n_incorrect + n_irrelevant;
        Self {
            response_id: response_id.to_string(),
            n_correct,
            n_incorrect,
            n_irrelevant,
            pct_correct: (total > 0).then(|| n_correct as f64 / total as f64),
            claims,
        }
    }
}

pub fn parse_relevance(output: &str) -> Result<bool, EvalError> {
    let o = output.trim().to_lowercase();
    if o.starts_with("yes") || o.starts_with("relevant") {
        Ok(true)
    } else if o.starts_with("no") || o.starts_with("irrelevant") {
        Ok(false)
    } else {
        Err(EvalError::UnparseableRelevance(output.to_string()))
    }
}

pub fn relevance_request(backend: &str, question: &str, claim: &Claim) -> GenerationRequest {
    GenerationRequest::new(
        backend,
        prompts::fill(
            prompts::RELEVANCE_JUDGE,
            &[("question", question), ("fact", &claim.text)],
        ),
    )
    .max_tokens(4)
}

/// Everything needed to judge one response.
pub struct EvalInput<'a> {
    pub response_id: &'a str,
    pub question: &'a str,
    pub claims: &'a [Claim],
    pub doc: &'a ReferenceDoc,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub judge_backend: String,
    /// Skipped entirely when `None`; every claim then counts as relevant.
    pub relevance_backend: Option<String>,
    pub k_chunks: usize,
    pub max_in_flight: usize,
}

pub fn eval_response(
    client: &Client,
    settings: &EvalSettings,
    input: &EvalInput<'_>,
) -> Result<ResponseEval, EvalError> {
    let relevant: Vec<bool> = match &settings.relevance_backend {
        None => vec![true; input.claims.len()],
        Some(rb) => {
            let reqs: Vec<_> = input
                .claims
                .iter()
                .map(|c| relevance_request(rb, input.question, c))
                .collect();
            client
                .generate_all(&reqs, settings.max_in_flight)?
                .iter()
                .map(|r| parse_relevance(&r.text))
                .collect::<Result<_, _>>()?
        }
    };
    let to_judge: Vec<Claim> = input
        .claims
        .iter()
        .zip(&relevant)
        .filter(|(_, &r)| r)
        .map(|(c, _)| c.clone())
        .collect();
    let judgments = judge_all(
        client,
        &settings.judge_backend,
        &to_judge,
        input.doc,
        settings.k_chunks,
        settings.max_in_flight,
    )?;
    let mut judged = judgments.into_iter();
    let verdicts = input
        .claims
        .iter()
        .zip(&relevant)
        .map(|(c, &r)| ClaimVerdict {
            claim_id: c.id.clone(),
            relevant: r,
            supported: if r {
                judged.next().map(|j| j.supported)
            } else {
                None
            },
        })
        .collect();
    Ok(ResponseEval::from_verdicts(input.response_id, verdicts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset: Dataset,
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub mean_pct_correct: f64,
    /// Responses that contributed, i.e. those with at least one fact.
    pub n_responses: usize,
}

/// Means over responses with a defined percentage; the percentage is the
/// mean of per-response ratios, not a pooled ratio.
pub fn aggregate(
    model_id: &str,
    dataset: Dataset,
    evals: &[ResponseEval],
) -> Result<EvalReport, EvalError> {
    let scored: Vec<(&ResponseEval, f64)> = evals
        .iter()
        .filter_map(|e| e.pct_correct.map(|p| (e, p)))
        .collect();
    if scored.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let n = scored.len() as f64;
    let mean = |f: &dyn Fn(&(&ResponseEval, f64)) -> f64| scored.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset,
        mean_correct: mean(&|(e, _)| e.n_correct as f64),
        mean_incorrect: mean(&|(e, _)| e.n_incorrect as f64),
        mean_pct_correct: mean(&|(_, p)| *p),
        n_responses: scored.len(),
    })
}

pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("| Model | Dataset | # Correct | # Incorrect | % Correct |\n");
    out.push_str("|---|---|---:|---:|---:|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.3} |",
            r.model_id, r.dataset, r.mean_correct, r.mean_incorrect, r.mean_pct_correct
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, MockEntry, MockTransport, ResponseCache};
    use crate::corpus::chunk_reference;

    fn counts(e: &ResponseEval) -> (usize, usize, usize) {
        (e.n_correct, e.n_incorrect, e.n_irrelevant)
    }

    fn synthetic(id: &str, correct: usize, incorrect: usize) -> ResponseEval {
        let mut v = Vec::new();
        for i in 0..correct + incorrect {
            v.push(ClaimVerdict {
                claim_id: format!("{id}-c{i}"),
                relevant: true,
                supported: Some(i < correct),
            });
        }
        ResponseEval::from_verdicts(id, v)
    }

    fn claims(texts: &[&str]) -> Vec<Claim> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Claim {
                id: format!("r-c{i}"),
                response_id: "r".into(),
                text: t.to_string(),
                question: None,
                span: None,
            })
            .collect()
    }

    fn client() -> Client {
        let mut c = Client::new(ResponseCache::in_memory());
        c.register(
            BackendConfig::mock("judge"),
            Box::new(MockTransport::new(vec![
                MockEntry::contains("Claim: wrong", &["Not supported"]),
                MockEntry::contains("Claim:", &["Supported"]),
            ])),
        )
        .unwrap();
        c.register(
            BackendConfig::mock("rel"),
            Box::new(MockTransport::new(vec![
                MockEntry::contains("Fact: offtopic", &["No"]),
                MockEntry::contains("Fact:", &["Yes"]),
            ])),
        )
        .unwrap();
        c
    }

    fn settings(relevance: Option<&str>) -> EvalSettings {
        EvalSettings {
            judge_backend: "judge".into(),
            relevance_backend: relevance.map(String::from),
            k_chunks: 2,
            max_in_flight: 4,
        }
    }

    fn run(texts: &[&str], relevance: Option<&str>) -> ResponseEval {
        let doc = chunk_reference("Doc", "Some reference text about a person.", 50).unwrap();
        let cs = claims(texts);
        let input = EvalInput {
            response_id: "r",
            question: "Who is this person?",
            claims: &cs,
            doc: &doc,
        };
        eval_response(&client(), &settings(relevance), &input).unwrap()
    }

    #[test]
    fn three_of_four() {
        let e = run(&["a", "b", "c", "wrong"], None);
        assert_eq!(counts(&e), (3, 1, 0));
        assert_eq!(e.pct_correct, Some(0.75));
    }

    #[test]
    fn irrelevant_counts_against_pct() {
        let e = run(&["a", "b", "c", "wrong", "offtopic"], Some("rel"));
        assert_eq!(counts(&e), (3, 1, 1));
        assert_eq!(e.pct_correct, Some(0.6));
        assert_eq!(e.claims[4].supported, None);
    }

    #[test]
    fn relevance_skipped_without_backend() {
        let e = run(&["a", "offtopic"], None);
        assert_eq!(counts(&e), (2, 0, 0));
    }

    #[test]
    fn no_claims() {
        let e = run(&[], Some("rel"));
        assert_eq!(counts(&e), (0, 0, 0));
        assert_eq!(e.pct_correct, None);
    }

    #[test]
    fn per_response_averaging() {
        let r = aggregate(
            "m",
            Dataset::Biographies,
            &[synthetic("a", 3, 1), synthetic("b", 1, 1)],
        )
        .unwrap();
        assert_eq!(r.mean_pct_correct, 0.625);
        assert_eq!(r.mean_correct, 2.0);
        assert_eq!(r.mean_incorrect, 1.0);
        assert_eq!(r.n_responses, 2);
    }

    #[test]
    fn single_response_report() {
        let e = synthetic("a", 7, 2);
        let r = aggregate("m", Dataset::MedicalQa, std::slice::from_ref(&e)).unwrap();
        assert_eq!((r.mean_correct, r.mean_incorrect), (7.0, 2.0));
        assert_eq!(Some(r.mean_pct_correct), e.pct_correct);
    }

    #[test]
    fn unscored_responses_do_not_count() {
        let r = aggregate(
            "m",
            Dataset::Biographies,
            &[synthetic("a", 1, 1), synthetic("b", 0, 0)],
        )
        .unwrap();
        assert_eq!(r.n_responses, 1);
        assert_eq!(r.mean_pct_correct, 0.5);
        assert!(matches!(
            aggregate("m", Dataset::Biographies, &[]),
            Err(EvalError::EmptyEvalSet)
        ));
        assert!(matches!(
            aggregate("m", Dataset::Biographies, &[synthetic("b", 0, 0)]),
            Err(EvalError::EmptyEvalSet)
        ));
    }

    #[test]
    fn pooled_and_per_response_differ() {
        // 14.81 / (14.81 + 3.75) rounds to 0.798, so a reported 0.812 can only
        // come from averaging per-response ratios.
        let pooled: f64 = 14.81 / (14.81 + 3.75);
        assert_eq!(format!("{pooled:.3}"), "0.798");
        let r = EvalReport {
            model_id: "llama-1 fs".into(),
            dataset: Dataset::Biographies,
            mean_correct: 14.81,
            mean_incorrect: 3.75,
            mean_pct_correct: 0.812,
            n_responses: 1,
        };
        assert!(markdown_table(&[r]).contains("| 14.81 | 3.75 | 0.812 |"));
    }

    #[test]
    fn markdown_columns() {
        let r = aggregate(
            "m",
            Dataset::Biographies,
            &[synthetic("a", 3, 1), synthetic("b", 1, 1)],
        )
        .unwrap();
        let md = markdown_table(&[r]);
        assert!(md.starts_with("| Model | Dataset | # Correct | # Incorrect | % Correct |"));
        assert!(md.contains("| m | biographies | 2.00 | 1.00 | 0.625 |"));
    }

    #[test]
    fn relevance_verdicts() {
        assert!(parse_relevance("Yes.").unwrap());
        assert!(!parse_relevance(" no").unwrap());
        assert!(parse_relevance("maybe").is_err());
    }
}
