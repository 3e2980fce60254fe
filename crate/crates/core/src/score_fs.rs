//! Reference-based truthfulness scoring.
//!
//! Every atomic claim is checked against the best-matching chunks of the
//! entity's reference article by a support judge; the response score is the
//! fraction of supported claims.

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::claims::Claim;
use crate::corpus::{retrieve_chunks, CorpusError, ReferenceDoc};
use crate::prompts;
use crate::score_mc::{ClaimDetail, ScoreMethod, TruthfulnessScore};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FsError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("support verdict is not recognizable: {0:?}")]
    UnparseableJudgment(String),
    #[error("reference `{0}` has no chunks")]
    EmptyContext(String),
}

pub const DEFAULT_K_CHUNKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportJudgment {
    pub claim_id: String,
    pub supported: bool,
    pub context_chunk_ids: Vec<usize>,
    pub judge_id: String,
}

/// `supported`/`true`/`yes` → true; `not supported`/`unsupported`/`false`/`no` → false.
pub fn parse_verdict(output: &str) -> Result<bool, FsError> {
    let o = output.trim().to_lowercase();
    const YES: [&str; 3] = ["supported", "true", "yes"];
    const NO: [&str; 4] = ["not supported", "unsupported", "false", "no"];
    if YES.iter().any(|p| o.starts_with(p)) {
        Ok(true)
    } else if NO.iter().any(|p| o.starts_with(p)) {
        Ok(false)
    } else {
        Err(FsError::UnparseableJudgment(output.to_string()))
    }
}

/// Retrieves context for a claim and builds the judge request.
pub fn support_request(
    judge_backend: &str,
    claim: &Claim,
    doc: &ReferenceDoc,
    k_chunks: usize,
) -> Result<(GenerationRequest, Vec<usize>), FsError> {
    if doc.chunks.is_empty() {
        return Err(FsError::EmptyContext(doc.title.clone()));
    }
    let ids = retrieve_chunks(doc, &claim.text, k_chunks.max(1));
    let context = ids
        .iter()
        .filter_map(|&i| doc.chunk(i))
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    let req = GenerationRequest::new(
        judge_backend,
        prompts::fill(
            prompts::SUPPORT_JUDGE,
            &[("context", &context), ("claim", &claim.text)],
        ),
    )
    .max_tokens(8);
    Ok((req, ids))
}

pub fn judge_support(
    client: &Client,
    judge_backend: &str,
    claim: &Claim,
    doc: &ReferenceDoc,
    k_chunks: usize,
) -> Result<SupportJudgment, FsError> {
    let (req, ids) = support_request(judge_backend, claim, doc, k_chunks)?;
    let out = client.generate(&req)?;
    Ok(SupportJudgment {
        claim_id: claim.id.clone(),
        supported: parse_verdict(&out.text)?,
        context_chunk_ids: ids,
        judge_id: judge_backend.to_string(),
    })
}

/// Judges many claims against one document through the client's batch path.
pub fn judge_all(
    client: &Client,
    judge_backend: &str,
    claims: &[Claim],
    doc: &ReferenceDoc,
    k_chunks: usize,
    max_in_flight: usize,
) -> Result<Vec<SupportJudgment>, FsError> {
    let prepared = claims
        .iter()
        .map(|c| support_request(judge_backend, c, doc, k_chunks))
        .collect::<Result<Vec<_>, _>>()?;
    let reqs: Vec<_> = prepared.iter().map(|(r, _)| r.clone()).collect();
    let outs = client.generate_all(&reqs, max_in_flight)?;
    claims
        .iter()
        .zip(prepared)
        .zip(outs)
        .map(|((claim, (_, ids)), out)| {
            Ok(SupportJudgment {
                claim_id: claim.id.clone(),
                supported: parse_verdict(&out.text)?,
                context_chunk_ids: ids,
                judge_id: judge_backend.to_string(),
            })
        })
        .collect()
}

pub fn score_from_judgments(response_id: &str, judgments: &[SupportJudgment]) -> TruthfulnessScore {
    let supported = judgments.iter().filter(|j| j.supported).count();
    TruthfulnessScore {
        response_id: response_id.to_string(),
        method: ScoreMethod::Fs,
        value: (!judgments.is_empty()).then(|| supported as f64 / judgments.len() as f64),
        n_claims: judgments.len(),
        per_claim: judgments
            .iter()
            .map(|j| ClaimDetail::Fs {
                claim_id: j.claim_id.clone(),
                supported: j.supported,
                context_chunk_ids: j.context_chunk_ids.clone(),
            })
            .collect(),
    }
}

/// Fraction of claims judged supported; unscored when there are no claims.
pub fn score_response_fs(
    client: &Client,
    judge_backend: &str,
    response_id: &str,
    claims: &[Claim],
    doc: &ReferenceDoc,
    k_chunks: usize,
    max_in_flight: usize,
) -> Result<TruthfulnessScore, FsError> {
    let judgments = judge_all(client, judge_backend, claims, doc, k_chunks, max_in_flight)?;
    Ok(score_from_judgments(response_id, &judgments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, MockEntry, MockTransport, ResponseCache};
    use crate::corpus::{chunk_reference, Entity, ReferenceStore, Split};

    fn client(entries: Vec<MockEntry>) -> Client {
        let mut c = Client::new(ResponseCache::in_memory());
        c.register(
            BackendConfig::mock("checker"),
            Box::new(MockTransport::new(entries)),
        )
        .unwrap();
        c
    }

    fn claim(i: usize, text: &str) -> Claim {
        Claim {
            id: format!("r-c{i}"),
            response_id: "r".into(),
            text: text.into(),
            question: None,
            span: None,
        }
    }

    fn doc() -> ReferenceDoc {
        chunk_reference(
            "Greta Gerwig",
            "Greta Gerwig is an American filmmaker.\n\nShe was born in 1983 in Sacramento, California.",
            8,
        )
        .unwrap()
    }

    #[test]
    fn verdicts() {
        assert!(parse_verdict("Supported").unwrap());
        assert!(parse_verdict("True.").unwrap());
        assert!(!parse_verdict("Not supported").unwrap());
        assert!(!parse_verdict("unsupported").unwrap());
        assert!(matches!(
            parse_verdict("unclear"),
            Err(FsError::UnparseableJudgment(_))
        ));
    }

    #[test]
    fn supported_claim_sees_matching_context() {
        let c = client(vec![MockEntry::contains(
            "Sacramento, California.\nClaim: born in Sacramento",
            &["Supported"],
        )]);
        let j = judge_support(&c, "checker", &claim(0, "born in Sacramento"), &doc(), 1).unwrap();
        assert!(j.supported);
        assert_eq!(j.context_chunk_ids, vec![1]);
        assert_eq!(j.judge_id, "checker");
    }

    #[test]
    fn unsupported_claim() {
        let c = client(vec![MockEntry::contains("Claim:", &["Not supported"])]);
        let j = judge_support(
            &c,
            "checker",
            &claim(0, "Greta Gerwig was born in Paris."),
            &doc(),
            3,
        )
        .unwrap();
        assert!(!j.supported);
    }

    #[test]
    fn missing_reference_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReferenceStore::new(dir.path(), 100);
        let err: FsError = store
            .load(&Entity::new("x", "Nobody", Split::Train))
            .unwrap_err()
            .into();
        assert!(matches!(
            err,
            FsError::Corpus(CorpusError::MissingReference { .. })
        ));
    }

    fn fraction(n: usize, j: usize) -> Option<f64> {
        let mut entries = Vec::new();
        let claims: Vec<_> = (0..n)
            .map(|i| claim(i, &format!("Fact number {i} holds.")))
            .collect();
        for (i, _) in claims.iter().enumerate() {
            let verdict = if i < j { "Supported" } else { "Not supported" };
            entries.push(MockEntry::contains(
                &format!("Claim: Fact number {i} holds."),
                &[verdict],
            ));
        }
        let c = client(entries);
        score_response_fs(&c, "checker", "r", &claims, &doc(), 3, 4)
            .unwrap()
            .value
    }

    #[test]
    fn fraction_supported() {
        assert_eq!(fraction(5, 4), Some(0.8));
        assert_eq!(fraction(3, 3), Some(1.0));
        assert_eq!(fraction(0, 0), None);
    }

    #[test]
    fn per_claim_detail() {
        let c = client(vec![MockEntry::contains("Claim:", &["Supported"])]);
        let s = score_response_fs(&c, "checker", "r", &[claim(0, "x")], &doc(), 3, 1).unwrap();
        assert_eq!(s.method, ScoreMethod::Fs);
        let json = serde_json::to_string(&s.per_claim[0]).unwrap();
        assert_eq!(
            json,
            r#"{"claim_id":"r-c0","supported":true,"context_chunk_ids":[0,1]}"#
        );
    }
}
