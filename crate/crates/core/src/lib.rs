//! Factuality preference pipeline.
//!
//! Builds preference datasets for factuality tuning from unlabeled prompts:
//! sample several responses per prompt, score each response's truthfulness
//! (reference-based claim support, or reference-free answer-resampling
//! confidence), orient every pair of responses by score, and check the result
//! with exact DPO / Bradley-Terry math. The evaluation harness produces
//! per-response correct/incorrect fact counts.
//!
//! Every model call goes through [`backend::Client`], which caches results on
//! disk so that pipeline stages are replayable.

pub mod backend;
pub mod claims;
pub mod corpus;
pub mod dpo_math;
pub mod evalharness;
pub mod jsonl;
pub mod pipeline;
pub mod prefs;
pub mod prompts;
pub mod score_fs;
pub mod score_mc;
pub mod text;

pub use backend::{Client, GenerationRequest, GenerationResult};
pub use claims::{Claim, ExtractionMode};
pub use corpus::{Dataset, Entity, PromptRecord, ReferenceDoc, Split};
pub use dpo_math::{DpoItem, DpoReport};
pub use prefs::{PreferencePair, Response};
pub use score_mc::{ScoreMethod, TruthfulnessScore};
