//! Stage runner: one TOML config, one JSON Lines file per stage output.
//!
//! Every stage writes its outputs under `out_dir`, then the resolved config
//! (`resolved_config.toml`) and a manifest (`manifests/<stage>.json`) that
//! records input digests, the config digest and per-file record counts.
//! Model calls go through the response cache, so a rerun with unchanged
//! inputs reproduces the same bytes.

use crate::backend::{BackendConfig, BackendError, Client, ResponseCache};
use crate::claims::{self, Claim, ClaimError, ExtractionMode};
use crate::corpus::{
    self, CorpusError, Dataset, Entity, PromptRecord, PromptSource, ReferenceDoc, ReferenceStore,
    Split,
};
use crate::dpo_math::{self, DpoError, DpoItem};
use crate::evalharness::{self, EvalError, EvalInput, EvalSettings, ResponseEval};
use crate::jsonl::{self, JsonlError};
use crate::prefs::{self, PairingConfig, PrefsError, Response, SamplingOptions};
use crate::score_fs::{self, FsError};
use crate::score_mc::{
    self, EquivMode, McSettings, Metric, ScoreError, ScoreMethod, TruthfulnessScore,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const CLAIMS_FILE: &str = "claims.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const PREFS_FILE: &str = "prefs.jsonl";
pub const SFT_FILE: &str = "sft.jsonl";
pub const DPO_REPORT_FILE: &str = "dpo_report.json";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const EVAL_MARKDOWN_FILE: &str = "eval.md";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {}: run the `{stage}` stage first or supply the file", path.display())]
    MissingInput { path: PathBuf, stage: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Stage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 config, 3 missing upstream input, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingInput { .. } => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::Stage(_) | PipelineError::Io { .. } => 1,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<JsonlError> for PipelineError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { path, source } => PipelineError::Io { path, source },
            e @ JsonlError::Parse { .. } => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::MissingReference { ref path, .. } => PipelineError::MissingInput {
                path: path.clone(),
                stage: "reference corpus".into(),
            },
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<ClaimError> for PipelineError {
    fn from(e: ClaimError) -> Self {
        match e {
            ClaimError::Backend(b) => PipelineError::Backend(b),
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Backend(b) => PipelineError::Backend(b),
            ScoreError::TooFewSamples(_) | ScoreError::MissingJudge => {
                PipelineError::Config(e.to_string())
            }
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<FsError> for PipelineError {
    fn from(e: FsError) -> Self {
        match e {
            FsError::Backend(b) => PipelineError::Backend(b),
            FsError::Corpus(c) => c.into(),
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<PrefsError> for PipelineError {
    fn from(e: PrefsError) -> Self {
        match e {
            PrefsError::Backend(b) => PipelineError::Backend(b),
            PrefsError::Config(m) => PipelineError::Config(m),
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => PipelineError::Backend(b),
            EvalError::Support(s) => s.into(),
            e => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<DpoError> for PipelineError {
    fn from(e: DpoError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Fs,
    #[default]
    Mc,
}

impl FromStr for MethodChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fs" => Ok(MethodChoice::Fs),
            "mc" => Ok(MethodChoice::Mc),
            _ => Err(format!("unknown method `{s}` (expected fs or mc)")),
        }
    }
}

impl FromStr for ExtractionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "atomic" | "atomic_llm" => Ok(ExtractionMode::Atomic),
            "entity" | "named_entity" => Ok(ExtractionMode::Entity),
            "chunk" | "noun_chunk" => Ok(ExtractionMode::Chunk),
            _ => Err(format!(
                "unknown extraction `{s}` (expected atomic, entity or chunk)"
            )),
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "maxconf" => Ok(Metric::Maxconf),
            "entropy" => Ok(Metric::Entropy),
            _ => Err(format!(
                "unknown metric `{s}` (expected maxconf or entropy)"
            )),
        }
    }
}

impl FromStr for EquivMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "heuristic" => Ok(EquivMode::Heuristic),
            "llm" => Ok(EquivMode::Llm),
            _ => Err(format!(
                "unknown equivalence `{s}` (expected heuristic or llm)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// JSON Lines of entities.
    pub entities: PathBuf,
    /// Directory of reference articles, one `<slug>.txt` per entity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    /// Prompt templates with an `{entity}` placeholder.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_templates: Vec<String>,
    /// JSON Lines of `{"entity_id", "text"}` used instead of templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_per_entity: Option<usize>,
    /// JSON Lines of DPO items for `dpo-check`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo_items: Option<PathBuf>,
}

/// Which backend plays which part.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub generator: String,
    pub extractor: String,
    pub answerer: String,
    pub judge: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<String>,
}

fn default_n_responses() -> usize {
    10
}
fn default_n_samples() -> usize {
    score_mc::DEFAULT_SAMPLES
}
fn default_temperature() -> f64 {
    1.0
}
fn default_tie_epsilon() -> f64 {
    prefs::DEFAULT_TIE_EPSILON
}
fn default_beta() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    0
}
fn default_max_in_flight() -> usize {
    8
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_k_chunks() -> usize {
    score_fs::DEFAULT_K_CHUNKS
}
fn default_chunk_words() -> usize {
    120
}
fn default_model_id() -> String {
    "model".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub dataset: Dataset,
    #[serde(default)]
    pub method: MethodChoice,
    #[serde(default)]
    pub extraction: ExtractionMode,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub equiv: EquivMode,
    #[serde(default = "default_n_responses")]
    pub n_responses: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_tie_epsilon")]
    pub tie_epsilon: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_k_chunks")]
    pub k_chunks: usize,
    #[serde(default = "default_chunk_words")]
    pub chunk_words: usize,
    pub data: DataPaths,
    pub roles: Roles,
    pub backends: Vec<BackendConfig>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<MethodChoice>,
    pub extraction: Option<ExtractionMode>,
    pub metric: Option<Metric>,
    pub equiv: Option<EquivMode>,
    pub n_responses: Option<usize>,
    pub n_samples: Option<usize>,
    pub temperature: Option<f64>,
    pub tie_epsilon: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => {
                PipelineError::Config(format!("config file {} not found", path.display()))
            }
            _ => PipelineError::io(path, e),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = &o.$f { self.$f = v.clone(); })*};
        }
        take!(
            method,
            extraction,
            metric,
            equiv,
            n_responses,
            n_samples,
            temperature,
            tie_epsilon,
            beta,
            seed,
            max_in_flight,
            out_dir
        );
        if let Some(c) = &o.cache_dir {
            self.cache_dir = Some(c.clone());
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_responses < 2 {
            return bad(format!(
                "n_responses must be >= 2, got {}",
                self.n_responses
            ));
        }
        if self.n_samples < 2 {
            return bad(format!("n_samples must be >= 2, got {}", self.n_samples));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be >= 0".into());
        }
        if !self.tie_epsilon.is_finite() || self.tie_epsilon < 0.0 {
            return bad("tie_epsilon must be >= 0".into());
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1".into());
        }
        if self.k_chunks == 0 || self.chunk_words == 0 {
            return bad("k_chunks and chunk_words must be >= 1".into());
        }
        if self.method == MethodChoice::Fs && self.extraction != ExtractionMode::Atomic {
            return bad("reference-based scoring needs atomic extraction".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for b in &self.backends {
            if !ids.insert(b.id.as_str()) {
                return bad(format!("duplicate backend id `{}`", b.id));
            }
        }
        let roles = [
            ("generator", Some(&self.roles.generator)),
            ("extractor", Some(&self.roles.extractor)),
            ("answerer", Some(&self.roles.answerer)),
            ("judge", Some(&self.roles.judge)),
            ("relevance", self.roles.relevance.as_ref()),
        ];
        for (role, id) in roles {
            if let Some(id) = id {
                if !ids.contains(id.as_str()) {
                    return bad(format!("role `{role}` names unknown backend `{id}`"));
                }
            }
        }
        if !self.data.prompt_templates.is_empty() && self.data.prompts.is_some() {
            return bad("set either data.prompt_templates or data.prompts, not both".into());
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(name)
    }

    pub fn score_method(&self) -> ScoreMethod {
        match self.method {
            MethodChoice::Fs => ScoreMethod::Fs,
            MethodChoice::Mc => self.metric.method(),
        }
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn client(&self) -> Result<Client, PipelineError> {
        let cache = match &self.cache_dir {
            Some(d) => {
                let d = self.resolve(d);
                ResponseCache::open(&d).map_err(|e| PipelineError::io(&d, e))?
            }
            None => ResponseCache::in_memory(),
        };
        Client::from_configs(&self.backends, &self.base_dir, cache).map_err(|e| match e {
            BackendError::Config(m) => PipelineError::Config(m),
            e => PipelineError::Backend(e),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenPrompts,
    Sample,
    Extract,
    Score,
    Pair,
    DpoCheck,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenPrompts,
        Stage::Sample,
        Stage::Extract,
        Stage::Score,
        Stage::Pair,
        Stage::DpoCheck,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenPrompts => "gen-prompts",
            Stage::Sample => "sample",
            Stage::Extract => "extract",
            Stage::Score => "score",
            Stage::Pair => "pair",
            Stage::DpoCheck => "dpo-check",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Json,
    Markdown,
}

/// Per-invocation options that are not part of the pipeline config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the stage's default input file (`dpo-check`, `eval`).
    pub input: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<OutputRecord>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub manifest: Manifest,
    /// Text the stage prints to standard output, if any.
    pub stdout: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn digest_file(p: &Path) -> Result<FileDigest, PipelineError> {
    let bytes = fs::read(p).map_err(|e| PipelineError::io(p, e))?;
    Ok(FileDigest {
        file: file_label(p),
        sha256: sha256_hex(&bytes),
    })
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput {
            path,
            stage: producer.to_string(),
        })
    }
}

/// Collects inputs and outputs while a stage runs.
struct Recorder {
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, usize>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
        }
    }

    fn input(&mut self, p: &Path) -> Result<(), PipelineError> {
        self.inputs.push(digest_file(p)?);
        Ok(())
    }

    fn read<T: serde::de::DeserializeOwned>(&mut self, p: &Path) -> Result<Vec<T>, PipelineError> {
        self.input(p)?;
        Ok(jsonl::read(p)?)
    }

    fn write_jsonl<T: Serialize>(
        &mut self,
        p: PathBuf,
        records: &[T],
    ) -> Result<(), PipelineError> {
        jsonl::write(&p, records)?;
        self.outputs.push(p);
        Ok(())
    }

    fn write_text(&mut self, p: PathBuf, text: &str) -> Result<(), PipelineError> {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))?;
        self.outputs.push(p);
        Ok(())
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n);
    }

    fn finish(
        self,
        stage: Stage,
        cfg: &PipelineConfig,
        config_text: &str,
    ) -> Result<Manifest, PipelineError> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let bytes = fs::read(p).map_err(|e| PipelineError::io(p, e))?;
            let records = if p.extension().is_some_and(|e| e == "jsonl") {
                jsonl::count_lines(p).map_err(|e| PipelineError::io(p, e))?
            } else {
                1
            };
            outputs.push(OutputRecord {
                file: file_label(p),
                sha256: sha256_hex(&bytes),
                records,
            });
        }
        let manifest = Manifest {
            stage: stage.name().to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            inputs: self.inputs,
            outputs,
            counts: self.counts,
        };
        let path = cfg
            .out_path(MANIFEST_DIR)
            .join(format!("{}.json", stage.name()));
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        text.push('\n');
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Runs one stage. The config must already have overrides applied.
pub fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let config_text = cfg.to_toml()?;
    let mut rec = Recorder::new();
    let stdout = match stage {
        Stage::GenPrompts => gen_prompts(cfg, &mut rec)?,
        Stage::Sample => sample(cfg, &mut rec)?,
        Stage::Extract => extract(cfg, &mut rec)?,
        Stage::Score => score(cfg, &mut rec)?,
        Stage::Pair => pair(cfg, &mut rec)?,
        Stage::DpoCheck => dpo_check(cfg, opts, &mut rec)?,
        Stage::Eval => eval(cfg, opts, &mut rec)?,
    };
    let resolved = cfg.out_path(RESOLVED_CONFIG_FILE);
    if let Some(parent) = resolved.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(&resolved, &config_text).map_err(|e| PipelineError::io(&resolved, e))?;
    let manifest = rec.finish(stage, cfg, &config_text)?;
    Ok(StageOutcome { manifest, stdout })
}

fn load_entities(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Vec<Entity>, PipelineError> {
    let path = cfg.resolve(&cfg.data.entities);
    if !path.exists() {
        return Err(PipelineError::Config(format!(
            "entities file {} not found",
            path.display()
        )));
    }
    let entities: Vec<Entity> = rec.read(&path)?;
    corpus::validate_entities(&entities)?;
    Ok(entities)
}

#[derive(Debug, Deserialize)]
struct VerbatimPrompt {
    entity_id: String,
    text: String,
}

fn gen_prompts(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Option<String>, PipelineError> {
    let entities = load_entities(cfg, rec)?;
    let (source, default_count) = match &cfg.data.prompts {
        Some(p) => {
            let path = cfg.resolve(p);
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "prompts file {} not found",
                    path.display()
                )));
            }
            let rows: Vec<VerbatimPrompt> = rec.read(&path)?;
            let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for r in rows {
                map.entry(r.entity_id).or_default().push(r.text);
            }
            let first = entities
                .first()
                .and_then(|e| map.get(&e.id))
                .map_or(0, Vec::len);
            (PromptSource::Verbatim(map), first)
        }
        None => {
            if cfg.data.prompt_templates.is_empty() {
                return Err(PipelineError::Config(
                    "data.prompt_templates or data.prompts is required".into(),
                ));
            }
            let n = cfg.data.prompt_templates.len();
            (
                PromptSource::Templates(cfg.data.prompt_templates.clone()),
                n,
            )
        }
    };
    let per_entity = cfg.data.prompts_per_entity.unwrap_or(default_count);
    let prompts_out = corpus::expand_prompts(&entities, &source, per_entity, cfg.dataset).map_err(
        |e| match e {
            CorpusError::TemplateMissingPlaceholder(_) | CorpusError::ZeroPromptsPerEntity => {
                PipelineError::Config(e.to_string())
            }
            e => e.into(),
        },
    )?;
    rec.count("entities", entities.len());
    rec.count("prompts", prompts_out.len());
    rec.count(
        "train_prompts",
        prompts_out
            .iter()
            .filter(|p| p.split == Split::Train)
            .count(),
    );
    rec.write_jsonl(cfg.out_path(PROMPTS_FILE), &prompts_out)?;
    Ok(None)
}

fn sample(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Option<String>, PipelineError> {
    let path = require(cfg.out_path(PROMPTS_FILE), "gen-prompts")?;
    let prompts_in: Vec<PromptRecord> = rec.read(&path)?;
    let client = cfg.client()?;
    let pairing = PairingConfig {
        n_responses: cfg.n_responses,
        temperature: cfg.temperature,
        tie_epsilon: cfg.tie_epsilon,
        method: cfg.score_method(),
    };
    let opts = SamplingOptions {
        max_tokens: client.backend(&cfg.roles.generator)?.max_tokens,
        seed: Some(cfg.seed),
        max_in_flight: cfg.max_in_flight,
    };
    let responses =
        prefs::sample_responses(&client, &cfg.roles.generator, &prompts_in, &pairing, &opts)?;
    rec.count("prompts", prompts_in.len());
    rec.count("responses", responses.len());
    rec.write_jsonl(cfg.out_path(RESPONSES_FILE), &responses)?;
    Ok(None)
}

fn train_responses(
    cfg: &PipelineConfig,
    rec: &mut Recorder,
) -> Result<Vec<Response>, PipelineError> {
    let path = require(cfg.out_path(RESPONSES_FILE), "sample")?;
    let all: Vec<Response> = rec.read(&path)?;
    Ok(all
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect())
}

fn entity_index(entities: Vec<Entity>) -> BTreeMap<String, Entity> {
    entities.into_iter().map(|e| (e.id.clone(), e)).collect()
}

fn lookup<'a>(index: &'a BTreeMap<String, Entity>, id: &str) -> Result<&'a Entity, PipelineError> {
    index
        .get(id)
        .ok_or_else(|| PipelineError::Stage(format!("response refers to unknown entity `{id}`")))
}

/// Atomic claims for many responses, batched through the extractor.
fn extract_atomic(
    cfg: &PipelineConfig,
    client: &Client,
    responses: &[Response],
) -> Result<Vec<Vec<Claim>>, PipelineError> {
    let max_tokens = client.backend(&cfg.roles.extractor)?.max_tokens;
    let nonempty: Vec<&Response> = responses
        .iter()
        .filter(|r| !r.text.trim().is_empty())
        .collect();
    let reqs: Vec<_> = nonempty
        .iter()
        .map(|r| claims::extraction_request(&cfg.roles.extractor, &r.text, max_tokens))
        .collect();
    let outs = client.generate_all(&reqs, cfg.max_in_flight)?;
    let mut by_id: BTreeMap<&str, Vec<Claim>> = BTreeMap::new();
    for (r, out) in nonempty.iter().zip(outs) {
        by_id.insert(r.id.as_str(), claims::parse_claim_list(&r.id, &out.text)?);
    }
    Ok(responses
        .iter()
        .map(|r| by_id.remove(r.id.as_str()).unwrap_or_default())
        .collect())
}

fn extract(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Option<String>, PipelineError> {
    let responses = train_responses(cfg, rec)?;
    let mut all_claims: Vec<Claim> = Vec::new();
    match cfg.extraction {
        ExtractionMode::Atomic => {
            let client = cfg.client()?;
            let per_response = extract_atomic(cfg, &client, &responses)?;
            if cfg.method == MethodChoice::Mc {
                let entities = entity_index(load_entities(cfg, rec)?);
                let max_tokens = client.backend(&cfg.roles.extractor)?.max_tokens;
                let mut reqs = Vec::new();
                for (r, cs) in responses.iter().zip(&per_response) {
                    let e = lookup(&entities, &r.entity_id)?;
                    for c in cs {
                        if c.text.trim().is_empty() {
                            return Err(ClaimError::EmptyClaim(c.id.clone()).into());
                        }
                        reqs.push(claims::question_request(
                            &cfg.roles.extractor,
                            c,
                            &e.name,
                            e.pronoun(),
                            cfg.dataset,
                            max_tokens,
                        ));
                    }
                }
                let outs = client.generate_all(&reqs, cfg.max_in_flight)?;
                let mut outs = outs.into_iter();
                for cs in per_response {
                    for mut c in cs {
                        let out = outs.next().expect("one question per claim");
                        c.question = Some(claims::parse_question(&c.id, &out.text)?);
                        all_claims.push(c);
                    }
                }
            } else {
                all_claims.extend(per_response.into_iter().flatten());
            }
        }
        mode => {
            let tagger = claims::default_tagger(mode);
            for r in &responses {
                all_claims.extend(claims::extract_spans(&r.id, &r.text, tagger.as_ref()));
            }
        }
    }
    rec.count("responses", responses.len());
    rec.count("claims", all_claims.len());
    rec.write_jsonl(cfg.out_path(CLAIMS_FILE), &all_claims)?;
    Ok(None)
}

fn group_claims(all: Vec<Claim>) -> BTreeMap<String, Vec<Claim>> {
    let mut map: BTreeMap<String, Vec<Claim>> = BTreeMap::new();
    for c in all {
        map.entry(c.response_id.clone()).or_default().push(c);
    }
    map
}

struct References {
    store: ReferenceStore,
    loaded: BTreeMap<String, ReferenceDoc>,
}

impl References {
    fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let dir = cfg.data.references.as_ref().ok_or_else(|| {
            PipelineError::Config("data.references is required for reference-based judging".into())
        })?;
        Ok(Self {
            store: ReferenceStore::new(cfg.resolve(dir), cfg.chunk_words),
            loaded: BTreeMap::new(),
        })
    }

    fn get(&mut self, e: &Entity, rec: &mut Recorder) -> Result<&ReferenceDoc, PipelineError> {
        if !self.loaded.contains_key(&e.id) {
            let doc = self.store.load(e)?;
            rec.input(
                &self
                    .store
                    .path_for(e.reference_title.as_deref().unwrap_or(&e.name)),
            )?;
            self.loaded.insert(e.id.clone(), doc);
        }
        Ok(&self.loaded[&e.id])
    }
}

fn score(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Option<String>, PipelineError> {
    let responses = train_responses(cfg, rec)?;
    let claims_path = require(cfg.out_path(CLAIMS_FILE), "extract")?;
    let mut by_response = group_claims(rec.read(&claims_path)?);
    let client = cfg.client()?;
    let mut scores: Vec<TruthfulnessScore> = Vec::with_capacity(responses.len());
    match cfg.method {
        MethodChoice::Fs => {
            let entities = entity_index(load_entities(cfg, rec)?);
            let mut refs = References::new(cfg)?;
            for r in &responses {
                let cs = by_response.remove(&r.id).unwrap_or_default();
                let doc = refs.get(lookup(&entities, &r.entity_id)?, rec)?;
                scores.push(score_fs::score_response_fs(
                    &client,
                    &cfg.roles.judge,
                    &r.id,
                    &cs,
                    doc,
                    cfg.k_chunks,
                    cfg.max_in_flight,
                )?);
            }
        }
        MethodChoice::Mc => {
            let settings = McSettings {
                judge_backend: Some(cfg.roles.judge.clone()),
                n_samples: cfg.n_samples,
                metric: cfg.metric,
                equiv: cfg.equiv,
                temperature: cfg.temperature,
                seed: Some(cfg.seed),
                max_in_flight: cfg.max_in_flight,
                ..McSettings::new(&cfg.roles.answerer)
            };
            for r in &responses {
                let cs = by_response.remove(&r.id).unwrap_or_default();
                let s = match cfg.extraction {
                    ExtractionMode::Atomic => {
                        score_mc::score_response_mc(&client, &settings, &r.id, &cs)?
                    }
                    mode => score_mc::score_response_entity(
                        &client, &settings, &r.id, &r.text, &cs, mode,
                    )?,
                };
                scores.push(s);
            }
        }
    }
    rec.count("responses", responses.len());
    rec.count("scores", scores.len());
    rec.count("unscored", scores.iter().filter(|s| !s.is_scored()).count());
    rec.write_jsonl(cfg.out_path(SCORES_FILE), &scores)?;
    Ok(None)
}

fn pair(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<Option<String>, PipelineError> {
    let responses = train_responses(cfg, rec)?;
    let scores_path = require(cfg.out_path(SCORES_FILE), "score")?;
    let scores: Vec<TruthfulnessScore> = rec.read(&scores_path)?;
    let pairing = PairingConfig {
        n_responses: cfg.n_responses,
        temperature: cfg.temperature,
        tie_epsilon: cfg.tie_epsilon,
        method: cfg.score_method(),
    };
    let joined = prefs::join_scores(&responses, &scores)?;
    let set = prefs::build_pairs(&joined, &pairing)?;
    let sft = prefs::emit_sft_targets(&responses);
    rec.count("responses", responses.len());
    rec.count("pairs", set.pairs.len());
    rec.count("ties", set.ties);
    rec.count("unscored", set.unscored);
    rec.count("sft", sft.len());
    rec.write_jsonl(cfg.out_path(PREFS_FILE), &set.pairs)?;
    rec.write_jsonl(cfg.out_path(SFT_FILE), &sft)?;
    Ok(None)
}

fn dpo_check(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    rec: &mut Recorder,
) -> Result<Option<String>, PipelineError> {
    let path = opts
        .input
        .clone()
        .or_else(|| cfg.data.dpo_items.as_ref().map(|p| cfg.resolve(p)))
        .ok_or_else(|| PipelineError::Config("dpo-check needs --input or data.dpo_items".into()))?;
    let path = require(path, "the training harness")?;
    let items: Vec<DpoItem> = rec.read(&path)?;
    let report = dpo_math::validate_dataset(&items)?;
    let text = serde_json::to_string(&report).map_err(|e| PipelineError::Stage(e.to_string()))?;
    rec.count("items", report.n_items);
    rec.write_text(cfg.out_path(DPO_REPORT_FILE), &format!("{text}\n"))?;
    Ok(Some(text))
}

fn eval(
    cfg: &PipelineConfig,
    opts: &RunOptions,
    rec: &mut Recorder,
) -> Result<Option<String>, PipelineError> {
    let responses: Vec<Response> = match &opts.input {
        Some(p) => rec.read(&require(p.clone(), "sample")?)?,
        None => {
            let path = require(cfg.out_path(RESPONSES_FILE), "sample")?;
            let all: Vec<Response> = rec.read(&path)?;
            all.into_iter().filter(|r| r.split == Split::Test).collect()
        }
    };
    let entities = entity_index(load_entities(cfg, rec)?);
    let client = cfg.client()?;
    let per_response = extract_atomic(cfg, &client, &responses)?;
    let mut refs = References::new(cfg)?;
    let relevance = match cfg.dataset {
        Dataset::Biographies => None,
        _ => cfg.roles.relevance.clone(),
    };
    let settings = EvalSettings {
        judge_backend: cfg.roles.judge.clone(),
        relevance_backend: relevance,
        k_chunks: cfg.k_chunks,
        max_in_flight: cfg.max_in_flight,
    };
    let mut evals: Vec<ResponseEval> = Vec::with_capacity(responses.len());
    for (r, cs) in responses.iter().zip(&per_response) {
        let doc = refs.get(lookup(&entities, &r.entity_id)?, rec)?;
        let input = EvalInput {
            response_id: &r.id,
            question: &r.prompt,
            claims: cs,
            doc,
        };
        evals.push(evalharness::eval_response(&client, &settings, &input)?);
    }
    let report = evalharness::aggregate(&cfg.model_id, cfg.dataset, &evals)?;
    let summary =
        serde_json::to_string(&report).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let markdown = evalharness::markdown_table(std::slice::from_ref(&report));
    rec.count("responses", evals.len());
    rec.count("scored_responses", report.n_responses);
    rec.write_jsonl(cfg.out_path(EVAL_FILE), &evals)?;
    rec.write_text(cfg.out_path(EVAL_SUMMARY_FILE), &format!("{summary}\n"))?;
    rec.write_text(cfg.out_path(EVAL_MARKDOWN_FILE), &markdown)?;
    Ok(Some(match opts.format {
        OutputFormat::Json => summary,
        OutputFormat::Markdown => markdown.trim_end().to_string(),
    }))
}
