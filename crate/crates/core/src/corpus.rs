//! Entities, prompt expansion and the local reference-article store.

use crate::text::{normalize, split_sentences};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("template {0:?} has no {{entity}} placeholder")]
    TemplateMissingPlaceholder(String),
    #[error("duplicate prompt id `{0}`")]
    DuplicatePromptId(String),
    #[error("duplicate entity id `{0}`")]
    DuplicateEntityId(String),
    #[error("entity `{entity}` has {found} prompt(s), expected {expected}")]
    PromptCountMismatch {
        entity: String,
        found: usize,
        expected: usize,
    },
    #[error("prompts_per_entity must be >= 1")]
    ZeroPromptsPerEntity,
    #[error("prompt `{0}` has empty text")]
    EmptyPrompt(String),
    #[error("reference document is empty")]
    EmptyDocument,
    #[error("chunk target must be >= 1 word")]
    ZeroChunkTarget,
    #[error("no reference article for entity `{entity}` ({path})")]
    MissingReference { entity: String, path: PathBuf },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    #[default]
    Biographies,
    MedicalQa,
    Custom,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Biographies => "biographies",
            Dataset::MedicalQa => "medical_qa",
            Dataset::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_title: Option<String>,
    /// Object pronoun used by the biography question template ("him", "her", ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_pronoun: Option<String>,
}

impl Entity {
    pub fn new(id: &str, name: &str, split: Split) -> Self {
        Self {
            id: id.to_string(),
            name: name.to_string(),
            split,
            reference_title: None,
            object_pronoun: None,
        }
    }

    pub fn pronoun(&self) -> &str {
        self.object_pronoun.as_deref().unwrap_or("them")
    }
}

/// Checks that entity ids are unique.
pub fn validate_entities(entities: &[Entity]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for e in entities {
        if !seen.insert(e.id.as_str()) {
            return Err(CorpusError::DuplicateEntityId(e.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub entity_id: String,
    pub text: String,
    pub dataset: Dataset,
    pub split: Split,
}

/// Where prompt texts come from.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// Templates containing `{entity}`, applied to every entity in order.
    Templates(Vec<String>),
    /// Ready-made prompts keyed by entity id.
    Verbatim(BTreeMap<String, Vec<String>>),
}

pub const ENTITY_PLACEHOLDER: &str = "{entity}";

/// Expands entities into `|entities| × prompts_per_entity` prompts, entity
/// order major, template order minor. Prompt ids are `<entity id>-p<j>`.
pub fn expand_prompts(
    entities: &[Entity],
    source: &PromptSource,
    prompts_per_entity: usize,
    dataset: Dataset,
) -> Result<Vec<PromptRecord>, CorpusError> {
    if prompts_per_entity == 0 {
        return Err(CorpusError::ZeroPromptsPerEntity);
    }
    if let PromptSource::Templates(templates) = source {
        if let Some(t) = templates.iter().find(|t| !t.contains(ENTITY_PLACEHOLDER)) {
            return Err(CorpusError::TemplateMissingPlaceholder(t.clone()));
        }
    }

    let mut out = Vec::with_capacity(entities.len() * prompts_per_entity);
    let mut ids = HashSet::new();
    for entity in entities {
        let texts: Vec<String> = match source {
            PromptSource::Templates(templates) => templates
                .iter()
                .map(|t| t.replace(ENTITY_PLACEHOLDER, &entity.name))
                .collect(),
            PromptSource::Verbatim(map) => map.get(&entity.id).cloned().unwrap_or_default(),
        };
        if texts.len() != prompts_per_entity {
            return Err(CorpusError::PromptCountMismatch {
                entity: entity.id.clone(),
                found: texts.len(),
                expected: prompts_per_entity,
            });
        }
        for (j, text) in texts.into_iter().enumerate() {
            let id = format!("{}-p{j}", entity.id);
            if text.trim().is_empty() {
                return Err(CorpusError::EmptyPrompt(id));
            }
            if !ids.insert(id.clone()) {
                return Err(CorpusError::DuplicatePromptId(id));
            }
            out.push(PromptRecord {
                id,
                entity_id: entity.id.clone(),
                text,
                dataset,
                split: entity.split,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDoc {
    pub title: String,
    pub body: String,
    pub chunks: Vec<Chunk>,
}

impl ReferenceDoc {
    pub fn chunk(&self, id: usize) -> Option<&Chunk> {
        self.chunks.get(id)
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Greedy packing of paragraphs (then sentences, for paragraphs that do not
/// fit on their own) into chunks of at most `target_words` words. A sentence
/// longer than the target becomes a chunk by itself.
pub fn chunk_reference(
    title: &str,
    body: &str,
    target_words: usize,
) -> Result<ReferenceDoc, CorpusError> {
    if target_words == 0 {
        return Err(CorpusError::ZeroChunkTarget);
    }
    if body.trim().is_empty() {
        return Err(CorpusError::EmptyDocument);
    }

    struct Packer {
        target: usize,
        chunks: Vec<String>,
        current: String,
        words: usize,
    }
    impl Packer {
        fn push(&mut self, unit: &str, sep: &str) {
            let n = word_count(unit);
            if self.words > 0 && self.words + n > self.target {
                self.flush();
            }
            if self.words > 0 {
                self.current.push_str(sep);
            }
            self.current.push_str(unit);
            self.words += n;
        }
        fn flush(&mut self) {
            if self.words > 0 {
                self.chunks.push(std::mem::take(&mut self.current));
                self.words = 0;
            }
        }
    }

    let mut packer = Packer {
        target: target_words,
        chunks: Vec::new(),
        current: String::new(),
        words: 0,
    };
    for para in paragraphs(body) {
        if word_count(para) <= target_words {
            packer.push(para, "\n\n");
        } else {
            for (i, sentence) in split_sentences(para).into_iter().enumerate() {
                packer.push(sentence, if i == 0 { "\n\n" } else { " " });
            }
        }
    }
    packer.flush();

    Ok(ReferenceDoc {
        title: title.to_string(),
        body: body.to_string(),
        chunks: packer
            .chunks
            .into_iter()
            .enumerate()
            .map(|(id, text)| Chunk { id, text })
            .collect(),
    })
}

fn paragraphs(body: &str) -> impl Iterator<Item = &str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(body[s..end].trim());
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(body[s..end].trim());
    }
    out.into_iter().filter(|p| !p.is_empty())
}

/// Top-`k` chunk ids by content-word overlap with the query; ties keep
/// document order and `k` is capped at the number of chunks.
pub fn retrieve_chunks(doc: &ReferenceDoc, query: &str, k: usize) -> Vec<usize> {
    let q = normalize(query);
    let mut scored: Vec<(usize, usize)> = doc
        .chunks
        .iter()
        .map(|c| (c.id, normalize(&c.text).intersection(&q).count()))
        .collect();
    // Stable sort keeps document order among equal overlaps.
    scored.sort_by_key(|&(_, overlap)| std::cmp::Reverse(overlap));
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

/// File-name slug for a reference title: lowercase alphanumerics, other
/// runs collapsed to `-`.
pub fn slug(title: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for c in title.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            out.push(c);
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// One UTF-8 text file per article: `<dir>/<slug(reference_title)>.txt`.
#[derive(Debug, Clone)]
pub struct ReferenceStore {
    dir: PathBuf,
    chunk_words: usize,
}

impl ReferenceStore {
    pub fn new(dir: impl Into<PathBuf>, chunk_words: usize) -> Self {
        Self {
            dir: dir.into(),
            chunk_words,
        }
    }

    pub fn path_for(&self, title: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", slug(title)))
    }

    pub fn load(&self, entity: &Entity) -> Result<ReferenceDoc, CorpusError> {
        let title = entity.reference_title.as_deref().unwrap_or(&entity.name);
        let path = self.path_for(title);
        let body = match fs::read_to_string(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CorpusError::MissingReference {
                    entity: entity.id.clone(),
                    path,
                })
            }
            Err(source) => return Err(CorpusError::Io { path, source }),
        };
        chunk_reference(title, &body, self.chunk_words)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
