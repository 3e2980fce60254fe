#![allow(dead_code)]

use factpref_core::pipeline::{run_stage, PipelineConfig, RunOptions, Stage, StageOutcome};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Copies the golden fixture into `dir` and loads its config.
pub fn golden_in(dir: &Path) -> PipelineConfig {
    copy_dir(&fixture_dir(), dir);
    PipelineConfig::load(&dir.join("config.toml")).unwrap()
}

pub const GOLDEN_STAGES: [Stage; 6] = [
    Stage::GenPrompts,
    Stage::Sample,
    Stage::Extract,
    Stage::Score,
    Stage::Pair,
    Stage::Eval,
];

pub fn run_all(cfg: &PipelineConfig) -> Vec<StageOutcome> {
    GOLDEN_STAGES
        .iter()
        .map(|s| run_stage(*s, cfg, &RunOptions::default()).unwrap_or_else(|e| panic!("{s}: {e}")))
        .collect()
}

/// Every file under `dir`, keyed by its path relative to `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
