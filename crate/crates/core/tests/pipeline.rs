mod common;

use common::{golden_in, run_all, snapshot};
use factpref_core::evalharness::{EvalReport, ResponseEval};
use factpref_core::jsonl;
use factpref_core::pipeline::{
    run_stage, Manifest, MethodChoice, OutputFormat, Overrides, PipelineError, RunOptions, Stage,
    CLAIMS_FILE, PREFS_FILE, SCORES_FILE, SFT_FILE,
};
use factpref_core::prefs::{PreferencePair, SftRecord};
use factpref_core::{Claim, TruthfulnessScore};
use std::fs;

#[test]
fn golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_in(dir.path());
    run_all(&cfg);

    let claims: Vec<Claim> = jsonl::read(&cfg.out_path(CLAIMS_FILE)).unwrap();
    assert_eq!(claims.len(), 8);
    assert!(claims.iter().all(|c| c.question.is_some()));
    assert_eq!(
        claims[0].question.as_deref(),
        Some("What is Ada Quill's profession?")
    );

    let scores: Vec<TruthfulnessScore> = jsonl::read(&cfg.out_path(SCORES_FILE)).unwrap();
    let values: Vec<_> = scores.iter().map(|s| s.value).collect();
    assert_eq!(
        values,
        [Some(0.5), Some(0.5), Some(0.6), Some(0.7), Some(0.8), None]
    );

    let pairs: Vec<PreferencePair> = jsonl::read(&cfg.out_path(PREFS_FILE)).unwrap();
    let ids: Vec<_> = pairs
        .iter()
        .map(|p| (p.chosen_id.as_str(), p.rejected_id.as_str()))
        .collect();
    assert_eq!(
        ids,
        [
            ("ada-quill-p0-r2", "ada-quill-p0-r0"),
            ("ada-quill-p0-r2", "ada-quill-p0-r1"),
            ("bram-okafor-p0-r1", "bram-okafor-p0-r0"),
        ]
    );
    let sft: Vec<SftRecord> = jsonl::read(&cfg.out_path(SFT_FILE)).unwrap();
    assert_eq!(sft.len(), 6);

    let evals: Vec<ResponseEval> = jsonl::read(&cfg.out_path("eval.jsonl")).unwrap();
    let counts: Vec<_> = evals
        .iter()
        .map(|e| (e.n_correct, e.n_incorrect, e.n_irrelevant))
        .collect();
    assert_eq!(counts, [(2, 0, 0), (2, 1, 0), (0, 1, 0)]);
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(cfg.out_path("eval_summary.json")).unwrap())
            .unwrap();
    assert_eq!(report.mean_pct_correct, (1.0 + 2.0 / 3.0 + 0.0) / 3.0);
}

#[test]
fn manifests_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_in(dir.path());
    run_all(&cfg);
    for stage in common::GOLDEN_STAGES {
        let text =
            fs::read_to_string(cfg.out_path("manifests").join(format!("{stage}.json"))).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.stage, stage.name());
        for out in &m.outputs {
            let path = cfg.out_path(&out.file);
            if out.file.ends_with(".jsonl") {
                assert_eq!(
                    jsonl::count_lines(&path).unwrap(),
                    out.records,
                    "{}",
                    out.file
                );
            }
            assert_eq!(
                factpref_core::pipeline::sha256_hex(&fs::read(&path).unwrap()),
                out.sha256
            );
        }
    }
    let pair: Manifest =
        serde_json::from_str(&fs::read_to_string(cfg.out_path("manifests/pair.json")).unwrap())
            .unwrap();
    assert_eq!(pair.counts["pairs"], 3);
    assert_eq!(pair.counts["ties"], 1);
    assert_eq!(pair.counts["unscored"], 1);
    assert!(cfg.out_path("resolved_config.toml").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = golden_in(a.path());
    let cfg_b = golden_in(b.path());
    run_all(&cfg_a);
    let first = snapshot(&cfg_a.out_path(""));
    run_all(&cfg_a);
    assert_eq!(first, snapshot(&cfg_a.out_path("")), "cached rerun");
    run_all(&cfg_b);
    assert_eq!(first, snapshot(&cfg_b.out_path("")), "fresh directory");
}

#[test]
fn entropy_and_span_variants_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = golden_in(dir.path());
    cfg.apply(&Overrides {
        metric: Some(factpref_core::score_mc::Metric::Entropy),
        ..Default::default()
    });
    run_all(&cfg);
    let scores: Vec<TruthfulnessScore> = jsonl::read(&cfg.out_path(SCORES_FILE)).unwrap();
    assert!(scores.iter().filter_map(|s| s.value).all(|v| v <= 0.0));

    for extraction in [
        factpref_core::ExtractionMode::Entity,
        factpref_core::ExtractionMode::Chunk,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = golden_in(dir.path());
        // The helper fixture has no continuation entries; resample from an
        // echo backend instead.
        cfg.backends
            .push(factpref_core::backend::BackendConfig::mock("echo"));
        cfg.roles.answerer = "echo".into();
        cfg.extraction = extraction;
        for stage in [
            Stage::GenPrompts,
            Stage::Sample,
            Stage::Extract,
            Stage::Score,
            Stage::Pair,
        ] {
            run_stage(stage, &cfg, &RunOptions::default())
                .unwrap_or_else(|e| panic!("{extraction:?} {stage}: {e}"));
        }
        let claims: Vec<Claim> = jsonl::read(&cfg.out_path(CLAIMS_FILE)).unwrap();
        assert!(claims.iter().all(|c| c.span.is_some()));
        assert!(!claims.is_empty());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = golden_in(dir.path());

    let e = run_stage(Stage::Score, &cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(e, PipelineError::MissingInput { .. }));
    assert_eq!(e.exit_code(), 3);

    for s in [Stage::GenPrompts, Stage::Sample, Stage::Extract] {
        run_stage(s, &cfg, &RunOptions::default()).unwrap();
    }
    // The fixture judge only knows the held-out entity's claims.
    cfg.method = MethodChoice::Fs;
    let e = run_stage(Stage::Score, &cfg, &RunOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 4, "{e}");

    cfg.beta = -1.0;
    assert_eq!(
        run_stage(Stage::Pair, &cfg, &RunOptions::default())
            .unwrap_err()
            .exit_code(),
        2
    );
}

#[test]
fn missing_reference_is_upstream_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_in(dir.path());
    fs::remove_file(dir.path().join("references/celia-marsh.txt")).unwrap();
    for s in [Stage::GenPrompts, Stage::Sample] {
        run_stage(s, &cfg, &RunOptions::default()).unwrap();
    }
    assert_eq!(
        run_stage(Stage::Eval, &cfg, &RunOptions::default())
            .unwrap_err()
            .exit_code(),
        3
    );
}

#[test]
fn dpo_check_prints_ln2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_in(dir.path());
    let out = run_stage(Stage::DpoCheck, &cfg, &RunOptions::default()).unwrap();
    let report: factpref_core::DpoReport =
        serde_json::from_str(out.stdout.as_deref().unwrap()).unwrap();
    assert!((report.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(format!("{:.6}", report.mean_loss), "0.693147");
    assert_eq!(report.accuracy, 0.5);
}

#[test]
fn eval_markdown_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_in(dir.path());
    for s in [Stage::GenPrompts, Stage::Sample] {
        run_stage(s, &cfg, &RunOptions::default()).unwrap();
    }
    let opts = RunOptions {
        format: OutputFormat::Markdown,
        ..Default::default()
    };
    let out = run_stage(Stage::Eval, &cfg, &opts).unwrap().stdout.unwrap();
    assert!(out.contains("| # Correct | # Incorrect | % Correct |"));
    assert!(out.contains("| golden-mock | biographies | 1.33 | 0.67 | 0.556 |"));
}
