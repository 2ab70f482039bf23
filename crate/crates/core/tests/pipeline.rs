//! Stage wiring over the shared fixture corpus with recorded mock fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use instruct_engine::costing::{estimate, EstimateMode};
use instruct_engine::mock::{FaultProfile, FixtureMode, MockText};
use instruct_engine::model::{validate_record, ImageState, Provenance, QuestionType};
use instruct_engine::pipeline::{
    Backends, Pipeline, PipelineConfig, PipelineError, Stage, StageRange,
};
use instruct_engine::store::Store;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config(store: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixtures().join("pipeline.toml")).unwrap();
    cfg.store = store.to_owned();
    cfg
}

fn pipeline(cfg: &PipelineConfig) -> Pipeline {
    Pipeline::from_config(cfg.clone()).unwrap()
}

/// Record logs that must match byte for byte; the audit log carries wall-clock
/// timestamps and is compared separately.
const LOGS: [&str; 6] = [
    "images.jsonl",
    "captions.jsonl",
    "instructions.jsonl",
    "seeds.jsonl",
    "batches.jsonl",
    "ledger.jsonl",
];

fn logs(root: &Path) -> Vec<(String, Vec<u8>)> {
    LOGS.iter()
        .map(|l| (l.to_string(), fs::read(root.join(l)).unwrap_or_default()))
        .collect()
}

#[test]
fn full_run_counts_and_ledger_match_the_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let p = pipeline(&cfg);
    let report = p.run(StageRange::all(), false).unwrap();

    assert_eq!(report.count(Stage::Caption, "captioned"), 20);
    let single = report.count(Stage::Generate, "instructions");
    assert!(single >= 60, "{single}");
    assert_eq!(single, 3 * report.count(Stage::Generate, "calls"));

    let counts = p.store.ledger_counts();
    assert_eq!(counts.caption_count, 20);
    assert_eq!(counts.correction_count, 0);
    // independent oracle: the estimator with no correction term
    let mut price = cfg.price;
    price.manual_correction_unit = instruct_engine::costing::Money::ZERO;
    assert_eq!(
        report.cost_delta,
        estimate(
            counts.caption_count,
            counts.instruction_count,
            EstimateMode::Engine,
            &price
        )
    );
    assert_eq!(report.ledger_delta, counts);

    let suffixes = cfg.suffix_table().unwrap();
    for r in p.store.instructions() {
        assert!(validate_record(&r, &suffixes).is_valid(), "{:?}", r.id);
        if r.provenance != Provenance::Converted {
            let image = r
                .image_id
                .as_ref()
                .expect("generated records name their image");
            assert!(
                p.store.caption(image).is_some(),
                "instruction without caption"
            );
        }
    }
}

#[test]
fn caption_only_range_creates_no_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(&config(dir.path()));
    let r = p.run("a..b".parse().unwrap(), false).unwrap();
    assert_eq!(r.count(Stage::Caption, "captioned"), 20);
    assert!(p.store.instructions().is_empty());
    assert_eq!(p.store.ledger_counts().instruction_count, 0);
    assert!(r.stage(Stage::Generate).is_none());
}

#[test]
fn dry_run_writes_nothing_and_prices_pending_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline(&cfg).run("a..b".parse().unwrap(), false).unwrap();
    let before = logs(dir.path());
    let p = pipeline(&cfg);
    let r = p.run(StageRange::all(), true).unwrap();
    assert!(r.dry_run);
    assert_eq!(logs(dir.path()), before);
    // 17 single-turn images x 4 types x 3 items, plus 3 multi-round records
    assert_eq!(
        r.stage(Stage::Generate)
            .unwrap()
            .ledger_delta
            .instruction_count,
        17 * 4 * 3
    );
    assert_eq!(
        r.stage(Stage::Expand)
            .unwrap()
            .ledger_delta
            .instruction_count,
        3
    );
}

#[test]
fn interrupted_run_resumes_to_the_same_store() {
    let full = tempfile::tempdir().unwrap();
    pipeline(&config(full.path()))
        .run(StageRange::all(), false)
        .unwrap();

    let part = tempfile::tempdir().unwrap();
    let cfg = config(part.path());
    let store = Arc::new(Store::open(&cfg.store).unwrap());
    let mut backends = Backends::mock(cfg.fixtures.clone(), FixtureMode::Strict);
    backends.text = Box::new(
        MockText::new(cfg.fixtures.clone(), FixtureMode::Strict).with_faults(FaultProfile {
            timeout_after: Some(25),
            ..FaultProfile::default()
        }),
    );
    let flaky = Pipeline::new(cfg.clone(), store, backends).unwrap();
    let err = flaky.run(StageRange::all(), false).unwrap_err();
    let PipelineError::StageFailure { stage, report, .. } = err else {
        panic!("expected a stage failure, got {err}")
    };
    assert_eq!(stage, Stage::Generate);
    assert_eq!(report.resume_from, Some(Stage::Generate));
    assert!(report.count(Stage::Generate, "instructions") > 0);
    drop(flaky);

    // fresh process, healthy backend, resume from the failed stage
    let r = pipeline(&cfg)
        .run(
            StageRange {
                from: stage,
                to: Stage::Review,
            },
            false,
        )
        .unwrap();
    assert!(r.count(Stage::Generate, "skipped_units") > 0);
    assert_eq!(logs(part.path()), logs(full.path()));
}

#[test]
fn strict_fixtures_catch_prompt_drift() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.generation.config.rng_seed = 7;
    let err = pipeline(&cfg).run(StageRange::all(), false).unwrap_err();
    let PipelineError::StageFailure { stage, message, .. } = err else {
        panic!("expected a stage failure")
    };
    assert_eq!(stage, Stage::Generate);
    assert!(message.contains("fixture"), "{message}");
}

#[test]
fn review_stage_opens_batches_without_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(&config(dir.path()));
    p.run(StageRange::all(), false).unwrap();
    let batches = p.store.batches();
    assert!(!batches.is_empty());
    assert!(batches
        .iter()
        .all(|b| b.rounds_completed == 0 && b.round.is_none()));
    let in_batches: usize = batches.iter().map(|b| b.slots.len()).sum();
    assert_eq!(in_batches, p.store.instructions().len());
    assert!(p
        .store
        .images()
        .iter()
        .all(|i| i.state == ImageState::Captioned));
    assert!(p
        .store
        .instructions()
        .iter()
        .filter(|r| r.qtype == QuestionType::MultiRound)
        .all(|r| r.turns.len() == 5));
}
