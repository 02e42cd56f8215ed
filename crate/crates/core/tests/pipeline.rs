use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use paincast::learners::ModelKind;
use paincast::llm::{ChatEndpoint, NoteCueEndpoint, SendFailure};
use paincast::pipeline::{self, ModelEntry, Run, RunConfig};
use paincast::synth;
use paincast::Error;

fn config(dir: &std::path::Path, score_all: bool) -> RunConfig {
    let mut cfg = RunConfig { seed: Some(31), ..Default::default() };
    cfg.paths.output_dir = dir.to_path_buf();
    cfg.models = vec![ModelEntry::new(ModelKind::Logistic), ModelEntry::new(ModelKind::RandomForest)];
    cfg.models[1].hyperparams.insert("n_trees".into(), 30.0);
    cfg.synth.n_patients = 150;
    cfg.llm.score_all = score_all;
    cfg
}

fn prepared(dir: &std::path::Path, score_all: bool) -> Run {
    let run = Run::open(config(dir, score_all)).unwrap();
    pipeline::cmd_synth(&run).unwrap();
    pipeline::cmd_train(&run).unwrap();
    pipeline::cmd_predict(&run).unwrap();
    run
}

fn in_band_rows(run: &Run, h: &str) -> usize {
    let text = fs::read_to_string(run.path(&format!("fusion/{h}.csv"))).unwrap();
    text.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")).count()
}

#[test]
fn fuse_consults_the_model_once_per_in_band_patient() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path(), false);
    let mock = Arc::new(NoteCueEndpoint::synthetic());
    let summaries = pipeline::cmd_fuse_with(&run, mock.clone()).unwrap();
    let in_band: usize = summaries.iter().map(|s| s.in_band).sum();
    assert!(in_band > 0);
    assert_eq!(mock.calls(), in_band);
    assert_eq!(in_band_rows(&run, "48h") + in_band_rows(&run, "72h"), in_band);
    for s in &summaries {
        assert_eq!(s.fusion_calls, s.in_band);
        assert_eq!(s.baseline_calls, 0);
    }
}

#[test]
fn baseline_scoring_covers_the_remaining_patients() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path(), true);
    let mock = Arc::new(NoteCueEndpoint::synthetic());
    let summaries = pipeline::cmd_fuse_with(&run, mock.clone()).unwrap();
    let patients: usize = summaries.iter().map(|s| s.patients).sum();
    assert_eq!(mock.calls(), patients);
    let cells = pipeline::cmd_report(&run).unwrap();
    assert_eq!(cells.len(), 18);
    assert!(cells.iter().all(|c| c.value.is_some()));
    for h in ["48h", "72h"] {
        for sys in ["ml_only", "llm_only", "ml_llm"] {
            assert!(run.path(&format!("report/roc_{h}_{sys}.csv")).exists(), "{h} {sys}");
        }
    }
}

struct Down(AtomicUsize);

impl ChatEndpoint for Down {
    fn id(&self) -> String {
        "down".into()
    }

    fn send(&self, _: &str) -> Result<String, SendFailure> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(SendFailure { transient: false, message: "401 unauthorized".into() })
    }
}

#[test]
fn unreachable_endpoint_falls_back_without_aborting() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path(), false);
    let summaries = pipeline::cmd_fuse_with(&run, Arc::new(Down(AtomicUsize::new(0)))).unwrap();
    for s in &summaries {
        assert_eq!(s.failures, s.in_band);
    }
    let text = fs::read_to_string(run.path("fusion/48h.csv")).unwrap();
    for line in text.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")) {
        assert_eq!(line.split(',').nth(4), Some("parse_failure_default"), "{line}");
    }
}

#[test]
fn each_stage_names_its_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::open(config(tmp.path(), true)).unwrap();
    let expect = |r: paincast::Result<()>, file: &str| match r {
        Err(Error::MissingArtifact { path, .. }) => assert!(path.ends_with(file), "{path:?} vs {file}"),
        other => panic!("expected missing {file}, got {other:?}"),
    };
    expect(pipeline::cmd_train(&run).map(drop), "cohort.jsonl");
    pipeline::cmd_synth(&run).unwrap();
    expect(pipeline::cmd_predict(&run).map(drop), "models/48h/selected.json");
    expect(pipeline::cmd_evaluate(&run), "models/48h/selected.json");
    expect(pipeline::cmd_report(&run).map(drop), "models/48h/selected.json");
    pipeline::cmd_train(&run).unwrap();
    expect(pipeline::cmd_fuse(&run).map(drop), "predictions/48h.csv");
}

#[test]
fn ingest_reads_a_record_file_and_applies_exclusions() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth::generate(&synth::SynthConfig { n_patients: 30, seed: 5, ..Default::default() }).unwrap();
    let mut records = s.records.clone();
    records[0].pain_observations.truncate(1);
    let src = tmp.path().join("records.jsonl");
    let mut text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    text.push_str("{not json\n");
    fs::write(&src, text).unwrap();

    let mut cfg = config(tmp.path(), true);
    cfg.paths.cohort = Some(src);
    let run = Run::open(cfg).unwrap();
    let summary = pipeline::cmd_ingest(&run).unwrap();
    assert_eq!((summary.read, summary.rejected, summary.excluded, summary.kept), (31, 1, 1, 29));
    assert_eq!(run.load_cohort().unwrap().len(), 29);
    let manifest = run.manifest().unwrap();
    assert_eq!(manifest.commands["ingest"].len(), 3);
}

#[test]
fn repeated_commands_overwrite_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::open(config(tmp.path(), true)).unwrap();
    pipeline::cmd_synth(&run).unwrap();
    pipeline::cmd_train(&run).unwrap();
    let before = run.manifest().unwrap();
    pipeline::cmd_train(&run).unwrap();
    assert_eq!(run.manifest().unwrap(), before);
}
