mod common;

use std::fs::{self, File};
use std::io::BufReader;

use bdirank::corpus::TrecReader;
use bdirank::pipeline::{pipeline_status, run_pipeline, CheckpointState, RunOptions, Stage, StageStatus, LEDGER_FILE};
use bdirank::Error;
use common::{demo_config, demo_corpus_prefix};

#[test]
fn status_then_stale_then_force() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = demo_config(tmp.path(), 2);
    cfg.filter.lstm_epochs = 3;

    let status = pipeline_status(&cfg).unwrap();
    assert!(status.iter().all(|(_, s)| *s == CheckpointState::Missing));

    let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert!(first.ledger.records.iter().all(|r| r.status == StageStatus::Ran));
    assert!(first.ledger.is_consistent());
    assert!(first.report.is_some());
    let status = pipeline_status(&cfg).unwrap();
    assert!(status.iter().all(|(_, s)| *s == CheckpointState::Current));

    cfg.rank.cutoff = 10;
    let status = pipeline_status(&cfg).unwrap();
    let state = |st: Stage| status.iter().find(|(s, _)| *s == st).unwrap().1;
    assert_eq!(state(Stage::Embed), CheckpointState::Current);
    assert_eq!(state(Stage::Rank), CheckpointState::Stale);
    assert_eq!(state(Stage::Eval), CheckpointState::Stale);

    match run_pipeline(&cfg, RunOptions::default()) {
        Err(Error::StaleCheckpoint { stage }) => assert_eq!(stage, "rank"),
        other => panic!("expected stale checkpoint, got {other:?}"),
    }

    let forced = run_pipeline(&cfg, RunOptions { force: true }).unwrap();
    assert_eq!(forced.ledger.get(Stage::Embed).unwrap().status, StageStatus::Cached);
    assert_eq!(forced.ledger.get(Stage::Rank).unwrap().status, StageStatus::Ran);
    assert!(forced.ledger.get(Stage::Rank).unwrap().output_count <= 21 * 10);

    let ledger = fs::read_to_string(tmp.path().join(LEDGER_FILE)).unwrap();
    assert_eq!(ledger.lines().next().unwrap(), "run\tstage\tstatus\tinput_count\toutput_count\twall_ms");
    assert_eq!(ledger.lines().count(), 1 + 6 + 6);
}

#[test]
fn stage_failure_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("dup.trec");
    let block = "<DOC>\n<DOCNO>u_0_0</DOCNO>\n<TEXT>same id</TEXT>\n</DOC>\n";
    fs::write(&corpus, block.repeat(2)).unwrap();
    let mut cfg = demo_config(&tmp.path().join("out"), 1);
    cfg.paths.corpus = corpus;
    let err = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "ingest"),
        other => panic!("expected stage error, got {other:?}"),
    }
    assert!(err.to_string().contains("ingest"));
}

#[test]
fn external_stage1_scores_replace_the_linear_model() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.trec");
    demo_corpus_prefix(&corpus, 40);
    let ids: Vec<String> = TrecReader::new(BufReader::new(File::open(&corpus).unwrap()))
        .map(|r| r.unwrap().sentence_id)
        .collect();
    let scores: String = ids
        .iter()
        .enumerate()
        .map(|(i, id)| format!("{id}\t{}\n", if i % 4 == 0 { 0.1 } else { 0.8 }))
        .collect();
    let scores_path = tmp.path().join("scores.tsv");
    fs::write(&scores_path, scores).unwrap();

    let mut cfg = demo_config(&tmp.path().join("out"), 1);
    cfg.paths.corpus = corpus;
    cfg.paths.stage1_scores = Some(scores_path);
    cfg.paths.qrels.clear();
    cfg.filter.stage2_threshold = 0.0;
    cfg.filter.lstm_epochs = 1;
    let out = run_pipeline(&cfg, RunOptions::default()).unwrap();
    let s1 = out.ledger.get(Stage::Stage1).unwrap();
    assert_eq!((s1.input_count, s1.output_count), (40, 30));
    assert_eq!(out.ledger.get(Stage::Stage2).unwrap().output_count, 30);
    assert!(out.ledger.get(Stage::Eval).is_none());
    assert!(out.report.is_none());
}
