use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/demo")
}

fn bdirank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdirank")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bdirank(&[]).status.code(), Some(1));
    assert_eq!(bdirank(&["rank", "--cutoff", "x"]).status.code(), Some(1));
    assert_eq!(bdirank(&["--help"]).status.code(), Some(0));
    assert_eq!(bdirank(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let o = bdirank(&["corpus", "stats", "/nonexistent/corpus.trec"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.trec");
    fs::write(&bad, "<DOC>\n<DOCNO>a_0_0</DOCNO>\n<TEXT>unterminated\n").unwrap();
    assert_eq!(bdirank(&["corpus", "validate", s(&bad)]).status.code(), Some(2));
}

#[test]
fn corpus_stats_on_demo() {
    let o = bdirank(&["corpus", "stats", s(&demo().join("corpus.trec"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("users\t20"), "{out}");
    assert!(out.contains("sentences\t200"), "{out}");
    let o = bdirank(&["corpus", "labeled", s(&demo().join("labeled.csv"))]);
    assert!(o.status.success());
}

#[test]
fn embed_rank_eval_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let sent = tmp.path().join("s.bdem");
    let qemb = tmp.path().join("q.bdem");
    let run = tmp.path().join("run.txt");
    let corpus = demo().join("corpus.trec");
    let queries = demo().join("queries.tsv");
    assert!(bdirank(&["embed", "hash", "--corpus", s(&corpus), "--out", s(&sent), "--dim", "64"]).status.success());
    assert!(bdirank(&["embed", "hash", "--queries", s(&queries), "--out", s(&qemb), "--dim", "64"]).status.success());
    let check = bdirank(&["embed", "check", s(&sent)]);
    assert!(check.status.success());
    assert!(stdout(&check).contains("count\t200"));

    let o = bdirank(&["rank", "--queries", s(&qemb), "--embeddings", s(&sent), "--cutoff", "5", "--out", s(&run)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&run).unwrap();
    assert!(text.lines().count() <= 21 * 5);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 6 && l.ends_with(" bdirank")));

    let from_tsv = bdirank(&["rank", "--queries", s(&queries), "--embeddings", s(&sent), "--cutoff", "5"]);
    assert!(from_tsv.status.success());
    assert_eq!(stdout(&from_tsv), text);

    let qrels: Vec<String> = (1..=3).map(|i| s(&demo().join(format!("qrels_a{i}.txt"))).to_string()).collect();
    let mut args = vec!["eval", "--run", s(&run), "--qrels"];
    args.extend(qrels.iter().map(String::as_str));
    let o = bdirank(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    assert!(report.starts_with("symptom\trelevant\tretrieved\tAP\tR-PREC\tP@10\tNDCG@1000"));
    assert!(report.lines().last().unwrap().starts_with("all\t-\t-"));
    let json = tmp.path().join("report.json");
    args.extend(["--rule", "unanimity", "--json", s(&json)]);
    assert!(bdirank(&args).status.success());
    assert!(fs::read_to_string(&json).unwrap().contains("\"rule\": \"unanimity\""));
}

#[test]
fn embed_check_flags_off_norm_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("bad.bdem");
    let mut bytes = b"BDEM".to_vec();
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(1u64.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    bytes.push(b'a');
    bytes.extend(3.0f32.to_le_bytes());
    bytes.extend(4.0f32.to_le_bytes());
    fs::write(&f, bytes).unwrap();
    let o = bdirank(&["embed", "check", s(&f)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_run_and_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = fs::read_to_string(demo().join("demo.toml")).unwrap();
    let dir = demo().canonicalize().unwrap();
    let mut cfg_text = cfg_text.replace("output_dir = \"out\"", &format!("output_dir = {:?}", s(&tmp.path().join("out"))));
    for f in ["corpus.trec", "labeled.csv", "queries.tsv", "qrels_a1.txt", "qrels_a2.txt", "qrels_a3.txt"] {
        cfg_text = cfg_text.replace(&format!("\"{f}\""), &format!("{:?}", s(&dir.join(f))));
    }
    cfg_text = cfg_text.replace("lstm_epochs = 15", "lstm_epochs = 2");
    let cfg = tmp.path().join("p.toml");
    fs::write(&cfg, &cfg_text).unwrap();

    let o = bdirank(&["pipeline", "status", "--config", s(&cfg)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("missing"));

    let o = bdirank(&["pipeline", "run", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("out/run.txt").exists());
    let o = bdirank(&["pipeline", "run", "--config", s(&cfg)]);
    assert!(stdout(&o).contains("skipped (cached)"));

    fs::write(&cfg, cfg_text.replace("tag = \"demo\"", "tag = \"other\"")).unwrap();
    let o = bdirank(&["pipeline", "run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stale"));
    let o = bdirank(&["pipeline", "status", "--config", s(&cfg)]);
    assert!(stdout(&o).contains("stale"));
    assert!(bdirank(&["pipeline", "run", "--config", s(&cfg), "--force"]).status.success());

    fs::write(&cfg, cfg_text.replace("[rank]", "[rank]\ncutof = 5")).unwrap();
    let o = bdirank(&["pipeline", "run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cutof"));
}
