//! End-to-end orchestration: ingest → stage1 → stage2 → embed → rank → eval.
//!
//! Every stage leaves a checkpoint in the output directory: a sorted
//! `<stage>.ids` file with the surviving sentence ids, a `<stage>.meta` file
//! holding the stage hash and counts, and its artifacts. The hash covers the
//! stage's input files, its configuration (worker count excluded) and the
//! upstream hash. A rerun skips stages whose hash and artifacts are intact;
//! a changed hash is a stale checkpoint unless forced. Each run appends one
//! row per stage to `ledger.tsv`.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::corpus::{parse_labeled_csv, split_train_validation, LabeledExample, SentenceRecord, TrecReader};
use crate::embed::{EmbeddingCollection, HashEmbedder};
use crate::eval::{aggregate, evaluate_run, JudgmentSet, MetricReport, Qrels, Run};
use crate::filter::linear::{train_linear, LinearConfig};
use crate::filter::lstm::train_lstm;
use crate::filter::{filter_stream, ExternalScores, SentenceScorer};
use crate::rank::{rank_corpus, write_run_file, QueryEmbeddings, RankOptions, SymptomQuerySet};
use crate::text::tokenize;
use crate::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.tsv";
pub const RUN_FILE: &str = "run.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Stage1,
    Stage2,
    Embed,
    Rank,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ingest, Stage::Stage1, Stage::Stage2, Stage::Embed, Stage::Rank, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Embed => "embed",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
        }
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::Stage1 => &[],
            Stage::Stage2 => &["lstm.bdls", "lstm_epochs.tsv"],
            Stage::Embed => &["sentences.bdem", "queries.bdem"],
            Stage::Rank => &[RUN_FILE],
            Stage::Eval => &["report.tsv", "report.json"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "skipped (cached)",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub input_count: u64,
    pub output_count: u64,
    pub wall_ms: u64,
}

/// Per-stage counts for one pipeline run, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReductionLedger {
    pub records: Vec<StageRecord>,
}

impl ReductionLedger {
    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.stage == stage)
    }

    /// Each stage's input equals the previous stage's output, and filters never grow.
    pub fn is_consistent(&self) -> bool {
        let chained = self.records.windows(2).all(|w| w[1].input_count == w[0].output_count);
        let shrinking = self
            .records
            .iter()
            .filter(|r| matches!(r.stage, Stage::Stage1 | Stage::Stage2))
            .all(|r| r.output_count <= r.input_count);
        chained && shrinking
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Recompute stages whose checkpoint hash no longer matches.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub ledger: ReductionLedger,
    pub run_file: PathBuf,
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointState {
    Missing,
    /// Hash matches and artifacts are present; a run would skip it.
    Current,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Meta {
    hash: String,
    input_count: u64,
    output_count: u64,
}

impl Meta {
    fn read(path: &Path) -> Result<Option<Self>> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::file(path, e)),
        };
        let name = path.display().to_string();
        let (mut hash, mut input, mut output) = (None, None, None);
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::line(&name, i + 1, "expected key=value"));
            };
            let count = || v.parse::<u64>().map_err(|_| Error::line(&name, i + 1, format!("bad count {v:?}")));
            match k {
                "hash" => hash = Some(v.to_string()),
                "input_count" => input = Some(count()?),
                "output_count" => output = Some(count()?),
                _ => return Err(Error::line(&name, i + 1, format!("unknown key {k:?}"))),
            }
        }
        match (hash, input, output) {
            (Some(hash), Some(input_count), Some(output_count)) => Ok(Some(Meta {
                hash,
                input_count,
                output_count,
            })),
            _ => Err(Error::invalid(format!("{name}: incomplete checkpoint metadata"))),
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = format!(
            "hash={}\ninput_count={}\noutput_count={}\n",
            self.hash, self.input_count, self.output_count
        );
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }
}

struct StageHasher(Sha256);

impl StageHasher {
    fn new(stage: Stage, upstream: Option<&str>) -> Self {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update([0]);
        h.update(upstream.unwrap_or("").as_bytes());
        h.update([0]);
        StageHasher(h)
    }

    fn value<T: Serialize>(&mut self, key: &str, v: &T) {
        let json = serde_json::to_string(v).expect("config values serialize");
        self.0.update(key.as_bytes());
        self.0.update([0]);
        self.0.update(json.as_bytes());
        self.0.update([0]);
    }

    fn file(&mut self, key: &str, path: &Path) -> Result<()> {
        self.0.update(key.as_bytes());
        self.0.update([0]);
        let mut f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf).map_err(|e| Error::file(path, e))?;
            if n == 0 {
                break;
            }
            self.0.update(&buf[..n]);
        }
        self.0.update([0]);
        Ok(())
    }

    fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Hashes for every active stage, in order. `eval` is present only when qrels are configured.
fn stage_hashes(cfg: &PipelineConfig) -> Result<Vec<(Stage, String)>> {
    let p = &cfg.paths;
    let f = &cfg.filter;
    let mut out: Vec<(Stage, String)> = Vec::new();
    for stage in active_stages(cfg) {
        let mut h = StageHasher::new(stage, out.last().map(|(_, h)| h.as_str()));
        match stage {
            Stage::Ingest => h.file("corpus", &p.corpus)?,
            Stage::Stage1 => {
                h.value("threshold", &f.stage1_threshold);
                if let Some(scores) = &p.stage1_scores {
                    h.file("scores", scores)?;
                } else {
                    h.file("labeled", &p.labeled)?;
                    h.value("validation_fraction", &f.validation_fraction);
                    h.value("linear", &linear_config(cfg));
                }
            }
            Stage::Stage2 => {
                h.file("labeled", &p.labeled)?;
                h.value("threshold", &f.stage2_threshold);
                h.value("validation_fraction", &f.validation_fraction);
                h.value("lstm", &cfg.lstm_config());
            }
            Stage::Embed => {
                h.file("queries", &p.queries)?;
                match &p.embeddings {
                    Some(e) => {
                        h.file("embeddings", e)?;
                        if let Some(q) = &p.query_embeddings {
                            h.file("query_embeddings", q)?;
                        }
                    }
                    None => {
                        h.value("dim", &cfg.rank.embed_dim);
                        h.value("seed", &cfg.run.seed);
                    }
                }
            }
            Stage::Rank => {
                h.value("cutoff", &cfg.rank.cutoff);
                h.value("tag", &cfg.rank.tag);
                h.value("multi_assign", &cfg.rank.multi_assign);
            }
            Stage::Eval => {
                for q in &p.qrels {
                    h.file("qrels", q)?;
                }
                h.value("rule", &cfg.eval.rule);
                h.value("empty_symptoms", &cfg.eval.empty_symptoms);
            }
        }
        out.push((stage, h.finish()));
    }
    Ok(out)
}

fn active_stages(cfg: &PipelineConfig) -> impl Iterator<Item = Stage> + '_ {
    Stage::ALL
        .into_iter()
        .filter(move |s| *s != Stage::Eval || !cfg.paths.qrels.is_empty())
}

fn linear_config(cfg: &PipelineConfig) -> LinearConfig {
    LinearConfig {
        epochs: cfg.filter.linear_epochs,
        learning_rate: cfg.filter.linear_learning_rate,
        batch_size: cfg.filter.linear_batch_size,
        seed: cfg.run.seed,
        buckets: cfg.filter.linear_buckets,
    }
}

fn meta_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.meta"))
}

fn ids_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.ids"))
}

fn has_ids(stage: Stage) -> bool {
    !matches!(stage, Stage::Eval)
}

fn artifacts_present(dir: &Path, stage: Stage) -> bool {
    (!has_ids(stage) || ids_path(dir, stage).is_file()) && stage.artifacts().iter().all(|a| dir.join(a).is_file())
}

/// Reports, per active stage, whether a run would reuse its checkpoint.
pub fn pipeline_status(cfg: &PipelineConfig) -> Result<Vec<(Stage, CheckpointState)>> {
    let dir = &cfg.paths.output_dir;
    let mut out = Vec::new();
    for (stage, hash) in stage_hashes(cfg)? {
        let state = match Meta::read(&meta_path(dir, stage))? {
            None => CheckpointState::Missing,
            Some(m) if m.hash != hash => CheckpointState::Stale,
            Some(_) if !artifacts_present(dir, stage) => CheckpointState::Missing,
            Some(_) => CheckpointState::Current,
        };
        out.push((stage, state));
    }
    Ok(out)
}

fn write_ids(path: &Path, mut ids: Vec<String>) -> Result<()> {
    ids.sort_unstable();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_ids(path: &Path) -> Result<HashSet<String>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::file(path, e)))
        .collect()
}

fn open_corpus(path: &Path) -> Result<TrecReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    Ok(TrecReader::new(BufReader::new(f)))
}

/// Streams the corpus records whose ids are in `keep`; the first parse error lands in `err`.
fn kept_records<'a>(
    reader: TrecReader<BufReader<File>>,
    keep: &'a HashSet<String>,
    err: &'a mut Option<Error>,
) -> impl Iterator<Item = SentenceRecord> + 'a {
    reader
        .map_while(move |r| match r {
            Ok(r) => Some(r),
            Err(e) => {
                *err = Some(e);
                None
            }
        })
        .filter(move |r| keep.contains(&r.sentence_id))
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    split: Option<(Vec<LabeledExample>, Vec<LabeledExample>)>,
}

impl Context<'_> {
    fn split(&mut self) -> Result<(&[LabeledExample], &[LabeledExample])> {
        if self.split.is_none() {
            let path = &self.cfg.paths.labeled;
            let f = File::open(path).map_err(|e| Error::file(path, e))?;
            let data = parse_labeled_csv(f, &path.display().to_string())?;
            self.split = Some(split_train_validation(
                &data.examples,
                self.cfg.filter.validation_fraction,
                self.cfg.run.seed,
            )?);
        }
        let (t, v) = self.split.as_ref().expect("split initialized above");
        Ok((t, v))
    }

    fn filter_stage(&self, upstream: Stage, stage: Stage, scorer: &dyn SentenceScorer, threshold: f64) -> Result<(u64, u64)> {
        let keep = read_ids(&ids_path(self.dir, upstream))?;
        let mut err = None;
        let mut survivors = Vec::new();
        let report = filter_stream(
            scorer,
            kept_records(open_corpus(&self.cfg.paths.corpus)?, &keep, &mut err),
            threshold,
            self.cfg.run.workers,
            |r| {
                survivors.push(r.sentence_id);
                Ok(())
            },
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        write_ids(&ids_path(self.dir, stage), survivors)?;
        Ok((report.input_count, report.output_count))
    }

    fn run(&mut self, stage: Stage) -> Result<(u64, u64)> {
        let cfg = self.cfg;
        let dir = self.dir;
        match stage {
            Stage::Ingest => {
                let mut reader = open_corpus(&cfg.paths.corpus)?;
                let mut ids = Vec::new();
                let mut seen = HashSet::new();
                for rec in reader.by_ref() {
                    let rec = rec?;
                    if !seen.insert(rec.sentence_id.clone()) {
                        return Err(Error::invalid(format!("duplicate sentence id {} in corpus", rec.sentence_id)));
                    }
                    ids.push(rec.sentence_id);
                }
                let stats = reader.stats();
                log::info!(
                    "ingest: {} sentences from {} users ({} empty dropped)",
                    stats.sentence_count,
                    stats.user_count,
                    stats.dropped_empty
                );
                let input = stats.sentence_count + stats.dropped_empty;
                let output = ids.len() as u64;
                write_ids(&ids_path(dir, stage), ids)?;
                Ok((input, output))
            }
            Stage::Stage1 => {
                let scorer: Box<dyn SentenceScorer> = match &cfg.paths.stage1_scores {
                    Some(path) => {
                        let f = File::open(path).map_err(|e| Error::file(path, e))?;
                        Box::new(ExternalScores::parse(BufReader::new(f), &path.display().to_string())?)
                    }
                    None => {
                        let linear = linear_config(cfg);
                        let (train, val) = self.split()?;
                        let model = train_linear(train, Some(val), &linear)?;
                        if let Some(acc) = model.meta.validation_accuracy {
                            log::info!("stage1: linear validation accuracy {acc:.4}");
                        }
                        let path = dir.join("linear.bdlf");
                        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
                        model.write_to(&mut w)?;
                        w.flush()?;
                        Box::new(model)
                    }
                };
                self.filter_stage(Stage::Ingest, stage, scorer.as_ref(), cfg.filter.stage1_threshold)
            }
            Stage::Stage2 => {
                let lstm = cfg.lstm_config();
                let (train, val) = self.split()?;
                let (model, log) = train_lstm(train, Some(val), &lstm)?;
                let path = dir.join("lstm.bdls");
                let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
                model.write_to(&mut w)?;
                w.flush()?;
                let mut epochs = String::from("epoch\ttrain_loss\tvalidation_loss\tvalidation_accuracy\n");
                for e in &log {
                    epochs += &format!(
                        "{}\t{:.6}\t{}\t{}\n",
                        e.epoch,
                        e.train_loss,
                        e.validation_loss.map_or("-".into(), |v| format!("{v:.6}")),
                        e.validation_accuracy.map_or("-".into(), |v| format!("{v:.6}"))
                    );
                }
                let path = dir.join("lstm_epochs.tsv");
                fs::write(&path, epochs).map_err(|e| Error::file(&path, e))?;
                self.filter_stage(Stage::Stage1, stage, &model, cfg.filter.stage2_threshold)
            }
            Stage::Embed => self.embed(),
            Stage::Rank => {
                let sentences = read_bdem(&dir.join("sentences.bdem"))?;
                let queries = QueryEmbeddings::from_collection(&read_bdem(&dir.join("queries.bdem"))?)?;
                let options = RankOptions {
                    cutoff: cfg.rank.cutoff,
                    multi_assign: cfg.rank.multi_assign,
                    workers: cfg.run.workers,
                };
                let pools = rank_corpus(sentences.iter(), &queries, &options)?;
                let path = dir.join(RUN_FILE);
                let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
                write_run_file(&mut w, &pools, &cfg.rank.tag)?;
                w.flush()?;
                let ids: HashSet<&str> = pools.iter().flatten().map(|e| e.sentence_id.as_str()).collect();
                write_ids(&ids_path(dir, stage), ids.into_iter().map(String::from).collect())?;
                let entries = pools.iter().map(Vec::len).sum::<usize>();
                Ok((sentences.len() as u64, entries as u64))
            }
            Stage::Eval => {
                let run_path = dir.join(RUN_FILE);
                let f = File::open(&run_path).map_err(|e| Error::file(&run_path, e))?;
                let run = Run::parse(BufReader::new(f), &run_path.display().to_string())?;
                let mut judgments = JudgmentSet::default();
                for q in &cfg.paths.qrels {
                    let f = File::open(q).map_err(|e| Error::file(q, e))?;
                    judgments.assessors.push(Qrels::parse(BufReader::new(f), &q.display().to_string())?);
                }
                let agg = aggregate(&judgments, cfg.rule()?)?;
                let report = evaluate_run(&run, &agg, cfg.empty_symptoms()?)?;
                for (name, body) in [("report.tsv", report.to_tsv()), ("report.json", report.to_json())] {
                    let path = dir.join(name);
                    fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
                }
                let entries = run.rankings.values().map(Vec::len).sum::<usize>();
                Ok((entries as u64, report.per_symptom.len() as u64))
            }
        }
    }

    fn embed(&self) -> Result<(u64, u64)> {
        let cfg = self.cfg;
        let dir = self.dir;
        let keep = read_ids(&ids_path(dir, Stage::Stage2))?;
        let (sentences, queries) = match &cfg.paths.embeddings {
            Some(path) => {
                let all = read_bdem(path)?;
                let mut sentences = EmbeddingCollection::new(all.dim(), all.provider.clone())?;
                let mut ids: Vec<&String> = keep.iter().collect();
                ids.sort_unstable();
                for id in ids {
                    let v = all
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("{}: no embedding for sentence {id}", path.display())))?;
                    sentences.push(id.as_str(), v)?;
                }
                let queries = match &cfg.paths.query_embeddings {
                    Some(q) => read_bdem(q)?,
                    None => all,
                };
                let queries = QueryEmbeddings::from_collection(&queries)?;
                let mut qcoll = EmbeddingCollection::new(queries.dim(), "precomputed")?;
                push_queries(&mut qcoll, &queries)?;
                (sentences, qcoll)
            }
            None => {
                let embedder = HashEmbedder::new(cfg.rank.embed_dim, cfg.run.seed)?;
                let mut sentences = EmbeddingCollection::new(embedder.dim, "hash")?;
                let mut err = None;
                let mut skipped = 0u64;
                for rec in kept_records(open_corpus(&cfg.paths.corpus)?, &keep, &mut err) {
                    if tokenize(&rec.text).is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let v = embedder.embed(rec.sentence_id.clone(), &rec.text)?;
                    sentences.push(v.id, &v.values)?;
                }
                if let Some(e) = err {
                    return Err(e);
                }
                if skipped > 0 {
                    log::warn!("embed: {skipped} sentences without word tokens left out");
                }
                let path = &cfg.paths.queries;
                let f = File::open(path).map_err(|e| Error::file(path, e))?;
                let set = SymptomQuerySet::parse(BufReader::new(f), &path.display().to_string())?;
                let queries = set.embed(&embedder)?;
                let mut qcoll = EmbeddingCollection::new(queries.dim(), "hash")?;
                push_queries(&mut qcoll, &queries)?;
                (sentences, qcoll)
            }
        };
        for (name, coll) in [("sentences.bdem", &sentences), ("queries.bdem", &queries)] {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
            coll.write_to(&mut w)?;
            w.flush()?;
        }
        write_ids(&ids_path(dir, Stage::Embed), sentences.iter().map(|(id, _)| id.to_string()).collect())?;
        Ok((keep.len() as u64, sentences.len() as u64))
    }
}

fn push_queries(coll: &mut EmbeddingCollection, queries: &QueryEmbeddings) -> Result<()> {
    use crate::rank::{query_id, PARAPHRASES_PER_SYMPTOM, QUERY_COUNT};
    for k in 0..QUERY_COUNT {
        let id = query_id((k / PARAPHRASES_PER_SYMPTOM + 1) as u8, (k % PARAPHRASES_PER_SYMPTOM + 1) as u8);
        coll.push(id, queries.query(k))?;
    }
    Ok(())
}

fn read_bdem(path: &Path) -> Result<EmbeddingCollection> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    EmbeddingCollection::read_from(&mut BufReader::new(f), path.display().to_string())
}

fn append_ledger(dir: &Path, ledger: &ReductionLedger) -> Result<()> {
    let path = dir.join(LEDGER_FILE);
    let existing = match fs::read_to_string(&path) {
        Ok(t) => Some(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::file(&path, e)),
    };
    let run = existing
        .as_deref()
        .and_then(|t| t.lines().last())
        .and_then(|l| l.split('\t').next())
        .and_then(|n| n.parse::<u64>().ok())
        .map_or(1, |n| n + 1);
    let mut out = String::new();
    if existing.is_none() {
        out += "run\tstage\tstatus\tinput_count\toutput_count\twall_ms\n";
    }
    for r in &ledger.records {
        out += &format!(
            "{run}\t{}\t{}\t{}\t{}\t{}\n",
            r.stage, r.status, r.input_count, r.output_count, r.wall_ms
        );
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::file(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::file(&path, e))
}

/// Runs every stage in order, reusing intact checkpoints.
pub fn run_pipeline(cfg: &PipelineConfig, options: RunOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    let dir = cfg.paths.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut ctx = Context { cfg, dir, split: None };
    let mut ledger = ReductionLedger::default();
    for (stage, hash) in stage_hashes(cfg)? {
        let meta_file = meta_path(dir, stage);
        let previous = Meta::read(&meta_file)?;
        if let Some(m) = &previous {
            if m.hash == hash && artifacts_present(dir, stage) {
                log::info!("{stage}: skipped (cached)");
                ledger.records.push(StageRecord {
                    stage,
                    status: StageStatus::Cached,
                    input_count: m.input_count,
                    output_count: m.output_count,
                    wall_ms: 0,
                });
                continue;
            }
            if m.hash != hash && !options.force {
                return Err(Error::StaleCheckpoint {
                    stage: stage.name().into(),
                });
            }
        }
        let start = Instant::now();
        let (input_count, output_count) = ctx.run(stage).map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })?;
        let wall_ms = start.elapsed().as_millis() as u64;
        log::info!("{stage}: {input_count} -> {output_count} in {wall_ms} ms");
        Meta {
            hash,
            input_count,
            output_count,
        }
        .write(&meta_file)?;
        ledger.records.push(StageRecord {
            stage,
            status: StageStatus::Ran,
            input_count,
            output_count,
            wall_ms,
        });
    }
    append_ledger(dir, &ledger)?;
    if !ledger.is_consistent() {
        log::warn!("reduction ledger counts do not chain; checkpoints may come from different runs");
    }
    let report = if cfg.paths.qrels.is_empty() {
        None
    } else {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?)
    };
    Ok(PipelineOutput {
        ledger,
        run_file: dir.join(RUN_FILE),
        report,
    })
}
