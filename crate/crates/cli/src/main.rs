use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdirank::config::PipelineConfig;
use bdirank::corpus::{parse_labeled_csv, split_train_validation, write_trec_record, TrecReader};
use bdirank::embed::{self, EmbeddingCollection, HashEmbedder};
use bdirank::eval::{aggregate, evaluate_run, AggregationRule, EmptySymptoms, JudgmentSet, Qrels, Run};
use bdirank::filter::linear::{train_linear, LinearConfig, LinearModel};
use bdirank::filter::lstm::{train_lstm, LstmConfig, LstmModel};
use bdirank::filter::{filter_stream, ExternalScores, SentenceScorer, DEFAULT_THRESHOLD};
use bdirank::pipeline::{pipeline_status, run_pipeline, RunOptions};
use bdirank::rank::{rank_corpus, write_run_file, QueryEmbeddings, RankOptions, SymptomQuerySet, DEFAULT_CUTOFF};
use bdirank::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Depression-symptom sentence retrieval over TREC-formatted corpora.
#[derive(Parser)]
#[command(name = "bdirank", version)]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect and validate corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train relevance filters and apply them to a corpus.
    #[command(subcommand)]
    Filter(FilterCmd),
    /// Produce and validate BDEM embedding files.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Rank sentence embeddings against the 84 symptom queries.
    Rank(RankArgs),
    /// Score a run file against assessor judgments.
    Eval(EvalArgs),
    /// Run the end-to-end pipeline from a config file.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Print user and sentence counts for a TREC corpus.
    Stats {
        corpus: PathBuf,
        /// Skip malformed blocks instead of stopping at the first one.
        #[arg(long)]
        recover: bool,
    },
    /// Parse a TREC corpus and report every malformed block.
    Validate { corpus: PathBuf },
    /// Print row and class counts for a labeled `text,label` CSV.
    Labeled { csv: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled `text,label` CSV.
    #[arg(long)]
    labeled: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Fraction held out for validation, stratified by class.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
}

#[derive(Subcommand)]
enum FilterCmd {
    /// Train the hashed n-gram logistic classifier (writes BDLF).
    TrainLinear {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
    },
    /// Train the LSTM classifier (writes BDLS).
    TrainLstm {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Per-epoch loss and accuracy as TSV.
        #[arg(long)]
        epoch_log: Option<PathBuf>,
    },
    /// Keep the corpus sentences whose score reaches the threshold.
    Run {
        /// 1 scores with a BDLF model or an external score file, 2 with a BDLS model.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
        model: Option<PathBuf>,
        /// `sentence_id<TAB>score` file used instead of a stage-1 model.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Surviving sentences as a TREC corpus.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Embed corpus sentences or symptom queries with the deterministic hash embedder.
    Hash {
        #[arg(long, required_unless_present = "queries", conflicts_with = "queries")]
        corpus: Option<PathBuf>,
        /// Symptom query TSV; ids become `q<symptom>_<paraphrase>`.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = embed::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Validate a BDEM file: header, duplicate ids and unit norms.
    Check { file: PathBuf },
}

#[derive(Args)]
struct RankArgs {
    /// BDEM file holding the 84 `q<symptom>_<paraphrase>` query vectors, or a
    /// query TSV to embed on the fly with the hash embedder.
    #[arg(long)]
    queries: PathBuf,
    /// Hash embedder seed, used only when `--queries` is a TSV.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// BDEM file of sentence vectors.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: usize,
    #[arg(long, default_value = "bdirank")]
    tag: String,
    /// Score every sentence against every symptom instead of its best match only.
    #[arg(long)]
    multi_assign: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run file to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Majority,
    Unanimity,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmptyArg {
    Exclude,
    Zero,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// One qrels file per assessor.
    #[arg(long, num_args = 1.., required = true)]
    qrels: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "majority")]
    rule: RuleArg,
    /// How to treat symptoms without any relevant sentence.
    #[arg(long, value_enum, default_value = "exclude")]
    empty_symptoms: EmptyArg,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage, reusing intact checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Recompute stages whose checkpoint no longer matches.
        #[arg(long)]
        force: bool,
    },
    /// Show which stage checkpoints are current, stale or missing.
    Status {
        #[arg(long)]
        config: PathBuf,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| file_error(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| file_error(path, e))
}

fn file_error(path: &Path, e: io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source: e,
    }
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Stats { corpus, recover } => {
            let mut reader = TrecReader::new(open(&corpus)?).recover(recover);
            for rec in reader.by_ref() {
                if let Err(e) = rec {
                    if !recover {
                        return Err(e);
                    }
                    log::warn!("{e}");
                }
            }
            let s = reader.stats();
            println!("users\t{}", s.user_count);
            println!("sentences\t{}", s.sentence_count);
            match s.mean_sentences_per_user() {
                Some(m) => println!("mean_sentences_per_user\t{m:.1}"),
                None => println!("mean_sentences_per_user\t-"),
            }
            println!("dropped_empty\t{}", s.dropped_empty);
            println!("malformed_blocks\t{}", s.malformed_blocks);
            println!("opaque_ids\t{}", s.opaque_ids);
            Ok(())
        }
        CorpusCmd::Validate { corpus } => {
            let mut reader = TrecReader::new(open(&corpus)?).recover(true);
            let mut errors = 0u64;
            for rec in reader.by_ref() {
                if let Err(e) = rec {
                    errors += 1;
                    eprintln!("{}: {e}", name(&corpus));
                }
            }
            let s = reader.stats();
            println!("{} sentences, {} malformed blocks", s.sentence_count, errors);
            if errors > 0 {
                return Err(Error::InvalidInput(format!("{}: {errors} malformed block(s)", name(&corpus))));
            }
            Ok(())
        }
        CorpusCmd::Labeled { csv } => {
            let data = parse_labeled_csv(open(&csv)?, &name(&csv))?;
            println!("rows\t{}", data.examples.len());
            println!("positive\t{}", data.positives);
            println!("negative\t{}", data.negatives);
            Ok(())
        }
    }
}

fn load_split(args: &TrainArgs) -> Result<(Vec<bdirank::corpus::LabeledExample>, Vec<bdirank::corpus::LabeledExample>)> {
    let data = parse_labeled_csv(open(&args.labeled)?, &name(&args.labeled))?;
    split_train_validation(&data.examples, args.validation_fraction, args.seed)
}

fn filter(cmd: FilterCmd) -> Result<()> {
    match cmd {
        FilterCmd::TrainLinear {
            common,
            epochs,
            learning_rate,
        } => {
            let (train, val) = load_split(&common)?;
            let config = LinearConfig {
                epochs,
                learning_rate,
                seed: common.seed,
                ..LinearConfig::default()
            };
            let model = train_linear(&train, Some(&val), &config)?;
            let mut w = create(&common.out)?;
            model.write_to(&mut w)?;
            w.flush()?;
            if let Some(acc) = model.meta.validation_accuracy {
                println!("validation_accuracy\t{acc:.4}");
            }
            Ok(())
        }
        FilterCmd::TrainLstm {
            common,
            epochs,
            learning_rate,
            embed_dim,
            hidden,
            max_len,
            epoch_log,
        } => {
            let (train, val) = load_split(&common)?;
            let config = LstmConfig {
                epochs,
                learning_rate,
                embed_dim,
                hidden,
                max_len,
                seed: common.seed,
                ..LstmConfig::default()
            };
            let (model, log) = train_lstm(&train, Some(&val), &config)?;
            let mut w = create(&common.out)?;
            model.write_to(&mut w)?;
            w.flush()?;
            let mut table = String::from("epoch\ttrain_loss\tvalidation_loss\tvalidation_accuracy\n");
            for e in &log {
                table += &format!(
                    "{}\t{:.6}\t{:.6}\t{:.4}\n",
                    e.epoch,
                    e.train_loss,
                    e.validation_loss.unwrap_or(f64::NAN),
                    e.validation_accuracy.unwrap_or(f64::NAN)
                );
            }
            match epoch_log {
                Some(path) => std::fs::write(&path, table).map_err(|e| file_error(&path, e))?,
                None => print!("{table}"),
            }
            Ok(())
        }
        FilterCmd::Run {
            stage,
            model,
            scores,
            corpus,
            out,
            threshold,
            workers,
        } => {
            let scorer: Box<dyn SentenceScorer> = match (stage, model, scores) {
                (1, None, Some(path)) => Box::new(ExternalScores::parse(open(&path)?, &name(&path))?),
                (1, Some(path), None) => Box::new(LinearModel::read_from(&mut open(&path)?)?),
                (2, Some(path), None) => Box::new(LstmModel::read_from(&mut open(&path)?)?),
                _ => return Err(Error::InvalidInput("stage 2 needs --model with a BDLS file".into())),
            };
            let mut reader = TrecReader::new(open(&corpus)?);
            let mut parse_error = None;
            let records = reader.by_ref().map_while(|r| r.map_err(|e| parse_error = Some(e)).ok());
            let mut w = create(&out)?;
            let report = filter_stream(scorer.as_ref(), records, threshold, workers, |r| write_trec_record(&mut w, &r))?;
            if let Some(e) = parse_error {
                return Err(e);
            }
            w.flush()?;
            println!("input_count\t{}", report.input_count);
            println!("output_count\t{}", report.output_count);
            Ok(())
        }
    }
}

fn embed_cmd(cmd: EmbedCmd) -> Result<()> {
    match cmd {
        EmbedCmd::Hash {
            corpus,
            queries,
            out,
            dim,
            seed,
        } => {
            let embedder = HashEmbedder::new(dim, seed)?;
            let mut coll = EmbeddingCollection::new(dim, "hash")?;
            if let Some(path) = queries {
                let q = SymptomQuerySet::parse(open(&path)?, &name(&path))?.embed(&embedder)?;
                for k in 0..bdirank::rank::QUERY_COUNT {
                    let id = bdirank::rank::query_id((k / 4 + 1) as u8, (k % 4 + 1) as u8);
                    coll.push(id, q.query(k))?;
                }
            } else if let Some(path) = corpus {
                for rec in TrecReader::new(open(&path)?) {
                    let rec = rec?;
                    let v = embedder.embed(rec.sentence_id, &rec.text)?;
                    coll.push(v.id, &v.values)?;
                }
            }
            let mut w = create(&out)?;
            coll.write_to(&mut w)?;
            w.flush()?;
            println!("{} vectors of dimension {dim}", coll.len());
            Ok(())
        }
        EmbedCmd::Check { file } => {
            let report = embed::check(&mut open(&file)?)?;
            println!("count\t{}", report.count);
            println!("dim\t{}", report.dim);
            println!("renormalized\t{}", report.renormalized);
            println!("max_norm_error\t{:.3e}", report.max_norm_error);
            if !report.passed() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} vector(s) off unit norm by more than {}",
                    name(&file),
                    report.renormalized,
                    embed::NORM_TOLERANCE
                )));
            }
            Ok(())
        }
    }
}

fn rank(args: RankArgs) -> Result<()> {
    let sentences = EmbeddingCollection::read_from(&mut open(&args.embeddings)?, name(&args.embeddings))?;
    let raw = std::fs::read(&args.queries).map_err(|e| file_error(&args.queries, e))?;
    let queries = if raw.starts_with(b"BDEM") {
        QueryEmbeddings::from_collection(&EmbeddingCollection::read_from(&mut raw.as_slice(), name(&args.queries))?)?
    } else {
        let embedder = HashEmbedder::new(sentences.dim(), args.seed)?;
        SymptomQuerySet::parse(raw.as_slice(), &name(&args.queries))?.embed(&embedder)?
    };
    let options = RankOptions {
        cutoff: args.cutoff,
        multi_assign: args.multi_assign,
        workers: args.workers,
    };
    let pools = rank_corpus(sentences.iter(), &queries, &options)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_run_file(&mut w, &pools, &args.tag)?;
            w.flush()?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            write_run_file(&mut w, &pools, &args.tag)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let run = Run::parse(open(&args.run)?, &name(&args.run))?;
    let mut judgments = JudgmentSet::default();
    for q in &args.qrels {
        judgments.assessors.push(Qrels::parse(open(q)?, &name(q))?);
    }
    let rule = match args.rule {
        RuleArg::Majority => AggregationRule::Majority,
        RuleArg::Unanimity => AggregationRule::Unanimity,
    };
    let empty = match args.empty_symptoms {
        EmptyArg::Exclude => EmptySymptoms::Exclude,
        EmptyArg::Zero => EmptySymptoms::Zero,
    };
    let report = evaluate_run(&run, &aggregate(&judgments, rule)?, empty)?;
    print!("{}", report.to_tsv());
    if let Some(path) = args.json {
        std::fs::write(&path, report.to_json()).map_err(|e| file_error(&path, e))?;
    }
    Ok(())
}

fn pipeline(cmd: PipelineCmd) -> Result<()> {
    match cmd {
        PipelineCmd::Run { config, force } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = run_pipeline(&cfg, RunOptions { force })?;
            println!("stage\tstatus\tinput_count\toutput_count\twall_ms");
            for r in &out.ledger.records {
                println!("{}\t{}\t{}\t{}\t{}", r.stage, r.status, r.input_count, r.output_count, r.wall_ms);
            }
            println!("run file: {}", out.run_file.display());
            if let Some(report) = out.report {
                let m = report.mean;
                println!(
                    "{} voting: AP {:.4}  R-PREC {:.4}  P@10 {:.4}  NDCG@1000 {:.4}",
                    report.rule, m.ap, m.r_precision, m.precision_at_10, m.ndcg_at_1000
                );
            }
            Ok(())
        }
        PipelineCmd::Status { config } => {
            let cfg = PipelineConfig::load(&config)?;
            for (stage, state) in pipeline_status(&cfg)? {
                let state = match state {
                    bdirank::pipeline::CheckpointState::Missing => "missing",
                    bdirank::pipeline::CheckpointState::Current => "current",
                    bdirank::pipeline::CheckpointState::Stale => "stale",
                };
                println!("{stage}\t{state}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Filter(c) => filter(c),
        Command::Embed(c) => embed_cmd(c),
        Command::Rank(a) => rank(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(c) => pipeline(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { EXIT_INTERNAL } else { EXIT_DATA })
        }
    }
}

