//! Pipeline configuration: a TOML file with `[paths]`, `[filter]`, `[rank]`,
//! `[eval]` and `[run]` sections.
//!
//! Only `[paths]` is required. Relative paths resolve against the directory
//! holding the config file. Unknown keys are rejected so typos surface early,
//! and environment variables are never consulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{AggregationRule, EmptySymptoms};
use crate::filter::linear::DEFAULT_BUCKETS;
use crate::filter::lstm::LstmConfig;
use crate::filter::DEFAULT_THRESHOLD;
use crate::rank::DEFAULT_CUTOFF;
use crate::{embed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// TREC sentence corpus.
    pub corpus: PathBuf,
    /// Labeled `text,label` CSV used to train both filters.
    pub labeled: PathBuf,
    /// Symptom query TSV (`symptom_id<TAB>paraphrase_index<TAB>text`).
    pub queries: PathBuf,
    pub output_dir: PathBuf,
    /// Precomputed sentence embeddings (`BDEM`). Without it the hash embedder is used.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Precomputed query embeddings; defaults to the `q<s>_<p>` ids inside `embeddings`.
    #[serde(default)]
    pub query_embeddings: Option<PathBuf>,
    /// External stage-1 scores (`sentence_id<TAB>score`) replacing the linear classifier.
    #[serde(default)]
    pub stage1_scores: Option<PathBuf>,
    /// One qrels file per assessor; evaluation runs only when present.
    #[serde(default)]
    pub qrels: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub stage1_threshold: f64,
    pub stage2_threshold: f64,
    pub validation_fraction: f64,
    pub linear_epochs: usize,
    pub linear_learning_rate: f64,
    pub linear_batch_size: usize,
    pub linear_buckets: u32,
    pub lstm_epochs: usize,
    pub lstm_learning_rate: f64,
    pub lstm_batch_size: usize,
    pub lstm_max_len: usize,
    pub lstm_vocab_size: usize,
    pub lstm_embed_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_dropout: f64,
    pub lstm_clip_norm: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let lstm = LstmConfig::default();
        FilterConfig {
            stage1_threshold: DEFAULT_THRESHOLD,
            stage2_threshold: DEFAULT_THRESHOLD,
            validation_fraction: 0.1,
            linear_epochs: 20,
            linear_learning_rate: 0.1,
            linear_batch_size: 32,
            linear_buckets: DEFAULT_BUCKETS,
            lstm_epochs: lstm.epochs,
            lstm_learning_rate: lstm.learning_rate,
            lstm_batch_size: lstm.batch_size,
            lstm_max_len: lstm.max_len,
            lstm_vocab_size: lstm.vocab_size,
            lstm_embed_dim: lstm.embed_dim,
            lstm_hidden: lstm.hidden,
            lstm_dropout: lstm.dropout,
            lstm_clip_norm: lstm.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub cutoff: usize,
    pub tag: String,
    pub multi_assign: bool,
    /// Hash-embedder dimension; ignored when precomputed embeddings are given.
    pub embed_dim: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            cutoff: DEFAULT_CUTOFF,
            tag: "bdirank".into(),
            multi_assign: false,
            embed_dim: embed::DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rule: String,
    pub empty_symptoms: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rule: "majority".into(),
            empty_symptoms: "exclude".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: std::thread::available_parallelism().map_or(1, usize::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl PipelineConfig {
    /// Parses config text without touching the filesystem; paths stay as written.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{source_name}: {}", e.to_string().trim_end())))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.corpus);
        fix(&mut paths.labeled);
        fix(&mut paths.queries);
        fix(&mut paths.output_dir);
        for p in [&mut paths.embeddings, &mut paths.query_embeddings, &mut paths.stage1_scores]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        paths.qrels.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        let mut inputs = vec![("corpus", &p.corpus), ("labeled", &p.labeled), ("queries", &p.queries)];
        inputs.extend(p.embeddings.iter().map(|x| ("embeddings", x)));
        inputs.extend(p.query_embeddings.iter().map(|x| ("query_embeddings", x)));
        inputs.extend(p.stage1_scores.iter().map(|x| ("stage1_scores", x)));
        inputs.extend(p.qrels.iter().map(|x| ("qrels", x)));
        for (key, path) in inputs {
            if !path.is_file() {
                return Err(Error::Config(format!("paths.{key}: {} does not exist", path.display())));
            }
        }
        if p.query_embeddings.is_some() && p.embeddings.is_none() {
            return Err(Error::Config("paths.query_embeddings requires paths.embeddings".into()));
        }
        let f = &self.filter;
        for (key, t) in [("stage1_threshold", f.stage1_threshold), ("stage2_threshold", f.stage2_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("filter.{key} must be in [0, 1], got {t}")));
            }
        }
        if !(f.validation_fraction > 0.0 && f.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "filter.validation_fraction must be in (0, 1), got {}",
                f.validation_fraction
            )));
        }
        if f.linear_epochs == 0 || f.linear_batch_size == 0 || f.linear_buckets == 0 {
            return Err(Error::Config("filter.linear_epochs, linear_batch_size and linear_buckets must be at least 1".into()));
        }
        if !(f.linear_learning_rate.is_finite() && f.linear_learning_rate > 0.0) {
            return Err(Error::Config("filter.linear_learning_rate must be positive".into()));
        }
        self.lstm_config().validate().map_err(|e| Error::Config(format!("filter.lstm_*: {e}")))?;
        if self.rank.cutoff == 0 {
            return Err(Error::Config("rank.cutoff must be at least 1".into()));
        }
        if self.rank.tag.is_empty() || self.rank.tag.contains(char::is_whitespace) {
            return Err(Error::Config(format!("rank.tag must be a single token, got {:?}", self.rank.tag)));
        }
        if self.rank.embed_dim < 2 {
            return Err(Error::Config("rank.embed_dim must be at least 2".into()));
        }
        self.rule()?;
        self.empty_symptoms()?;
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rule(&self) -> Result<AggregationRule> {
        self.eval.rule.parse().map_err(|e| Error::Config(format!("eval.rule: {e}")))
    }

    pub fn empty_symptoms(&self) -> Result<EmptySymptoms> {
        match self.eval.empty_symptoms.as_str() {
            "exclude" => Ok(EmptySymptoms::Exclude),
            "zero" => Ok(EmptySymptoms::Zero),
            other => Err(Error::Config(format!("eval.empty_symptoms must be exclude or zero, got {other:?}"))),
        }
    }

    pub fn lstm_config(&self) -> LstmConfig {
        let f = &self.filter;
        LstmConfig {
            epochs: f.lstm_epochs,
            batch_size: f.lstm_batch_size,
            learning_rate: f.lstm_learning_rate,
            max_len: f.lstm_max_len,
            seed: self.run.seed,
            vocab_size: f.lstm_vocab_size,
            embed_dim: f.lstm_embed_dim,
            hidden: f.lstm_hidden,
            dropout: f.lstm_dropout,
            clip_norm: f.lstm_clip_norm,
        }
    }
}
