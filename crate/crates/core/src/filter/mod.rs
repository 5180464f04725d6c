//! Relevance filters.
//!
//! Both stages share one contract: score each sentence with a probability of
//! being depression-related, keep those at or above a threshold, and preserve
//! input order. Scoring fans out over chunks on a worker pool; the order of the
//! survivors never depends on the worker count.

pub mod linear;
pub mod lstm;

use std::collections::HashMap;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const CHUNK_SIZE: usize = 4096;

/// Anything that can assign a relevance probability to a sentence.
pub trait SentenceScorer: Sync {
    fn score_sentence(&self, record: &SentenceRecord) -> Result<f64>;
}

/// Input/output counts for one filter pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub input_count: u64,
    pub output_count: u64,
}

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Streams `records` through `scorer`, handing survivors to `emit` in input order.
pub fn filter_stream<S, I, F>(scorer: &S, records: I, threshold: f64, workers: usize, mut emit: F) -> Result<ReductionReport>
where
    S: SentenceScorer + ?Sized,
    I: IntoIterator<Item = SentenceRecord>,
    F: FnMut(SentenceRecord) -> Result<()>,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let pool = worker_pool(workers)?;
    let mut report = ReductionReport {
        input_count: 0,
        output_count: 0,
    };
    let mut iter = records.into_iter();
    let mut chunk = Vec::with_capacity(CHUNK_SIZE);
    loop {
        chunk.clear();
        chunk.extend(iter.by_ref().take(CHUNK_SIZE));
        if chunk.is_empty() {
            break;
        }
        let scores: Vec<f64> = pool.install(|| chunk.par_iter().map(|r| scorer.score_sentence(r)).collect::<Result<_>>())?;
        report.input_count += chunk.len() as u64;
        for (rec, score) in chunk.drain(..).zip(scores) {
            if score >= threshold {
                report.output_count += 1;
                emit(rec)?;
            }
        }
    }
    Ok(report)
}

/// Collecting variant of [`filter_stream`].
pub fn filter_records<S: SentenceScorer + ?Sized>(
    scorer: &S,
    records: impl IntoIterator<Item = SentenceRecord>,
    threshold: f64,
    workers: usize,
) -> Result<(Vec<SentenceRecord>, ReductionReport)> {
    let mut out = Vec::new();
    let report = filter_stream(scorer, records, threshold, workers, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok((out, report))
}

/// Externally computed per-sentence scores (`sentence_id<TAB>score` lines),
/// usable in place of a trained stage-1 model.
#[derive(Debug, Clone, Default)]
pub struct ExternalScores {
    scores: HashMap<String, f64>,
}

impl ExternalScores {
    pub fn parse<R: BufRead>(input: R, source_name: &str) -> Result<Self> {
        let mut scores = HashMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (id, score) = line
                .split_once('\t')
                .ok_or_else(|| Error::line(source_name, lineno, "expected sentence_id<TAB>score"))?;
            let score: f64 = score
                .trim()
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| Error::line(source_name, lineno, format!("bad score {score:?}")))?;
            if scores.insert(id.to_string(), score).is_some() {
                return Err(Error::line(source_name, lineno, format!("duplicate sentence id {id}")));
            }
        }
        Ok(ExternalScores { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl SentenceScorer for ExternalScores {
    fn score_sentence(&self, record: &SentenceRecord) -> Result<f64> {
        self.scores
            .get(&record.sentence_id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no external score for {}", record.sentence_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(HashMap<String, f64>);

    impl SentenceScorer for Fixed {
        fn score_sentence(&self, r: &SentenceRecord) -> Result<f64> {
            Ok(self.0[&r.sentence_id])
        }
    }

    fn records(n: usize) -> Vec<SentenceRecord> {
        (0..n).map(|i| SentenceRecord::structured("u", 0, i as u32, format!("t{i}"))).collect()
    }

    #[test]
    fn threshold_extremes() {
        let recs = records(10);
        let scorer = Fixed(recs.iter().enumerate().map(|(i, r)| (r.sentence_id.clone(), i as f64 / 10.0)).collect());
        let (out, rep) = filter_records(&scorer, recs.clone(), 0.0, 2).unwrap();
        assert_eq!(out, recs);
        assert_eq!(rep.output_count, rep.input_count);
        let (out, _) = filter_records(&scorer, recs, 1.0, 2).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn rejects_bad_threshold() {
        let scorer = Fixed(HashMap::new());
        assert!(filter_records(&scorer, Vec::new(), 1.5, 1).is_err());
        assert!(filter_records(&scorer, Vec::new(), 0.5, 0).is_err());
    }

    #[test]
    fn external_scores() {
        let ext = ExternalScores::parse("a\t0.9\nb\t0.1\n".as_bytes(), "s.tsv").unwrap();
        let recs = vec![SentenceRecord::from_id("a", "x"), SentenceRecord::from_id("b", "y")];
        let (out, _) = filter_records(&ext, recs.clone(), 0.5, 1).unwrap();
        assert_eq!(out, &recs[..1]);
        assert!(ext.score_sentence(&SentenceRecord::from_id("c", "z")).is_err());
        assert!(ExternalScores::parse("a 0.9\n".as_bytes(), "s.tsv").is_err());
        assert!(ExternalScores::parse("a\t0.9\na\t0.2\n".as_bytes(), "s.tsv").is_err());
    }

    proptest! {
        #[test]
        fn output_is_ordered_subsequence(scores in proptest::collection::vec(0.0f64..=1.0, 0..300), threshold in 0.0f64..=1.0, workers in 1usize..6) {
            let recs = records(scores.len());
            let scorer = Fixed(recs.iter().zip(&scores).map(|(r, s)| (r.sentence_id.clone(), *s)).collect());
            let (out, rep) = filter_records(&scorer, recs.clone(), threshold, workers).unwrap();
            let expected: Vec<_> = recs.iter().zip(&scores).filter(|(_, s)| **s >= threshold).map(|(r, _)| r.clone()).collect();
            prop_assert_eq!(&out, &expected);
            prop_assert_eq!(rep.output_count as usize, out.len());
            let (single, _) = filter_records(&scorer, recs, threshold, 1).unwrap();
            prop_assert_eq!(out, single);
        }
    }
}
