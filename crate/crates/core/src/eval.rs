//! Relevance judgments, assessor aggregation and ranking metrics.
//!
//! Unjudged pairs are non-relevant. NDCG uses binary gain with a
//! `1 / log2(rank + 1)` discount from rank 1. Symptoms without any relevant
//! sentence under the chosen rule are left out of the macro average by
//! default ([`EmptySymptoms::Exclude`]).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rank::SYMPTOM_COUNT;
use crate::{Error, Result};

pub const DEFAULT_PRECISION_K: usize = 10;
pub const DEFAULT_NDCG_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationRule {
    /// Relevant iff a strict majority of assessors (2 of 3) says so.
    Majority,
    /// Relevant iff every assessor says so.
    Unanimity,
}

impl AggregationRule {
    pub fn decide(self, positives: usize, assessors: usize) -> bool {
        match self {
            AggregationRule::Majority => 2 * positives > assessors,
            AggregationRule::Unanimity => positives == assessors,
        }
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(AggregationRule::Majority),
            "unanimity" => Ok(AggregationRule::Unanimity),
            other => Err(Error::invalid(format!("unknown aggregation rule {other:?} (majority|unanimity)"))),
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationRule::Majority => "majority",
            AggregationRule::Unanimity => "unanimity",
        })
    }
}

fn parse_symptom(s: &str, source: &str, line: usize) -> Result<u8> {
    s.parse::<u8>()
        .ok()
        .filter(|s| (1..=SYMPTOM_COUNT as u8).contains(s))
        .ok_or_else(|| Error::line(source, line, format!("symptom id must be 1..=21, got {s:?}")))
}

/// One assessor's binary labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    pub labels: HashMap<(u8, String), bool>,
}

impl Qrels {
    /// Parses `symptom_id 0 sentence_id rel` lines (whitespace separated, `rel` in {0,1}).
    pub fn parse<R: BufRead>(input: R, source_name: &str) -> Result<Self> {
        let mut labels = HashMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(Error::line(source_name, lineno, format!("expected 4 fields, found {}", fields.len())));
            }
            let symptom = parse_symptom(fields[0], source_name, lineno)?;
            let rel = match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(Error::line(source_name, lineno, format!("relevance must be 0 or 1, got {other:?}"))),
            };
            let key = (symptom, fields[2].to_string());
            if let Some(prev) = labels.insert(key, rel) {
                if prev != rel {
                    return Err(Error::line(source_name, lineno, format!("conflicting labels for {}", fields[2])));
                }
            }
        }
        Ok(Qrels { labels })
    }

    pub fn insert(&mut self, symptom: u8, sentence_id: impl Into<String>, relevant: bool) {
        self.labels.insert((symptom, sentence_id.into()), relevant);
    }
}

/// Labels from several assessors over the same topics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JudgmentSet {
    pub assessors: Vec<Qrels>,
}

/// Consensus labels: symptom → sentence → relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedQrels {
    pub rule: AggregationRule,
    pub labels: BTreeMap<u8, HashMap<String, bool>>,
}

impl AggregatedQrels {
    pub fn relevant(&self, symptom: u8) -> HashSet<&str> {
        self.labels
            .get(&symptom)
            .map(|m| m.iter().filter(|(_, &r)| r).map(|(id, _)| id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn is_relevant(&self, symptom: u8, sentence_id: &str) -> bool {
        self.labels
            .get(&symptom)
            .and_then(|m| m.get(sentence_id))
            .copied()
            .unwrap_or(false)
    }
}

/// Combines assessors with `rule`; a pair missing from an assessor counts as a 0 from them.
pub fn aggregate(judgments: &JudgmentSet, rule: AggregationRule) -> Result<AggregatedQrels> {
    let a = judgments.assessors.len();
    if a == 0 {
        return Err(Error::invalid("no assessors to aggregate"));
    }
    let mut positives: HashMap<(u8, &str), usize> = HashMap::new();
    for q in &judgments.assessors {
        for ((s, id), &rel) in &q.labels {
            let c = positives.entry((*s, id.as_str())).or_default();
            *c += usize::from(rel);
        }
    }
    let mut labels: BTreeMap<u8, HashMap<String, bool>> = BTreeMap::new();
    for ((s, id), count) in positives {
        labels.entry(s).or_default().insert(id.to_string(), rule.decide(count, a));
    }
    Ok(AggregatedQrels { rule, labels })
}

fn relevance_vector(ranking: &[&str], relevant: &HashSet<&str>) -> Result<Vec<bool>> {
    let mut seen = HashSet::with_capacity(ranking.len());
    ranking
        .iter()
        .map(|id| {
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("duplicate sentence {id} in ranking")));
            }
            Ok(relevant.contains(id))
        })
        .collect()
}

/// Sum of precision at each relevant rank, divided by the total relevant count `R`.
pub fn average_precision(ranking: &[&str], relevant: &HashSet<&str>) -> Result<f64> {
    let rels = relevance_vector(ranking, relevant)?;
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rels.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Precision over the first `R` ranks; missing ranks are non-relevant.
pub fn r_precision(ranking: &[&str], relevant: &HashSet<&str>) -> Result<f64> {
    let rels = relevance_vector(ranking, relevant)?;
    let r = relevant.len();
    if r == 0 {
        return Ok(0.0);
    }
    Ok(rels.iter().take(r).filter(|&&x| x).count() as f64 / r as f64)
}

/// Relevant count in the first `k` ranks divided by `k`, even when fewer were retrieved.
pub fn precision_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let rels = relevance_vector(ranking, relevant)?;
    Ok(rels.iter().take(k).filter(|&&x| x).count() as f64 / k as f64)
}

/// Binary-gain NDCG over the first `k` ranks; 0 when nothing is relevant.
pub fn ndcg_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Result<f64> {
    let rels = relevance_vector(ranking, relevant)?;
    if relevant.is_empty() || k == 0 {
        return Ok(0.0);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = rels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

/// A parsed run: per symptom, sentence ids in rank order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub tag: Option<String>,
    pub rankings: BTreeMap<u8, Vec<String>>,
}

impl Run {
    /// Parses `symptom_id Q0 sentence_id rank score tag` lines. Entries are
    /// ordered by the rank column; a warning is logged where scores disagree.
    pub fn parse<R: BufRead>(input: R, source_name: &str) -> Result<Self> {
        let mut rows: BTreeMap<u8, Vec<(usize, f64, String)>> = BTreeMap::new();
        let mut tag = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 6 {
                return Err(Error::line(source_name, lineno, format!("expected 6 fields, found {}", fields.len())));
            }
            let symptom = parse_symptom(fields[0], source_name, lineno)?;
            let rank: usize = fields[3]
                .parse()
                .map_err(|_| Error::line(source_name, lineno, format!("bad rank {:?}", fields[3])))?;
            let score: f64 = fields[4]
                .parse()
                .map_err(|_| Error::line(source_name, lineno, format!("bad score {:?}", fields[4])))?;
            tag.get_or_insert_with(|| fields[5].to_string());
            rows.entry(symptom).or_default().push((rank, score, fields[2].to_string()));
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("{source_name}: run is empty")));
        }
        let mut rankings = BTreeMap::new();
        for (symptom, mut entries) in rows {
            entries.sort_by_key(|e| e.0);
            if entries.windows(2).any(|w| w[1].1 > w[0].1) {
                log::warn!("{source_name}: symptom {symptom} scores are not non-increasing in rank order; using ranks");
            }
            rankings.insert(symptom, entries.into_iter().map(|e| e.2).collect());
        }
        Ok(Run { tag, rankings })
    }
}

/// Treatment of symptoms with no relevant sentence under the aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptySymptoms {
    #[default]
    Exclude,
    /// Keep them in the average with every metric at 0.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub ap: f64,
    pub r_precision: f64,
    pub precision_at_10: f64,
    pub ndcg_at_1000: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomMetrics {
    pub symptom_id: u8,
    pub relevant: usize,
    pub retrieved: usize,
    #[serde(flatten)]
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rule: AggregationRule,
    pub per_symptom: Vec<SymptomMetrics>,
    /// Symptoms left out of the macro average for having no relevant sentence.
    pub excluded: Vec<u8>,
    pub mean: MetricValues,
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("symptom\trelevant\tretrieved\tAP\tR-PREC\tP@10\tNDCG@1000\n");
        let row = |label: String, rel: String, ret: String, m: &MetricValues| {
            format!(
                "{label}\t{rel}\t{ret}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                m.ap, m.r_precision, m.precision_at_10, m.ndcg_at_1000
            )
        };
        for s in &self.per_symptom {
            out += &row(s.symptom_id.to_string(), s.relevant.to_string(), s.retrieved.to_string(), &s.metrics);
        }
        out += &row("all".into(), "-".into(), "-".into(), &self.mean);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Scores every symptom that appears in the run or the judgments and macro-averages.
pub fn evaluate_run(run: &Run, qrels: &AggregatedQrels, empty: EmptySymptoms) -> Result<MetricReport> {
    if run.rankings.values().all(Vec::is_empty) {
        return Err(Error::invalid("run is empty"));
    }
    let symptoms: BTreeSet<u8> = run.rankings.keys().chain(qrels.labels.keys()).copied().collect();
    let mut per_symptom = Vec::new();
    let mut excluded = Vec::new();
    for s in symptoms {
        let relevant = qrels.relevant(s);
        let ranking: Vec<&str> = run.rankings.get(&s).map(|v| v.iter().map(String::as_str).collect()).unwrap_or_default();
        if relevant.is_empty() {
            relevance_vector(&ranking, &relevant)?;
            if empty == EmptySymptoms::Exclude {
                log::info!("symptom {s}: no relevant sentences under {} voting; excluded from averages", qrels.rule);
                excluded.push(s);
                continue;
            }
        }
        per_symptom.push(SymptomMetrics {
            symptom_id: s,
            relevant: relevant.len(),
            retrieved: ranking.len(),
            metrics: MetricValues {
                ap: average_precision(&ranking, &relevant)?,
                r_precision: r_precision(&ranking, &relevant)?,
                precision_at_10: precision_at_k(&ranking, &relevant, DEFAULT_PRECISION_K)?,
                ndcg_at_1000: ndcg_at_k(&ranking, &relevant, DEFAULT_NDCG_K)?,
            },
        });
    }
    if per_symptom.iter().all(|s| s.relevant == 0) {
        return Err(Error::invalid("no symptom has a relevant sentence under this rule"));
    }
    let n = per_symptom.len() as f64;
    let mean = MetricValues {
        ap: per_symptom.iter().map(|s| s.metrics.ap).sum::<f64>() / n,
        r_precision: per_symptom.iter().map(|s| s.metrics.r_precision).sum::<f64>() / n,
        precision_at_10: per_symptom.iter().map(|s| s.metrics.precision_at_10).sum::<f64>() / n,
        ndcg_at_1000: per_symptom.iter().map(|s| s.metrics.ndcg_at_1000).sum::<f64>() / n,
    };
    Ok(MetricReport {
        rule: qrels.rule,
        per_symptom,
        excluded,
        mean,
    })
}
