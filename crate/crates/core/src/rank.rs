//! Symptom assignment by cosine similarity and per-symptom top-k run files.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingCollection, HashEmbedder};
use crate::filter::worker_pool;
use crate::{Error, Result};

pub const SYMPTOM_COUNT: usize = 21;
pub const PARAPHRASES_PER_SYMPTOM: usize = 4;
pub const QUERY_COUNT: usize = SYMPTOM_COUNT * PARAPHRASES_PER_SYMPTOM;
pub const DEFAULT_CUTOFF: usize = 1000;

const CHUNK_SIZE: usize = 16_384;
const TASK_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symptom {
    pub id: u8,
    pub label: String,
    pub paraphrases: Vec<String>,
}

/// The 21 symptoms with exactly four paraphrases each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymptomQuerySet {
    pub symptoms: Vec<Symptom>,
}

impl SymptomQuerySet {
    /// Parses `symptom_id<TAB>paraphrase_index<TAB>text` lines (both ids 1-based).
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse<R: BufRead>(input: R, source_name: &str) -> Result<Self> {
        let mut slots: Vec<Vec<Option<String>>> = vec![vec![None; PARAPHRASES_PER_SYMPTOM]; SYMPTOM_COUNT];
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(s), Some(p), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::line(source_name, lineno, "expected symptom_id<TAB>paraphrase_index<TAB>text"));
            };
            let s: usize = s
                .trim()
                .parse()
                .ok()
                .filter(|s| (1..=SYMPTOM_COUNT).contains(s))
                .ok_or_else(|| Error::line(source_name, lineno, format!("symptom id must be 1..=21, got {s:?}")))?;
            let p: usize = p
                .trim()
                .parse()
                .ok()
                .filter(|p| (1..=PARAPHRASES_PER_SYMPTOM).contains(p))
                .ok_or_else(|| Error::line(source_name, lineno, format!("paraphrase index must be 1..=4, got {p:?}")))?;
            let text = text.trim();
            if text.is_empty() {
                return Err(Error::line(source_name, lineno, "empty query text"));
            }
            let slot = &mut slots[s - 1][p - 1];
            if slot.is_some() {
                return Err(Error::line(source_name, lineno, format!("duplicate query {s}/{p}")));
            }
            *slot = Some(text.to_string());
        }
        let mut symptoms = Vec::with_capacity(SYMPTOM_COUNT);
        for (s, row) in slots.into_iter().enumerate() {
            let paraphrases: Option<Vec<String>> = row.into_iter().collect();
            let paraphrases = paraphrases.ok_or_else(|| {
                Error::invalid(format!("{source_name}: symptom {} does not have all 4 paraphrases", s + 1))
            })?;
            symptoms.push(Symptom {
                id: (s + 1) as u8,
                label: format!("symptom {}", s + 1),
                paraphrases,
            });
        }
        Ok(SymptomQuerySet { symptoms })
    }

    pub fn embed(&self, embedder: &HashEmbedder) -> Result<QueryEmbeddings> {
        let mut coll = EmbeddingCollection::new(embedder.dim, "hash")?;
        for s in &self.symptoms {
            for (p, text) in s.paraphrases.iter().enumerate() {
                let id = query_id(s.id, p as u8 + 1);
                let v = embedder.embed(id.clone(), text)?;
                coll.push(id, &v.values)?;
            }
        }
        QueryEmbeddings::from_collection(&coll)
    }
}

/// Embedding id used for a query inside a `BDEM` file, e.g. `q7_2`.
pub fn query_id(symptom: u8, paraphrase: u8) -> String {
    format!("q{symptom}_{paraphrase}")
}

/// The 84 query vectors, symptom-major then paraphrase order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbeddings {
    dim: usize,
    data: Vec<f32>,
}

impl QueryEmbeddings {
    /// Picks `q<symptom>_<paraphrase>` ids out of a collection; all 84 must be present.
    pub fn from_collection(coll: &EmbeddingCollection) -> Result<Self> {
        let mut data = Vec::with_capacity(QUERY_COUNT * coll.dim());
        for s in 1..=SYMPTOM_COUNT as u8 {
            for p in 1..=PARAPHRASES_PER_SYMPTOM as u8 {
                let id = query_id(s, p);
                let v = coll
                    .get(&id)
                    .ok_or_else(|| Error::invalid(format!("query embedding {id} missing")))?;
                data.extend_from_slice(v);
            }
        }
        Ok(QueryEmbeddings { dim: coll.dim(), data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Query `k` in `0..84` (symptom `k / 4 + 1`, paraphrase `k % 4 + 1`).
    pub fn query(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }
}

/// Dot product of unit vectors accumulated in double precision, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", u.len(), v.len())));
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

#[inline]
fn dot(u: &[f32], v: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (uc, ur) = u.split_at(u.len() / 8 * 8);
    let (vc, vr) = v.split_at(uc.len());
    for (a, b) in uc.chunks_exact(8).zip(vc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += f64::from(a[l]) * f64::from(b[l]);
        }
    }
    let mut tail = 0.0;
    for (a, b) in ur.iter().zip(vr) {
        tail += f64::from(*a) * f64::from(*b);
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub symptom_id: u8,
    pub score: f64,
    /// 1-based paraphrase index of the best-matching query.
    pub paraphrase_index: u8,
}

/// Argmax over all 84 queries; ties go to the lowest symptom, then the lowest paraphrase.
pub fn assign_symptom(sentence: &[f32], queries: &QueryEmbeddings) -> Result<Assignment> {
    if sentence.len() != queries.dim {
        return Err(Error::invalid(format!(
            "sentence dimension {} does not match query dimension {}",
            sentence.len(),
            queries.dim
        )));
    }
    Ok(assign_unchecked(sentence, queries))
}

fn assign_unchecked(sentence: &[f32], queries: &QueryEmbeddings) -> Assignment {
    let mut best = Assignment {
        symptom_id: 1,
        score: f64::NEG_INFINITY,
        paraphrase_index: 1,
    };
    for k in 0..QUERY_COUNT {
        let score = dot(sentence, queries.query(k)).clamp(-1.0, 1.0);
        if score > best.score {
            best = Assignment {
                symptom_id: (k / PARAPHRASES_PER_SYMPTOM + 1) as u8,
                score,
                paraphrase_index: (k % PARAPHRASES_PER_SYMPTOM + 1) as u8,
            };
        }
    }
    best
}

/// Per-symptom max over its four paraphrases.
fn symptom_scores(sentence: &[f32], queries: &QueryEmbeddings) -> [f64; SYMPTOM_COUNT] {
    let mut out = [f64::NEG_INFINITY; SYMPTOM_COUNT];
    for k in 0..QUERY_COUNT {
        let s = &mut out[k / PARAPHRASES_PER_SYMPTOM];
        *s = s.max(dot(sentence, queries.query(k)).clamp(-1.0, 1.0));
    }
    out
}

/// One row of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub symptom_id: u8,
    pub sentence_id: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    pub cutoff: usize,
    /// Rank every sentence in every pool by its per-symptom score instead of
    /// assigning it to its single best symptom.
    pub multi_assign: bool,
    pub workers: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            cutoff: DEFAULT_CUTOFF,
            multi_assign: false,
            workers: 1,
        }
    }
}

/// Candidate ordered so that `a > b` means `a` ranks ahead of `b`.
#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    score: f64,
    sentence_id: String,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.sentence_id.cmp(&self.sentence_id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded min-heap per symptom holding the best `cutoff` candidates.
#[derive(Debug, Clone)]
struct TopK {
    cutoff: usize,
    heaps: Vec<BinaryHeap<Reverse<Candidate>>>,
}

impl TopK {
    fn new(cutoff: usize) -> Self {
        TopK {
            cutoff,
            heaps: vec![BinaryHeap::new(); SYMPTOM_COUNT],
        }
    }

    fn offer(&mut self, symptom: usize, score: f64, id: &str) {
        let heap = &mut self.heaps[symptom];
        if heap.len() < self.cutoff {
            heap.push(Reverse(Candidate {
                score,
                sentence_id: id.to_string(),
            }));
            return;
        }
        let worst = &heap.peek().expect("cutoff >= 1").0;
        let better = score > worst.score || (score == worst.score && id < worst.sentence_id.as_str());
        if better {
            heap.pop();
            heap.push(Reverse(Candidate {
                score,
                sentence_id: id.to_string(),
            }));
        }
    }

    fn merge(mut self, other: TopK) -> TopK {
        for (s, heap) in other.heaps.into_iter().enumerate() {
            for Reverse(c) in heap {
                self.offer(s, c.score, &c.sentence_id);
            }
        }
        self
    }

    fn into_pools(self) -> Vec<Vec<RankedEntry>> {
        self.heaps
            .into_iter()
            .enumerate()
            .map(|(s, heap)| {
                let mut v: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
                v.sort_by(|a, b| b.cmp(a));
                v.into_iter()
                    .enumerate()
                    .map(|(r, c)| RankedEntry {
                        symptom_id: (s + 1) as u8,
                        sentence_id: c.sentence_id,
                        rank: r + 1,
                        score: c.score,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Ranks sentence embeddings into 21 pools (index `symptom_id - 1`).
///
/// Pools are sorted by score descending, then sentence id ascending, and
/// truncated to `cutoff`. The result is identical for every worker count.
pub fn rank_corpus<'a, I>(sentences: I, queries: &QueryEmbeddings, options: &RankOptions) -> Result<Vec<Vec<RankedEntry>>>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    if options.cutoff == 0 {
        return Err(Error::invalid("cutoff must be at least 1"));
    }
    let pool = worker_pool(options.workers)?;
    let mut seen: HashSet<&'a str> = HashSet::new();
    let mut total = TopK::new(options.cutoff);
    let mut iter = sentences.into_iter();
    let mut chunk: Vec<(&'a str, &'a [f32])> = Vec::with_capacity(CHUNK_SIZE);
    loop {
        chunk.clear();
        chunk.extend(iter.by_ref().take(CHUNK_SIZE));
        if chunk.is_empty() {
            break;
        }
        for (id, v) in &chunk {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate sentence id {id} in ranking input")));
            }
            if v.len() != queries.dim {
                return Err(Error::invalid(format!(
                    "sentence {id} has dimension {}, queries have {}",
                    v.len(),
                    queries.dim
                )));
            }
        }
        let cutoff = options.cutoff;
        let multi = options.multi_assign;
        let part = pool.install(|| {
            chunk
                .par_chunks(TASK_SIZE)
                .fold(
                    || TopK::new(cutoff),
                    |mut acc, task| {
                        for (id, v) in task {
                            if multi {
                                for (s, score) in symptom_scores(v, queries).into_iter().enumerate() {
                                    acc.offer(s, score, id);
                                }
                            } else {
                                let a = assign_unchecked(v, queries);
                                acc.offer(a.symptom_id as usize - 1, a.score, id);
                            }
                        }
                        acc
                    },
                )
                .reduce(|| TopK::new(cutoff), TopK::merge)
        });
        total = total.merge(part);
    }
    Ok(total.into_pools())
}

/// Writes `symptom_id Q0 sentence_id rank score tag` lines, symptoms ascending.
pub fn write_run_file<W: Write>(out: &mut W, pools: &[Vec<RankedEntry>], tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::invalid(format!("run tag must be a non-empty token, got {tag:?}")));
    }
    let mut entries: Vec<&RankedEntry> = pools.iter().flatten().collect();
    entries.sort_by_key(|e| (e.symptom_id, e.rank));
    for e in entries {
        writeln!(out, "{} Q0 {} {} {:.6} {}", e.symptom_id, e.sentence_id, e.rank, e.score, tag)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// Queries where each of the 84 vectors is a distinct basis direction.
    fn basis_queries() -> QueryEmbeddings {
        let mut coll = EmbeddingCollection::new(QUERY_COUNT, "t").unwrap();
        for k in 0..QUERY_COUNT {
            let mut v = vec![0.0f32; QUERY_COUNT];
            v[k] = 1.0;
            coll.push(query_id((k / 4 + 1) as u8, (k % 4 + 1) as u8), &v).unwrap();
        }
        QueryEmbeddings::from_collection(&coll).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = unit(&[0.3, -0.2, 0.9]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let d = std::f32::consts::FRAC_1_SQRT_2;
        assert!((cosine(&[1.0, 0.0], &[d, d]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn self_match_and_ties() {
        let q = basis_queries();
        let a = assign_symptom(q.query(6 * 4 + 1), &q).unwrap();
        assert_eq!((a.symptom_id, a.score, a.paraphrase_index), (7, 1.0, 2));
        let flat = unit(&vec![1.0; QUERY_COUNT]);
        let a = assign_symptom(&flat, &q).unwrap();
        assert_eq!((a.symptom_id, a.paraphrase_index), (1, 1));
        assert!(assign_symptom(&[1.0, 0.0], &q).is_err());
    }

    #[test]
    fn cutoff_keeps_top_scores() {
        let q = basis_queries();
        let mk = |w: f32| {
            let mut v = vec![0.0f32; QUERY_COUNT];
            v[12] = w;
            v[0] = 0.1;
            unit(&v)
        };
        let vs = [("a", mk(0.5)), ("b", mk(2.0)), ("c", mk(1.0))];
        let input: Vec<(&str, &[f32])> = vs.iter().map(|(i, v)| (*i, v.as_slice())).collect();
        let opts = RankOptions {
            cutoff: 2,
            ..RankOptions::default()
        };
        let pools = rank_corpus(input, &q, &opts).unwrap();
        let ids: Vec<_> = pools[3].iter().map(|e| e.sentence_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(pools[3][0].rank, 1);
        assert!(pools.iter().enumerate().all(|(s, p)| s == 3 || p.is_empty()));
    }

    #[test]
    fn empty_input_and_duplicates() {
        let q = basis_queries();
        let pools = rank_corpus(std::iter::empty(), &q, &RankOptions::default()).unwrap();
        assert_eq!(pools.len(), 21);
        assert!(pools.iter().all(Vec::is_empty));
        let v = q.query(0).to_vec();
        assert!(rank_corpus([("x", v.as_slice()), ("x", v.as_slice())], &q, &RankOptions::default()).is_err());
        let bad = RankOptions {
            cutoff: 0,
            ..RankOptions::default()
        };
        assert!(rank_corpus(std::iter::empty(), &q, &bad).is_err());
    }

    #[test]
    fn equal_scores_break_ties_by_id() {
        let q = basis_queries();
        let v = q.query(0).to_vec();
        let input = [("b", v.as_slice()), ("a", v.as_slice()), ("c", v.as_slice())];
        let opts = RankOptions {
            cutoff: 2,
            ..RankOptions::default()
        };
        let pools = rank_corpus(input, &q, &opts).unwrap();
        let ids: Vec<_> = pools[0].iter().map(|e| e.sentence_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn multi_assign_fills_every_pool() {
        let q = basis_queries();
        let v = q.query(9).to_vec();
        let opts = RankOptions {
            multi_assign: true,
            ..RankOptions::default()
        };
        let pools = rank_corpus([("s", v.as_slice())], &q, &opts).unwrap();
        assert!(pools.iter().all(|p| p.len() == 1));
        assert_eq!(pools[2][0].score, 1.0);
        assert_eq!(pools[0][0].score, 0.0);
    }

    #[test]
    fn run_file_line_format() {
        let pools = vec![vec![RankedEntry {
            symptom_id: 1,
            sentence_id: "u1_0_0".into(),
            rank: 1,
            score: 0.9,
        }]];
        let mut out = Vec::new();
        write_run_file(&mut out, &pools, "mason").unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1 Q0 u1_0_0 1 0.900000 mason\n");
        assert!(write_run_file(&mut Vec::new(), &pools, "two words").is_err());
    }

    #[test]
    fn query_file_validation() {
        let mut s = String::new();
        for sym in 1..=21 {
            for p in 1..=4 {
                s += &format!("{sym}\t{p}\tquery {sym} {p}\n");
            }
        }
        let set = SymptomQuerySet::parse(s.as_bytes(), "q.tsv").unwrap();
        assert_eq!(set.symptoms.len(), 21);
        assert!(set.symptoms.iter().all(|x| x.paraphrases.len() == 4));
        let missing: String = s.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(SymptomQuerySet::parse(missing.as_bytes(), "q.tsv").is_err());
        let dup = format!("{s}1\t1\tagain\n");
        assert!(SymptomQuerySet::parse(dup.as_bytes(), "q.tsv").is_err());
        assert!(SymptomQuerySet::parse("22\t1\tx\n".as_bytes(), "q.tsv").is_err());
    }
}
