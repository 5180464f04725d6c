use bdirank::corpus::{LabeledExample, SentenceRecord};
use bdirank::filter::linear::{featurize, train_linear, LinearConfig, LinearModel, DEFAULT_BUCKETS};
use bdirank::filter::lstm::{train_lstm, LstmConfig, LstmModel};
use bdirank::filter::{filter_records, SentenceScorer};
use bdirank::Result;

/// FNV-1a written out independently of the library's helper.
fn fnv(s: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in s.bytes() {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    h
}

#[test]
fn featurizer_matches_independent_hashing() {
    let mut expected: Vec<u32> = ["i", "feel", "hopeless", "i feel", "feel hopeless"]
        .iter()
        .map(|g| (fnv(g) % DEFAULT_BUCKETS as u64) as u32)
        .collect();
    expected.sort_unstable();
    let x = featurize("I feel hopeless");
    assert_eq!(x.indices, expected);
    assert_eq!(x.values, vec![1; 5]);
    assert_eq!(featurize("hopeless hopeless").values.iter().sum::<u32>(), 3);
}

fn toy_linear() -> Vec<LabeledExample> {
    let mut v = Vec::new();
    for _ in 0..50 {
        v.push(LabeledExample::new("good day", false));
        v.push(LabeledExample::new("feel worthless", true));
    }
    v
}

fn toy_lstm() -> Vec<LabeledExample> {
    let mut v = Vec::new();
    for i in 0..40 {
        let n = 3 + i % 6;
        v.push(LabeledExample::new(vec!["happy"; n].join(" "), false));
        v.push(LabeledExample::new(vec!["hopeless"; n].join(" "), true));
    }
    v
}

fn linear_bytes(m: &LinearModel) -> Vec<u8> {
    let mut b = Vec::new();
    m.write_to(&mut b).unwrap();
    b
}

fn lstm_bytes(m: &LstmModel) -> Vec<u8> {
    let mut b = Vec::new();
    m.write_to(&mut b).unwrap();
    b
}

#[test]
fn linear_separates_toy_set() {
    let data = toy_linear();
    let model = train_linear(&data, None, &LinearConfig::default()).unwrap();
    assert_eq!(model.accuracy(&data), 1.0);
    assert!(model.score("feel worthless") > 0.5);
    assert!(model.score("good day") < 0.5);
}

#[test]
fn linear_training_is_bit_reproducible() {
    let data = toy_linear();
    let cfg = LinearConfig { seed: 9, ..LinearConfig::default() };
    let a = train_linear(&data, None, &cfg).unwrap();
    let b = train_linear(&data, None, &cfg).unwrap();
    assert_eq!(linear_bytes(&a), linear_bytes(&b));
    let c = train_linear(&data, None, &LinearConfig { seed: 10, ..cfg }).unwrap();
    assert_eq!(c.accuracy(&data), 1.0);
}

#[test]
fn lstm_separates_toy_set_within_five_epochs() {
    let data = toy_lstm();
    let (train, val) = data.split_at(60);
    let cfg = LstmConfig { epochs: 5, ..LstmConfig::default() };
    let (model, log) = train_lstm(train, Some(val), &cfg).unwrap();
    assert_eq!(log.len(), 5);
    let best = log.iter().filter_map(|e| e.validation_accuracy).fold(0.0, f64::max);
    assert_eq!(best, 1.0, "epoch log: {log:?}");
    assert!(model.score("hopeless hopeless hopeless") > model.score("happy happy happy"));
}

#[test]
fn lstm_training_is_bit_reproducible() {
    let data = toy_lstm();
    let cfg = LstmConfig {
        epochs: 2,
        embed_dim: 8,
        hidden: 8,
        seed: 3,
        ..LstmConfig::default()
    };
    let (a, log_a) = train_lstm(&data, None, &cfg).unwrap();
    let (b, log_b) = train_lstm(&data, None, &cfg).unwrap();
    assert_eq!(lstm_bytes(&a), lstm_bytes(&b));
    assert_eq!(log_a, log_b);
    let (c, _) = train_lstm(&data, None, &LstmConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(lstm_bytes(&a), lstm_bytes(&c));
}

struct ByText;

impl SentenceScorer for ByText {
    fn score_sentence(&self, r: &SentenceRecord) -> Result<f64> {
        Ok(r.text.parse().unwrap())
    }
}

#[test]
fn threshold_keeps_order() {
    let recs: Vec<_> = ["0.2", "0.6", "0.9"]
        .iter()
        .enumerate()
        .map(|(i, s)| SentenceRecord::structured("u", 0, i as u32, *s))
        .collect();
    let (out, rep) = filter_records(&ByText, recs.clone(), 0.5, 2).unwrap();
    assert_eq!(out, &recs[1..]);
    assert_eq!((rep.input_count, rep.output_count), (3, 2));
}

#[test]
fn chained_passes_report_consistent_counts() {
    let recs: Vec<_> = (0..100)
        .map(|i| SentenceRecord::structured("u", 0, i, format!("{}", i as f64 / 100.0)))
        .collect();
    let (pass1, r1) = filter_records(&ByText, recs, 0.3, 3).unwrap();
    let (pass2, r2) = filter_records(&ByText, pass1.clone(), 0.7, 3).unwrap();
    assert_eq!((r1.input_count, r1.output_count), (100, 70));
    assert_eq!(r2.input_count, r1.output_count);
    assert_eq!(r2.output_count, 30);
    assert!(pass2.iter().all(|r| pass1.contains(r)));
}
