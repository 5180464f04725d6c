//! Stage 1: logistic regression over hashed word unigrams and bigrams.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::SentenceScorer;
use crate::corpus::{LabeledExample, SentenceRecord};
use crate::text::{fnv1a64, tokenize};
use crate::{Error, Result};

pub const DEFAULT_BUCKETS: u32 = 1 << 18;
const MAGIC: &[u8; 4] = b"BDLF";
const VERSION: u16 = 1;

/// Sparse term-frequency vector; `indices` strictly increasing, `values` positive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HashedFeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<u32>,
}

impl HashedFeatureVector {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

pub fn featurize(text: &str) -> HashedFeatureVector {
    featurize_with_buckets(text, DEFAULT_BUCKETS)
}

/// Unigrams and space-joined adjacent bigrams, each FNV-1a hashed modulo `buckets`.
pub fn featurize_with_buckets(text: &str, buckets: u32) -> HashedFeatureVector {
    assert!(buckets > 0, "bucket count must be positive");
    let tokens = tokenize(text);
    let mut hashed: Vec<u32> = Vec::with_capacity(tokens.len() * 2);
    for t in &tokens {
        hashed.push((fnv1a64(t.as_bytes()) % u64::from(buckets)) as u32);
    }
    let mut bigram = String::new();
    for pair in tokens.windows(2) {
        bigram.clear();
        bigram.push_str(&pair[0]);
        bigram.push(' ');
        bigram.push_str(&pair[1]);
        hashed.push((fnv1a64(bigram.as_bytes()) % u64::from(buckets)) as u32);
    }
    hashed.sort_unstable();
    let mut out = HashedFeatureVector::default();
    for idx in hashed {
        if out.indices.last() == Some(&idx) {
            *out.values.last_mut().unwrap() += 1;
        } else {
            out.indices.push(idx);
            out.values.push(1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub buckets: u32,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 42,
            buckets: DEFAULT_BUCKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Mean training log-loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainingMeta,
}

/// Gradient of the mean log-loss over a batch, restricted to touched buckets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGradient {
    /// `(bucket, d loss / d weight)`, sorted by bucket.
    pub weights: Vec<(u32, f64)>,
    pub bias: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log p(y | z)` for a logistic model, stable for large `|z|`.
pub(crate) fn log_loss(z: f64, label: bool) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    if label {
        softplus - z
    } else {
        softplus
    }
}

impl LinearModel {
    pub fn zeros(buckets: u32) -> Self {
        LinearModel {
            weights: vec![0.0; buckets as usize],
            bias: 0.0,
            meta: TrainingMeta::default(),
        }
    }

    pub fn buckets(&self) -> u32 {
        self.weights.len() as u32
    }

    pub fn logit(&self, x: &HashedFeatureVector) -> f64 {
        self.bias + x.iter().map(|(i, v)| self.weights[i as usize] * f64::from(v)).sum::<f64>()
    }

    /// Probability that `text` is depression-related.
    pub fn score(&self, text: &str) -> f64 {
        sigmoid(self.logit(&featurize_with_buckets(text, self.buckets())))
    }

    /// Mean log-loss over `(features, label)` pairs.
    pub fn batch_loss(&self, batch: &[(HashedFeatureVector, bool)]) -> f64 {
        batch.iter().map(|(x, y)| log_loss(self.logit(x), *y)).sum::<f64>() / batch.len() as f64
    }

    /// Mean log-loss and its analytic gradient.
    pub fn batch_gradient(&self, batch: &[(HashedFeatureVector, bool)]) -> (f64, SparseGradient) {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = SparseGradient::default();
        let mut entries: Vec<(u32, f64)> = Vec::new();
        for (x, y) in batch {
            let z = self.logit(x);
            loss += log_loss(z, *y);
            let dz = (sigmoid(z) - f64::from(u8::from(*y))) / n;
            grad.bias += dz;
            entries.extend(x.iter().map(|(i, v)| (i, dz * f64::from(v))));
        }
        entries.sort_by_key(|e| e.0);
        for (i, g) in entries {
            match grad.weights.last_mut() {
                Some(last) if last.0 == i => last.1 += g,
                _ => grad.weights.push((i, g)),
            }
        }
        (loss / n, grad)
    }

    pub fn accuracy(&self, examples: &[LabeledExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let correct = examples.iter().filter(|e| (self.score(&e.text) >= 0.5) == e.label).count();
        correct as f64 / examples.len() as f64
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.buckets().to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.weights.len() * 4 + 4);
        for w in &self.weights {
            buf.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.bias as f32).to_le_bytes());
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            format: "BDLF",
            message: m.to_string(),
        };
        let mut header = [0u8; 10];
        input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let buckets = u32::from_le_bytes(header[6..10].try_into().unwrap());
        if buckets == 0 {
            return Err(bad("bucket count is zero"));
        }
        let mut body = vec![0u8; (buckets as usize + 1) * 4];
        input.read_exact(&mut body).map_err(|_| bad("truncated weights"))?;
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        let weights: Vec<f64> = floats.by_ref().take(buckets as usize).collect();
        let bias = floats.next().unwrap();
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(LinearModel {
            weights,
            bias,
            meta: TrainingMeta::default(),
        })
    }
}

impl SentenceScorer for LinearModel {
    fn score_sentence(&self, record: &SentenceRecord) -> Result<f64> {
        Ok(self.score(&record.text))
    }
}

/// Mini-batch gradient descent on mean log-loss. Single-threaded and
/// deterministic under `config.seed`.
pub fn train_linear(
    train: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    config: &LinearConfig,
) -> Result<LinearModel> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.iter().all(|e| e.label) || train.iter().all(|e| !e.label) {
        return Err(Error::invalid("training set contains a single class"));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::invalid("epochs, batch size and learning rate must be positive"));
    }
    let data: Vec<(HashedFeatureVector, bool)> = train
        .iter()
        .map(|e| (featurize_with_buckets(&e.text, config.buckets), e.label))
        .collect();
    let mut model = LinearModel::zeros(config.buckets);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data[i].clone()));
            let (loss, grad) = model.batch_gradient(&batch);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: Some(b + 1),
                });
            }
            for (i, g) in grad.weights {
                model.weights[i as usize] -= config.learning_rate * g;
            }
            model.bias -= config.learning_rate * grad.bias;
        }
        let loss = model.batch_loss(&data);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: None });
        }
        if let Some(prev) = curve.last() {
            if loss > prev + 1e-6 {
                log::warn!("linear filter: training loss rose at epoch {epoch} ({prev:.6} -> {loss:.6})");
            }
        }
        log::debug!("linear filter: epoch {epoch} loss {loss:.6}");
        curve.push(loss);
    }

    model.meta = TrainingMeta {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        seed: config.seed,
        loss_curve: curve,
        validation_accuracy: validation.map(|v| model.accuracy(v)),
    };
    Ok(model)
}
