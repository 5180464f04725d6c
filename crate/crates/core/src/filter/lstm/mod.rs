//! Stage 2: a from-scratch LSTM classifier over learned token embeddings.
//!
//! Single layer, unidirectional, 128 hidden units by default. Sequences are
//! truncated to `max_len` tokens and padded at the end; the readout is the
//! hidden state at the last real token, passed through dropout (training only),
//! one fully connected unit and a sigmoid.

mod net;
mod vocab;

pub use net::{effective_len, grad_check, LstmGrads, LstmShape, LstmWeights, Mode, Trace};
pub use vocab::{Vocabulary, DEFAULT_VOCAB_SIZE, OOV, PAD};

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::SentenceScorer;
use crate::corpus::{LabeledExample, SentenceRecord};
use crate::filter::linear::log_loss;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BDLS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LstmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_len: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub clip_norm: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            max_len: 64,
            seed: 42,
            vocab_size: DEFAULT_VOCAB_SIZE,
            embed_dim: 64,
            hidden: 128,
            dropout: 0.2,
            clip_norm: 5.0,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, max_len and batch_size must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("embedding and hidden sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("learning rate and clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

/// Vocabulary plus network weights; immutable once trained.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub vocab: Vocabulary,
    pub weights: LstmWeights,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl LstmModel {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode_padded(text, self.max_len)
    }

    /// Inference-mode probability (dropout-free, seed independent).
    pub fn score(&self, text: &str) -> f64 {
        self.weights
            .forward(&self.encode(text), Mode::Infer)
            .expect("vocabulary ids are always in range")
    }

    pub fn evaluate(&self, examples: &[LabeledExample]) -> (f64, f64) {
        if examples.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for e in examples {
            let trace = self
                .weights
                .forward_trace(&self.encode(&e.text), Mode::Infer)
                .expect("vocabulary ids are always in range");
            loss += log_loss(trace.logit, e.label);
            if (trace.probability >= 0.5) == e.label {
                correct += 1;
            }
        }
        let n = examples.len() as f64;
        (loss / n, correct as f64 / n)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.max_len as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dropout as f32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for tok in self.vocab.tokens() {
            let len = u16::try_from(tok.len()).map_err(|_| Error::invalid("vocabulary token longer than 65535 bytes"))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(tok.as_bytes());
        }
        let LstmShape { vocab, embed_dim, hidden } = self.weights.shape;
        let w = &self.weights;
        let mut tensors: Vec<(Vec<u32>, &[f64])> = vec![(vec![vocab as u32, embed_dim as u32], &w.embedding)];
        for k in 0..4 {
            tensors.push((vec![hidden as u32, embed_dim as u32], &w.w[k * hidden * embed_dim..(k + 1) * hidden * embed_dim]));
        }
        for k in 0..4 {
            tensors.push((vec![hidden as u32, hidden as u32], &w.u[k * hidden * hidden..(k + 1) * hidden * hidden]));
        }
        for k in 0..4 {
            tensors.push((vec![hidden as u32], &w.b[k * hidden..(k + 1) * hidden]));
        }
        tensors.push((vec![hidden as u32], &w.fc_w));
        let fc_b = [w.fc_b];
        tensors.push((vec![1], &fc_b));
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (shape, data) in tensors {
            buf.push(shape.len() as u8);
            for d in shape {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for x in data {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        let mut cur = Cursor { buf: &raw, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(format_err(&format!("unsupported version {version}")));
        }
        let max_len = cur.u32()? as usize;
        let dropout = f64::from(cur.f32()?);
        let seed = cur.u64()?;
        let vocab_len = cur.u32()? as usize;
        let mut tokens = Vec::with_capacity(vocab_len.min(1 << 20));
        for _ in 0..vocab_len {
            let len = cur.u16()? as usize;
            let tok = std::str::from_utf8(cur.take(len)?).map_err(|_| format_err("vocabulary token is not UTF-8"))?;
            tokens.push(tok.to_string());
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| format_err(&e.to_string()))?;
        let n_tensors = cur.u32()?;
        if n_tensors != 15 {
            return Err(format_err(&format!("expected 15 tensors, found {n_tensors}")));
        }
        let mut tensors = Vec::with_capacity(15);
        for _ in 0..15 {
            let rank = cur.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let count: usize = dims.iter().product();
            let data: Vec<f64> = (0..count).map(|_| cur.f32().map(f64::from)).collect::<Result<_>>()?;
            tensors.push((dims, data));
        }
        let (embed_dims, _) = &tensors[0];
        if embed_dims.len() != 2 || embed_dims[0] != vocab.len() {
            return Err(format_err("embedding shape does not match vocabulary"));
        }
        let shape = LstmShape {
            vocab: vocab.len(),
            embed_dim: embed_dims[1],
            hidden: tensors[13].0.first().copied().unwrap_or(0),
        };
        let (h, e) = (shape.hidden, shape.embed_dim);
        let expected: Vec<Vec<usize>> = std::iter::once(vec![shape.vocab, e])
            .chain(std::iter::repeat_n(vec![h, e], 4))
            .chain(std::iter::repeat_n(vec![h, h], 4))
            .chain(std::iter::repeat_n(vec![h], 5))
            .chain(std::iter::once(vec![1]))
            .collect();
        if tensors.iter().map(|t| &t.0).ne(expected.iter()) {
            return Err(format_err("tensor shapes are inconsistent"));
        }
        let mut it = tensors.into_iter().map(|t| t.1);
        let embedding = it.next().unwrap();
        let w: Vec<f64> = it.by_ref().take(4).flatten().collect();
        let u: Vec<f64> = it.by_ref().take(4).flatten().collect();
        let b: Vec<f64> = it.by_ref().take(4).flatten().collect();
        let fc_w = it.next().unwrap();
        let fc_b = it.next().unwrap()[0];
        let weights = LstmWeights {
            shape,
            embedding,
            w,
            u,
            b,
            fc_w,
            fc_b,
        };
        if !weights.is_finite() {
            return Err(format_err("non-finite parameter"));
        }
        if cur.pos != raw.len() {
            return Err(format_err("trailing bytes after last tensor"));
        }
        Ok(LstmModel {
            vocab,
            weights,
            max_len,
            dropout,
            seed,
        })
    }
}

fn format_err(message: &str) -> Error {
    Error::Format {
        format: "BDLS",
        message: message.to_string(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format_err("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl SentenceScorer for LstmModel {
    fn score_sentence(&self, record: &SentenceRecord) -> Result<f64> {
        self.weights.forward(&self.encode(&record.text), Mode::Infer)
    }
}

/// Trains with mini-batch gradient descent, full backpropagation through time
/// and global-norm clipping. Dropout masks come from a seeded stream, so the
/// run is bit-reproducible. Returns the epoch snapshot with the best
/// validation accuracy (the final epoch without a validation set).
pub fn train_lstm(
    train: &[LabeledExample],
    validation: Option<&[LabeledExample]>,
    config: &LstmConfig,
) -> Result<(LstmModel, Vec<EpochLog>)> {
    config.validate()?;
    if train.iter().all(|e| e.label) || train.iter().all(|e| !e.label) {
        return Err(Error::invalid("training set must contain both classes"));
    }
    let vocab = Vocabulary::build(train.iter().map(|e| e.text.as_str()), config.vocab_size)?;
    let shape = LstmShape {
        vocab: vocab.len(),
        embed_dim: config.embed_dim,
        hidden: config.hidden,
    };
    let mut model = LstmModel {
        weights: LstmWeights::init(shape, config.seed, 0.5),
        vocab,
        max_len: config.max_len,
        dropout: config.dropout,
        seed: config.seed,
    };
    let data: Vec<(Vec<u32>, bool)> = train
        .iter()
        .map(|e| (model.vocab.encode(&e.text, config.max_len), e.label))
        .collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let keep = 1.0 - config.dropout;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = LstmGrads::new(shape);
    let mut mask = vec![1.0; config.hidden];
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, LstmWeights)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (tokens, label) = &data[i];
                for m in mask.iter_mut() {
                    *m = if dropout_rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                let trace = model.weights.forward_trace(tokens, Mode::Train { dropout_mask: &mask })?;
                batch_loss += log_loss(trace.logit, *label);
                model.weights.backward(&trace, *label, scale, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: Some(b + 1),
                });
            }
            epoch_loss += batch_loss;
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: Some(b + 1),
                });
            }
            if norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
            model.weights.apply(&grads, config.learning_rate);
        }
        let (validation_loss, validation_accuracy) = match validation {
            Some(v) if !v.is_empty() => {
                let (l, a) = model.evaluate(v);
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / data.len() as f64,
            validation_loss,
            validation_accuracy,
        };
        log::debug!("lstm filter: {entry:?}");
        if let Some(acc) = validation_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.weights.clone()));
            }
        }
        log.push(entry);
    }
    if let Some((_, weights)) = best {
        model.weights = weights;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> LstmConfig {
        LstmConfig {
            epochs: 2,
            hidden: 8,
            embed_dim: 4,
            ..LstmConfig::default()
        }
    }

    fn toy() -> Vec<LabeledExample> {
        (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    LabeledExample::new("happy day", false)
                } else {
                    LabeledExample::new("hopeless night", true)
                }
            })
            .collect()
    }

    #[test]
    fn file_round_trip_preserves_f32_values() {
        let (model, _) = train_lstm(&toy(), None, &small_config()).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BDLS");
        let back = LstmModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.weights.shape, model.weights.shape);
        for (a, b) in back.weights.u.iter().zip(&model.weights.u) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        let mut rewritten = Vec::new();
        back.write_to(&mut rewritten).unwrap();
        assert_eq!(rewritten, buf);
        assert!(LstmModel::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn rejects_single_class_and_bad_config() {
        let one = vec![LabeledExample::new("a", true); 3];
        assert!(train_lstm(&one, None, &small_config()).is_err());
        let cfg = LstmConfig {
            epochs: 0,
            ..small_config()
        };
        assert!(train_lstm(&toy(), None, &cfg).is_err());
        let empty = vec![LabeledExample::new("!!", true), LabeledExample::new("??", false)];
        assert!(train_lstm(&empty, None, &small_config()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = LstmConfig {
            learning_rate: f64::MAX,
            clip_norm: f64::MAX,
            epochs: 3,
            ..small_config()
        };
        assert!(matches!(train_lstm(&toy(), None, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn inference_ignores_seed_and_dropout() {
        let (mut model, _) = train_lstm(&toy(), None, &small_config()).unwrap();
        let a = model.score("hopeless");
        model.seed = 999;
        model.dropout = 0.9;
        assert_eq!(model.score("hopeless"), a);
        assert_eq!(model.score("hopeless"), a);
    }
}
