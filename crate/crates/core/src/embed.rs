//! Unit-normalized sentence embeddings.
//!
//! Two providers feed the ranker: `BDEM` files written by an external
//! transformer export step, and [`HashEmbedder`], a deterministic stand-in for
//! tests and offline runs. Every vector handed out has unit L2 norm.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::text::{fnv1a64, tokenize, SplitMix64};
use crate::{Error, Result};

pub const DEFAULT_DIM: usize = 384;
pub const NORM_TOLERANCE: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"BDEM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Element-wise mean of equally sized vectors.
pub fn mean_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::invalid("mean pooling needs at least one vector"))?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::invalid(format!("dimension mismatch in pooling: {} vs {dim}", v.len())));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `v / ||v||`. Zero (or non-finite) vectors are rejected: cosine is undefined for them.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Deterministic bag-of-tokens embedder: each distinct token maps to a fixed
/// pseudo-random vector, the sentence vector is their normalized mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = SplitMix64::new(fnv1a64(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| rng.next_signed_unit()).collect()
    }

    pub fn embed(&self, id: impl Into<String>, text: &str) -> Result<EmbeddingVector> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid(format!("cannot embed text without tokens: {text:?}")));
        }
        let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| self.token_vector(t)).collect();
        let unit = l2_normalize(&mean_pool(&vectors)?)?;
        Ok(EmbeddingVector {
            id: id.into(),
            values: unit.into_iter().map(|x| x as f32).collect(),
        })
    }
}

/// Vectors of one fixed dimension, stored contiguously in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCollection {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
    pub provider: String,
    /// Vectors re-normalized on insertion because their norm was off by more than the tolerance.
    pub renormalized: usize,
    /// Largest `|norm - 1|` seen on insertion, before any re-normalization.
    pub max_norm_deviation: f64,
}

impl EmbeddingCollection {
    pub fn new(dim: usize, provider: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(EmbeddingCollection {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
            provider: provider.into(),
            renormalized: 0,
            max_norm_deviation: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Adds a vector, re-normalizing it when its norm is off by more than [`NORM_TOLERANCE`].
    pub fn push(&mut self, id: impl Into<String>, values: &[f32]) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector {id} has dimension {}, collection has {}",
                values.len(),
                self.dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("vector {id} has non-finite entries")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate embedding id {id}")));
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        self.max_norm_deviation = self.max_norm_deviation.max((norm - 1.0).abs());
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            let as_f64: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            let unit = l2_normalize(&as_f64).map_err(|_| Error::invalid(format!("vector {id} is zero")))?;
            self.data.extend(unit.into_iter().map(|x| x as f32));
            self.renormalized += 1;
        } else {
            self.data.extend_from_slice(values);
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        write_header(out, self.dim, self.len() as u64)?;
        for (id, v) in self.iter() {
            write_record(out, id, v)?;
        }
        Ok(())
    }

    /// Reads a `BDEM` stream. Errors name the 0-based record ordinal where parsing stopped.
    pub fn read_from<R: Read>(input: &mut R, provider: impl Into<String>) -> Result<Self> {
        let bad = |m: String| Error::Format { format: "BDEM", message: m };
        let mut header = [0u8; 18];
        input.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[10..18].try_into().unwrap());
        if dim == 0 {
            return Err(bad("dimension is zero".into()));
        }
        let mut coll = EmbeddingCollection::new(dim, provider)?;
        let mut values = vec![0f32; dim];
        let mut raw = vec![0u8; dim * 4];
        for ordinal in 0..count {
            let truncated = |_| bad(format!("truncated at record {ordinal}"));
            let mut len = [0u8; 2];
            input.read_exact(&mut len).map_err(truncated)?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut id).map_err(truncated)?;
            input.read_exact(&mut raw).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| bad(format!("record {ordinal}: id is not UTF-8")))?;
            for (v, c) in values.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
            coll.push(id, &values)
                .map_err(|e| bad(format!("record {ordinal}: {e}")))?;
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra).map_err(|e| bad(e.to_string()))? > 0 {
            return Err(bad(format!("trailing data after {count} records")));
        }
        if coll.renormalized > 0 {
            log::warn!("re-normalized {} embedding(s) whose norm deviated from 1", coll.renormalized);
        }
        Ok(coll)
    }
}

pub fn write_header<W: Write>(out: &mut W, dim: usize, count: u64) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    Ok(())
}

pub fn write_record<W: Write>(out: &mut W, id: &str, values: &[f32]) -> Result<()> {
    let len = u16::try_from(id.len()).map_err(|_| Error::invalid(format!("embedding id too long: {id}")))?;
    let mut buf = Vec::with_capacity(2 + id.len() + values.len() * 4);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(id.as_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Result of validating a `BDEM` file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub count: usize,
    pub dim: usize,
    pub renormalized: usize,
    pub max_norm_error: f64,
}

impl CheckReport {
    /// Every stored vector already had unit norm within [`NORM_TOLERANCE`].
    pub fn passed(&self) -> bool {
        self.renormalized == 0
    }
}

/// Header, duplicate and norm validation of a `BDEM` stream.
pub fn check<R: Read>(input: &mut R) -> Result<CheckReport> {
    let coll = EmbeddingCollection::read_from(input, "check")?;
    Ok(CheckReport {
        count: coll.len(),
        dim: coll.dim(),
        renormalized: coll.renormalized,
        max_norm_error: coll.max_norm_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        assert_eq!(mean_pool(&[vec![1.0, 0.0]]).unwrap(), [1.0, 0.0]);
        assert_eq!(mean_pool(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), [0.5, 0.5]);
        assert!(mean_pool(&[]).is_err());
        assert!(mean_pool(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = l2_normalize(&v).unwrap();
        assert!(u.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn hash_embed_contract() {
        let e = HashEmbedder::new(DEFAULT_DIM, 0).unwrap();
        let a = e.embed("a", "sad").unwrap();
        assert_eq!(a.values, e.embed("b", "sad").unwrap().values);
        assert_eq!(a.values, e.embed("c", "Sad SAD").unwrap().values);
        assert_ne!(a.values, e.embed("d", "happy").unwrap().values);
        assert!((a.norm() - 1.0).abs() < NORM_TOLERANCE);
        assert!(e.embed("x", "  ...").is_err());
        assert!(HashEmbedder::new(1, 0).is_err());
        let other_seed = HashEmbedder::new(DEFAULT_DIM, 1).unwrap();
        assert_ne!(a.values, other_seed.embed("a", "sad").unwrap().values);
    }

    #[test]
    fn file_with_two_vectors() {
        let mut c = EmbeddingCollection::new(4, "t").unwrap();
        c.push("a", &[1.0, 0.0, 0.0, 0.0]).unwrap();
        c.push("b", &[0.0, 0.5, 0.5, 0.70710677]).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = EmbeddingCollection::read_from(&mut buf.as_slice(), "t").unwrap();
        assert_eq!((back.len(), back.dim()), (2, 4));
        assert_eq!(back.get("b"), c.get("b"));
    }

    #[test]
    fn truncated_file_names_record() {
        let mut c = EmbeddingCollection::new(2, "t").unwrap();
        for i in 0..3 {
            c.push(format!("v{i}"), &[0.6, 0.8]).unwrap();
        }
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = EmbeddingCollection::read_from(&mut buf.as_slice(), "t").unwrap_err().to_string();
        assert!(err.contains("record 2"), "{err}");
    }

    #[test]
    fn rejects_duplicates_zero_dim_and_bad_magic() {
        let mut buf = Vec::new();
        write_header(&mut buf, 2, 2).unwrap();
        write_record(&mut buf, "x", &[1.0, 0.0]).unwrap();
        write_record(&mut buf, "x", &[0.0, 1.0]).unwrap();
        assert!(EmbeddingCollection::read_from(&mut buf.as_slice(), "t").is_err());
        let mut zero = Vec::new();
        write_header(&mut zero, 0, 0).unwrap();
        assert!(EmbeddingCollection::read_from(&mut zero.as_slice(), "t").is_err());
        assert!(EmbeddingCollection::read_from(&mut &b"BDEX\x01\x00"[..], "t").is_err());
    }

    #[test]
    fn off_norm_vectors_are_renormalized() {
        let mut buf = Vec::new();
        write_header(&mut buf, 2, 1).unwrap();
        write_record(&mut buf, "x", &[3.0, 4.0]).unwrap();
        let report = check(&mut buf.as_slice()).unwrap();
        assert_eq!(report.renormalized, 1);
        assert!((report.max_norm_error - 4.0).abs() < 1e-12);
        assert!(!report.passed());
        let c = EmbeddingCollection::read_from(&mut buf.as_slice(), "t").unwrap();
        assert_eq!(c.vector(0), [0.6, 0.8]);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut buf = Vec::new();
        write_header(&mut buf, 2, 1).unwrap();
        write_record(&mut buf, "x", &[1.0, 0.0]).unwrap();
        assert!(check(&mut buf.as_slice()).unwrap().passed());
        buf.push(0);
        assert!(check(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn write_read_round_trip(vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..20)) {
            let mut c = EmbeddingCollection::new(3, "t").unwrap();
            for (i, v) in vs.iter().enumerate() {
                let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                prop_assume!(n > 1e-3);
                c.push(format!("id{i}"), v).unwrap();
            }
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = EmbeddingCollection::read_from(&mut buf.as_slice(), "t").unwrap();
            for (a, b) in back.iter().zip(c.iter()) {
                prop_assert_eq!(a.0, b.0);
                prop_assert!(a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn mean_pool_is_permutation_invariant(vs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..12), seed: u64) {
            let mut shuffled = vs.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = mean_pool(&vs).unwrap();
            let b = mean_pool(&shuffled).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
