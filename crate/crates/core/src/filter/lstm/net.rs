//! Single-layer LSTM binary classifier in double precision.
//!
//! Gates are stored stacked in the order input, forget, output, candidate:
//! row `k * hidden + j` of `w`/`u`/`b` belongs to gate `k`, unit `j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD;
use crate::filter::linear::{log_loss, sigmoid};
use crate::{Error, Result};

const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmShape {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl LstmShape {
    pub fn parameter_count(&self) -> usize {
        let h4 = GATES * self.hidden;
        self.vocab * self.embed_dim + h4 * self.embed_dim + h4 * self.hidden + h4 + self.hidden + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub shape: LstmShape,
    /// `vocab x embed_dim`; row 0 (padding) stays zero.
    pub embedding: Vec<f64>,
    /// `4 hidden x embed_dim`
    pub w: Vec<f64>,
    /// `4 hidden x hidden`
    pub u: Vec<f64>,
    /// `4 hidden`
    pub b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: f64,
}

/// Forward mode. Dropout on the final hidden state only happens in training.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Infer,
    /// Per-unit inverted-dropout multipliers (`0` or `1 / keep`).
    Train { dropout_mask: &'a [f64] },
}

/// Activations cached by a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub tokens: Vec<u32>,
    /// Per step, gate activations `[i | f | o | g]`.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    readout: Vec<f64>,
    mask: Option<Vec<f64>>,
    pub logit: f64,
    pub probability: f64,
}

/// Parameter gradients, laid out like [`LstmWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub embedding: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: f64,
    touched: Vec<bool>,
    touched_rows: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Effective length: everything after the last non-padding token is ignored.
pub fn effective_len(tokens: &[u32]) -> usize {
    tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
}

impl LstmWeights {
    pub fn zeros(shape: LstmShape) -> Self {
        let h4 = GATES * shape.hidden;
        LstmWeights {
            shape,
            embedding: vec![0.0; shape.vocab * shape.embed_dim],
            w: vec![0.0; h4 * shape.embed_dim],
            u: vec![0.0; h4 * shape.hidden],
            b: vec![0.0; h4],
            fc_w: vec![0.0; shape.hidden],
            fc_b: 0.0,
        }
    }

    /// Uniform initialization: embeddings in `±embed_scale`, recurrent and FC
    /// weights in `±1/sqrt(hidden)`, forget-gate bias 1.
    pub fn init(shape: LstmShape, seed: u64, embed_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(shape);
        let k = 1.0 / (shape.hidden as f64).sqrt();
        for (i, e) in m.embedding.iter_mut().enumerate() {
            let v = rng.random_range(-embed_scale..embed_scale);
            if i >= shape.embed_dim {
                *e = v;
            }
        }
        for x in m.w.iter_mut().chain(m.u.iter_mut()).chain(m.fc_w.iter_mut()) {
            *x = rng.random_range(-k..k);
        }
        for j in 0..shape.hidden {
            m.b[shape.hidden + j] = 1.0;
        }
        m
    }

    /// Output probability.
    pub fn forward(&self, tokens: &[u32], mode: Mode<'_>) -> Result<f64> {
        Ok(self.forward_trace(tokens, mode)?.probability)
    }

    pub fn forward_trace(&self, tokens: &[u32], mode: Mode<'_>) -> Result<Trace> {
        let LstmShape { vocab, embed_dim, hidden } = self.shape;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid(format!("token id {bad} out of range for vocabulary of {vocab}")));
        }
        let len = effective_len(tokens);
        let mut trace = Trace {
            tokens: tokens[..len].to_vec(),
            ..Trace::default()
        };
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for &tok in &trace.tokens {
            let x = &self.embedding[tok as usize * embed_dim..(tok as usize + 1) * embed_dim];
            let mut a = vec![0.0; GATES * hidden];
            for (r, ar) in a.iter_mut().enumerate() {
                *ar = self.b[r]
                    + dot(&self.w[r * embed_dim..(r + 1) * embed_dim], x)
                    + dot(&self.u[r * hidden..(r + 1) * hidden], &h);
            }
            for (r, ar) in a.iter_mut().enumerate() {
                *ar = if r < 3 * hidden { sigmoid(*ar) } else { ar.tanh() };
            }
            for j in 0..hidden {
                let (i, f, o, g) = (a[j], a[hidden + j], a[2 * hidden + j], a[3 * hidden + j]);
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
            trace.gates.push(a);
            trace.cells.push(c.clone());
            trace.hiddens.push(h.clone());
        }
        let readout = match mode {
            Mode::Infer => h,
            Mode::Train { dropout_mask } => {
                if dropout_mask.len() != hidden {
                    return Err(Error::invalid("dropout mask length must equal hidden size"));
                }
                trace.mask = Some(dropout_mask.to_vec());
                h.iter().zip(dropout_mask).map(|(a, m)| a * m).collect()
            }
        };
        trace.logit = self.fc_b + dot(&self.fc_w, &readout);
        trace.probability = sigmoid(trace.logit);
        trace.readout = readout;
        Ok(trace)
    }

    /// Binary cross-entropy of one example.
    pub fn loss(&self, tokens: &[u32], label: bool, mode: Mode<'_>) -> Result<f64> {
        Ok(log_loss(self.forward_trace(tokens, mode)?.logit, label))
    }

    /// Backpropagation through time; adds `scale * d loss / d theta` into `grads`.
    pub fn backward(&self, trace: &Trace, label: bool, scale: f64, grads: &mut LstmGrads) {
        let LstmShape { embed_dim, hidden, .. } = self.shape;
        let dz = (trace.probability - f64::from(u8::from(label))) * scale;
        grads.fc_b += dz;
        axpy(dz, &trace.readout, &mut grads.fc_w);
        let mut dh: Vec<f64> = self.fc_w.iter().map(|w| w * dz).collect();
        if let Some(mask) = &trace.mask {
            for (d, m) in dh.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        let mut dc = vec![0.0; hidden];
        let mut da = vec![0.0; GATES * hidden];
        let zeros = vec![0.0; hidden];
        for t in (0..trace.tokens.len()).rev() {
            let gates = &trace.gates[t];
            let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zeros };
            let h_prev = if t > 0 { &trace.hiddens[t - 1] } else { &zeros };
            for j in 0..hidden {
                let (i, f, o, g) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
                let tc = trace.cells[t][j].tanh();
                dc[j] += dh[j] * o * (1.0 - tc * tc);
                da[j] = dc[j] * g * i * (1.0 - i);
                da[hidden + j] = dc[j] * c_prev[j] * f * (1.0 - f);
                da[2 * hidden + j] = dh[j] * tc * o * (1.0 - o);
                da[3 * hidden + j] = dc[j] * i * (1.0 - g * g);
                dc[j] *= f;
            }
            let tok = trace.tokens[t] as usize;
            let x = &self.embedding[tok * embed_dim..(tok + 1) * embed_dim];
            dh.iter_mut().for_each(|d| *d = 0.0);
            let trainable = tok != PAD as usize;
            if trainable {
                grads.touch(tok);
            }
            for (r, &dar) in da.iter().enumerate() {
                if dar == 0.0 {
                    continue;
                }
                grads.b[r] += dar;
                axpy(dar, x, &mut grads.w[r * embed_dim..(r + 1) * embed_dim]);
                axpy(dar, h_prev, &mut grads.u[r * hidden..(r + 1) * hidden]);
                axpy(dar, &self.u[r * hidden..(r + 1) * hidden], &mut dh);
                if trainable {
                    axpy(
                        dar,
                        &self.w[r * embed_dim..(r + 1) * embed_dim],
                        &mut grads.embedding[tok * embed_dim..(tok + 1) * embed_dim],
                    );
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fc_b.is_finite()
            && self
                .embedding
                .iter()
                .chain(&self.w)
                .chain(&self.u)
                .chain(&self.b)
                .chain(&self.fc_w)
                .all(|x| x.is_finite())
    }

    /// Applies `theta -= lr * grad`, touching only embedding rows that received gradient.
    pub fn apply(&mut self, grads: &LstmGrads, lr: f64) {
        let e = self.shape.embed_dim;
        for &row in &grads.touched_rows {
            axpy(-lr, &grads.embedding[row * e..(row + 1) * e], &mut self.embedding[row * e..(row + 1) * e]);
        }
        axpy(-lr, &grads.w, &mut self.w);
        axpy(-lr, &grads.u, &mut self.u);
        axpy(-lr, &grads.b, &mut self.b);
        axpy(-lr, &grads.fc_w, &mut self.fc_w);
        self.fc_b -= lr * grads.fc_b;
    }

    /// Mutable view of every trainable scalar, in a fixed order (padding row excluded).
    pub fn parameters_mut(&mut self) -> Vec<&mut f64> {
        let e = self.shape.embed_dim;
        self.embedding[e..]
            .iter_mut()
            .chain(self.w.iter_mut())
            .chain(self.u.iter_mut())
            .chain(self.b.iter_mut())
            .chain(self.fc_w.iter_mut())
            .chain(std::iter::once(&mut self.fc_b))
            .collect()
    }
}

impl LstmGrads {
    pub fn new(shape: LstmShape) -> Self {
        let z = LstmWeights::zeros(shape);
        LstmGrads {
            embedding: z.embedding,
            w: z.w,
            u: z.u,
            b: z.b,
            fc_w: z.fc_w,
            fc_b: 0.0,
            touched: vec![false; shape.vocab],
            touched_rows: Vec::new(),
        }
    }

    fn touch(&mut self, row: usize) {
        if !self.touched[row] {
            self.touched[row] = true;
            self.touched_rows.push(row);
        }
    }

    fn embed_dim(&self) -> usize {
        self.embedding.len() / self.touched.len()
    }

    pub fn clear(&mut self) {
        let e = self.embed_dim();
        for &row in &self.touched_rows {
            self.embedding[row * e..(row + 1) * e].iter_mut().for_each(|x| *x = 0.0);
            self.touched[row] = false;
        }
        self.touched_rows.clear();
        for x in self.w.iter_mut().chain(self.u.iter_mut()).chain(self.b.iter_mut()).chain(self.fc_w.iter_mut()) {
            *x = 0.0;
        }
        self.fc_b = 0.0;
    }

    pub fn norm(&self) -> f64 {
        let e = self.embed_dim();
        let emb: f64 = self
            .touched_rows
            .iter()
            .flat_map(|&r| &self.embedding[r * e..(r + 1) * e])
            .map(|x| x * x)
            .sum();
        let rest: f64 = self.w.iter().chain(&self.u).chain(&self.b).chain(&self.fc_w).map(|x| x * x).sum();
        (emb + rest + self.fc_b * self.fc_b).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let e = self.embed_dim();
        for &row in &self.touched_rows {
            self.embedding[row * e..(row + 1) * e].iter_mut().for_each(|x| *x *= factor);
        }
        for x in self.w.iter_mut().chain(self.u.iter_mut()).chain(self.b.iter_mut()).chain(self.fc_w.iter_mut()) {
            *x *= factor;
        }
        self.fc_b *= factor;
    }

    /// Every gradient scalar in the order of [`LstmWeights::parameters_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let e = self.embed_dim();
        self.embedding[e..]
            .iter()
            .chain(&self.w)
            .chain(&self.u)
            .chain(&self.b)
            .chain(&self.fc_w)
            .copied()
            .chain(std::iter::once(self.fc_b))
            .collect()
    }
}

/// Largest relative error between analytic and central-difference gradients
/// (step `1e-6`) over every trainable parameter of a random model of `shape`,
/// on one random sequence of up to 5 tokens with dropout disabled.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-7)`; the floor keeps
/// parameters whose true gradient is numerically zero from dividing rounding
/// noise by itself.
pub fn grad_check(shape: LstmShape, seed: u64) -> f64 {
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4ec);
    let mut model = LstmWeights::init(shape, seed, 0.5);
    // larger recurrent weights so that every gate path carries gradient
    for x in model.u.iter_mut().chain(model.w.iter_mut()).chain(model.b.iter_mut()).chain(model.fc_w.iter_mut()) {
        *x = rng.random_range(-0.8..0.8);
    }
    let len = rng.random_range(1..=5usize);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(1..shape.vocab as u32)).collect();
    let label = rng.random_bool(0.5);

    let trace = model.forward_trace(&tokens, Mode::Infer).expect("valid tokens");
    let mut grads = LstmGrads::new(shape);
    model.backward(&trace, label, 1.0, &mut grads);
    let analytic = grads.flatten();

    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *model.parameters_mut()[k];
        *model.parameters_mut()[k] = orig + STEP;
        let plus = model.loss(&tokens, label, Mode::Infer).unwrap();
        *model.parameters_mut()[k] = orig - STEP;
        let minus = model.loss(&tokens, label, Mode::Infer).unwrap();
        *model.parameters_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}
