//! Unit-norm embeddings and the two-layer perceptron encoders that produce
//! them. The backward pass is written by hand; there is no autodiff.

mod bundle;
mod featurize;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub use bundle::{
    checkpoint_bytes, hash_json, load_checkpoint, save_checkpoint, BundleConfig, Checkpoint, EncoderBundle,
    EncoderRole, PromptEncoders,
};
pub use featurize::{tokens, RegionFeaturizer, RegionView, Tokenizer};

pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalizes `values`. Rejects zero and non-finite vectors.
    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroVector);
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> Embedding {
        Embedding(self.0.iter().map(|v| -v).collect())
    }
}

/// Dot product of unit vectors, clamped against rounding into [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    dot(&a.0, &b.0).clamp(-1.0, 1.0)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of `items`, re-normalized. Fails on an empty list or when the mean
/// nearly cancels out.
pub fn average_embeddings(items: &[Embedding]) -> Result<Embedding> {
    let first = items.first().ok_or_else(|| Error::Missing("cannot average an empty embedding list".into()))?;
    if items.len() == 1 {
        return Ok(first.clone());
    }
    let mut mean = vec![0.0; first.dim()];
    for e in items {
        if e.dim() != mean.len() {
            return Err(Error::Shape {
                expected: mean.len(),
                actual: e.dim(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&e.0) {
            *m += v;
        }
    }
    let n = items.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::ZeroVector);
    }
    Embedding::normalize(mean)
}

/// `input -> tanh(W1 x + b1) -> W2 h + b2 -> L2 normalize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub frozen: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    pub output: Embedding,
}

impl EncoderParams {
    /// Symmetric uniform init scaled by `1/sqrt(fan_in)`.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64, role: u64) -> Self {
        let mut rng = seed::rng(&[tag::INIT, seed, role]);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = draw(hidden_dim * input_dim, input_dim);
        let b1 = draw(hidden_dim, input_dim);
        let w2 = draw(output_dim * hidden_dim, hidden_dim);
        let b2 = draw(output_dim, hidden_dim);
        EncoderParams {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2,
            frozen: false,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        EncoderParams {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
            frozen: false,
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                actual: input.len(),
            });
        }
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (dot(row, input) + self.b1[j]).tanh()
            })
            .collect();
        let z: Vec<f64> = (0..self.output_dim)
            .map(|k| {
                let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                dot(row, &hidden) + self.b2[k]
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let output = Embedding::normalize(z)?;
        Ok(ForwardCache {
            input: input.to_vec(),
            hidden,
            norm,
            output,
        })
    }

    pub fn encode(&self, input: &[f64]) -> Result<Embedding> {
        Ok(self.forward(input)?.output)
    }

    /// Accumulates the parameter gradient for `dL/d(output)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64], grads: &mut ParamGrads) {
        let e = cache.output.values();
        let proj = dot(e, grad_output);
        let dz: Vec<f64> = grad_output
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ei * proj) / cache.norm)
            .collect();
        let mut dh = vec![0.0; self.hidden_dim];
        for (k, &dzk) in dz.iter().enumerate() {
            if dzk == 0.0 {
                continue;
            }
            grads.b2[k] += dzk;
            let row = k * self.hidden_dim;
            for j in 0..self.hidden_dim {
                grads.w2[row + j] += dzk * cache.hidden[j];
                dh[j] += dzk * self.w2[row + j];
            }
        }
        for j in 0..self.hidden_dim {
            let da = dh[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
            if da == 0.0 {
                continue;
            }
            grads.b1[j] += da;
            let row = j * self.input_dim;
            for (i, &x) in cache.input.iter().enumerate() {
                if x != 0.0 {
                    grads.w1[row + i] += da * x;
                }
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn slot(&self, k: usize) -> (usize, usize) {
        let sizes = [self.w1.len(), self.b1.len(), self.w2.len(), self.b2.len()];
        let mut k = k;
        for (i, s) in sizes.iter().enumerate() {
            if k < *s {
                return (i, k);
            }
            k -= s;
        }
        panic!("parameter index out of range");
    }

    /// Flat view over `[w1, b1, w2, b2]`.
    pub fn get(&self, k: usize) -> f64 {
        let (v, i) = self.slot(k);
        [&self.w1, &self.b1, &self.w2, &self.b2][v][i]
    }

    pub fn set(&mut self, k: usize, value: f64) {
        let (v, i) = self.slot(k);
        match v {
            0 => self.w1[i] = value,
            1 => self.b1[i] = value,
            2 => self.w2[i] = value,
            _ => self.b2[i] = value,
        }
    }

    /// Plain SGD step. Frozen encoders are left untouched.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        if self.frozen {
            return;
        }
        let upd = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        upd(&mut self.w1, &grads.w1);
        upd(&mut self.b1, &grads.b1);
        upd(&mut self.w2, &grads.w2);
        upd(&mut self.b2, &grads.b2);
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        ParamGrads {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn get(&self, k: usize) -> f64 {
        let mut k = k;
        for part in self.parts() {
            if k < part.len() {
                return part[k];
            }
            k -= part.len();
        }
        panic!("gradient index out of range");
    }

    pub fn is_zero(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| *v == 0.0))
    }

    pub fn scale(&mut self, s: f64) {
        for p in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, s: f64) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(a, b)| *a += s * b);
        add(&mut self.w1, &other.w1);
        add(&mut self.b1, &other.b1);
        add(&mut self.w2, &other.w2);
        add(&mut self.b2, &other.b2);
    }

    pub fn norm(&self) -> f64 {
        self.parts().iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}
