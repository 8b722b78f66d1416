//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod grad_suite;

use dvq::model::{BottleneckKind, CodebookMode, EncoderConfig, EncoderKind, ModelConfig};
use dvq::quantizer::{Metric, VqLossConfig};

/// Exhaustive scan; strict `<` keeps the lowest index on ties.
pub fn scan_nearest(query: &[f64], rows: &[Vec<f64>], metric: Metric) -> usize {
    let dist = |r: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (a, b) in query.iter().zip(r) {
            acc += match metric {
                Metric::L1 => (a - b).abs(),
                Metric::L2 => (a - b) * (a - b),
            };
        }
        acc
    };
    let mut best = 0;
    let mut best_d = dist(&rows[0]);
    for (j, r) in rows.iter().enumerate().skip(1) {
        let d = dist(r);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Plain single-codebook VQ: indices, looked-up rows, and the mean squared
/// L2 distance between each row and its codeword.
pub struct PlainVq {
    pub indices: Vec<usize>,
    pub z_q: Vec<Vec<f64>>,
    pub loss: f64,
}

pub fn plain_vq(z: &[Vec<f64>], codebook: &[Vec<f64>], metric: Metric) -> PlainVq {
    let mut indices = Vec::new();
    let mut z_q = Vec::new();
    let mut total = 0.0;
    for row in z {
        let j = scan_nearest(row, codebook, metric);
        let mut sq = 0.0;
        for (a, b) in row.iter().zip(&codebook[j]) {
            sq += (a - b) * (a - b);
        }
        total += sq;
        indices.push(j);
        z_q.push(codebook[j].clone());
    }
    PlainVq {
        indices,
        loss: total / z.len() as f64,
        z_q,
    }
}

pub fn rows_of(t: &dvq::Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn small_model_config(kind: EncoderKind, n: usize, k: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 12,
            max_len: 6,
            d_model: 8,
            kind,
            heads: 2,
            n_sub_encoders: n,
        },
        bottleneck: BottleneckKind::Dvq,
        codebook_size: k,
        vq: VqLossConfig::default(),
        codebook_mode: CodebookMode::Regular,
        ema_decay: 0.99,
        laplace_eps: 1e-5,
        gumbel_tau: 1.0,
        gumbel_hard: false,
    }
}

/// Bias-corrected Adam on flat vectors.
pub struct RefAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            b1: 0.9,
            b2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `g` in place to global norm at most `threshold`.
pub fn ref_clip(g: &mut [f64], threshold: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > threshold {
        g.iter_mut().for_each(|x| *x *= threshold / norm);
    }
}
