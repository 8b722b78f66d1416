//! Reference discretization bottlenecks: Gumbel-Max, Gumbel-Softmax and
//! improved semantic hashing.
//!
//! All functions treat the last axis as the category / bit axis and every
//! leading row independently, so a single vector is just a one-row input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::linalg::{matmul, matmul_nt, matmul_tn};
use crate::ops::loss::argmax_rows;
use crate::rng::RngState;
use crate::tensor::{Parameter, Real, Tensor};

const UNIFORM_FLOOR: f64 = 1e-20;
const UNIFORM_CEIL: f64 = 1.0 - 1e-7;

/// Standard Gumbel draw `-ln(-ln A)`, `A` uniform and clamped away from 0 and 1.
pub fn gumbel_noise(rng: &mut RngState) -> f64 {
    let a = rng.uniform().clamp(UNIFORM_FLOOR, UNIFORM_CEIL);
    -(-a.ln()).ln()
}

pub fn gumbel_noise_like<T: Real>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(gumbel_noise(rng)))
}

fn one_hot_rows<T: Real>(shape: &[usize], idx: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    for (r, &j) in idx.iter().enumerate() {
        out.row_mut(r)[j] = T::one();
    }
    out
}

/// `one_hot(argmax(logits + noise))` per row.
pub fn gumbel_max_with_noise<T: Real>(logits: &Tensor<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    let perturbed = logits.zip_map(noise, |l, g| l + g)?;
    Ok(one_hot_rows(logits.shape(), &argmax_rows(&perturbed)))
}

pub fn gumbel_max_sample<T: Real>(logits: &Tensor<T>, rng: &mut RngState) -> Result<Tensor<T>> {
    let noise = gumbel_noise_like(logits.shape(), rng);
    gumbel_max_with_noise(logits, &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f64,
    pub k: usize,
    /// One-hot forward, relaxed backward.
    pub hard: bool,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("gumbel: tau must be > 0, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::invalid("gumbel: k must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GumbelSample<T> {
    /// What the consumer sees: `soft`, or its one-hot argmax in hard mode.
    pub output: Tensor<T>,
    /// The relaxed sample `softmax((l + g) / tau)`.
    pub soft: Tensor<T>,
    pub indices: Vec<usize>,
}

pub fn gumbel_softmax_with_noise<T: Real>(
    logits: &Tensor<T>,
    noise: &Tensor<T>,
    cfg: &GumbelConfig,
) -> Result<GumbelSample<T>> {
    cfg.validate()?;
    if logits.last_dim() != cfg.k {
        return Err(Error::shape("gumbel_softmax", cfg.k, logits.last_dim()));
    }
    let inv_tau = T::lit(1.0 / cfg.tau);
    let mut soft = logits.zip_map(noise, |l, g| (l + g) * inv_tau)?;
    for r in 0..soft.rows() {
        let row = soft.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    let indices = argmax_rows(&soft);
    let output = if cfg.hard {
        one_hot_rows(soft.shape(), &indices)
    } else {
        soft.clone()
    };
    Ok(GumbelSample { output, soft, indices })
}

pub fn gumbel_softmax<T: Real>(logits: &Tensor<T>, rng: &mut RngState, cfg: &GumbelConfig) -> Result<GumbelSample<T>> {
    let noise = gumbel_noise_like(logits.shape(), rng);
    gumbel_softmax_with_noise(logits, &noise, cfg)
}

/// Gradient w.r.t. the logits. In hard mode the one-hot output passes its
/// gradient straight to the relaxed sample.
pub fn gumbel_softmax_backward<T: Real>(sample: &GumbelSample<T>, grad_out: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    grad_out.ensure_same_shape(&sample.soft, "gumbel_softmax_backward")?;
    let inv_tau = T::lit(1.0 / tau);
    let mut g = grad_out.clone();
    for r in 0..g.rows() {
        let v = sample.soft.row(r);
        let row = g.row_mut(r);
        let dot: T = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
        for (gv, &vv) in row.iter_mut().zip(v) {
            *gv = vv * (*gv - dot) * inv_tau;
        }
    }
    Ok(g)
}

/// `max(0, min(1, 1.2·σ(x) − 0.1))`.
pub fn saturating_sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sat_sigmoid_scalar)
}

fn sat_sigmoid_scalar<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    (T::lit(1.2) * s - T::lit(0.1)).min(T::one()).max(T::zero())
}

/// Derivative of [`saturating_sigmoid`]; zero on the saturated tails.
pub fn saturating_sigmoid_grad<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let s = T::one() / (T::one() + (-v).exp());
        let y = T::lit(1.2) * s - T::lit(0.1);
        if y <= T::zero() || y >= T::one() {
            T::zero()
        } else {
            T::lit(1.2) * s * (T::one() - s)
        }
    })
}

/// Two embedding tables indexed by bit, `[bits × out_dim]` each.
#[derive(Clone, Debug)]
pub struct SemHashState<T = f32> {
    pub bits: usize,
    pub e1: Parameter<T>,
    pub e2: Parameter<T>,
    pub noise_std: f64,
}

impl<T: Real> SemHashState<T> {
    pub fn new(bits: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let bound = (6.0 / bits as f64).sqrt();
        Self {
            bits,
            e1: Parameter::new(Tensor::uniform(&[bits, out_dim], bound, rng)),
            e2: Parameter::new(Tensor::uniform(&[bits, out_dim], bound, rng)),
            noise_std: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SemHashCode<T> {
    /// Noisy pre-activation `z_e + η`.
    pub pre: Tensor<T>,
    pub f: Tensor<T>,
    pub g: Tensor<T>,
    /// The code forwarded to the decoder (`f` or `g`).
    pub h: Tensor<T>,
    pub used_soft: bool,
}

/// Noisy saturating-sigmoid code and its rounding. During training `h` is
/// `f` or `g` with equal probability per call; at eval it is `g` and no
/// noise is added.
pub fn semhash_encode<T: Real>(
    z_e: &Tensor<T>,
    rng: &mut RngState,
    training: bool,
    state: &SemHashState<T>,
) -> Result<SemHashCode<T>> {
    if z_e.last_dim() != state.bits {
        return Err(Error::shape("semhash_encode", state.bits, z_e.last_dim()));
    }
    let pre = if training {
        let noise = Tensor::normal(z_e.shape(), state.noise_std, rng);
        z_e.zip_map(&noise, |v, e| v + e)?
    } else {
        z_e.clone()
    };
    let f = saturating_sigmoid(&pre);
    let half = T::lit(0.5);
    let g = f.map(|v| if v > half { T::one() } else { T::zero() });
    let used_soft = training && rng.bernoulli(0.5);
    let h = if used_soft { f.clone() } else { g.clone() };
    Ok(SemHashCode {
        pre,
        f,
        g,
        h,
        used_soft,
    })
}

/// `Σ_b h_b·e1[b] + (1 − h_b)·e2[b]` per row.
pub fn semhash_decoder_input<T: Real>(h: &Tensor<T>, state: &SemHashState<T>) -> Result<Tensor<T>> {
    if h.last_dim() != state.bits {
        return Err(Error::shape("semhash_decoder_input", state.bits, h.last_dim()));
    }
    let h2 = h.clone().flatten_rows();
    let mut out = matmul(&h2, &state.e1.value)?;
    let comp = h2.map(|v| T::one() - v);
    out.add_assign(&matmul(&comp, &state.e2.value)?)?;
    Ok(out)
}

/// Backward through decoder input and code. Accumulates table gradients and
/// returns the gradient w.r.t. `z_e`; the rounding is bypassed so `g`
/// receives exactly `f`'s gradient.
pub fn semhash_backward<T: Real>(
    code: &SemHashCode<T>,
    grad_out: &Tensor<T>,
    state: &mut SemHashState<T>,
) -> Result<Tensor<T>> {
    let h = code.h.clone().flatten_rows();
    let comp = h.map(|v| T::one() - v);
    state.e1.accumulate(&matmul_tn(&h, grad_out)?)?;
    state.e2.accumulate(&matmul_tn(&comp, grad_out)?)?;
    let diff = state.e1.value.zip_map(&state.e2.value, |a, b| a - b)?;
    let grad_h = matmul_nt(grad_out, &diff)?;
    let slope = saturating_sigmoid_grad(&code.pre).flatten_rows();
    grad_h.zip_map(&slope, |g, s| g * s)
}
