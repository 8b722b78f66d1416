//! Decomposed vector quantization.
//!
//! A `D`-dimensional latent is cut into `n` contiguous slices of `d = D/n`
//! dims. Slice `i` is snapped to the nearest row of its own sub-codebook of
//! `K' = 2^(log2(K)/n)` codewords, so the composite code space still has
//! `K'^n = K` entries while each lookup only scans `K'` rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Parameter, Real, Tensor};

pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(Error::invalid(format!("unknown metric `{other}` (expected l1 or l2)"))),
        }
    }
}

/// Validated sizing of a decomposed codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodebookShape {
    /// Nominal total size `K`.
    pub k: usize,
    /// Number of sub-encoders `n`.
    pub n: usize,
    /// Per-sub-codebook size `K'`.
    pub sub_size: usize,
    /// Full latent dim `D`.
    pub dim: usize,
    /// Slice dim `D / n`.
    pub sub_dim: usize,
}

impl CodebookShape {
    pub fn new(k: usize, n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("codebook: n must be at least 1"));
        }
        if k < 2 || !k.is_power_of_two() {
            return Err(Error::CodebookSizeNotPowerOfTwo(k));
        }
        let log2_k = k.trailing_zeros();
        if !(log2_k as usize).is_multiple_of(n) {
            return Err(Error::CodebookSizeNotDivisible { k, log2_k, n });
        }
        if dim == 0 || !dim.is_multiple_of(n) {
            return Err(Error::LatentDimNotDivisible { d: dim, n });
        }
        Ok(Self {
            k,
            n,
            sub_size: 1 << (log2_k as usize / n),
            dim,
            sub_dim: dim / n,
        })
    }

    /// `K'^n`, the number of distinct composite codes.
    pub fn composite_size(&self) -> u128 {
        (self.sub_size as u128).pow(self.n as u32)
    }
}

#[derive(Clone, Debug)]
pub struct DecomposedCodebook<T = f32> {
    shape: CodebookShape,
    /// `sub[i]`: `[K' × d]` codewords of sub-encoder `i`.
    pub sub: Vec<Parameter<T>>,
    /// `ema_counts[i]`: `[K']` decayed assignment counts.
    pub ema_counts: Vec<Tensor<T>>,
    /// `ema_sums[i]`: `[K' × d]` decayed sums of assigned slices.
    pub ema_sums: Vec<Tensor<T>>,
    pub decay: f64,
    pub laplace_eps: f64,
}

/// Kaiming-uniform codewords (fan-in `d`), zeroed EMA state.
pub fn init_codebook<T: Real>(k: usize, n: usize, dim: usize, rng: &mut RngState) -> Result<DecomposedCodebook<T>> {
    let shape = CodebookShape::new(k, n, dim)?;
    let bound = (6.0 / shape.sub_dim as f64).sqrt();
    let sub = (0..n)
        .map(|_| Parameter::new(Tensor::uniform(&[shape.sub_size, shape.sub_dim], bound, rng)))
        .collect();
    Ok(DecomposedCodebook {
        shape,
        sub,
        ema_counts: (0..n).map(|_| Tensor::zeros(&[shape.sub_size])).collect(),
        ema_sums: (0..n)
            .map(|_| Tensor::zeros(&[shape.sub_size, shape.sub_dim]))
            .collect(),
        decay: DEFAULT_EMA_DECAY,
        laplace_eps: DEFAULT_LAPLACE_EPS,
    })
}

impl<T: Real> DecomposedCodebook<T> {
    pub fn shape(&self) -> CodebookShape {
        self.shape
    }

    pub fn with_ema(mut self, decay: f64, laplace_eps: f64) -> Self {
        self.decay = decay;
        self.laplace_eps = laplace_eps;
        self
    }

    /// Builds a codebook from explicit sub-codebook tables.
    pub fn from_tables(k: usize, tables: Vec<Tensor<T>>) -> Result<Self> {
        let n = tables.len();
        let d = tables.first().map_or(0, |t| t.last_dim());
        let shape = CodebookShape::new(k, n, d * n)?;
        for t in &tables {
            if t.shape() != [shape.sub_size, shape.sub_dim] {
                return Err(Error::shape(
                    "codebook table",
                    format!("[{}×{}]", shape.sub_size, shape.sub_dim),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        Ok(Self {
            shape,
            sub: tables.into_iter().map(Parameter::new).collect(),
            ema_counts: (0..n).map(|_| Tensor::zeros(&[shape.sub_size])).collect(),
            ema_sums: (0..n)
                .map(|_| Tensor::zeros(&[shape.sub_size, shape.sub_dim]))
                .collect(),
            decay: DEFAULT_EMA_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.sub.iter_mut().for_each(|p| p.frozen = frozen);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLossConfig {
    /// Commitment weight.
    pub beta: f64,
    /// Strength of the loss-scaled straight-through gradient.
    pub alpha: f64,
    pub metric: Metric,
}

impl Default for VqLossConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            alpha: 1.0,
            metric: Metric::L1,
        }
    }
}

impl VqLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn distance<T: Real>(a: &[T], b: &[T], metric: Metric) -> T {
    match metric {
        Metric::L1 => a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum(),
        Metric::L2 => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
    }
}

/// Index of the nearest codeword and its distance (squared for L2). Ties go
/// to the lowest index.
pub fn nearest_index<T: Real>(query: &[T], codebook: &Tensor<T>, metric: Metric) -> Result<(usize, T)> {
    let (rows, d) = codebook.dims2()?;
    if rows == 0 {
        return Err(Error::Empty("codebook".into()));
    }
    if query.len() != d {
        return Err(Error::shape("nearest_index", d, query.len()));
    }
    let mut best = (0, distance(query, codebook.row(0), metric));
    for j in 1..rows {
        let dist = distance(query, codebook.row(j), metric);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct QuantizationResult<T = f32> {
    /// Row-major `[positions × n]` codeword indices.
    pub indices: Vec<usize>,
    /// `[positions × D]` concatenation of the selected codewords.
    pub z_q: Tensor<T>,
    /// Mean over positions and slices of `||z_e_slice - e||²`, `z_e` held constant.
    pub vq_loss: T,
    /// Same value with the codebook held constant.
    pub commitment_loss: T,
    pub n: usize,
    pub sub_size: usize,
}

impl<T: Real> QuantizationResult<T> {
    pub fn positions(&self) -> usize {
        self.indices.len() / self.n
    }

    pub fn index(&self, position: usize, sub: usize) -> usize {
        self.indices[position * self.n + sub]
    }

    /// One-hot posterior over sub-codebook `sub` at `position`.
    pub fn posterior(&self, position: usize, sub: usize) -> Vec<T> {
        let mut p = vec![T::zero(); self.sub_size];
        p[self.index(position, sub)] = T::one();
        p
    }

    /// Assignment counts, `counts[i][j]` = uses of codeword `j` in sub-codebook `i`.
    pub fn counts(&self) -> Vec<Vec<u64>> {
        let mut c = vec![vec![0u64; self.sub_size]; self.n];
        for (k, &idx) in self.indices.iter().enumerate() {
            c[k % self.n][idx] += 1;
        }
        c
    }
}

/// Quantizes every row of `z_e` (last axis `D`) against `cb`.
pub fn quantize<T: Real>(
    z_e: &Tensor<T>,
    cb: &DecomposedCodebook<T>,
    cfg: &VqLossConfig,
) -> Result<QuantizationResult<T>> {
    let s = cb.shape;
    if z_e.last_dim() != s.dim {
        return Err(Error::shape(
            "quantize",
            format!("latent dim {}", s.dim),
            z_e.last_dim(),
        ));
    }
    let positions = z_e.rows();
    let mut indices = Vec::with_capacity(positions * s.n);
    let mut z_q = Tensor::zeros(&[positions, s.dim]);
    let mut total = T::zero();
    for p in 0..positions {
        let row = z_e.row(p);
        let out = z_q.row_mut(p);
        for (i, book) in cb.sub.iter().enumerate() {
            let slice = &row[i * s.sub_dim..(i + 1) * s.sub_dim];
            let (j, _) = nearest_index(slice, &book.value, cfg.metric)?;
            let code = book.value.row(j);
            out[i * s.sub_dim..(i + 1) * s.sub_dim].copy_from_slice(code);
            total += distance(slice, code, Metric::L2);
            indices.push(j);
        }
    }
    let loss = total / T::lit((positions * s.n) as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "quantize" });
    }
    Ok(QuantizationResult {
        indices,
        z_q,
        vq_loss: loss,
        commitment_loss: loss,
        n: s.n,
        sub_size: s.sub_size,
    })
}

/// Straight-through gradient for `z_e`, scaled by `1 + alpha * vq_loss`.
pub fn straight_through_backward<T: Real>(grad_zq: &Tensor<T>, vq_loss: T, alpha: f64) -> Tensor<T> {
    let factor = T::one() + T::lit(alpha) * vq_loss;
    grad_zq.map(|g| g * factor)
}

/// Gradient of `beta * commitment_loss` w.r.t. `z_e`.
pub fn commitment_grad<T: Real>(z_e: &Tensor<T>, result: &QuantizationResult<T>, beta: f64) -> Result<Tensor<T>> {
    let z_e = z_e.clone().flatten_rows();
    z_e.ensure_same_shape(&result.z_q, "commitment_grad")?;
    let c = T::lit(2.0 * beta / (result.positions() * result.n) as f64);
    z_e.zip_map(&result.z_q, |a, b| c * (a - b))
}

/// Gradient of `vq_loss` w.r.t. each sub-codebook table.
pub fn codebook_grad<T: Real>(
    z_e: &Tensor<T>,
    result: &QuantizationResult<T>,
    cb: &DecomposedCodebook<T>,
) -> Vec<Tensor<T>> {
    let s = cb.shape;
    let c = T::lit(2.0 / (result.positions() * s.n) as f64);
    let mut grads: Vec<Tensor<T>> = (0..s.n).map(|_| Tensor::zeros(&[s.sub_size, s.sub_dim])).collect();
    for p in 0..result.positions() {
        let row = z_e.row(p);
        for (i, g) in grads.iter_mut().enumerate() {
            let j = result.index(p, i);
            let code = cb.sub[i].value.row(j);
            let slice = &row[i * s.sub_dim..(i + 1) * s.sub_dim];
            for ((gv, &e), &z) in g.row_mut(j).iter_mut().zip(code).zip(slice) {
                *gv += c * (e - z);
            }
        }
    }
    grads
}

/// Exponential-moving-average codebook update from one batch.
///
/// Codewords that have never been assigned (running count exactly zero)
/// keep their current value.
pub fn ema_update<T: Real>(cb: &mut DecomposedCodebook<T>, z_e: &Tensor<T>, indices: &[usize]) -> Result<()> {
    let s = cb.shape;
    let positions = z_e.rows();
    if z_e.last_dim() != s.dim {
        return Err(Error::shape("ema_update", s.dim, z_e.last_dim()));
    }
    if indices.len() != positions * s.n {
        return Err(Error::shape("ema_update indices", positions * s.n, indices.len()));
    }
    let decay = T::lit(cb.decay);
    let keep = T::one() - decay;
    let eps = T::lit(cb.laplace_eps);
    for i in 0..s.n {
        let mut counts = vec![T::zero(); s.sub_size];
        let mut sums = Tensor::<T>::zeros(&[s.sub_size, s.sub_dim]);
        for p in 0..positions {
            let j = indices[p * s.n + i];
            if j >= s.sub_size {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    size: s.sub_size,
                });
            }
            counts[j] += T::one();
            let slice = &z_e.row(p)[i * s.sub_dim..(i + 1) * s.sub_dim];
            for (acc, &z) in sums.row_mut(j).iter_mut().zip(slice) {
                *acc += z;
            }
        }
        let ema_c = cb.ema_counts[i].data_mut();
        for (c, &bc) in ema_c.iter_mut().zip(&counts) {
            *c = decay * *c + keep * bc;
        }
        for (acc, &bs) in cb.ema_sums[i].data_mut().iter_mut().zip(sums.data()) {
            *acc = decay * *acc + keep * bs;
        }
        let table = &mut cb.sub[i].value;
        for j in 0..s.sub_size {
            let c = cb.ema_counts[i].data()[j];
            if c == T::zero() {
                continue;
            }
            let denom = c + eps;
            for (e, &sum) in table.row_mut(j).iter_mut().zip(cb.ema_sums[i].row(j)) {
                *e = sum / denom;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub entropy_bits: f64,
    /// `2^H`, the effective number of codewords in use.
    pub perplexity: f64,
    /// Fraction of codewords used at least once.
    pub used_fraction: f64,
}

/// Per-sub-encoder perplexity and used fraction from accumulated counts.
pub fn utilization(history: &[Vec<u64>]) -> Result<Vec<Utilization>> {
    if history.is_empty() {
        return Err(Error::Empty("assignment history".into()));
    }
    history
        .iter()
        .map(|counts| {
            let h = crate::entropy::sub_encoder_entropy(counts)?;
            let used = counts.iter().filter(|&&c| c > 0).count();
            Ok(Utilization {
                entropy_bits: h,
                perplexity: h.exp2(),
                used_fraction: used as f64 / counts.len() as f64,
            })
        })
        .collect()
}
