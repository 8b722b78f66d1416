//! Shannon-entropy gate deciding which sub-encoders get DropConnect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::dropconnect::{dropconnect_apply, DropMask};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Entropy in bits of the empirical distribution given by `counts`.
pub fn sub_encoder_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("entropy of an empty count vector".into()));
    }
    let total = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Median of `entropies`; the lower median when the count is even.
pub fn median_threshold(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::Empty("median of no entropies".into()));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[(sorted.len() - 1) / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub entropies: Vec<f64>,
    pub threshold: f64,
    /// `gated[i]` iff `entropies[i] > threshold`.
    pub gated: Vec<bool>,
}

impl EntropyReport {
    pub fn from_entropies(entropies: Vec<f64>) -> Result<Self> {
        let threshold = median_threshold(&entropies)?;
        let gated = entropies.iter().map(|&e| e > threshold).collect();
        Ok(Self {
            entropies,
            threshold,
            gated,
        })
    }

    /// Builds the report from per-sub-encoder assignment counts.
    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self> {
        let entropies = counts
            .iter()
            .map(|c| sub_encoder_entropy(c))
            .collect::<Result<Vec<_>>>()?;
        Self::from_entropies(entropies)
    }

    pub fn gated_indices(&self) -> Vec<usize> {
        self.gated
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| g.then_some(i))
            .collect()
    }
}

/// DropConnect masks applied to the column slices of a projection matrix.
#[derive(Clone, Debug)]
pub struct GateMask<T> {
    pub sub_dim: usize,
    /// One entry per sub-encoder; `None` for untouched slices.
    pub slices: Vec<Option<DropMask<T>>>,
}

impl<T: Real> GateMask<T> {
    pub fn none(n: usize, sub_dim: usize) -> Self {
        Self {
            sub_dim,
            slices: vec![None; n],
        }
    }

    /// Maps the gradient w.r.t. the masked weights back to the raw weights.
    pub fn backward(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = grad.clone();
        for (i, mask) in self.slices.iter().enumerate() {
            if let Some(m) = mask {
                let g = m.backward(&grad.slice_cols(i * self.sub_dim, self.sub_dim))?;
                out.set_cols(i * self.sub_dim, &g);
            }
        }
        Ok(out)
    }
}

/// Applies DropConnect to the output-column slice of `weights` belonging to
/// each gated sub-encoder. `weights` is `[in × n·d]`; slice `i` is columns
/// `i·d .. (i+1)·d`. Outside training nothing is masked.
pub fn gate_dropconnect<T: Real>(
    report: &EntropyReport,
    rate: f64,
    rng: &mut RngState,
    weights: &Tensor<T>,
    training: bool,
) -> Result<(Tensor<T>, GateMask<T>)> {
    let n = report.gated.len();
    let (_, cols) = weights.dims2()?;
    if n == 0 || cols % n != 0 {
        return Err(Error::shape(
            "gate_dropconnect",
            format!("columns divisible by {n}"),
            cols,
        ));
    }
    let d = cols / n;
    let mut out = weights.clone();
    let mut gate = GateMask::none(n, d);
    if !training {
        return Ok((out, gate));
    }
    for i in report.gated_indices() {
        let (masked, mask) = dropconnect_apply(&weights.slice_cols(i * d, d), rate, rng, true)?;
        out.set_cols(i * d, &masked);
        gate.slices[i] = Some(mask);
    }
    Ok((out, gate))
}
