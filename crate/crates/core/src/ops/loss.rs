use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean negative log-likelihood of `targets` under `softmax(logits)`, rows
/// of `logits` being independent examples. Returns the loss and its gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    softmax_cross_entropy_masked(logits, targets, None)
}

/// As [`softmax_cross_entropy`], averaging only over rows where `mask` is
/// true. Masked rows contribute zero loss and zero gradient.
pub fn softmax_cross_entropy_masked<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(T, Tensor<T>)> {
    let (b, c) = (logits.rows(), logits.last_dim());
    if targets.len() != b {
        return Err(Error::shape("softmax_cross_entropy", b, targets.len()));
    }
    if let Some(m) = mask {
        if m.len() != b {
            return Err(Error::shape("softmax_cross_entropy mask", b, m.len()));
        }
    }
    let active = |r: usize| mask.is_none_or(|m| m[r]);
    let count = (0..b).filter(|&r| active(r)).count();
    let mut grad = Tensor::zeros(logits.shape());
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::lit(count as f64);
    let mut loss = T::zero();
    for r in 0..b {
        if !active(r) {
            continue;
        }
        let t = targets[r];
        if t >= c {
            return Err(Error::IndexOutOfRange { index: t, size: c });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[t];
        let g = grad.row_mut(r);
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == t { T::one() } else { T::zero() }) * inv;
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss, grad))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    y
}
