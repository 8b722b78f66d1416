//! Multi-head scaled dot-product self-attention with explicit backward.
//!
//! No positional information is added here; callers inject positions before
//! the block, which keeps the op permutation-equivariant.

use crate::error::{Error, Result};
use crate::ops::linalg::{matmul, matmul_backward, matmul_nt, matmul_tn};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per head `[T×T]` attention probabilities.
    probs: Vec<Tensor<T>>,
    concat: Tensor<T>,
    heads: usize,
}

pub struct AttentionGrads<T> {
    pub x: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// `x: [T×Dm]`. `key_mask[j] == false` excludes position `j` as a key; a
/// query with no admissible keys attends to nothing and yields zeros.
pub fn self_attention<T: Real>(
    x: &Tensor<T>,
    w: AttentionWeights<'_, T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (t, dm) = x.dims2()?;
    if heads == 0 || dm % heads != 0 {
        return Err(Error::invalid(format!(
            "self_attention: model dim {dm} not divisible by {heads} heads"
        )));
    }
    for (name, m) in [("wq", w.wq), ("wk", w.wk), ("wv", w.wv), ("wo", w.wo)] {
        if m.shape() != [dm, dm] {
            return Err(Error::shape(
                "self_attention",
                format!("{name} [{dm}×{dm}]"),
                format!("{:?}", m.shape()),
            ));
        }
    }
    if let Some(m) = key_mask {
        if m.len() != t {
            return Err(Error::shape("self_attention key mask", t, m.len()));
        }
    }
    let dh = dm / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let q = matmul(x, w.wq)?;
    let k = matmul(x, w.wk)?;
    let v = matmul(x, w.wv)?;
    let mut concat = Tensor::zeros(&[t, dm]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * dh, dh),
            k.slice_cols(h * dh, dh),
            v.slice_cols(h * dh, dh),
        );
        let mut p = matmul_nt(&qh, &kh)?;
        for i in 0..t {
            let row = p.row_mut(i);
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if key_mask.is_none_or(|m| m[j]) && *s > max {
                    max = *s;
                }
            }
            if max == T::neg_infinity() {
                row.iter_mut().for_each(|s| *s = T::zero());
                continue;
            }
            let mut z = T::zero();
            for (j, s) in row.iter_mut().enumerate() {
                *s = if key_mask.is_none_or(|m| m[j]) {
                    (*s - max).exp()
                } else {
                    T::zero()
                };
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        let oh = matmul(&p, &vh)?;
        concat.set_cols(h * dh, &oh);
        probs.push(p);
    }
    let y = matmul(&concat, w.wo)?;
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
            heads,
        },
    ))
}

pub fn self_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    w: AttentionWeights<'_, T>,
    grad_y: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (t, dm) = cache.x.dims2()?;
    grad_y.ensure_same_shape(&cache.x, "self_attention_backward")?;
    let dh = dm / cache.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (g_concat, g_wo) = matmul_backward(&cache.concat, w.wo, grad_y)?;
    let mut gq = Tensor::zeros(&[t, dm]);
    let mut gk = Tensor::zeros(&[t, dm]);
    let mut gv = Tensor::zeros(&[t, dm]);
    for h in 0..cache.heads {
        let p = &cache.probs[h];
        let qh = cache.q.slice_cols(h * dh, dh);
        let kh = cache.k.slice_cols(h * dh, dh);
        let vh = cache.v.slice_cols(h * dh, dh);
        let go = g_concat.slice_cols(h * dh, dh);
        let (gp, gvh) = matmul_backward(p, &vh, &go)?;
        let mut gs = gp;
        for i in 0..t {
            let pr = p.row(i);
            let row = gs.row_mut(i);
            let dot: T = row.iter().zip(pr).map(|(&g, &pv)| g * pv).sum();
            for (g, &pv) in row.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        gq.set_cols(h * dh, &matmul(&gs, &kh)?);
        gk.set_cols(h * dh, &matmul_tn(&gs, &qh)?);
        gv.set_cols(h * dh, &gvh);
    }
    let mut gx = matmul_nt(&gq, w.wq)?;
    gx.add_assign(&matmul_nt(&gk, w.wk)?)?;
    gx.add_assign(&matmul_nt(&gv, w.wv)?)?;
    Ok(AttentionGrads {
        x: gx,
        wq: matmul_tn(&cache.x, &gq)?,
        wk: matmul_tn(&cache.x, &gk)?,
        wv: matmul_tn(&cache.x, &gv)?,
        wo: g_wo,
    })
}
