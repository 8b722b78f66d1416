use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved forward state for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias of length {d}"),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut normalized = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let nr = normalized.row_mut(r);
        for (n, &v) in nr.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let nr = normalized.row(r);
        for (j, yv) in y.row_mut(r).iter_mut().enumerate() {
            *yv = nr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y.ensure_finite("layer_norm")?, LayerNormCache { normalized, inv_std }))
}

/// Returns `(grad_x, grad_gain, grad_bias)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_y.ensure_same_shape(&cache.normalized, "layer_norm_backward")?;
    let d = grad_y.last_dim();
    let inv_d = T::one() / T::lit(d as f64);
    let mut gx = grad_y.clone();
    let mut gg = Tensor::zeros(gain.shape());
    let mut gb = Tensor::zeros(gain.shape());
    let mut gxhat = vec![T::zero(); d];
    for r in 0..grad_y.rows() {
        let gy = grad_y.row(r);
        let xh = cache.normalized.row(r);
        for j in 0..d {
            gg.data_mut()[j] += gy[j] * xh[j];
            gb.data_mut()[j] += gy[j];
            gxhat[j] = gy[j] * gain.data()[j];
        }
        let mean_g = gxhat.iter().copied().sum::<T>() * inv_d;
        let mean_gx = gxhat.iter().zip(xh).map(|(&g, &x)| g * x).sum::<T>() * inv_d;
        let is = cache.inv_std[r];
        for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
            *out = is * (gxhat[j] - mean_g - xh[j] * mean_gx);
        }
    }
    Ok((gx, gg, gb))
}
