use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `C = A·B` for `A: [m×k]`, `B: [k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{k}×_] rhs"), format!("[{k2}×{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == T::zero() {
                continue;
            }
            let bt = &bd[t * n..(t + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bt) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], c)?.ensure_finite("matmul")
}

/// `Aᵀ·B` for `A: [k×m]`, `B: [k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("[{k}×_] rhs"), format!("[{k2}×{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    for t in 0..k {
        let bt = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let av = ad[t * m + i];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(bt) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// `A·Bᵀ` for `A: [m×k]`, `B: [n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[_×{k}] rhs"), format!("[{n}×{k2}]")));
    }
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            c.push(ai.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum());
        }
    }
    Tensor::new(&[m, n], c)
}

/// Gradients of `C = A·B`: `(gradC·Bᵀ, Aᵀ·gradC)`.
pub fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad_c: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(grad_c, b)?, matmul_tn(a, grad_c)?))
}

/// Affine map over the last axis: `x·W + b`, any leading shape.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (din, dout) = w.dims2()?;
    if x.last_dim() != din {
        return Err(Error::shape("linear", format!("last dim {din}"), x.last_dim()));
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = dout;
    let x2 = x.clone().flatten_rows();
    let mut y = matmul(&x2, w)?;
    if let Some(b) = b {
        if b.len() != dout {
            return Err(Error::shape("linear bias", dout, b.len()));
        }
        for r in 0..y.rows() {
            for (v, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    y.reshape(&out_shape)
}

pub struct LinearGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad_y: &Tensor<T>) -> Result<LinearGrads<T>> {
    let x2 = x.clone().flatten_rows();
    let g2 = grad_y.clone().flatten_rows();
    let (gx, gw) = matmul_backward(&x2, w, &g2)?;
    Ok(LinearGrads {
        x: gx.reshape(x.shape())?,
        w: gw,
        b: column_sums(&g2),
    })
}

pub fn column_sums<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut s = vec![T::zero(); c];
    for r in 0..x.rows() {
        for (acc, &v) in s.iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    Tensor::new(&[c], s).expect("positive extent")
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |i| d[(i % m) * n + i / m]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    x.zip_map(grad_y, |v, g| {
        let u = c * (v + a * v * v * v);
        let th = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        g * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
    })
}
