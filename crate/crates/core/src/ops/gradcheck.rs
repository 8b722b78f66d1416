//! Central finite-difference gradient checking (64-bit only).

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which components are compared on an absolute scale;
/// central differences carry roughly `1e-11` of rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn eval(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &[f64]) -> Result<f64> {
    let v = f(x)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Max relative error between `analytic` and central differences of `f`
/// at `x`, one coordinate at a time.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], analytic: &[f64]) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(Error::shape("grad_check", x.len(), analytic.len()));
    }
    eval(&mut f, x)?;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let fp = eval(&mut f, &probe)?;
        probe[i] = x[i] - FD_STEP;
        let fm = eval(&mut f, &probe)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// As [`grad_check`] but along `probes` random unit directions, for
/// parameter vectors too large to sweep coordinate-wise.
pub fn grad_check_directional(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    probes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(Error::shape("grad_check", x.len(), analytic.len()));
    }
    eval(&mut f, x)?;
    let mut worst = 0.0f64;
    let mut probe = vec![0.0; x.len()];
    for _ in 0..probes {
        let mut dir: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        for i in 0..x.len() {
            probe[i] = x[i] + FD_STEP * dir[i];
        }
        let fp = eval(&mut f, &probe)?;
        for i in 0..x.len() {
            probe[i] = x[i] - FD_STEP * dir[i];
        }
        let fm = eval(&mut f, &probe)?;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic_dir: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
        worst = worst.max(relative_error(analytic_dir, numeric));
    }
    Ok(worst)
}
