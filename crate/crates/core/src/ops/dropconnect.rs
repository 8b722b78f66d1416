use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Keep-mask (entries 0 or 1) and the inverted-dropout scale applied to
/// surviving weights.
#[derive(Clone, Debug)]
pub struct DropMask<T> {
    pub mask: Tensor<T>,
    pub scale: T,
}

impl<T: Real> DropMask<T> {
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            mask: Tensor::ones(shape),
            scale: T::one(),
        }
    }

    /// Gradient w.r.t. the unmasked weights given the gradient w.r.t. the
    /// masked ones.
    pub fn backward(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.scale;
        grad.zip_map(&self.mask, |g, m| g * m * s)
    }

    pub fn dropped(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == T::zero()).count()
    }
}

/// Zeroes each weight independently with probability `rate` and rescales the
/// survivors by `1 / (1 - rate)`. Outside training the weights pass through.
pub fn dropconnect_apply<T: Real>(
    w: &Tensor<T>,
    rate: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<(Tensor<T>, DropMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropconnect: rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((w.clone(), DropMask::identity(w.shape())));
    }
    let mask = Tensor::from_fn(w.shape(), |_| if rng.bernoulli(rate) { T::zero() } else { T::one() });
    let scale = T::lit(1.0 / (1.0 - rate));
    let out = w.zip_map(&mask, |v, m| v * m * scale)?;
    Ok((out, DropMask { mask, scale }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = RngState::new(0);
        let w = Tensor::<f32>::normal(&[4, 4], 1.0, &mut rng);
        let (out, mask) = dropconnect_apply(&w, 0.0, &mut rng, true).unwrap();
        assert_eq!(out, w);
        assert!(mask.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn eval_passes_through() {
        let mut rng = RngState::new(0);
        let w = Tensor::<f32>::normal(&[4, 4], 1.0, &mut rng);
        let (out, mask) = dropconnect_apply(&w, 0.1, &mut rng, false).unwrap();
        assert_eq!(out, w);
        assert_eq!(mask.dropped(), 0);
    }

    #[test]
    fn rate_one_rejected() {
        let mut rng = RngState::new(0);
        let w = Tensor::<f32>::ones(&[2]);
        assert!(dropconnect_apply(&w, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn empirical_drop_fraction() {
        let mut rng = RngState::new(11);
        let w = Tensor::<f32>::ones(&[100_000]);
        let (_, mask) = dropconnect_apply(&w, 0.1, &mut rng, true).unwrap();
        let frac = mask.dropped() as f64 / 1e5;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }
}
