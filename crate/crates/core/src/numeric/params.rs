use ndarray::Array1;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// A collection of parameter tensors viewed as flat slices in a fixed order.
///
/// Optimizer state, gradients and target copies line up slice-for-slice
/// with the parameters they belong to.
pub trait Params<T> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn shapes(&self) -> Vec<usize> {
        self.slices().iter().map(|s| s.len()).collect()
    }

    fn num_params(&self) -> usize {
        self.shapes().iter().sum()
    }
}

impl<T: Scalar> Params<T> for Array1<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![self.as_slice().expect("standard layout")]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_slice_mut().expect("standard layout")]
    }
}

impl<T: Scalar> Params<T> for Vec<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_mut_slice()]
    }
}

/// Flattened copy of every parameter, in slice order.
pub fn flatten<T: Scalar, P: Params<T> + ?Sized>(p: &P) -> Vec<T> {
    p.slices().into_iter().flatten().copied().collect()
}

/// `target ← τ·online + (1−τ)·target`, elementwise.
pub fn polyak<T: Scalar, P: Params<T> + ?Sized>(target: &mut P, online: &P, tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::Config(format!(
            "polyak rate {} outside [0, 1]",
            tau.as_f64()
        )));
    }
    if target.shapes() != online.shapes() {
        return Err(Error::Inconsistent(
            "polyak update between differently shaped parameters".into(),
        ));
    }
    let keep = T::one() - tau;
    for (t, o) in target.slices_mut().into_iter().zip(online.slices()) {
        for (t, &o) in t.iter_mut().zip(o) {
            *t = tau * o + keep * *t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyak_limits() {
        let online = vec![2.0f64; 3];
        let mut t = vec![0.0f64; 3];
        polyak(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, vec![0.0; 3]);
        polyak(&mut t, &online, 0.5).unwrap();
        assert_eq!(t, vec![1.0; 3]);
        polyak(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        assert!(polyak(&mut t, &online, 1.5).is_err());
        assert!(polyak(&mut t, &vec![1.0; 2], 0.5).is_err());
    }
}
