//! Bias-corrected adaptive-moment optimizer.

use super::params::Params;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Moment accumulators shaped like the parameters they optimize.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Params<T> + ?Sized>(params: &P, config: AdamConfig<T>) -> Self {
        let shapes = params.shapes();
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One descent step along `grads`.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Params<T> + ?Sized,
        G: Params<T> + ?Sized,
    {
        let g = grads.slices();
        let mut p = params.slices_mut();
        if p.len() != self.first.len()
            || g.len() != p.len()
            || p.iter().zip(&self.first).any(|(a, b)| a.len() != b.len())
            || p.iter().zip(&g).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config(
                "adam: parameter/gradient/state shapes disagree".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = T::one() - beta1.powi(t);
        let c2 = T::one() - beta2.powi(t);
        for (((p, g), m), v) in p
            .iter_mut()
            .zip(&g)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (T::one() - beta1) * gi;
                v[i] = beta2 * v[i] + (T::one() - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0, 3.5];
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.1));
        s.step(&mut p, &vec![0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0f64; 3];
        let g = vec![2.5, -0.01, 40.0];
        let cfg = AdamConfig::with_lr(1e-3);
        let mut s = AdamState::new(&p, cfg);
        s.step(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            // At t = 1 the bias-corrected ratio is g / (|g| + eps).
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_trace_matches_hand_rolled_update() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let g = 0.7f64;
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(&p, AdamConfig::with_lr(lr));
        s.step(&mut p, &vec![g]).unwrap();
        s.step(&mut p, &vec![g]).unwrap();

        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(p[0], x);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f64; 3];
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.1));
        assert!(s.step(&mut p, &vec![0.0; 2]).is_err());
    }
}
