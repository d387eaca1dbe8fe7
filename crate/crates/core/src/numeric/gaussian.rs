//! Diagonal Gaussian distributions: density, closed-form KL, reparameterized
//! sampling, and the row-wise gradient kernels the trainers use.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::mlp::{DEFAULT_LOG_STD_MAX, DEFAULT_LOG_STD_MIN};
use super::scalar::{half_ln_two_pi, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Array1<T>,
    log_std: Array1<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    /// Log-std entries are clamped into the default bounds.
    pub fn new(mean: Array1<T>, log_std: Array1<T>) -> Result<Self> {
        Self::with_bounds(
            mean,
            log_std,
            T::lit(DEFAULT_LOG_STD_MIN),
            T::lit(DEFAULT_LOG_STD_MAX),
        )
    }

    pub fn with_bounds(mean: Array1<T>, log_std: Array1<T>, min: T, max: T) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Dimension {
                what: "gaussian log_std",
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if let Some(i) = mean
            .iter()
            .chain(log_std.iter())
            .position(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                what: "gaussian parameter",
                index: i % mean.len().max(1),
            });
        }
        let log_std = log_std.mapv(|v| v.max(min).min(max));
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            log_std: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<T> {
        &self.mean
    }

    pub fn log_std(&self) -> &Array1<T> {
        &self.log_std
    }

    pub fn std(&self) -> Array1<T> {
        self.log_std.mapv(T::exp)
    }

    fn check(&self, what: &'static str, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Dimension {
                what,
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Sum over dimensions of the diagonal-Gaussian log density.
    pub fn log_prob(&self, x: ArrayView1<T>) -> Result<T> {
        self.check("log_prob point", x.len())?;
        let mut total = T::zero();
        for ((&m, &ls), &xi) in self.mean.iter().zip(&self.log_std).zip(x) {
            let z = (xi - m) * (-ls).exp();
            total = total - T::lit(0.5) * z * z - ls - half_ln_two_pi::<T>();
        }
        Ok(total)
    }

    /// Closed-form `KL(self ‖ other)`.
    pub fn kl(&self, other: &DiagGaussian<T>) -> Result<T> {
        self.check("kl operand", other.dim())?;
        let mut total = T::zero();
        for i in 0..self.dim() {
            total = total
                + kl_term(
                    self.mean[i],
                    self.log_std[i],
                    other.mean[i],
                    other.log_std[i],
                );
        }
        Ok(total.max(T::zero()))
    }

    /// `mean + std ⊙ noise`
    pub fn sample(&self, noise: ArrayView1<T>) -> Result<Array1<T>> {
        self.check("sample noise", noise.len())?;
        let mut out = self.mean.clone();
        Zip::from(&mut out)
            .and(&self.log_std)
            .and(noise)
            .for_each(|o, &ls, &e| *o = *o + ls.exp() * e);
        Ok(out)
    }
}

#[inline]
fn kl_term<T: Scalar>(mp: T, lsp: T, mq: T, lsq: T) -> T {
    let half = T::lit(0.5);
    let var_ratio = (T::lit(2.0) * (lsp - lsq)).exp();
    let d = (mp - mq) * (-lsq).exp();
    lsq - lsp + half * (var_ratio + d * d) - half
}

/// Row-wise `KL(p ‖ q)` with gradients w.r.t. the parameters of `p`.
///
/// Returns `(kl per row, dKL/dmean_p, dKL/dlog_std_p)`.
pub fn kl_rows<T: Scalar>(
    mean_p: ArrayView2<T>,
    log_std_p: ArrayView2<T>,
    mean_q: ArrayView2<T>,
    log_std_q: ArrayView2<T>,
) -> (Array1<T>, Array2<T>, Array2<T>) {
    let (n, k) = mean_p.dim();
    let mut kl = Array1::zeros(n);
    let mut d_mean = Array2::zeros((n, k));
    let mut d_log_std = Array2::zeros((n, k));
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..k {
            let (mp, lsp, mq, lsq) = (
                mean_p[[i, j]],
                log_std_p[[i, j]],
                mean_q[[i, j]],
                log_std_q[[i, j]],
            );
            acc = acc + kl_term(mp, lsp, mq, lsq);
            let inv_var_q = (T::lit(-2.0) * lsq).exp();
            d_mean[[i, j]] = (mp - mq) * inv_var_q;
            d_log_std[[i, j]] = (T::lit(2.0) * (lsp - lsq)).exp() - T::one();
        }
        kl[i] = acc;
    }
    (kl, d_mean, d_log_std)
}

/// Row-wise log density with gradients w.r.t. mean and log-std.
///
/// Returns `(log_prob per row, dlogp/dmean, dlogp/dlog_std)`.
pub fn log_prob_rows<T: Scalar>(
    mean: ArrayView2<T>,
    log_std: ArrayView2<T>,
    x: ArrayView2<T>,
) -> (Array1<T>, Array2<T>, Array2<T>) {
    let (n, k) = mean.dim();
    let mut lp = Array1::zeros(n);
    let mut d_mean = Array2::zeros((n, k));
    let mut d_log_std = Array2::zeros((n, k));
    let c = half_ln_two_pi::<T>();
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..k {
            let ls = log_std[[i, j]];
            let inv_std = (-ls).exp();
            let z = (x[[i, j]] - mean[[i, j]]) * inv_std;
            acc = acc - T::lit(0.5) * z * z - ls - c;
            d_mean[[i, j]] = z * inv_std;
            d_log_std[[i, j]] = z * z - T::one();
        }
        lp[i] = acc;
    }
    (lp, d_mean, d_log_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standard_normal_at_mode() {
        let d = DiagGaussian::<f64>::standard(1);
        let lp: f64 = d.log_prob(array![0.0].view()).unwrap();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_at_mean_is_normalizer_only() {
        let d = DiagGaussian::new(array![1.0, -2.0, 0.5], array![0.3, -0.7, 1.1]).unwrap();
        let lp = d.log_prob(d.mean().view()).unwrap();
        let expect = -(0.3 - 0.7 + 1.1) - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_identity_is_exactly_zero() {
        let d = DiagGaussian::new(array![0.2, -1.0], array![-0.4, 0.9]).unwrap();
        assert_eq!(d.kl(&d).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift() {
        let p = DiagGaussian::<f64>::new(array![1.0], array![0.0]).unwrap();
        let q = DiagGaussian::new(array![0.0], array![0.0]).unwrap();
        assert!((p.kl(&q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let p = DiagGaussian::<f64>::standard(2);
        let q = DiagGaussian::<f64>::standard(3);
        assert!(p.kl(&q).is_err());
        assert!(p.log_prob(array![1.0].view()).is_err());
        assert!(p.sample(array![1.0, 2.0, 3.0].view()).is_err());
        assert!(DiagGaussian::new(array![0.0, 1.0], array![0.0]).is_err());
    }

    #[test]
    fn zero_noise_sample_is_mean() {
        let d = DiagGaussian::new(array![0.3, -0.6], array![0.5, -1.0]).unwrap();
        assert_eq!(d.sample(array![0.0, 0.0].view()).unwrap(), *d.mean());
    }

    #[test]
    fn sample_at_clamp_floor_stays_near_mean() {
        let d = DiagGaussian::<f64>::new(array![1.0], array![-1e6]).unwrap();
        assert_eq!(d.log_std()[0], DEFAULT_LOG_STD_MIN);
        let s = d.sample(array![1.0].view()).unwrap();
        assert!((s[0] - 1.0).abs() <= DEFAULT_LOG_STD_MIN.exp() + 1e-15);
    }

    #[test]
    fn row_kernels_agree_with_scalar_api() {
        let mp: Array2<f64> = array![[0.1, -0.4]];
        let lp = array![[0.2, -0.3]];
        let mq = array![[0.5, 0.0]];
        let lq = array![[-0.1, 0.4]];
        let (kl, _, _) = kl_rows(mp.view(), lp.view(), mq.view(), lq.view());
        let p = DiagGaussian::new(mp.row(0).to_owned(), lp.row(0).to_owned()).unwrap();
        let q = DiagGaussian::new(mq.row(0).to_owned(), lq.row(0).to_owned()).unwrap();
        assert!((kl[0] - p.kl(&q).unwrap()).abs() < 1e-14);

        let x = array![[0.7, 1.3]];
        let (l, _, _) = log_prob_rows(mp.view(), lp.view(), x.view());
        assert!((l[0] - p.log_prob(x.row(0)).unwrap()).abs() < 1e-14);
    }
}
