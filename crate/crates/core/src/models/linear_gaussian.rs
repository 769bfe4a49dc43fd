use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `z ~ N(0, I_m)`, `x | z ~ N(A z + c, diag(ψ))`, with a Gaussian encoder
/// `q(z|x) = N(M x + e, Σ_q)`. Evidence and posterior are analytic, which
/// makes this a cross-check model for the continuous-latent case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    pub loading: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DVector<f64>,
    pub enc_map: DMatrix<f64>,
    pub enc_offset: DVector<f64>,
    pub enc_cov: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(loading: DMatrix<f64>, offset: DVector<f64>, noise: DVector<f64>) -> Result<Self> {
        let (n, m) = loading.shape();
        if m == 0 || m > 4 || n == 0 || n > 8 {
            return Err(Error::invalid(format!("need 1<=m<=4 and 1<=n<=8, got m={m}, n={n}")));
        }
        if offset.len() != n || noise.len() != n {
            return Err(Error::invalid("offset and noise must have length n"));
        }
        if noise.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("noise variances must be positive"));
        }
        Ok(LinearGaussianModel {
            loading,
            offset,
            noise,
            enc_map: DMatrix::zeros(m, n),
            enc_offset: DVector::zeros(m),
            enc_cov: DMatrix::identity(m, m),
        })
    }

    pub fn random(m: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let loading = DMatrix::from_fn(n, m, |_, _| g());
        let offset = DVector::from_fn(n, |_, _| g());
        let noise = DVector::from_fn(n, |_, _| 0.2 + g().abs());
        Self::new(loading, offset, noise)
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn observed_dim(&self) -> usize {
        self.loading.nrows()
    }

    fn check(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.observed_dim() {
            return Err(Error::invalid("observation dimension mismatch"));
        }
        Ok(DVector::from_column_slice(x))
    }

    fn marginal_cov(&self) -> DMatrix<f64> {
        &self.loading * self.loading.transpose() + DMatrix::from_diagonal(&self.noise)
    }

    /// `log N(x; c, A Aᵀ + diag ψ)`.
    pub fn log_evidence(&self, x: &[f64]) -> Result<f64> {
        let r = self.check(x)? - &self.offset;
        let f = cholesky_jittered(&self.marginal_cov())?;
        let n = r.len() as f64;
        Ok(-0.5 * r.dot(&f.solve(&r)) - 0.5 * f.log_det() - 0.5 * n * LN_2PI)
    }

    pub fn mean_log_evidence(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for x in data {
            s += self.log_evidence(x)?;
        }
        Ok(s / data.len() as f64)
    }

    fn posterior_cov(&self) -> Result<DMatrix<f64>> {
        let m = self.latent_dim();
        let psi_inv = DMatrix::from_diagonal(&self.noise.map(|v| 1.0 / v));
        let prec = DMatrix::identity(m, m) + self.loading.transpose() * &psi_inv * &self.loading;
        Ok(cholesky_jittered(&prec)?.inverse())
    }

    /// Posterior gain `Σ_post Aᵀ Ψ⁻¹`, so that the posterior mean is `G (x − c)`.
    fn posterior_gain(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        let psi_inv = DMatrix::from_diagonal(&self.noise.map(|v| 1.0 / v));
        cov * self.loading.transpose() * psi_inv
    }

    /// Exact posterior `p(z|x)` as (mean, covariance).
    pub fn posterior(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let r = self.check(x)? - &self.offset;
        let cov = self.posterior_cov()?;
        let mean = self.posterior_gain(&cov) * r;
        Ok((mean, cov))
    }

    /// Set the encoder to the amortized exact posterior.
    pub fn tie_encoder(&mut self) -> Result<()> {
        let cov = self.posterior_cov()?;
        let gain = self.posterior_gain(&cov);
        self.enc_offset = -(&gain * &self.offset);
        self.enc_map = gain;
        self.enc_cov = cov;
        Ok(())
    }

    /// `KL(q(z|x) ‖ p(z|x))`.
    pub fn kl_to_posterior(&self, x: &[f64]) -> Result<f64> {
        let xv = self.check(x)?;
        let (mp, sp) = self.posterior(x)?;
        let mq = &self.enc_map * xv + &self.enc_offset;
        let fp = cholesky_jittered(&sp)?;
        let fq = cholesky_jittered(&self.enc_cov)?;
        let sp_inv = fp.inverse();
        let diff = &mp - &mq;
        let m = self.latent_dim() as f64;
        Ok(0.5 * ((&sp_inv * &self.enc_cov).trace() + diff.dot(&(&sp_inv * &diff)) - m + fp.log_det() - fq.log_det()))
    }

    pub fn elbo(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_evidence(x)? - self.kl_to_posterior(x)?)
    }

    /// Gradient of the mean log evidence in `(A, c, ψ)`, flattened as
    /// column-major `A`, then `c`, then `ψ`.
    pub fn evidence_gradient(&self, data: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (n, m) = self.loading.shape();
        let cinv = cholesky_jittered(&self.marginal_cov())?.inverse();
        let mut g_a = DMatrix::<f64>::zeros(n, m);
        let mut g_c = DVector::<f64>::zeros(n);
        let mut g_psi = DVector::<f64>::zeros(n);
        for x in data {
            let r = self.check(x)? - &self.offset;
            let u = &cinv * &r;
            let w = &u * u.transpose() - &cinv;
            g_a += &w * &self.loading;
            g_c += &u;
            for i in 0..n {
                g_psi[i] += 0.5 * w[(i, i)];
            }
        }
        let k = data.len() as f64;
        let mut out: Vec<f64> = g_a.iter().map(|v| v / k).collect();
        out.extend(g_c.iter().map(|v| v / k));
        out.extend(g_psi.iter().map(|v| v / k));
        Ok(out)
    }

    /// A generative-parameter ascent step on the evidence, followed by
    /// re-tying the encoder to the new exact posterior.
    pub fn theta_step_tied(&mut self, data: &[Vec<f64>], learning_rate: f64) -> Result<()> {
        let g = self.evidence_gradient(data)?;
        let (n, m) = self.loading.shape();
        for (i, v) in self.loading.iter_mut().enumerate() {
            *v += learning_rate * g[i];
        }
        for i in 0..n {
            self.offset[i] += learning_rate * g[n * m + i];
            self.noise[i] = (self.noise[i] + learning_rate * g[n * m + n + i]).max(1e-6);
        }
        self.tie_encoder()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trapezoid marginalization over a fine z grid (m = 1, n = 1).
    fn grid_log_evidence(a: f64, c: f64, psi: f64, x: f64) -> f64 {
        let (lo, hi, n) = (-14.0, 14.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let z: f64 = lo + i as f64 * h;
            let prior = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let r = x - a * z - c;
            let lik = (-0.5 * r * r / psi).exp() / (2.0 * std::f64::consts::PI * psi).sqrt();
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += wgt * prior * lik;
        }
        (s * h).ln()
    }

    #[test]
    fn analytic_evidence_matches_grid() {
        for (a, c, psi, x) in [(1.3, 0.2, 0.5, 1.1), (-0.4, -1.0, 2.0, 0.3), (2.5, 0.0, 0.1, -2.0)] {
            let m = LinearGaussianModel::new(
                DMatrix::from_element(1, 1, a),
                DVector::from_element(1, c),
                DVector::from_element(1, psi),
            )
            .unwrap();
            let v = m.log_evidence(&[x]).unwrap();
            assert!((v - grid_log_evidence(a, c, psi, x)).abs() < 1e-6);
        }
    }

    #[test]
    fn elbo_below_evidence_until_tied() {
        let mut m = LinearGaussianModel::random(2, 4, 3).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5];
        assert!(m.elbo(&x).unwrap() < m.log_evidence(&x).unwrap());
        m.tie_encoder().unwrap();
        assert!(m.kl_to_posterior(&x).unwrap().abs() < 1e-10);
    }

    #[test]
    fn tied_theta_steps_keep_kl_zero() {
        let mut m = LinearGaussianModel::random(2, 3, 7).unwrap();
        m.tie_encoder().unwrap();
        let data: Vec<Vec<f64>> = vec![vec![0.1, 0.5, -0.3], vec![1.2, -0.7, 0.0], vec![-0.4, 0.2, 0.9]];
        let l0 = m.mean_log_evidence(&data).unwrap();
        for _ in 0..20 {
            m.theta_step_tied(&data, 0.01).unwrap();
            for x in &data {
                assert!(m.kl_to_posterior(x).unwrap().abs() < 1e-8);
            }
        }
        assert!(m.mean_log_evidence(&data).unwrap() > l0);
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let m = LinearGaussianModel::random(2, 3, 1).unwrap();
        let data = vec![vec![0.4, -0.2, 1.0], vec![-1.0, 0.3, 0.1]];
        let g = m.evidence_gradient(&data).unwrap();
        let h = 1e-6;
        let perturb = |i: usize, s: f64| {
            let mut mm = m.clone();
            let nm = 6;
            if i < nm {
                mm.loading.as_mut_slice()[i] += s;
            } else if i < nm + 3 {
                mm.offset[i - nm] += s;
            } else {
                mm.noise[i - nm - 3] += s;
            }
            mm.mean_log_evidence(&data).unwrap()
        };
        for i in 0..g.len() {
            let fd = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(LinearGaussianModel::random(5, 2, 0).is_err());
        assert!(
            LinearGaussianModel::new(DMatrix::zeros(2, 1), DVector::zeros(2), DVector::from_element(2, -1.0)).is_err()
        );
    }
}
