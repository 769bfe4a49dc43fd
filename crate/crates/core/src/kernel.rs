//! Spatial, temporal and product covariance functions.
//!
//! The spatial factor is an exponentiated quadratic over schedule vectors;
//! with `permutation_invariant` set both arguments are sorted first, so the
//! kernel only sees the canonical representative of each schedule. The
//! temporal factor is `(1 − ω)^{|t − t'|/2}` over raw bandit-round indices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// Spatial lengthscale σ_β.
    pub lengthscale: f64,
    /// Forgetting factor ω; 0 is time-invariant, 1 is uncorrelated across rounds.
    pub omega: f64,
    /// Observation noise variance σ_f².
    pub noise_variance: f64,
    pub permutation_invariant: bool,
}

impl Default for KernelHyperparams {
    fn default() -> Self {
        KernelHyperparams {
            lengthscale: 0.3,
            omega: 0.05,
            noise_variance: 0.1,
            permutation_invariant: true,
        }
    }
}

impl KernelHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::invalid(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        check_omega(self.omega)?;
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!("omega must lie in [0, 1], got {omega}")));
    }
    Ok(())
}

/// One GP input row `x = [β, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub beta: Vec<f64>,
    pub t: usize,
}

impl Point {
    pub fn new(beta: Vec<f64>, t: usize) -> Self {
        Point { beta, t }
    }

    /// The row the kernel actually compares: β sorted when invariance is on.
    pub(crate) fn canonical(&self, invariant: bool) -> Point {
        if invariant {
            let mut beta = self.beta.clone();
            beta.sort_by(f64::total_cmp);
            Point { beta, t: self.t }
        } else {
            self.clone()
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "schedule dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `exp(−‖Φ(β) − Φ(β')‖² / 2σ_β²)`, with Φ applied only when `invariant` is set.
pub fn spatial_kernel(beta: &[f64], beta2: &[f64], lengthscale: f64, invariant: bool) -> Result<f64> {
    check_dims(beta, beta2)?;
    let d2 = if invariant {
        let mut a = beta.to_vec();
        let mut b = beta2.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        sq_dist(&a, &b)
    } else {
        sq_dist(beta, beta2)
    };
    Ok((-d2 / (2.0 * lengthscale * lengthscale)).exp())
}

/// `(1 − ω)^{|t − t'|/2}`.
pub fn time_kernel(t: usize, t2: usize, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    Ok(time_factor(t.abs_diff(t2), omega))
}

pub(crate) fn time_factor(dt: usize, omega: f64) -> f64 {
    if dt == 0 {
        return 1.0;
    }
    (1.0 - omega).powf(dt as f64 / 2.0)
}

/// `∂k_T/∂ω = −v (1 − ω)^{v − 1}` with `v = |t − t'|/2`.
pub fn time_kernel_domega(dt: usize, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    if dt == 0 {
        return Ok(0.0);
    }
    let v = dt as f64 / 2.0;
    if omega == 1.0 && v < 1.0 {
        return Err(Error::Domain(format!(
            "d k_T / d omega is unbounded at omega = 1 for |t - t'| = {dt}"
        )));
    }
    Ok(-v * (1.0 - omega).powf(v - 1.0))
}

pub fn product_kernel(x: &Point, x2: &Point, hyp: &KernelHyperparams) -> Result<f64> {
    let ks = spatial_kernel(&x.beta, &x2.beta, hyp.lengthscale, hyp.permutation_invariant)?;
    let kt = time_kernel(x.t, x2.t, hyp.omega)?;
    Ok(ks * kt)
}

/// Kernel evaluation on rows that are already canonical (see [`Point::canonical`]).
pub(crate) fn kernel_canonical(a: &Point, b: &Point, hyp: &KernelHyperparams) -> f64 {
    let ks = (-sq_dist(&a.beta, &b.beta) / (2.0 * hyp.lengthscale * hyp.lengthscale)).exp();
    ks * time_factor(a.t.abs_diff(b.t), hyp.omega)
}

/// `K = [k(x, x')]` over `points`.
pub fn gram_matrix(points: &[Point], hyp: &KernelHyperparams) -> Result<DMatrix<f64>> {
    hyp.validate()?;
    if let Some(first) = points.first() {
        if let Some(bad) = points.iter().find(|p| p.beta.len() != first.beta.len()) {
            check_dims(&first.beta, &bad.beta)?;
        }
    }
    let canon: Vec<Point> = points.iter().map(|p| p.canonical(hyp.permutation_invariant)).collect();
    Ok(gram_canonical(&canon, hyp))
}

pub(crate) fn gram_canonical(canon: &[Point], hyp: &KernelHyperparams) -> DMatrix<f64> {
    let n = canon.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = kernel_canonical(&canon[i], &canon[j], hyp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyp(ls: f64, omega: f64) -> KernelHyperparams {
        KernelHyperparams {
            lengthscale: ls,
            omega,
            noise_variance: 0.1,
            permutation_invariant: true,
        }
    }

    #[test]
    fn spatial_examples() {
        assert_eq!(spatial_kernel(&[0.3, 0.6], &[0.3, 0.6], 0.2, false).unwrap(), 1.0);
        assert_eq!(spatial_kernel(&[0.2, 0.7], &[0.7, 0.2], 0.2, true).unwrap(), 1.0);
        assert!(spatial_kernel(&[0.2, 0.7], &[0.7, 0.2], 0.2, false).unwrap() < 1.0);
        let v = spatial_kernel(&[0.0], &[1.0], 1.0, true).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(spatial_kernel(&[0.0], &[1.0, 0.2], 1.0, true).is_err());
    }

    #[test]
    fn time_examples() {
        assert_eq!(time_kernel(4, 4, 0.9).unwrap(), 1.0);
        assert_eq!(time_kernel(1, 9, 0.0).unwrap(), 1.0);
        assert!((time_kernel(3, 5, 0.75).unwrap() - 0.25).abs() < 1e-15);
        assert!(time_kernel(3, 5, 1.2).is_err());
        assert!(time_kernel(3, 5, -0.1).is_err());
    }

    #[test]
    fn product_examples() {
        let h = hyp(1.0, 0.75);
        let x = Point::new(vec![0.0], 2);
        assert_eq!(product_kernel(&x, &x, &h).unwrap(), 1.0);
        let y = Point::new(vec![1.0], 4);
        assert!((product_kernel(&x, &y, &h).unwrap() - 0.151_632_664_928_158_4).abs() < 1e-15);
        let h1 = hyp(1.0, 1.0);
        assert_eq!(product_kernel(&x, &Point::new(vec![0.0], 3), &h1).unwrap(), 0.0);
    }

    #[test]
    fn domega_examples() {
        assert_eq!(time_kernel_domega(0, 0.4).unwrap(), 0.0);
        assert!((time_kernel_domega(2, 0.5).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(time_kernel_domega(1, 1.0), Err(Error::Domain(_))));
        assert!((time_kernel_domega(2, 1.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_small_cases() {
        let h = hyp(0.3, 0.1);
        let one = gram_matrix(&[Point::new(vec![0.4], 1)], &h).unwrap();
        assert_eq!(one, DMatrix::from_element(1, 1, 1.0));
        let p = Point::new(vec![0.4, 0.5], 1);
        let two = gram_matrix(&[p.clone(), p], &h).unwrap();
        assert_eq!(two, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn gram_psd_by_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [5usize, 20, 50] {
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new((0..3).map(|_| rng.random::<f64>()).collect(), rng.random_range(0..30)))
                .collect();
            let h = hyp(rng.random_range(0.05..2.0), rng.random_range(0.0..1.0));
            let k = gram_matrix(&pts, &h).unwrap();
            let min_eig = SymmetricEigen::new(k).eigenvalues.min();
            assert!(min_eig >= -1e-10, "n={n} min eig {min_eig}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            a in proptest::collection::vec(0.0f64..1.0, 3),
            b in proptest::collection::vec(0.0f64..1.0, 3),
            t1 in 0usize..50, t2 in 0usize..50,
            ls in 0.05f64..2.0, omega in 0.0f64..=1.0,
        ) {
            let h = hyp(ls, omega);
            let x = Point::new(a, t1);
            let y = Point::new(b, t2);
            let k1 = product_kernel(&x, &y, &h).unwrap();
            let k2 = product_kernel(&y, &x, &h).unwrap();
            prop_assert_eq!(k1, k2);
            prop_assert!((0.0..=1.0).contains(&k1));
        }

        #[test]
        fn invariant_under_permutations(
            a in proptest::collection::vec(0.0f64..1.0, 4),
            b in proptest::collection::vec(0.0f64..1.0, 4),
            seed in any::<u64>(), t1 in 0usize..20, t2 in 0usize..20,
        ) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pa = a.clone();
            let mut pb = b.clone();
            pa.shuffle(&mut rng);
            pb.shuffle(&mut rng);
            let h = hyp(0.4, 0.2);
            let k = product_kernel(&Point::new(a, t1), &Point::new(b, t2), &h).unwrap();
            let kp = product_kernel(&Point::new(pa, t1), &Point::new(pb, t2), &h).unwrap();
            prop_assert_eq!(k, kp);
        }
    }
}
