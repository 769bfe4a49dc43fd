//! Exact GP regression for the time-varying surrogate: posterior
//! prediction, the log marginal likelihood with its hyperparameter
//! gradient, and type-II maximum likelihood fitting.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram_canonical, kernel_canonical, sq_dist, time_kernel_domega, KernelHyperparams, Point};
use crate::linalg::{cholesky_jittered, Factor};
use crate::optim::{maximize_projected, AscentOptions};

const SMALL_NOISE_JITTER: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

struct Cache {
    canon: Vec<Point>,
    factor: Factor,
    alpha: DVector<f64>,
}

/// Observation history plus hyperparameters, with a lazily built factorization
/// of `K + σ_f² I`. Any mutation drops the cache.
#[derive(Serialize, Deserialize)]
pub struct GpState {
    points: Vec<Point>,
    y: Vec<f64>,
    hyp: KernelHyperparams,
    #[serde(skip)]
    cache: OnceLock<std::result::Result<Arc<Cache>, Error>>,
}

impl Clone for GpState {
    fn clone(&self) -> Self {
        GpState {
            points: self.points.clone(),
            y: self.y.clone(),
            hyp: self.hyp,
            cache: OnceLock::new(),
        }
    }
}

impl std::fmt::Debug for GpState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpState")
            .field("n", &self.points.len())
            .field("hyp", &self.hyp)
            .finish()
    }
}

/// Predictive mean and variance together with their derivatives with respect
/// to the canonical coordinates of the queried schedule.
#[derive(Debug, Clone)]
pub struct PosteriorGrad {
    pub mean: f64,
    pub variance: f64,
    pub d_mean: Vec<f64>,
    pub d_variance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HyperGradient {
    pub lengthscale: f64,
    pub omega: f64,
    pub noise_variance: f64,
}

/// Box constraints for hyperparameter fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lengthscale: (f64, f64),
    pub omega: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            lengthscale: (0.05, 2.0),
            omega: (1e-4, 0.5),
            noise_variance: (1e-6, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub bounds: HyperBounds,
    /// Random starts in addition to the warm start.
    pub random_starts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bounds: HyperBounds::default(),
            random_starts: 2,
            max_iters: 100,
            seed: 0,
        }
    }
}

impl GpState {
    pub fn new(hyp: KernelHyperparams) -> Result<Self> {
        hyp.validate()?;
        Ok(GpState {
            points: Vec::new(),
            y: Vec::new(),
            hyp,
            cache: OnceLock::new(),
        })
    }

    pub fn from_parts(points: Vec<Point>, y: Vec<f64>, hyp: KernelHyperparams) -> Result<Self> {
        hyp.validate()?;
        if points.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                points.len(),
                y.len()
            )));
        }
        if let Some(first) = points.first() {
            if points.iter().any(|p| p.beta.len() != first.beta.len()) {
                return Err(Error::invalid("inconsistent schedule dimensions in history"));
            }
        }
        Ok(GpState {
            points,
            y,
            hyp,
            cache: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyp
    }

    pub fn push(&mut self, x: Point, y: f64) -> Result<()> {
        if let Some(first) = self.points.first() {
            if first.beta.len() != x.beta.len() {
                return Err(Error::invalid(format!(
                    "schedule dimension mismatch: {} vs {}",
                    first.beta.len(),
                    x.beta.len()
                )));
            }
        }
        self.points.push(x);
        self.y.push(y);
        self.cache = OnceLock::new();
        Ok(())
    }

    pub fn set_targets(&mut self, y: Vec<f64>) -> Result<()> {
        if y.len() != self.points.len() {
            return Err(Error::invalid("target count does not match history"));
        }
        self.y = y;
        self.cache = OnceLock::new();
        Ok(())
    }

    pub fn set_hyperparams(&mut self, hyp: KernelHyperparams) -> Result<()> {
        hyp.validate()?;
        self.hyp = hyp;
        self.cache = OnceLock::new();
        Ok(())
    }

    fn cache(&self) -> Result<Arc<Cache>> {
        self.cache
            .get_or_init(|| build_cache(&self.points, &self.y, &self.hyp).map(Arc::new))
            .clone()
    }

    /// Jitter actually applied to the diagonal on top of `σ_f²`.
    pub fn jitter(&self) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        Ok(self.cache()?.factor.jitter + base_jitter(&self.hyp))
    }

    /// Posterior predictive mean and variance of the latent reward at `query`.
    pub fn posterior(&self, query: &Point) -> Result<(f64, f64)> {
        if self.is_empty() {
            return Ok((0.0, 1.0));
        }
        let c = self.cache()?;
        self.check_query(query)?;
        let q = query.canonical(self.hyp.permutation_invariant);
        let kstar = DVector::from_iterator(
            c.canon.len(),
            c.canon.iter().map(|p| kernel_canonical(p, &q, &self.hyp)),
        );
        let mean = kstar.dot(&c.alpha);
        let v = c
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::numeric("triangular solve failed"))?;
        let var = (1.0 - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Like [`GpState::posterior`] but also returns derivatives with respect
    /// to the sorted (canonical) query coordinates.
    pub fn posterior_with_grad(&self, query: &Point) -> Result<PosteriorGrad> {
        let q = query.canonical(self.hyp.permutation_invariant);
        let d = q.beta.len();
        if self.is_empty() {
            return Ok(PosteriorGrad {
                mean: 0.0,
                variance: 1.0,
                d_mean: vec![0.0; d],
                d_variance: vec![0.0; d],
            });
        }
        let c = self.cache()?;
        self.check_query(query)?;
        let n = c.canon.len();
        let kstar = DVector::from_iterator(n, c.canon.iter().map(|p| kernel_canonical(p, &q, &self.hyp)));
        let w = c.factor.solve(&kstar);
        let mean = kstar.dot(&c.alpha);
        let var = (1.0 - kstar.dot(&w)).max(0.0);
        let inv_l2 = 1.0 / (self.hyp.lengthscale * self.hyp.lengthscale);
        let mut d_mean = vec![0.0; d];
        let mut d_variance = vec![0.0; d];
        for (i, p) in c.canon.iter().enumerate() {
            for j in 0..d {
                let dk = -kstar[i] * (q.beta[j] - p.beta[j]) * inv_l2;
                d_mean[j] += c.alpha[i] * dk;
                d_variance[j] -= 2.0 * w[i] * dk;
            }
        }
        Ok(PosteriorGrad {
            mean,
            variance: var,
            d_mean,
            d_variance,
        })
    }

    fn check_query(&self, query: &Point) -> Result<()> {
        let d = self.points[0].beta.len();
        if query.beta.len() != d {
            return Err(Error::invalid(format!(
                "query dimension {} does not match history dimension {d}",
                query.beta.len()
            )));
        }
        Ok(())
    }

    /// `−½ yᵀ A⁻¹ y − ½ ln|A| − (n/2) ln 2π` with `A = K + σ_f² I`.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::invalid("log marginal likelihood needs at least one observation"));
        }
        let c = self.cache()?;
        let y = DVector::from_column_slice(&self.y);
        let n = self.y.len() as f64;
        Ok(-0.5 * y.dot(&c.alpha) - 0.5 * c.factor.log_det() - 0.5 * n * LN_2PI)
    }

    /// Gradient of the log marginal likelihood in `(σ_β, ω, σ_f²)`.
    pub fn grad_hyperparams(&self) -> Result<HyperGradient> {
        if self.is_empty() {
            return Err(Error::invalid("gradient needs at least one observation"));
        }
        let (_, g) = self.lml_and_grad()?;
        Ok(g)
    }

    fn lml_and_grad(&self) -> Result<(f64, HyperGradient)> {
        let c = self.cache()?;
        let n = c.canon.len();
        let ainv = c.factor.inverse();
        // W = α αᵀ − A⁻¹; dL/dθ = ½ tr(W ∂A/∂θ)
        let mut g_ls = 0.0;
        let mut g_om = 0.0;
        let mut g_noise = 0.0;
        let ls = self.hyp.lengthscale;
        for i in 0..n {
            g_noise += c.alpha[i] * c.alpha[i] - ainv[(i, i)];
            for j in 0..i {
                let wij = c.alpha[i] * c.alpha[j] - ainv[(i, j)];
                let pi = &c.canon[i];
                let pj = &c.canon[j];
                let d2 = sq_dist(&pi.beta, &pj.beta);
                let ks = (-d2 / (2.0 * ls * ls)).exp();
                let dt = pi.t.abs_diff(pj.t);
                let kt = crate::kernel::time_factor(dt, self.hyp.omega);
                let dks = ks * d2 / (ls * ls * ls);
                let dkt = time_kernel_domega(dt, self.hyp.omega)?;
                // off-diagonal entries appear twice in the trace
                g_ls += wij * dks * kt;
                g_om += wij * ks * dkt;
            }
        }
        let y = DVector::from_column_slice(&self.y);
        let lml = -0.5 * y.dot(&c.alpha) - 0.5 * c.factor.log_det() - 0.5 * n as f64 * LN_2PI;
        Ok((
            lml,
            HyperGradient {
                lengthscale: g_ls,
                omega: g_om,
                noise_variance: 0.5 * g_noise,
            },
        ))
    }

    /// Type-II maximum likelihood under box bounds, multi-started from the
    /// current hyperparameters plus random points. On numerical failure of
    /// every start the current hyperparameters are returned unchanged.
    pub fn fit_map(&self, opts: &FitOptions) -> KernelHyperparams {
        if self.len() < 2 {
            return self.hyp;
        }
        let b = opts.bounds;
        let lo = [b.lengthscale.0.ln(), b.omega.0.ln(), b.noise_variance.0.ln()];
        let hi = [b.lengthscale.1.ln(), b.omega.1.ln(), b.noise_variance.1.ln()];
        let project = |u: &[f64]| -> Vec<f64> { (0..3).map(|i| u[i].clamp(lo[i], hi[i])).collect() };
        let invariant = self.hyp.permutation_invariant;
        let to_hyp = |u: &[f64]| KernelHyperparams {
            lengthscale: u[0].exp(),
            omega: u[1].exp(),
            noise_variance: u[2].exp(),
            permutation_invariant: invariant,
        };

        let objective = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
            let hyp = to_hyp(u);
            let trial = GpState::from_parts(self.points.clone(), self.y.clone(), hyp)?;
            let (v, g) = trial.lml_and_grad()?;
            Ok((
                v,
                vec![
                    g.lengthscale * hyp.lengthscale,
                    g.omega * hyp.omega,
                    g.noise_variance * hyp.noise_variance,
                ],
            ))
        };

        let warm = project(&[
            self.hyp.lengthscale.ln(),
            self.hyp.omega.ln(),
            self.hyp.noise_variance.ln(),
        ]);
        let mut starts = vec![warm];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.random_starts {
            starts.push((0..3).map(|i| rng.random_range(lo[i]..=hi[i])).collect());
        }
        let aopts = AscentOptions {
            max_iters: opts.max_iters,
            grad_tol: 1e-10,
            f_tol: 1e-12,
            max_step: 1.0,
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for s in &starts {
            match maximize_projected(objective, project, s, &aopts) {
                Ok(r) if r.value.is_finite() => {
                    if best.as_ref().is_none_or(|(v, _)| r.value > *v) {
                        best = Some((r.value, r.x));
                    }
                }
                Ok(_) => {}
                Err(e) => log::debug!("hyperparameter start failed: {e}"),
            }
        }
        match best {
            Some((_, u)) => to_hyp(&u),
            None => {
                log::warn!("hyperparameter fit failed from every start; keeping previous values");
                self.hyp
            }
        }
    }
}

fn base_jitter(hyp: &KernelHyperparams) -> f64 {
    if hyp.noise_variance < SMALL_NOISE_JITTER {
        SMALL_NOISE_JITTER
    } else {
        0.0
    }
}

fn build_cache(points: &[Point], y: &[f64], hyp: &KernelHyperparams) -> Result<Cache> {
    let canon: Vec<Point> = points.iter().map(|p| p.canonical(hyp.permutation_invariant)).collect();
    let mut a: DMatrix<f64> = gram_canonical(&canon, hyp);
    let diag = hyp.noise_variance + base_jitter(hyp);
    for i in 0..a.nrows() {
        a[(i, i)] += diag;
    }
    let factor = cholesky_jittered(&a)?;
    let alpha = factor.solve(&DVector::from_column_slice(y));
    Ok(Cache { canon, factor, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(noise: f64) -> KernelHyperparams {
        KernelHyperparams {
            lengthscale: 0.3,
            omega: 0.05,
            noise_variance: noise,
            permutation_invariant: true,
        }
    }

    #[test]
    fn empty_history_is_prior() {
        let s = GpState::new(hyp(0.1)).unwrap();
        assert_eq!(s.posterior(&Point::new(vec![0.3, 0.4], 3)).unwrap(), (0.0, 1.0));
        assert!(s.log_marginal_likelihood().is_err());
    }

    #[test]
    fn near_noiseless_interpolation() {
        let x = Point::new(vec![0.4], 1);
        let s = GpState::from_parts(vec![x.clone()], vec![2.0], hyp(1e-12)).unwrap();
        let (m, v) = s.posterior(&x).unwrap();
        assert!((m - 2.0).abs() < 1e-6, "{m}");
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn single_point_log_marginal() {
        let s = GpState::from_parts(vec![Point::new(vec![0.5], 0)], vec![1.0], hyp(0.25)).unwrap();
        let v = s.log_marginal_likelihood().unwrap();
        assert!((v - -1.430_510_308_861_777_4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_targets_drop_quadratic_term() {
        let pts = vec![
            Point::new(vec![0.1], 0),
            Point::new(vec![0.6], 1),
            Point::new(vec![0.3], 2),
        ];
        let h = hyp(0.2);
        let s = GpState::from_parts(pts.clone(), vec![0.0; 3], h).unwrap();
        let mut a = crate::kernel::gram_matrix(&pts, &h).unwrap();
        for i in 0..3 {
            a[(i, i)] += 0.2;
        }
        let expected = -0.5 * a.determinant().ln() - 1.5 * LN_2PI;
        assert!((s.log_marginal_likelihood().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_parts_rejected() {
        assert!(GpState::from_parts(vec![Point::new(vec![0.1], 0)], vec![], hyp(0.1)).is_err());
        let mut s = GpState::new(hyp(0.1)).unwrap();
        s.push(Point::new(vec![0.1], 0), 1.0).unwrap();
        assert!(s.push(Point::new(vec![0.1, 0.2], 1), 1.0).is_err());
        assert!(s.posterior(&Point::new(vec![0.1, 0.2], 1)).is_err());
    }

    #[test]
    fn identical_duplicates_push_noise_to_lower_bound() {
        let x = Point::new(vec![0.5], 1);
        let s = GpState::from_parts(vec![x.clone(), x], vec![0.7, 0.7], hyp(0.1)).unwrap();
        let fitted = s.fit_map(&FitOptions::default());
        let lo = HyperBounds::default().noise_variance.0;
        assert!((fitted.noise_variance - lo).abs() / lo < 1e-6, "{fitted:?}");

        // 1-d scan oracle: objective increases as the noise shrinks
        let scan: Vec<f64> = (0..=30)
            .map(|i| {
                let noise = (lo.ln() + i as f64 * (0.0 - lo.ln()) / 30.0).exp();
                let mut h = fitted;
                h.noise_variance = noise;
                let mut t = s.clone();
                t.set_hyperparams(h).unwrap();
                t.log_marginal_likelihood().unwrap()
            })
            .collect();
        assert!(scan.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn serde_round_trip_keeps_predictions() {
        let pts = vec![Point::new(vec![0.1, 0.5], 1), Point::new(vec![0.3, 0.9], 2)];
        let s = GpState::from_parts(pts, vec![0.4, -1.0], hyp(0.1)).unwrap();
        let js = serde_json::to_string(&s).unwrap();
        let back: GpState = serde_json::from_str(&js).unwrap();
        let q = Point::new(vec![0.2, 0.6], 3);
        assert_eq!(s.posterior(&q).unwrap(), back.posterior(&q).unwrap());
    }
}
