use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{spatial_kernel, time_kernel};
use crate::linalg::psd_sqrt;

pub const MAX_ARMS: usize = 256;
pub const MAX_JOINT: usize = 8192;

/// Regular grid on `[0,1]^dim` with `per_axis` points per axis, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub per_axis: usize,
}

impl GridSpec {
    pub fn arms(&self) -> Result<Vec<Vec<f64>>> {
        if !(1..=2).contains(&self.dim) || self.per_axis == 0 {
            return Err(Error::invalid(format!(
                "grid needs dim in 1..=2 and per_axis >= 1, got {self:?}"
            )));
        }
        let n = self.per_axis.pow(self.dim as u32);
        if n > MAX_ARMS {
            return Err(Error::Capacity {
                what: "grid arms",
                size: n,
                limit: MAX_ARMS,
            });
        }
        let coord = |i: usize| {
            if self.per_axis == 1 {
                0.5
            } else {
                i as f64 / (self.per_axis - 1) as f64
            }
        };
        Ok((0..n)
            .map(|k| {
                (0..self.dim)
                    .map(|ax| coord((k / self.per_axis.pow(ax as u32)) % self.per_axis))
                    .collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub grid: GridSpec,
    pub omega: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTVObjective {
    pub spec: ObjectiveSpec,
    pub seed: u64,
    pub arms: Vec<Vec<f64>>,
    /// `values[t][a]` is `f_{t+1}` at arm `a`.
    pub values: Vec<Vec<f64>>,
    /// Generator factors: `cov(f_t(a), f_s(b)) = (L_T L_Tᵀ)[t,s] · (L_β L_βᵀ)[a,b]`.
    #[serde(skip)]
    time_factor: Option<DMatrix<f64>>,
    #[serde(skip)]
    space_factor: Option<DMatrix<f64>>,
}

impl SyntheticTVObjective {
    pub fn rounds(&self) -> usize {
        self.values.len()
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    /// Optimal value and the lowest index attaining it at round `t` (1-based).
    pub fn best(&self, t: usize) -> (usize, f64) {
        let row = &self.values[t - 1];
        let mut best = (0, row[0]);
        for (i, &v) in row.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn value(&self, t: usize, arm: usize) -> f64 {
        self.values[t - 1][arm]
    }

    pub fn locate(&self, arm: &[f64]) -> Result<usize> {
        self.arms
            .iter()
            .position(|a| a.len() == arm.len() && a.iter().zip(arm).all(|(x, y)| (x - y).abs() <= 1e-9))
            .ok_or_else(|| Error::invalid(format!("arm {arm:?} is not on the objective grid")))
    }

    /// Population covariance of the generator between `(t, a)` and `(s, b)`,
    /// rounds 1-based.
    pub fn generator_covariance(&self, t: usize, a: usize, s: usize, b: usize) -> Result<f64> {
        let (lt, lb) = match (&self.time_factor, &self.space_factor) {
            (Some(lt), Some(lb)) => (lt, lb),
            _ => {
                return Err(Error::invalid(
                    "generator factors are not available on a deserialized objective",
                ))
            }
        };
        let ct = lt.row(t - 1).dot(&lt.row(s - 1));
        let cb = lb.row(a).dot(&lb.row(b));
        Ok(ct * cb)
    }

    /// Mean over rounds of `max_a f_t − mean_a f_t`: the expected
    /// per-round regret of uniform random play.
    pub fn mean_random_gap(&self) -> f64 {
        let r = self.rounds() as f64;
        (1..=self.rounds())
            .map(|t| {
                let row = &self.values[t - 1];
                self.best(t).1 - row.iter().sum::<f64>() / row.len() as f64
            })
            .sum::<f64>()
            / r
    }

    /// Largest `max_a f_t − min_a f_t` over rounds.
    pub fn max_gap(&self) -> f64 {
        self.values
            .iter()
            .map(|row| {
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// Closed-form lower Cholesky factor of the AR(1) correlation `ρ^{|t−s|}`.
fn ar1_cholesky(rounds: usize, rho: f64) -> DMatrix<f64> {
    let c = (1.0 - rho * rho).max(0.0).sqrt();
    DMatrix::from_fn(rounds, rounds, |t, s| {
        if s > t {
            0.0
        } else {
            rho.powi((t - s) as i32) * if s == 0 { 1.0 } else { c }
        }
    })
}

/// One exact joint draw of `f` over the space-time grid from the product
/// kernel, as `L_T Z L_βᵀ` with the Kronecker structure of the Gram.
pub fn sample_tv_objective(spec: &ObjectiveSpec, seed: u64) -> Result<SyntheticTVObjective> {
    let arms = spec.grid.arms()?;
    if spec.rounds == 0 {
        return Err(Error::invalid("rounds must be at least 1"));
    }
    let joint = arms.len() * spec.rounds;
    if joint > MAX_JOINT {
        return Err(Error::Capacity {
            what: "arms x rounds",
            size: joint,
            limit: MAX_JOINT,
        });
    }
    if !(spec.lengthscale > 0.0) || !(spec.noise_variance > 0.0) {
        return Err(Error::invalid("lengthscale and noise variance must be positive"));
    }
    // Validates ω.
    time_kernel(1, 2, spec.omega)?;

    let n = arms.len();
    let mut kb = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            kb[(i, j)] = spatial_kernel(&arms[i], &arms[j], spec.lengthscale, false)?;
        }
    }
    let lb = psd_sqrt(&kb);
    let lt = ar1_cholesky(spec.rounds, (1.0 - spec.omega).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(spec.rounds, n, |_, _| StandardNormal.sample(&mut rng));
    let f = &lt * z * lb.transpose();
    let values = (0..spec.rounds).map(|t| f.row(t).iter().copied().collect()).collect();
    Ok(SyntheticTVObjective {
        spec: *spec,
        seed,
        arms,
        values,
        time_factor: Some(lt),
        space_factor: Some(lb),
    })
}

/// `R_t = Σ_{s≤t} (max_a f_s − f_s(a_s))` for arms given as grid coordinates.
pub fn cumulative_regret(arms: &[Vec<f64>], objective: &SyntheticTVObjective) -> Result<Vec<f64>> {
    let idx = arms.iter().map(|a| objective.locate(a)).collect::<Result<Vec<_>>>()?;
    regret_from_indices(&idx, objective)
}

pub fn regret_from_indices(arms: &[usize], objective: &SyntheticTVObjective) -> Result<Vec<f64>> {
    if arms.len() > objective.rounds() {
        return Err(Error::invalid(format!(
            "{} pulls exceed the objective's {} rounds",
            arms.len(),
            objective.rounds()
        )));
    }
    let mut total = 0.0;
    arms.iter()
        .enumerate()
        .map(|(i, &a)| {
            if a >= objective.n_arms() {
                return Err(Error::invalid(format!("arm index {a} is off the grid")));
            }
            let t = i + 1;
            total += (objective.best(t).1 - objective.value(t, a)).max(0.0);
            Ok(total)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::product_kernel;
    use crate::kernel::{KernelHyperparams, Point};

    fn spec(omega: f64, per_axis: usize, rounds: usize) -> ObjectiveSpec {
        ObjectiveSpec {
            grid: GridSpec { dim: 1, per_axis },
            omega,
            lengthscale: 0.2,
            noise_variance: 0.01,
            rounds,
        }
    }

    fn hand_objective(values: Vec<Vec<f64>>) -> SyntheticTVObjective {
        let n = values[0].len();
        SyntheticTVObjective {
            spec: ObjectiveSpec {
                rounds: values.len(),
                ..spec(0.0, n, values.len())
            },
            seed: 0,
            arms: (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect(),
            values,
            time_factor: None,
            space_factor: None,
        }
    }

    #[test]
    fn grid_layout() {
        let a = GridSpec { dim: 2, per_axis: 3 }.arms().unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a[0], vec![0.0, 0.0]);
        assert_eq!(a[1], vec![0.5, 0.0]);
        assert_eq!(a[8], vec![1.0, 1.0]);
        assert!(matches!(
            GridSpec { dim: 2, per_axis: 17 }.arms(),
            Err(Error::Capacity { .. })
        ));
        assert!(GridSpec { dim: 3, per_axis: 2 }.arms().is_err());
    }

    #[test]
    fn capacity_limit() {
        assert!(matches!(
            sample_tv_objective(&spec(0.1, 64, 129), 0),
            Err(Error::Capacity { .. })
        ));
        assert!(sample_tv_objective(&spec(0.1, 64, 128), 0).is_ok());
    }

    #[test]
    fn omega_zero_is_constant_in_time() {
        let o = sample_tv_objective(&spec(0.0, 16, 10), 3).unwrap();
        for t in 1..10 {
            for a in 0..16 {
                assert!((o.values[t][a] - o.values[0][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_covariance_matches_product_kernel() {
        for omega in [0.0, 0.01, 0.3, 1.0] {
            let o = sample_tv_objective(&spec(omega, 8, 6), 1).unwrap();
            let hyp = KernelHyperparams {
                lengthscale: 0.2,
                omega,
                noise_variance: 0.01,
                permutation_invariant: false,
            };
            for (t, a, s, b) in [(1, 0, 1, 0), (2, 3, 5, 3), (1, 2, 4, 7), (6, 1, 6, 5)] {
                let want = product_kernel(
                    &Point::new(o.arms[a].clone(), t),
                    &Point::new(o.arms[b].clone(), s),
                    &hyp,
                )
                .unwrap();
                let got = o.generator_covariance(t, a, s, b).unwrap();
                assert!((got - want).abs() < 1e-10, "omega {omega}: {got} vs {want}");
            }
            assert!((o.generator_covariance(3, 4, 3, 4).unwrap() - 1.0).abs() < 1e-10);
            if omega == 1.0 {
                assert_eq!(o.generator_covariance(1, 2, 2, 2).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn draw_is_seeded() {
        let a = sample_tv_objective(&spec(0.1, 8, 5), 9).unwrap();
        let b = sample_tv_objective(&spec(0.1, 8, 5), 9).unwrap();
        let c = sample_tv_objective(&spec(0.1, 8, 5), 10).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn optimal_play_has_zero_regret() {
        let o = sample_tv_objective(&spec(0.2, 16, 12), 2).unwrap();
        let best: Vec<usize> = (1..=12).map(|t| o.best(t).0).collect();
        assert!(regret_from_indices(&best, &o).unwrap().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn hand_instance_against_enumeration() {
        let vals = vec![
            vec![0.3, 1.0, -0.2],
            vec![0.5, 0.1, 0.4],
            vec![-1.0, 0.0, 2.0],
            vec![0.7, 0.7, 0.2],
        ];
        let o = hand_objective(vals.clone());
        let arms: Vec<Vec<f64>> = [0usize, 2, 1, 2].iter().map(|&i| o.arms[i].clone()).collect();
        let r = cumulative_regret(&arms, &o).unwrap();
        // Hand sums: 0.7, 0.7+0.1, 0.8+2.0, 2.8+0.5.
        let want = [0.7, 0.8, 2.8, 3.3];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut min_final = f64::INFINITY;
        let mut zero_count = 0;
        for code in 0..81usize {
            let seq: Vec<usize> = (0..4).map(|k| (code / 3usize.pow(k)) % 3).collect();
            let direct: f64 = seq
                .iter()
                .enumerate()
                .map(|(t, &a)| vals[t].iter().copied().fold(f64::NEG_INFINITY, f64::max) - vals[t][a])
                .sum();
            let got = *regret_from_indices(&seq, &o).unwrap().last().unwrap();
            assert!((got - direct).abs() < 1e-12);
            if got < min_final {
                min_final = got;
            }
            if got == 0.0 {
                zero_count += 1;
            }
        }
        assert_eq!(min_final, 0.0);
        // Round 4 ties arms 0 and 1.
        assert_eq!(zero_count, 2);
    }

    #[test]
    fn regret_is_monotone_and_bounded() {
        let o = sample_tv_objective(&spec(0.05, 32, 40), 4).unwrap();
        let seq: Vec<usize> = (0..40).map(|i| (i * 7) % 32).collect();
        let r = regret_from_indices(&seq, &o).unwrap();
        assert!(r[0] >= 0.0);
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
        assert!(r[39] <= 40.0 * o.max_gap());
    }

    #[test]
    fn off_grid_arm_is_rejected() {
        let o = sample_tv_objective(&spec(0.05, 4, 3), 4).unwrap();
        assert!(cumulative_regret(&[vec![0.1]], &o).is_err());
        assert!(regret_from_indices(&[4], &o).is_err());
        assert!(regret_from_indices(&[0, 0, 0, 0], &o).is_err());
    }
}
