use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{regret_from_indices, sample_tv_objective, ObjectiveSpec, SyntheticTVObjective};
use crate::acquisition::{kappa, AcquisitionConfig};
use crate::error::{Error, Result};
use crate::gp::GpState;
use crate::kernel::{KernelHyperparams, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// UCB over the grid with the generating kernel.
    GpUcb,
    Random,
    /// The round-1 optimum, played every round.
    FixedBestInitial,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::GpUcb, Policy::Random, Policy::FixedBestInitial];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::GpUcb => "gp-ucb",
            Policy::Random => "random",
            Policy::FixedBestInitial => "fixed-best-initial",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretLabConfig {
    /// κ parameters; `dim` is overwritten with the grid dimension.
    pub acquisition: AcquisitionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCurve {
    pub policy: Policy,
    pub seed: u64,
    pub arms: Vec<usize>,
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub curves: Vec<PolicyCurve>,
}

impl RegretSummary {
    /// Mean cumulative-regret curve per policy.
    pub fn mean_curves(&self) -> BTreeMap<Policy, Vec<f64>> {
        let mut sums: BTreeMap<Policy, (Vec<f64>, usize)> = BTreeMap::new();
        for c in &self.curves {
            let e = sums
                .entry(c.policy)
                .or_insert_with(|| (vec![0.0; c.cumulative.len()], 0));
            for (s, v) in e.0.iter_mut().zip(&c.cumulative) {
                *s += v;
            }
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(p, (s, k))| (p, s.into_iter().map(|v| v / k as f64).collect()))
            .collect()
    }

    pub fn mean_final(&self, policy: Policy) -> Option<f64> {
        self.mean_curves().get(&policy).and_then(|c| c.last().copied())
    }

    /// Rows `(seed, policy, round, instantaneous_regret, cumulative_regret)`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            seed: u64,
            policy: &'static str,
            round: usize,
            instantaneous_regret: f64,
            cumulative_regret: f64,
        }
        let rows = self.curves.iter().flat_map(|c| {
            c.instantaneous
                .iter()
                .zip(&c.cumulative)
                .enumerate()
                .map(move |(i, (r, cr))| Row {
                    seed: c.seed,
                    policy: c.policy.name(),
                    round: i + 1,
                    instantaneous_regret: *r,
                    cumulative_regret: *cr,
                })
        });
        crate::bandit::write_csv(rows, out)
    }
}

/// Observation noise shared by every policy for a given seed, so that
/// policies pulling the same arm in the same round see the same reward.
struct NoiseTable(DMatrix<f64>);

impl NoiseTable {
    fn new(rounds: usize, arms: usize, sd: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E6F_6973_6500_0000);
        NoiseTable(DMatrix::from_fn(rounds, arms, |_, _| {
            sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        }))
    }
}

fn rollout(
    policy: Policy,
    objective: &SyntheticTVObjective,
    noise: &NoiseTable,
    cfg: &RegretLabConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let r = objective.rounds();
    match policy {
        Policy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6E64_0000_0000);
            Ok((0..r).map(|_| rng.random_range(0..objective.n_arms())).collect())
        }
        Policy::FixedBestInitial => Ok(vec![objective.best(1).0; r]),
        Policy::GpUcb => {
            let spec = &objective.spec;
            let mut gp = GpState::new(KernelHyperparams {
                lengthscale: spec.lengthscale,
                omega: spec.omega,
                noise_variance: spec.noise_variance,
                permutation_invariant: false,
            })?;
            let mut acq = cfg.acquisition;
            acq.dim = spec.grid.dim;
            let mut pulls = Vec::with_capacity(r);
            for t in 1..=r {
                let k = kappa(t, &acq)?.sqrt();
                let mut best = (0, f64::NEG_INFINITY);
                for (i, arm) in objective.arms.iter().enumerate() {
                    let (m, v) = gp.posterior(&Point::new(arm.clone(), t))?;
                    let u = m + k * v.sqrt();
                    if u > best.1 {
                        best = (i, u);
                    }
                }
                let a = best.0;
                gp.push(
                    Point::new(objective.arms[a].clone(), t),
                    objective.value(t, a) + noise.0[(t - 1, a)],
                )?;
                pulls.push(a);
            }
            Ok(pulls)
        }
    }
}

/// Roll out each policy on a shared objective for every seed. A seed fixes
/// the observation noise (common to all policies) and the random policy's stream.
pub fn compare_policies(
    objective: &SyntheticTVObjective,
    policies: &[Policy],
    seeds: &[u64],
    cfg: &RegretLabConfig,
) -> Result<RegretSummary> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    let mut curves = Vec::with_capacity(seeds.len() * policies.len());
    for &seed in seeds {
        let noise = NoiseTable::new(
            objective.rounds(),
            objective.n_arms(),
            objective.spec.noise_variance.sqrt(),
            seed,
        );
        for &p in policies {
            curves.push(curve(p, objective, &noise, cfg, seed)?);
        }
    }
    Ok(RegretSummary { curves })
}

/// As [`compare_policies`], with a fresh objective drawn from each seed.
pub fn compare_on_fresh_objectives(
    spec: &ObjectiveSpec,
    policies: &[Policy],
    seeds: &[u64],
    cfg: &RegretLabConfig,
) -> Result<RegretSummary> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    let mut curves = Vec::new();
    for &seed in seeds {
        let obj = sample_tv_objective(spec, seed)?;
        curves.extend(compare_policies(&obj, policies, &[seed], cfg)?.curves);
    }
    Ok(RegretSummary { curves })
}

fn curve(
    policy: Policy,
    objective: &SyntheticTVObjective,
    noise: &NoiseTable,
    cfg: &RegretLabConfig,
    seed: u64,
) -> Result<PolicyCurve> {
    let arms = rollout(policy, objective, noise, cfg, seed)?;
    let cumulative = regret_from_indices(&arms, objective)?;
    let mut prev = 0.0;
    let instantaneous = cumulative
        .iter()
        .map(|&c| {
            let r = c - prev;
            prev = c;
            r
        })
        .collect();
    Ok(PolicyCurve {
        policy,
        seed,
        arms,
        instantaneous,
        cumulative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regret::GridSpec;

    fn spec(omega: f64, rounds: usize) -> ObjectiveSpec {
        ObjectiveSpec {
            grid: GridSpec { dim: 1, per_axis: 32 },
            omega,
            lengthscale: 0.1,
            noise_variance: 0.01,
            rounds,
        }
    }

    #[test]
    fn random_regret_tracks_grid_average_gap() {
        let obj = sample_tv_objective(&spec(0.05, 200), 3).unwrap();
        let seeds: Vec<u64> = (0..10).collect();
        let s = compare_policies(&obj, &[Policy::Random], &seeds, &RegretLabConfig::default()).unwrap();
        let per_round = s.mean_final(Policy::Random).unwrap() / 200.0;
        let oracle = obj.mean_random_gap();
        assert!(
            per_round >= 0.5 * oracle && per_round <= 2.0 * oracle,
            "{per_round} vs {oracle}"
        );
    }

    #[test]
    fn repeat_runs_are_identical() {
        let a =
            compare_on_fresh_objectives(&spec(0.01, 30), &Policy::ALL, &[1, 2], &RegretLabConfig::default()).unwrap();
        let b =
            compare_on_fresh_objectives(&spec(0.01, 30), &Policy::ALL, &[1, 2], &RegretLabConfig::default()).unwrap();
        assert_eq!(a, b);
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("seed,policy,round,instantaneous_regret,cumulative_regret\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 30);
    }

    #[test]
    fn fixed_best_initial_is_optimal_when_static() {
        let obj = sample_tv_objective(&spec(0.0, 20), 4).unwrap();
        let s = compare_policies(&obj, &[Policy::FixedBestInitial], &[0], &RegretLabConfig::default()).unwrap();
        assert!(s.curves[0].cumulative.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn gp_ucb_learns_static_objective() {
        let seeds: Vec<u64> = (0..5).collect();
        let s =
            compare_on_fresh_objectives(&spec(0.0, 80), &[Policy::GpUcb], &seeds, &RegretLabConfig::default()).unwrap();
        let m = &s.mean_curves()[&Policy::GpUcb];
        let late = m[79] / 80.0;
        let mid = m[39] / 40.0;
        assert!(late < mid, "{late} vs {mid}");
    }

    #[test]
    fn empty_seeds_rejected() {
        let obj = sample_tv_objective(&spec(0.0, 5), 4).unwrap();
        assert!(compare_policies(&obj, &Policy::ALL, &[], &RegretLabConfig::default()).is_err());
    }
}
