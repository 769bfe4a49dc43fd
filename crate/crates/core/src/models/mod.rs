//! Desk-scale latent-variable models with exact evidence, and the TVO
//! training step.

mod bernoulli;
mod linear_gaussian;

pub use bernoulli::{BernoulliLatentModel, BinaryDatum, MAX_LATENT_BITS, MAX_OBSERVED_BITS};
pub use linear_gaussian::LinearGaussianModel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adaptive-moment state for gradient *ascent*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    /// Returns the update to add to the parameters.
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        self.steps += 1;
        let b1t = 1.0 - self.beta1.powi(self.steps as i32);
        let b2t = 1.0 - self.beta2.powi(self.steps as i32);
        grad.iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / b1t;
                let vh = self.v[i] / b2t;
                self.learning_rate * mh / (vh.sqrt() + self.eps)
            })
            .collect()
    }
}

/// Dataset fixture: a ground-truth model, its seed, and samples from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub seed: u64,
    pub truth: BernoulliLatentModel,
    pub data: Vec<BinaryDatum>,
}

impl Fixture {
    pub fn generate(latent: usize, observed: usize, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > 64 {
            return Err(Error::invalid(format!("fixture size must be in 1..=64, got {n}")));
        }
        let truth = BernoulliLatentModel::random(latent, observed, 2.0, seed)?;
        let data = truth.sample_data(n, seed.wrapping_add(1));
        Ok(Fixture { seed, truth, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Exact data-averaged log evidence after the step.
    pub log_evidence: f64,
    /// TVO lower bound before the step (the objective that was differentiated).
    pub objective: f64,
    /// Set when the gradient was non-finite and no update was applied.
    pub skipped: bool,
}

/// One Adam ascent step on the exact data-averaged TVO lower bound.
pub fn train_step(
    model: &mut BernoulliLatentModel,
    adam: &mut Adam,
    data: &[BinaryDatum],
    partition: &[f64],
) -> Result<StepOutcome> {
    use crate::tvo::{tvo_lower, EnumerableModel};

    if !(adam.learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be nonnegative"));
    }
    let objective = tvo_lower(&model.enumerate_latents(data)?, partition)?;
    let grad = model.tvo_gradient_exact(data, partition)?;
    let skipped = !grad.iter().all(|g| g.is_finite());
    if !skipped && adam.learning_rate > 0.0 {
        let update = adam.step(&grad);
        let p: Vec<f64> = model.params().iter().zip(&update).map(|(a, b)| a + b).collect();
        let mut next = model.clone();
        next.set_params(&p)?;
        if next.validate().is_ok() {
            *model = next;
        }
    }
    Ok(StepOutcome {
        log_evidence: model.log_evidence(data)?,
        objective,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tvo::{tvo_lower, EnumerableModel};

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = BernoulliLatentModel::random(3, 5, 1.0, 4).unwrap();
        let data = m.sample_data(6, 2);
        let before = m.clone();
        let l0 = m.log_evidence(&data).unwrap();
        let mut adam = Adam::new(m.n_params(), 0.0);
        let out = train_step(&mut m, &mut adam, &data, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m, before);
        assert_eq!(out.log_evidence, l0);
    }

    #[test]
    fn small_steps_mostly_increase_objective() {
        for seed in 0..3 {
            let mut m = BernoulliLatentModel::random(4, 6, 1.0, 30 + seed).unwrap();
            let data = Fixture::generate(4, 6, 20, seed).unwrap().data;
            let p = [0.0, 0.1, 0.4, 1.0];
            let mut adam = Adam::new(m.n_params(), 1e-3);
            let mut prev = tvo_lower(&m.enumerate_latents(&data).unwrap(), &p).unwrap();
            let mut ups = 0;
            for _ in 0..50 {
                train_step(&mut m, &mut adam, &data, &p).unwrap();
                let cur = tvo_lower(&m.enumerate_latents(&data).unwrap(), &p).unwrap();
                if cur >= prev {
                    ups += 1;
                }
                prev = cur;
            }
            assert!(ups >= 45, "seed {seed}: {ups}/50");
        }
    }

    #[test]
    fn gradient_step_has_positive_directional_derivative() {
        let m = BernoulliLatentModel::random(4, 6, 1.0, 12).unwrap();
        let data = m.sample_data(8, 5);
        let p = [0.0, 0.3, 1.0];
        let g = m.tvo_gradient_exact(&data, &p).unwrap();
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        let eps = 1e-6;
        let f = |s: f64| {
            let mut mm = m.clone();
            let q: Vec<f64> = m.params().iter().zip(&g).map(|(a, b)| a + s * b).collect();
            mm.set_params(&q).unwrap();
            tvo_lower(&mm.enumerate_latents(&data).unwrap(), &p).unwrap()
        };
        let dd = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!(norm2 > 0.0);
        assert!((dd - norm2).abs() < 1e-4 * norm2, "{dd} vs {norm2}");
    }

    #[test]
    fn fixture_generation_is_seeded() {
        let a = Fixture::generate(4, 6, 10, 3).unwrap();
        let b = Fixture::generate(4, 6, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(Fixture::generate(4, 6, 65, 3).is_err());
    }
}
