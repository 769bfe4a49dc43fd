//! GP-UCB acquisition, the exploration weight κ, and multi-start projected
//! ascent over the schedule box.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpState;
use crate::kernel::Point;
use crate::optim::{maximize_projected, AscentOptions};
use crate::schedule::{random_schedule_with, Bounds, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Confidence level δ.
    pub delta: f64,
    /// Tail constants of the Lipschitz assumption.
    pub a: f64,
    pub b: f64,
    pub total_epochs: usize,
    pub window: usize,
    /// Schedule dimension entering κ.
    pub dim: usize,
    pub kappa_override: Option<f64>,
    pub n_starts: usize,
    pub max_iters: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            delta: 0.1,
            a: 1.0,
            b: 1.0,
            total_epochs: 600,
            window: 6,
            dim: 1,
            kappa_override: None,
            n_starts: 10,
            max_iters: 100,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::invalid("a and b must be positive"));
        }
        if self.window == 0 || self.dim == 0 {
            return Err(Error::invalid("window and dimension must be at least 1"));
        }
        if let Some(k) = self.kappa_override {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::invalid(format!("kappa override must be nonnegative, got {k}")));
            }
        }
        Ok(())
    }

    /// κ evaluated at the full horizon `T / w`.
    pub fn horizon_kappa(&self) -> Result<f64> {
        if let Some(k) = self.kappa_override {
            return Ok(k);
        }
        kappa_closed_form(
            self.total_epochs as f64 / self.window as f64,
            self.dim,
            self.delta,
            self.a,
            self.b,
        )
    }
}

/// `2 log(π² r² / 2δ) + 2d log(d b r² √log(d a π² r² / 2δ))` with `r` the
/// number of bandit rounds.
pub fn kappa_closed_form(rounds: f64, dim: usize, delta: f64, a: f64, b: f64) -> Result<f64> {
    let d = dim as f64;
    let r2 = rounds * rounds;
    let base = PI * PI * r2 / (2.0 * delta);
    let inner = d * a * base;
    if !(inner > 1.0) {
        return Err(Error::Domain(format!(
            "kappa inner log argument {inner} <= 1; use more rounds or a kappa override"
        )));
    }
    let k = 2.0 * base.ln() + 2.0 * d * (d * b * r2 * inner.ln().sqrt()).ln();
    if !(k > 0.0) {
        return Err(Error::Domain(format!(
            "kappa evaluates to {k} for {rounds} rounds; use more rounds or a kappa override"
        )));
    }
    Ok(k)
}

/// Per-round κ_t: the horizon formula with the current round count in place of `T / w`.
pub fn kappa(round: usize, cfg: &AcquisitionConfig) -> Result<f64> {
    if let Some(k) = cfg.kappa_override {
        return Ok(k);
    }
    kappa_closed_form(round.max(1) as f64, cfg.dim, cfg.delta, cfg.a, cfg.b)
}

/// `μ_t(β) + √κ σ_t(β)` at the query row `[β, t]`. The GP canonicalizes β
/// itself when it is permutation invariant.
pub fn ucb_value(state: &GpState, beta: &[f64], t: usize, kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("kappa must be nonnegative, got {kappa}")));
    }
    let (m, v) = state.posterior(&Point::new(beta.to_vec(), t))?;
    Ok(m + kappa.sqrt() * v.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquired {
    /// The maximizing arm: sorted for an invariant GP, box-clamped raw otherwise.
    pub beta: Vec<f64>,
    pub value: f64,
}

impl Acquired {
    pub fn schedule(&self, bounds: Bounds) -> Schedule {
        Schedule::project(&self.beta, bounds).expect("acquired arm is finite")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaximizeOptions {
    pub n_starts: usize,
    pub max_iters: usize,
}

impl From<&AcquisitionConfig> for MaximizeOptions {
    fn from(c: &AcquisitionConfig) -> Self {
        MaximizeOptions {
            n_starts: c.n_starts,
            max_iters: c.max_iters,
        }
    }
}

const TIE_GAP: f64 = 1e-6;
const FD_STEP: f64 = 1e-7;

/// Multi-start projected quasi-Newton ascent of the UCB over `bounds^dim`.
///
/// Starts are `previous` (when given) followed by random box points drawn
/// from `seed`, so increasing `n_starts` only ever adds candidates.
pub fn maximize_acquisition(
    state: &GpState,
    t: usize,
    kappa: f64,
    dim: usize,
    bounds: Bounds,
    previous: Option<&[f64]>,
    opts: MaximizeOptions,
    seed: u64,
) -> Result<Acquired> {
    if dim == 0 {
        return Err(Error::invalid("acquisition dimension must be at least 1"));
    }
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("kappa must be nonnegative, got {kappa}")));
    }
    let invariant = state.hyperparams().permutation_invariant;
    let project = move |x: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = x.iter().map(|&b| bounds.clamp(b)).collect();
        if invariant {
            v.sort_by(f64::total_cmp);
        }
        v
    };
    let sk = kappa.sqrt();
    let value_at = |x: &[f64]| -> Result<f64> {
        let (m, v) = state.posterior(&Point::new(x.to_vec(), t))?;
        Ok(m + sk * v.sqrt())
    };
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let near_tie = invariant && x.windows(2).any(|w| (w[1] - w[0]).abs() < TIE_GAP);
        if near_tie {
            let f0 = value_at(x)?;
            let mut g = vec![0.0; x.len()];
            for j in 0..x.len() {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[j] += FD_STEP;
                dn[j] -= FD_STEP;
                g[j] = (value_at(&up)? - value_at(&dn)?) / (2.0 * FD_STEP);
            }
            return Ok((f0, g));
        }
        let pg = state.posterior_with_grad(&Point::new(x.to_vec(), t))?;
        let sd = pg.variance.sqrt();
        let g = pg
            .d_mean
            .iter()
            .zip(&pg.d_variance)
            .map(|(dm, dv)| if sd > 1e-12 { dm + sk * dv / (2.0 * sd) } else { *dm })
            .collect();
        Ok((pg.mean + sk * sd, g))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(opts.n_starts.max(1));
    if let Some(p) = previous {
        if p.len() != dim {
            return Err(Error::invalid(format!(
                "previous arm has dimension {}, expected {dim}",
                p.len()
            )));
        }
        starts.push(project(p));
    }
    while starts.len() < opts.n_starts.max(1) {
        starts.push(random_schedule_with(dim, bounds, &mut rng)?.interior().to_vec());
    }

    let aopts = AscentOptions {
        max_iters: opts.max_iters,
        grad_tol: 1e-9,
        f_tol: 1e-12,
        max_step: 0.25,
    };
    let mut best: Option<Acquired> = None;
    let mut consider = |beta: Vec<f64>, value: f64| {
        if value.is_finite() && best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(Acquired { beta, value });
        }
    };
    for s in &starts {
        let x0 = project(s);
        let v0 = value_at(&x0)?;
        consider(x0.clone(), v0);
        match maximize_projected(objective, project, &x0, &aopts) {
            Ok(r) => consider(r.x, r.value),
            Err(e) => log::debug!("acquisition start failed: {e}"),
        }
    }
    best.ok_or_else(|| Error::numeric("acquisition produced no finite value"))
}
