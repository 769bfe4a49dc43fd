//! Integration schedules: the bandit's arm type, the sorting projection and
//! the static baseline generators.
//!
//! A [`Schedule`] stores only the free interior knots. The evaluation
//! partition used by the Riemann sums is materialized on demand with the
//! fixed endpoints `0` and `1` attached.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed box `[lo, hi]` that every interior knot is clamped into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    /// The box used for bandit arms and random schedules.
    pub const ARM_BOX: Bounds = Bounds { lo: 0.05, hi: 0.95 };
    /// The full unit interval, used by the deterministic baselines.
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || lo > hi {
            return Err(Error::invalid(format!(
                "schedule bounds must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::ARM_BOX
    }
}

/// Sorted vector of interior discretization knots.
///
/// Serializes as a bare JSON array of the interior points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Schedule {
    interior: Vec<f64>,
    bounds: Bounds,
}

impl From<Schedule> for Vec<f64> {
    fn from(s: Schedule) -> Self {
        s.interior
    }
}

impl TryFrom<Vec<f64>> for Schedule {
    type Error = Error;

    fn try_from(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("schedule knots must lie in [0, 1]"));
        }
        Schedule::project(&raw, Bounds::UNIT)
    }
}

impl Schedule {
    /// The sorting projection: sort ascending, then clamp into `bounds`.
    pub fn project(raw: &[f64], bounds: Bounds) -> Result<Self> {
        if let Some(bad) = raw.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite schedule entry {bad}")));
        }
        let mut interior = raw.to_vec();
        interior.sort_by(f64::total_cmp);
        for x in &mut interior {
            *x = bounds.clamp(*x);
        }
        Ok(Schedule { interior, bounds })
    }

    /// A schedule with no interior knots; its partition is `[0, 1]`.
    pub fn elbo() -> Self {
        Schedule {
            interior: Vec::new(),
            bounds: Bounds::UNIT,
        }
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// Number of free interior knots.
    pub fn dim(&self) -> usize {
        self.interior.len()
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    /// Evaluation partition `0 = β₀ < β₁ < … < 1`, with duplicates and knots
    /// sitting on an endpoint collapsed.
    pub fn partition(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.interior.len() + 2);
        p.push(0.0);
        for &b in &self.interior {
            if b > *p.last().unwrap() && b < 1.0 {
                p.push(b);
            }
        }
        p.push(1.0);
        p
    }
}

/// [`Schedule::project`] into the default arm box `[0.05, 0.95]`.
pub fn project_sorted(raw: &[f64]) -> Result<Schedule> {
    Schedule::project(raw, Bounds::ARM_BOX)
}

/// Uniform spacing: partition `{0, 1/d, …, (d−1)/d, 1}` for `d` Riemann terms.
pub fn linear_schedule(terms: usize) -> Result<Schedule> {
    if terms == 0 {
        return Err(Error::invalid("linear schedule needs at least one term"));
    }
    let interior: Vec<f64> = (1..terms).map(|j| j as f64 / terms as f64).collect();
    Schedule::project(&interior, Bounds::UNIT)
}

/// Log-uniform spacing: a geometric ladder of `d` points from `beta1` up to
/// and including 1. The first `d − 1` ladder points are the interior knots.
/// A single term has no interior knot and gives the ELBO partition.
pub fn log_schedule(terms: usize, beta1: f64) -> Result<Schedule> {
    if !(beta1 > 0.0 && beta1 < 1.0) {
        return Err(Error::invalid(format!("beta1 must lie in (0, 1), got {beta1}")));
    }
    if terms == 0 {
        return Err(Error::invalid("log schedule needs at least one term"));
    }
    if terms == 1 {
        return Ok(Schedule::elbo());
    }
    let steps = (terms - 1) as f64;
    let ln_b1 = beta1.ln();
    let interior: Vec<f64> = (0..terms - 1)
        .map(|j| (ln_b1 * (1.0 - j as f64 / steps)).exp())
        .collect();
    Schedule::project(&interior, Bounds::UNIT)
}

/// `points` i.i.d. uniform draws on the arm box, canonicalized.
pub fn random_schedule(points: usize, seed: u64) -> Result<Schedule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_schedule_with(points, Bounds::ARM_BOX, &mut rng)
}

pub fn random_schedule_with<R: Rng + ?Sized>(points: usize, bounds: Bounds, rng: &mut R) -> Result<Schedule> {
    if points == 0 {
        return Err(Error::invalid("random schedule needs at least one point"));
    }
    let raw: Vec<f64> = (0..points)
        .map(|_| bounds.lo + (bounds.hi - bounds.lo) * rng.random::<f64>())
        .collect();
    Schedule::project(&raw, bounds)
}
