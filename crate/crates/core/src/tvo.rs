//! Geometric-mixture path quantities and the thermodynamic evidence bounds.
//!
//! Along the path `π_β(z|x) ∝ q(z|x)^{1−β} p(x,z)^β` the integrand
//! `E_{π_β}[log w]` (with `log w = log p(x,z) − log q(z|x)`) is nondecreasing
//! in β and integrates to `log p(x)` over `[0, 1]`. Left and right Riemann
//! sums over a partition therefore bracket the log evidence.
//!
//! Expectations come either from self-normalized importance sampling over a
//! sampled batch or from exact enumeration of a small latent space.
//! Multi-datum quantities are averaged over data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::schedule::{linear_schedule, Bounds, Schedule};

/// Largest latent space the enumeration routines accept.
pub const MAX_ENUMERATED_STATES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// i.i.d. draws from q; every column has equal proposal weight.
    Sampled,
    /// Every latent state, with its exact `log q(z|x)` per datum.
    Enumerated { log_q: Vec<Vec<f64>> },
}

/// Log importance weights `log p(x, z) − log q(z|x)`, one row per datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogWeightBatch {
    log_w: Vec<Vec<f64>>,
    provenance: Provenance,
}

impl LogWeightBatch {
    pub fn sampled(log_w: Vec<Vec<f64>>) -> Result<Self> {
        if log_w.is_empty() || log_w.iter().any(|r| r.is_empty()) {
            return Err(Error::invalid("log-weight batch needs at least one sample per datum"));
        }
        if log_w.iter().flatten().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::invalid("log weights must be finite or -inf"));
        }
        Ok(LogWeightBatch {
            log_w,
            provenance: Provenance::Sampled,
        })
    }

    /// Build an enumerated batch; each row of `log_q` must be a normalized
    /// distribution to within 1e-12.
    pub fn enumerated(log_w: Vec<Vec<f64>>, log_q: Vec<Vec<f64>>) -> Result<Self> {
        if log_w.is_empty() || log_w.len() != log_q.len() {
            return Err(Error::invalid("enumerated batch needs matching log_w/log_q rows"));
        }
        for (w, q) in log_w.iter().zip(&log_q) {
            if w.len() != q.len() || w.is_empty() {
                return Err(Error::invalid("enumerated row length mismatch"));
            }
            let mass: f64 = q.iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("q masses sum to {mass}, not 1")));
            }
            if w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::invalid("log weights must be finite or -inf"));
            }
        }
        Ok(LogWeightBatch {
            log_w,
            provenance: Provenance::Enumerated { log_q },
        })
    }

    pub fn log_w(&self) -> &[Vec<f64>] {
        &self.log_w
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn n_data(&self) -> usize {
        self.log_w.len()
    }

    /// Samples (or states) per datum.
    pub fn samples(&self) -> usize {
        self.log_w[0].len()
    }

    pub fn is_enumerated(&self) -> bool {
        matches!(self.provenance, Provenance::Enumerated { .. })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Σ softmax(a)·h, skipping states with zero path mass.
fn weighted_mean(a: &[f64], h: &[f64]) -> Result<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::numeric("all path weights are -inf (degenerate proposal)"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (ai, hi) in a.iter().zip(h) {
        let e = (ai - m).exp();
        den += e;
        if e > 0.0 {
            num += e * hi;
        }
    }
    Ok(num / den)
}

/// Self-normalized importance estimate of `E_{π_β}[log w]` for each datum.
pub fn snis_expectation(batch: &LogWeightBatch, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if batch.is_enumerated() {
        return Err(Error::invalid("SNIS expects a sampled batch"));
    }
    batch
        .log_w
        .iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().map(|w| beta * w).collect();
            weighted_mean(&a, row)
        })
        .collect()
}

/// Normalized SNIS weights for one datum; they sum to one for every β.
pub fn snis_weights(log_w: &[f64], beta: f64) -> Vec<f64> {
    let a: Vec<f64> = log_w.iter().map(|w| beta * w).collect();
    let lz = log_sum_exp(&a);
    a.iter().map(|v| (v - lz).exp()).collect()
}

/// Exact `E_{π_β}[log w]` per datum from an enumerated batch.
pub fn enumerated_expectation(batch: &LogWeightBatch, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let Provenance::Enumerated { log_q } = &batch.provenance else {
        return Err(Error::invalid("exact expectation needs an enumerated batch"));
    };
    batch
        .log_w
        .iter()
        .zip(log_q)
        .map(|(w, q)| {
            let a: Vec<f64> = w.iter().zip(q).map(|(wi, qi)| qi + beta * wi).collect();
            weighted_mean(&a, w)
        })
        .collect()
}

/// Integrand per datum, dispatching on the batch provenance.
pub fn path_expectation(batch: &LogWeightBatch, beta: f64) -> Result<Vec<f64>> {
    match batch.provenance {
        Provenance::Sampled => snis_expectation(batch, beta),
        Provenance::Enumerated { .. } => enumerated_expectation(batch, beta),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Data-averaged integrand.
pub fn mean_path_expectation(batch: &LogWeightBatch, beta: f64) -> Result<f64> {
    Ok(mean(&path_expectation(batch, beta)?))
}

/// `log Z_β(x) = log Σ_z q^{1−β} p^β` per datum (enumerated batches only).
pub fn log_normalizer(batch: &LogWeightBatch, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let Provenance::Enumerated { log_q } = &batch.provenance else {
        return Err(Error::invalid("log normalizer needs an enumerated batch"));
    };
    Ok(batch
        .log_w
        .iter()
        .zip(log_q)
        .map(|(w, q)| {
            let a: Vec<f64> = w.iter().zip(q).map(|(wi, qi)| qi + beta * wi).collect();
            log_sum_exp(&a)
        })
        .collect())
}

/// Exact `log p(x)` per datum, `log Σ_z p(x, z)`.
pub fn enumerated_log_evidence(batch: &LogWeightBatch) -> Result<Vec<f64>> {
    log_normalizer(batch, 1.0)
}

/// Models whose latent space can be enumerated exactly.
pub trait EnumerableModel {
    type Datum;

    /// Size of the latent space.
    fn latent_states(&self) -> usize;

    /// All latent states with exact `log q` and `log w`, one row per datum.
    fn enumerate_latents(&self, data: &[Self::Datum]) -> Result<LogWeightBatch>;
}

fn enumerate_one<M: EnumerableModel>(model: &M, datum: &M::Datum) -> Result<LogWeightBatch>
where
    M::Datum: Clone,
{
    model.enumerate_latents(std::slice::from_ref(datum))
}

pub fn exact_path_expectation<M: EnumerableModel>(model: &M, datum: &M::Datum, beta: f64) -> Result<f64>
where
    M::Datum: Clone,
{
    Ok(enumerated_expectation(&enumerate_one(model, datum)?, beta)?[0])
}

pub fn exact_log_evidence<M: EnumerableModel>(model: &M, datum: &M::Datum) -> Result<f64>
where
    M::Datum: Clone,
{
    Ok(enumerated_log_evidence(&enumerate_one(model, datum)?)?[0])
}

/// Check that `partition` runs from 0 to 1 without decreasing. Zero-width
/// intervals are allowed and contribute nothing.
pub fn validate_partition(partition: &[f64]) -> Result<()> {
    if partition.len() < 2 || partition[0] != 0.0 || *partition.last().unwrap() != 1.0 {
        return Err(Error::invalid("partition must start at 0 and end at 1"));
    }
    if partition.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::invalid("partition must be nondecreasing"));
    }
    Ok(())
}

fn riemann(batch: &LogWeightBatch, partition: &[f64], right: bool) -> Result<f64> {
    validate_partition(partition)?;
    let mut total = 0.0;
    for w in partition.windows(2) {
        let width = w[1] - w[0];
        if width == 0.0 {
            continue;
        }
        let knot = if right { w[1] } else { w[0] };
        total += width * mean_path_expectation(batch, knot)?;
    }
    Ok(total)
}

/// Left Riemann sum `Σ_j (β_{j+1} − β_j) E_{π_{β_j}}[log w]`, averaged over data.
pub fn tvo_lower(batch: &LogWeightBatch, partition: &[f64]) -> Result<f64> {
    riemann(batch, partition, false)
}

/// Right Riemann sum `Σ_j (β_{j+1} − β_j) E_{π_{β_{j+1}}}[log w]`, averaged over data.
pub fn tvo_upper(batch: &LogWeightBatch, partition: &[f64]) -> Result<f64> {
    riemann(batch, partition, true)
}

/// Knots with uniformly spaced integrand values between the exact endpoint
/// values, found by bisection on the (nondecreasing) data-averaged integrand.
/// Falls back to the linear schedule when the integrand is flat.
pub fn moments_schedule(batch: &LogWeightBatch, terms: usize) -> Result<Schedule> {
    if terms == 0 {
        return Err(Error::invalid("moments schedule needs at least one term"));
    }
    if !batch.is_enumerated() {
        return Err(Error::invalid("moments schedule needs an enumerated batch"));
    }
    let integrand = |b: f64| mean_path_expectation(batch, b);
    let y0 = integrand(0.0)?;
    let y1 = integrand(1.0)?;
    if y1 - y0 < 1e-10 {
        return linear_schedule(terms);
    }
    let mut knots = Vec::with_capacity(terms.saturating_sub(1));
    for j in 1..terms {
        let target = y0 + (j as f64 / terms as f64) * (y1 - y0);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = integrand(mid)?;
            if (v - target).abs() <= 1e-8 {
                lo = mid;
                hi = mid;
                break;
            }
            if v < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        knots.push(0.5 * (lo + hi));
    }
    Schedule::project(&knots, Bounds::UNIT)
}

/// One row of a bound-curve export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub partition_size: usize,
    pub schedule_kind: String,
    pub lower: f64,
    pub upper: f64,
    pub exact: f64,
}

/// Evaluate both bounds on an enumerated batch for each `(kind, schedule)`.
pub fn bound_curve(batch: &LogWeightBatch, schedules: &[(String, Schedule)]) -> Result<Vec<BoundRow>> {
    let exact = mean(&enumerated_log_evidence(batch)?);
    schedules
        .iter()
        .map(|(kind, s)| {
            let p = s.partition();
            Ok(BoundRow {
                partition_size: p.len() - 1,
                schedule_kind: kind.clone(),
                lower: tvo_lower(batch, &p)?,
                upper: tvo_upper(batch, &p)?,
                exact,
            })
        })
        .collect()
}

pub fn write_bound_csv<W: std::io::Write>(rows: &[BoundRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> LogWeightBatch {
        // q = (0.5, 0.5); p(x, z) = (0.1, 0.3)
        let log_q = vec![vec![0.5f64.ln(), 0.5f64.ln()]];
        let log_w = vec![vec![(0.1f64 / 0.5).ln(), (0.3f64 / 0.5).ln()]];
        LogWeightBatch::enumerated(log_w, log_q).unwrap()
    }

    #[test]
    fn two_state_evidence() {
        let b = two_state();
        assert!((enumerated_log_evidence(&b).unwrap()[0] - 0.4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn endpoints_are_elbo_and_posterior_mean() {
        let b = two_state();
        let elbo = 0.5 * (0.2f64.ln() + 0.6f64.ln());
        assert!((enumerated_expectation(&b, 0.0).unwrap()[0] - elbo).abs() < 1e-15);
        let post = 0.25 * 0.2f64.ln() + 0.75 * 0.6f64.ln();
        assert!((enumerated_expectation(&b, 1.0).unwrap()[0] - post).abs() < 1e-15);
        assert!((tvo_lower(&b, &[0.0, 1.0]).unwrap() - elbo).abs() < 1e-15);
        assert!((tvo_upper(&b, &[0.0, 1.0]).unwrap() - post).abs() < 1e-15);
    }

    #[test]
    fn snis_at_zero_is_plain_mean() {
        let b = LogWeightBatch::sampled(vec![vec![-3.0, -1.0, -2.0, 0.5]]).unwrap();
        assert!((snis_expectation(&b, 0.0).unwrap()[0] - (-5.5 / 4.0)).abs() < 1e-15);
        for beta in [0.0, 0.3, 1.0] {
            let s: f64 = snis_weights(&b.log_w()[0], beta).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn snis_degenerate_and_wrong_provenance() {
        let b = LogWeightBatch::sampled(vec![vec![f64::NEG_INFINITY; 3]]).unwrap();
        assert!(matches!(snis_expectation(&b, 0.5), Err(Error::Numeric { .. })));
        assert!(snis_expectation(&two_state(), 0.5).is_err());
        assert!(snis_expectation(&b, 1.5).is_err());
    }

    #[test]
    fn unnormalized_q_rejected() {
        assert!(LogWeightBatch::enumerated(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn flat_integrand_collapses_bounds_and_moments() {
        // q equals the posterior: log w is constant
        let lp = 0.4f64.ln();
        let log_q = vec![vec![0.25f64.ln(), 0.75f64.ln()]];
        let b = LogWeightBatch::enumerated(vec![vec![lp, lp]], log_q).unwrap();
        let p = [0.0, 0.3, 0.7, 1.0];
        assert!((tvo_lower(&b, &p).unwrap() - lp).abs() < 1e-12);
        assert_eq!(tvo_lower(&b, &p).unwrap(), tvo_upper(&b, &p).unwrap());
        assert_eq!(moments_schedule(&b, 2).unwrap().partition(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn moments_two_terms_matches_grid_inversion() {
        let b = two_state();
        let s = moments_schedule(&b, 2).unwrap();
        let y0 = mean_path_expectation(&b, 0.0).unwrap();
        let y1 = mean_path_expectation(&b, 1.0).unwrap();
        let target = 0.5 * (y0 + y1);
        let grid_beta = (0..=10_000)
            .map(|i| i as f64 / 10_000.0)
            .find(|&t| mean_path_expectation(&b, t).unwrap() >= target)
            .unwrap();
        let knot = s.interior()[0];
        assert!(knot > 0.0 && knot < 1.0);
        assert!((knot - grid_beta).abs() <= 1e-4, "{knot} vs {grid_beta}");
        assert!((mean_path_expectation(&b, knot).unwrap() - target).abs() <= 1e-8);
    }

    #[test]
    fn partition_validation() {
        let b = two_state();
        assert!(tvo_lower(&b, &[0.1, 1.0]).is_err());
        assert!(tvo_lower(&b, &[0.0, 0.6, 0.4, 1.0]).is_err());
        assert!(tvo_lower(&b, &[0.0, 0.5, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn bound_csv_header() {
        let b = two_state();
        let rows = bound_curve(&b, &[("linear".into(), linear_schedule(2).unwrap())]).unwrap();
        let mut buf = Vec::new();
        write_bound_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("partition_size,schedule_kind,lower,upper,exact\n2,linear,"));
    }
}
