use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus};
use crate::tvo::{validate_partition, EnumerableModel, LogWeightBatch};

pub const MAX_LATENT_BITS: usize = 12;
pub const MAX_OBSERVED_BITS: usize = 16;

/// A binary observation vector with entries in {0, 1}.
pub type BinaryDatum = Vec<u8>;

/// Factorized Bernoulli prior over `K` latent bits, a linear-logistic
/// Bernoulli decoder over `D` observed bits, and a linear-logistic
/// factorized Bernoulli encoder `q(z|x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliLatentModel {
    pub prior_logits: Vec<f64>,
    /// `K × D`: row `k` is added to the pixel logits when `z_k = 1`.
    pub decoder_weights: Vec<Vec<f64>>,
    pub decoder_bias: Vec<f64>,
    /// `D × K`: row `d` is added to the latent logits when `x_d = 1`.
    pub encoder_weights: Vec<Vec<f64>>,
    pub encoder_bias: Vec<f64>,
}

/// Quantities of one latent state that do not depend on the datum.
struct StateTerms {
    bits: Vec<f64>,
    log_prior: f64,
    pixel_logits: Vec<f64>,
    pixel_probs: Vec<f64>,
    softplus_sum: f64,
}

impl BernoulliLatentModel {
    /// Parameters drawn i.i.d. `N(0, scale²)`.
    pub fn random(latent: usize, observed: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let prior_logits = draw(latent);
        let decoder_weights = (0..latent).map(|_| draw(observed)).collect();
        let decoder_bias = draw(observed);
        let encoder_weights = (0..observed).map(|_| draw(latent)).collect();
        let encoder_bias = draw(latent);
        let m = BernoulliLatentModel {
            prior_logits,
            decoder_weights,
            decoder_bias,
            encoder_weights,
            encoder_bias,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn latent_bits(&self) -> usize {
        self.prior_logits.len()
    }

    pub fn observed_bits(&self) -> usize {
        self.decoder_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.latent_bits();
        let d = self.observed_bits();
        if k == 0 || d == 0 {
            return Err(Error::invalid("model needs at least one latent and one observed bit"));
        }
        if k > MAX_LATENT_BITS {
            return Err(Error::Capacity {
                what: "latent bits",
                size: k,
                limit: MAX_LATENT_BITS,
            });
        }
        if d > MAX_OBSERVED_BITS {
            return Err(Error::Capacity {
                what: "observed bits",
                size: d,
                limit: MAX_OBSERVED_BITS,
            });
        }
        let shapes_ok = self.decoder_weights.len() == k
            && self.decoder_weights.iter().all(|r| r.len() == d)
            && self.encoder_weights.len() == d
            && self.encoder_weights.iter().all(|r| r.len() == k)
            && self.encoder_bias.len() == k;
        if !shapes_ok {
            return Err(Error::invalid("parameter shapes inconsistent with K and D"));
        }
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(())
    }

    fn check_datum(&self, x: &[u8]) -> Result<()> {
        if x.len() != self.observed_bits() || x.iter().any(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "datum must be {} binary entries",
                self.observed_bits()
            )));
        }
        Ok(())
    }

    /// Number of generative (θ) parameters; they come first in [`Self::params`].
    pub fn n_theta(&self) -> usize {
        let (k, d) = (self.latent_bits(), self.observed_bits());
        k + k * d + d
    }

    pub fn n_params(&self) -> usize {
        let (k, d) = (self.latent_bits(), self.observed_bits());
        self.n_theta() + d * k + k
    }

    /// Flat parameter vector: prior logits, decoder weights (row-major),
    /// decoder bias, encoder weights (row-major), encoder bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend(&self.prior_logits);
        self.decoder_weights.iter().for_each(|r| p.extend(r));
        p.extend(&self.decoder_bias);
        self.encoder_weights.iter().for_each(|r| p.extend(r));
        p.extend(&self.encoder_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().unwrap());
        fill(&mut self.prior_logits);
        self.decoder_weights.iter_mut().for_each(|r| fill(r));
        fill(&mut self.decoder_bias);
        self.encoder_weights.iter_mut().for_each(|r| fill(r));
        fill(&mut self.encoder_bias);
        Ok(())
    }

    fn state_terms(&self) -> Vec<StateTerms> {
        let k = self.latent_bits();
        let prior_sp: f64 = self.prior_logits.iter().map(|&l| softplus(l)).sum();
        (0..1usize << k)
            .map(|mask| {
                let bits: Vec<f64> = (0..k).map(|j| ((mask >> j) & 1) as f64).collect();
                let log_prior = bits.iter().zip(&self.prior_logits).map(|(b, l)| b * l).sum::<f64>() - prior_sp;
                let mut pixel_logits = self.decoder_bias.clone();
                for (j, b) in bits.iter().enumerate() {
                    if *b == 1.0 {
                        for (pl, w) in pixel_logits.iter_mut().zip(&self.decoder_weights[j]) {
                            *pl += w;
                        }
                    }
                }
                let pixel_probs = pixel_logits.iter().map(|&v| sigmoid(v)).collect();
                let softplus_sum = pixel_logits.iter().map(|&v| softplus(v)).sum();
                StateTerms {
                    bits,
                    log_prior,
                    pixel_logits,
                    pixel_probs,
                    softplus_sum,
                }
            })
            .collect()
    }

    fn encoder_logits(&self, x: &[u8]) -> Vec<f64> {
        let mut nu = self.encoder_bias.clone();
        for (d, &xd) in x.iter().enumerate() {
            if xd == 1 {
                for (n, w) in nu.iter_mut().zip(&self.encoder_weights[d]) {
                    *n += w;
                }
            }
        }
        nu
    }

    fn log_lik(st: &StateTerms, x: &[u8]) -> f64 {
        x.iter()
            .zip(&st.pixel_logits)
            .map(|(&xd, l)| if xd == 1 { *l } else { 0.0 })
            .sum::<f64>()
            - st.softplus_sum
    }

    fn log_q_bits(nu: &[f64], nu_sp: f64, bits: &[f64]) -> f64 {
        bits.iter().zip(nu).map(|(b, n)| b * n).sum::<f64>() - nu_sp
    }

    /// Log joint `log p(x, z)` for a latent bitmask.
    pub fn log_joint(&self, x: &[u8], mask: usize) -> Result<f64> {
        self.check_datum(x)?;
        let k = self.latent_bits();
        if mask >= 1 << k {
            return Err(Error::invalid("latent mask out of range"));
        }
        let bits: Vec<f64> = (0..k).map(|j| ((mask >> j) & 1) as f64).collect();
        let lp: f64 = bits
            .iter()
            .zip(&self.prior_logits)
            .map(|(b, l)| b * l - softplus(*l))
            .sum();
        let mut ll = 0.0;
        for d in 0..self.observed_bits() {
            let mut eta = self.decoder_bias[d];
            for j in 0..k {
                eta += bits[j] * self.decoder_weights[j][d];
            }
            ll += x[d] as f64 * eta - softplus(eta);
        }
        Ok(lp + ll)
    }

    /// Exact per-datum log evidence averaged over `data`.
    pub fn log_evidence(&self, data: &[BinaryDatum]) -> Result<f64> {
        let batch = self.enumerate_latents(data)?;
        let v = crate::tvo::enumerated_log_evidence(&batch)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `S` i.i.d. draws from the factorized encoder for each datum.
    pub fn sample_latents(&self, data: &[BinaryDatum], samples: usize, seed: u64) -> Result<LogWeightBatch> {
        if samples == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.latent_bits();
        let prior_sp: f64 = self.prior_logits.iter().map(|&l| softplus(l)).sum();
        let mut rows = Vec::with_capacity(data.len());
        for x in data {
            self.check_datum(x)?;
            let nu = self.encoder_logits(x);
            let probs: Vec<f64> = nu.iter().map(|&n| sigmoid(n)).collect();
            let nu_sp: f64 = nu.iter().map(|&n| softplus(n)).sum();
            let mut row = Vec::with_capacity(samples);
            let mut bits = vec![0.0; k];
            for _ in 0..samples {
                for j in 0..k {
                    bits[j] = if rng.random::<f64>() < probs[j] { 1.0 } else { 0.0 };
                }
                let lp = bits.iter().zip(&self.prior_logits).map(|(b, l)| b * l).sum::<f64>() - prior_sp;
                let mut ll = 0.0;
                for d in 0..self.observed_bits() {
                    let mut eta = self.decoder_bias[d];
                    for j in 0..k {
                        eta += bits[j] * self.decoder_weights[j][d];
                    }
                    ll += x[d] as f64 * eta - softplus(eta);
                }
                row.push(lp + ll - Self::log_q_bits(&nu, nu_sp, &bits));
            }
            rows.push(row);
        }
        LogWeightBatch::sampled(rows)
    }

    /// Ancestral samples `z ~ p(z)`, `x ~ p(x|z)`.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<BinaryDatum> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let bits: Vec<bool> = self
                    .prior_logits
                    .iter()
                    .map(|&l| rng.random::<f64>() < sigmoid(l))
                    .collect();
                (0..self.observed_bits())
                    .map(|d| {
                        let mut eta = self.decoder_bias[d];
                        for (j, &b) in bits.iter().enumerate() {
                            if b {
                                eta += self.decoder_weights[j][d];
                            }
                        }
                        u8::from(rng.random::<f64>() < sigmoid(eta))
                    })
                    .collect()
            })
            .collect()
    }

    /// Exact gradient of the data-averaged left Riemann sum over `partition`
    /// with respect to [`Self::params`].
    ///
    /// For one knot β with `π = softmax((1−β) log q + β log p)` and
    /// `h = log w`, the integrand `f = E_π[h]` has
    /// `∇θ f = E_π[∇θ log p · (1 + β (h − f))]` and
    /// `∇φ f = E_π[∇φ log q · (−1 + (1 − β)(h − f))]`.
    pub fn tvo_gradient_exact(&self, data: &[BinaryDatum], partition: &[f64]) -> Result<Vec<f64>> {
        validate_partition(partition)?;
        if data.is_empty() {
            return Err(Error::invalid("gradient needs at least one datum"));
        }
        let (k, dd) = (self.latent_bits(), self.observed_bits());
        let states = self.state_terms();
        let n_states = states.len();
        let prior_probs: Vec<f64> = self.prior_logits.iter().map(|&l| sigmoid(l)).collect();
        let knots: Vec<(f64, f64)> = partition
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[0], w[1] - w[0]))
            .collect();

        let off_dw = k;
        let off_db = k + k * dd;
        let off_ew = self.n_theta();
        let off_eb = off_ew + dd * k;
        let mut grad = vec![0.0; self.n_params()];
        let mut log_q = vec![0.0; n_states];
        let mut h = vec![0.0; n_states];
        let mut a = vec![0.0; n_states];
        let mut cp_total = vec![0.0; n_states];

        for x in data {
            self.check_datum(x)?;
            let nu = self.encoder_logits(x);
            let nu_sp: f64 = nu.iter().map(|&n| softplus(n)).sum();
            let q_probs: Vec<f64> = nu.iter().map(|&n| sigmoid(n)).collect();
            for (s, st) in states.iter().enumerate() {
                log_q[s] = Self::log_q_bits(&nu, nu_sp, &st.bits);
                h[s] = st.log_prior + Self::log_lik(st, x) - log_q[s];
            }
            let mut cp = vec![0.0; n_states];
            let mut cq = vec![0.0; n_states];
            for &(beta, width) in &knots {
                for s in 0..n_states {
                    a[s] = log_q[s] + beta * h[s];
                }
                let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut pis: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = pis.iter().sum();
                pis.iter_mut().for_each(|p| *p /= z);
                let f: f64 = pis.iter().zip(&h).map(|(p, hv)| p * hv).sum();
                for s in 0..n_states {
                    let dev = h[s] - f;
                    cp[s] += width * pis[s] * (1.0 + beta * dev);
                    cq[s] += width * pis[s] * (-1.0 + (1.0 - beta) * dev);
                }
            }
            // Per-datum sums over states; the pixel-probability part of the
            // decoder gradient only depends on the state, so it is folded in
            // once through `cp_total` after the data loop.
            let mut u = vec![0.0; k];
            let mut v = vec![0.0; k];
            let (mut tot_p, mut tot_q) = (0.0, 0.0);
            for (s, st) in states.iter().enumerate() {
                tot_p += cp[s];
                tot_q += cq[s];
                cp_total[s] += cp[s];
                for j in 0..k {
                    u[j] += cp[s] * st.bits[j];
                    v[j] += cq[s] * st.bits[j];
                }
            }
            for j in 0..k {
                grad[j] += u[j] - tot_p * prior_probs[j];
                let r = v[j] - tot_q * q_probs[j];
                grad[off_eb + j] += r;
                for d in 0..dd {
                    if x[d] == 1 {
                        grad[off_dw + j * dd + d] += u[j];
                        grad[off_ew + d * k + j] += r;
                    }
                }
            }
            for d in 0..dd {
                if x[d] == 1 {
                    grad[off_db + d] += tot_p;
                }
            }
        }
        for (s, st) in states.iter().enumerate() {
            let c = cp_total[s];
            if c == 0.0 {
                continue;
            }
            for d in 0..dd {
                let r = c * st.pixel_probs[d];
                grad[off_db + d] -= r;
                for j in 0..k {
                    if st.bits[j] == 1.0 {
                        grad[off_dw + j * dd + d] -= r;
                    }
                }
            }
        }
        let n = data.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(grad)
    }
}

impl EnumerableModel for BernoulliLatentModel {
    type Datum = BinaryDatum;

    fn latent_states(&self) -> usize {
        1 << self.latent_bits()
    }

    fn enumerate_latents(&self, data: &[BinaryDatum]) -> Result<LogWeightBatch> {
        self.validate()?;
        let states = self.state_terms();
        let mut log_w = Vec::with_capacity(data.len());
        let mut log_q = Vec::with_capacity(data.len());
        for x in data {
            self.check_datum(x)?;
            let nu = self.encoder_logits(x);
            let nu_sp: f64 = nu.iter().map(|&n| softplus(n)).sum();
            let q: Vec<f64> = states.iter().map(|st| Self::log_q_bits(&nu, nu_sp, &st.bits)).collect();
            let w: Vec<f64> = states
                .iter()
                .zip(&q)
                .map(|(st, lq)| st.log_prior + Self::log_lik(st, x) - lq)
                .collect();
            log_w.push(w);
            log_q.push(q);
        }
        LogWeightBatch::enumerated(log_w, log_q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tvo::{enumerated_log_evidence, exact_log_evidence, tvo_lower};

    fn model(k: usize, d: usize, seed: u64) -> BernoulliLatentModel {
        BernoulliLatentModel::random(k, d, 1.0, seed).unwrap()
    }

    /// Hand-rolled brute force: log Σ_z p(z) p(x|z) by direct products.
    fn brute_force_log_evidence(m: &BernoulliLatentModel, x: &[u8]) -> f64 {
        let k = m.latent_bits();
        let terms: Vec<f64> = (0..1usize << k).map(|mask| m.log_joint(x, mask).unwrap()).collect();
        let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
    }

    #[test]
    fn one_bit_two_term_sum() {
        // p(z=1)=0.5; p(x=1|z) = 0.2 / 0.6
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let m = BernoulliLatentModel {
            prior_logits: vec![0.0],
            decoder_weights: vec![vec![logit(0.6) - logit(0.2)]],
            decoder_bias: vec![logit(0.2)],
            encoder_weights: vec![vec![0.3]],
            encoder_bias: vec![-0.1],
        };
        let v = exact_log_evidence(&m, &vec![1]).unwrap();
        assert!((v - 0.4f64.ln()).abs() < 1e-14);
        assert_eq!(m.enumerate_latents(&[vec![1]]).unwrap().samples(), 2);
    }

    #[test]
    fn deterministic_likelihood_gives_zero() {
        let m = BernoulliLatentModel {
            prior_logits: vec![0.3, -1.2],
            decoder_weights: vec![vec![0.0], vec![0.0]],
            decoder_bias: vec![800.0],
            encoder_weights: vec![vec![0.1, 0.2]],
            encoder_bias: vec![0.0, 0.0],
        };
        assert!(exact_log_evidence(&m, &vec![1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn evidence_matches_brute_force() {
        for seed in 0..5 {
            let m = model(8, 6, seed);
            let data = m.sample_data(3, seed + 100);
            let fast = enumerated_log_evidence(&m.enumerate_latents(&data).unwrap()).unwrap();
            for (x, v) in data.iter().zip(fast) {
                assert!((v - brute_force_log_evidence(&m, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn q_masses_normalized_and_recombine() {
        let m = model(5, 4, 2);
        let data = m.sample_data(4, 1);
        let b = m.enumerate_latents(&data).unwrap();
        let crate::tvo::Provenance::Enumerated { log_q } = b.provenance() else {
            unreachable!()
        };
        for (i, (q, w)) in log_q.iter().zip(b.log_w()).enumerate() {
            let mass: f64 = q.iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            let recombined: f64 = q.iter().zip(w).map(|(a, b)| (a + b).exp()).sum();
            assert!((recombined.ln() - brute_force_log_evidence(&m, &data[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn capacity_limits() {
        assert!(matches!(
            BernoulliLatentModel::random(13, 4, 1.0, 0),
            Err(Error::Capacity { .. })
        ));
        assert!(matches!(
            BernoulliLatentModel::random(2, 17, 1.0, 0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn sampling_reproducible_and_finite() {
        let m = model(4, 6, 9);
        let data = m.sample_data(2, 3);
        let a = m.sample_latents(&data, 50, 17).unwrap();
        let b = m.sample_latents(&data, 50, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.log_w().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn evidence_ignores_encoder() {
        let mut m = model(6, 5, 4);
        let data = m.sample_data(5, 2);
        let before = m.log_evidence(&data).unwrap();
        m.encoder_weights[1][2] += 3.0;
        m.encoder_bias[0] -= 1.5;
        assert!((m.log_evidence(&data).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn params_round_trip() {
        let m = model(3, 4, 1);
        let mut m2 = model(3, 4, 2);
        m2.set_params(&m.params()).unwrap();
        assert_eq!(m, m2);
        assert!(m2.set_params(&[0.0; 3]).is_err());
    }

    fn fd_check(m: &BernoulliLatentModel, data: &[BinaryDatum], partition: &[f64]) {
        let g = m.tvo_gradient_exact(data, partition).unwrap();
        let p0 = m.params();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut mp = m.clone();
            let mut pp = p0.clone();
            pp[i] += h;
            mp.set_params(&pp).unwrap();
            let up = tvo_lower(&mp.enumerate_latents(data).unwrap(), partition).unwrap();
            pp[i] -= 2.0 * h;
            mp.set_params(&pp).unwrap();
            let dn = tvo_lower(&mp.enumerate_latents(data).unwrap(), partition).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(g[i].abs()).max(1e-3);
            assert!((fd - g[i]).abs() <= tol, "param {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let m = model(4, 6, 20 + seed);
            let data = m.sample_data(3, seed);
            fd_check(&m, &data, &[0.0, 0.2, 0.55, 1.0]);
            fd_check(&m, &data, &[0.0, 1.0]);
        }
    }

    #[test]
    fn zero_width_interval_adds_nothing() {
        let m = model(3, 4, 5);
        let data = m.sample_data(2, 1);
        let a = m.tvo_gradient_exact(&data, &[0.0, 0.4, 1.0]).unwrap();
        let b = m.tvo_gradient_exact(&data, &[0.0, 0.4, 0.4, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradient_vanishes_at_exact_posterior() {
        // zero decoder weights make the posterior equal the (factorized) prior;
        // an encoder matching the prior is then exact.
        let mut m = model(3, 4, 8);
        m.decoder_weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        m.encoder_weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        m.encoder_bias = m.prior_logits.clone();
        let data = m.sample_data(4, 3);
        let g = m.tvo_gradient_exact(&data, &[0.0, 1.0]).unwrap();
        assert!(g[m.n_theta()..].iter().all(|v| v.abs() < 1e-12));
    }
}
