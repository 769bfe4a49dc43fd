//! The training loop: interleave TVO training epochs with schedule updates.
//!
//! Epochs are grouped into windows. When a window closes, its reward is the
//! change in the log-evidence estimate across the window, attributed to the
//! schedule that was active during it. The GP bandit then refits its
//! surrogate and picks the schedule for the next window. Baseline runs go
//! through the same loop with a static or periodically refreshed schedule,
//! so their traces line up field for field.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{kappa, maximize_acquisition, AcquisitionConfig, MaximizeOptions};
use crate::error::{Error, Result};
use crate::gp::{FitOptions, GpState, HyperBounds};
use crate::kernel::{KernelHyperparams, Point};
use crate::models::{train_step, Adam, BernoulliLatentModel, BinaryDatum};
use crate::schedule::{linear_schedule, log_schedule, random_schedule_with, Bounds, Schedule};
use crate::tvo::{moments_schedule, tvo_lower, EnumerableModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowPolicy {
    pub initial_w: usize,
    /// Grow the window by one after this many rounds; 0 disables growth.
    pub grow_every: usize,
    /// Close the window early when the per-epoch change in the estimate
    /// drops to or below this many nats.
    pub early_update_threshold: Option<f64>,
    /// Constant window, overriding `initial_w` and growth.
    pub fixed_w: Option<usize>,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy {
            initial_w: 6,
            grow_every: 10,
            early_update_threshold: Some(-0.05),
            fixed_w: None,
        }
    }
}

impl WindowPolicy {
    pub fn fixed(w: usize) -> Self {
        WindowPolicy {
            initial_w: w,
            grow_every: 0,
            early_update_threshold: None,
            fixed_w: Some(w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_w == 0 || self.fixed_w == Some(0) {
            return Err(Error::invalid("window length must be at least 1"));
        }
        Ok(())
    }

    /// Window length after `rounds_done` completed rounds.
    pub fn window(&self, rounds_done: usize) -> usize {
        match self.fixed_w {
            Some(w) => w,
            None if self.grow_every == 0 => self.initial_w,
            None => self.initial_w + rounds_done / self.grow_every,
        }
    }

    pub fn min_window(&self) -> usize {
        self.fixed_w.unwrap_or(self.initial_w)
    }
}

/// How the per-epoch evidence estimate `L` is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardEstimator {
    /// Exact log evidence by enumeration.
    #[default]
    Exact,
    /// SNIS left Riemann sum on a linear schedule.
    Snis { samples: usize, terms: usize },
}

impl RewardEstimator {
    pub fn estimate(&self, model: &BernoulliLatentModel, data: &[BinaryDatum], seed: u64) -> Result<f64> {
        match *self {
            RewardEstimator::Exact => model.log_evidence(data),
            RewardEstimator::Snis { samples, terms } => {
                let batch = model.sample_latents(data, samples, seed)?;
                tvo_lower(&batch, &linear_schedule(terms)?.partition())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditConfig {
    /// Number of Riemann terms; the bandit arm has `terms − 1` free knots.
    pub terms: usize,
    pub window: WindowPolicy,
    pub acquisition: AcquisitionConfig,
    pub learning_rate: f64,
    pub reward: RewardEstimator,
    pub permutation_invariant: bool,
    pub hyper_bounds: HyperBounds,
    pub initial_hyperparams: KernelHyperparams,
    pub arm_bounds: Bounds,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            terms: 5,
            window: WindowPolicy::default(),
            acquisition: AcquisitionConfig::default(),
            learning_rate: 1e-3,
            reward: RewardEstimator::Exact,
            permutation_invariant: true,
            hyper_bounds: HyperBounds::default(),
            initial_hyperparams: KernelHyperparams::default(),
            arm_bounds: Bounds::ARM_BOX,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.terms == 0 {
            return Err(Error::invalid("terms must be at least 1"));
        }
        self.window.validate()?;
        self.acquisition.validate()?;
        self.initial_hyperparams.validate()?;
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be nonnegative"));
        }
        if let RewardEstimator::Snis { samples, terms } = self.reward {
            if samples == 0 || terms == 0 {
                return Err(Error::invalid("SNIS reward needs samples >= 1 and terms >= 1"));
            }
        }
        Bounds::new(self.arm_bounds.lo, self.arm_bounds.hi)?;
        Ok(())
    }
}

/// Static or periodically refreshed schedules for the comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineKind {
    Linear,
    Log {
        beta1: f64,
    },
    /// Recomputed from the current model every `refresh` epochs.
    Moments {
        refresh: usize,
    },
    /// A fresh uniform draw on the arm box whenever a window closes.
    Random,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Linear => "linear",
            BaselineKind::Log { .. } => "log",
            BaselineKind::Moments { .. } => "moments",
            BaselineKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Round whose window contains this epoch (1-based).
    pub round: usize,
    pub partition: Vec<f64>,
    /// Reward-side estimate `L_i`.
    pub estimate: f64,
    pub exact_log_evidence: f64,
    /// TVO lower bound that was ascended in this epoch (before the step).
    pub objective: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Epoch at which the window closed.
    pub epoch: usize,
    pub window: usize,
    /// Arm that was active during the window.
    pub beta: Vec<f64>,
    pub raw_reward: f64,
    pub standardized_reward: f64,
    pub l_start: f64,
    pub l_end: f64,
    pub early: bool,
    pub kappa: Option<f64>,
    pub hyperparams: Option<KernelHyperparams>,
    /// Set when GP fitting or acquisition failed and the previous arm was kept.
    pub selection_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTrace {
    pub method: String,
    pub seed: u64,
    pub initial_estimate: f64,
    pub initial_exact: f64,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    /// Observations in the bandit's GP at the end of the run (0 for baselines).
    pub gp_history: usize,
    pub elapsed_seconds: f64,
}

impl BanditTrace {
    pub fn final_estimate(&self) -> f64 {
        self.epochs.last().map_or(self.initial_estimate, |e| e.estimate)
    }

    pub fn final_exact(&self) -> f64 {
        self.epochs.last().map_or(self.initial_exact, |e| e.exact_log_evidence)
    }

    pub fn total_reward(&self) -> f64 {
        self.rounds.iter().map(|r| r.raw_reward).sum()
    }

    /// `|Σ y − (L_T − L_0)|`.
    pub fn telescoping_gap(&self) -> f64 {
        (self.total_reward() - (self.final_estimate() - self.initial_estimate)).abs()
    }

    pub fn write_epoch_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_epoch_table(&[self], out)
    }

    pub fn write_round_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_round_table(&[self], out)
    }
}

/// One row per epoch across several traces, with a single header.
pub fn write_epoch_table<W: std::io::Write>(traces: &[&BanditTrace], out: W) -> Result<()> {
    let rows = traces.iter().flat_map(|t| {
        t.epochs.iter().map(move |e| EpochRow {
            method: &t.method,
            seed: t.seed,
            epoch: e.epoch,
            round: e.round,
            partition: join(&e.partition),
            estimate: e.estimate,
            exact_log_evidence: e.exact_log_evidence,
            objective: e.objective,
            skipped: e.skipped,
        })
    });
    write_csv(rows, out)
}

/// One row per bandit round across several traces, with a single header.
pub fn write_round_table<W: std::io::Write>(traces: &[&BanditTrace], out: W) -> Result<()> {
    let rows = traces.iter().flat_map(|t| {
        t.rounds.iter().map(move |r| RoundRow {
            method: &t.method,
            seed: t.seed,
            round: r.round,
            epoch: r.epoch,
            window: r.window,
            beta: join(&r.beta),
            raw_reward: r.raw_reward,
            standardized_reward: r.standardized_reward,
            l_start: r.l_start,
            l_end: r.l_end,
            early: r.early,
            kappa: r.kappa,
            lengthscale: r.hyperparams.map(|h| h.lengthscale),
            omega: r.hyperparams.map(|h| h.omega),
            noise_variance: r.hyperparams.map(|h| h.noise_variance),
        })
    });
    write_csv(rows, out)
}

#[derive(Serialize)]
struct EpochRow<'a> {
    method: &'a str,
    seed: u64,
    epoch: usize,
    round: usize,
    partition: String,
    estimate: f64,
    exact_log_evidence: f64,
    objective: f64,
    skipped: bool,
}

#[derive(Serialize)]
struct RoundRow<'a> {
    method: &'a str,
    seed: u64,
    round: usize,
    epoch: usize,
    window: usize,
    beta: String,
    raw_reward: f64,
    standardized_reward: f64,
    l_start: f64,
    l_end: f64,
    early: bool,
    kappa: Option<f64>,
    lengthscale: Option<f64>,
    omega: Option<f64>,
    noise_variance: Option<f64>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub(crate) fn write_csv<W: std::io::Write, T: Serialize>(rows: impl IntoIterator<Item = T>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

/// `(y − mean) / (std + 1e-8)` with population statistics over `history`
/// extended by `new`.
pub fn standardize_reward(history: &[f64], new: f64) -> f64 {
    let n = history.len() as f64 + 1.0;
    let mean = (history.iter().sum::<f64>() + new) / n;
    let var = (history.iter().map(|y| (y - mean).powi(2)).sum::<f64>() + (new - mean).powi(2)) / n;
    (new - mean) / (var.sqrt() + 1e-8)
}

fn standardize_all(ys: &[f64]) -> Vec<f64> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    ys.iter().map(|y| (y - mean) / (sd + 1e-8)).collect()
}

enum Scheduler {
    Bandit(Box<BanditState>),
    Static,
    Moments { refresh: usize },
    Random(Box<ChaCha8Rng>),
}

struct BanditState {
    gp: GpState,
    raw_rewards: Vec<f64>,
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A run that stopped on an error, with whatever trace was recorded so far
/// (`None` when it failed before the first epoch).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct Interrupted {
    pub error: Error,
    pub trace: Option<Box<BanditTrace>>,
}

impl From<Error> for Interrupted {
    fn from(error: Error) -> Self {
        Interrupted { error, trace: None }
    }
}

/// GP-bandit run over `epochs` training epochs.
pub fn run_bandit(
    model: &BernoulliLatentModel,
    data: &[BinaryDatum],
    epochs: usize,
    cfg: &BanditConfig,
    seed: u64,
) -> Result<BanditTrace> {
    run_bandit_traced(model, data, epochs, cfg, seed).map_err(|i| i.error)
}

/// Like [`run_bandit`], but a failure carries the partial trace.
pub fn run_bandit_traced(
    model: &BernoulliLatentModel,
    data: &[BinaryDatum],
    epochs: usize,
    cfg: &BanditConfig,
    seed: u64,
) -> std::result::Result<BanditTrace, Interrupted> {
    cfg.validate()?;
    if cfg.terms < 2 {
        return Err(Error::invalid("the bandit needs terms >= 2 so that at least one knot is free").into());
    }
    let mut hyp = cfg.initial_hyperparams;
    hyp.permutation_invariant = cfg.permutation_invariant;
    let state = BanditState {
        gp: GpState::new(hyp)?,
        raw_rewards: Vec::new(),
    };
    let method = if cfg.permutation_invariant {
        "gp-bandit"
    } else {
        "gp-bandit-noninvariant"
    };
    run_loop(
        model,
        data,
        epochs,
        cfg,
        seed,
        Scheduler::Bandit(Box::new(state)),
        linear_schedule(cfg.terms)?,
        method,
    )
}

/// Baseline run with the same loop and trace layout as [`run_bandit`].
pub fn run_baseline(
    model: &BernoulliLatentModel,
    data: &[BinaryDatum],
    epochs: usize,
    kind: BaselineKind,
    cfg: &BanditConfig,
    seed: u64,
) -> Result<BanditTrace> {
    run_baseline_traced(model, data, epochs, kind, cfg, seed).map_err(|i| i.error)
}

/// Like [`run_baseline`], but a failure carries the partial trace.
pub fn run_baseline_traced(
    model: &BernoulliLatentModel,
    data: &[BinaryDatum],
    epochs: usize,
    kind: BaselineKind,
    cfg: &BanditConfig,
    seed: u64,
) -> std::result::Result<BanditTrace, Interrupted> {
    cfg.validate()?;
    let (sched, initial) = match kind {
        BaselineKind::Linear => (Scheduler::Static, linear_schedule(cfg.terms)?),
        BaselineKind::Log { beta1 } => (Scheduler::Static, log_schedule(cfg.terms, beta1)?),
        BaselineKind::Moments { refresh } => {
            if refresh == 0 {
                return Err(Error::invalid("moments refresh period must be at least 1").into());
            }
            let s = moments_schedule(&model.enumerate_latents(data)?, cfg.terms)?;
            (Scheduler::Moments { refresh }, s)
        }
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 7, 0));
            let s = random_arm(cfg, &mut rng)?;
            (Scheduler::Random(Box::new(rng)), s)
        }
    };
    run_loop(model, data, epochs, cfg, seed, sched, initial, kind.name())
}

fn random_arm(cfg: &BanditConfig, rng: &mut ChaCha8Rng) -> Result<Schedule> {
    if cfg.terms < 2 {
        return Ok(Schedule::elbo());
    }
    random_schedule_with(cfg.terms - 1, cfg.arm_bounds, rng)
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    model: &BernoulliLatentModel,
    data: &[BinaryDatum],
    epochs: usize,
    cfg: &BanditConfig,
    seed: u64,
    mut scheduler: Scheduler,
    initial: Schedule,
    method: &str,
) -> std::result::Result<BanditTrace, Interrupted> {
    if epochs < cfg.window.min_window() {
        return Err(Error::invalid(format!(
            "epochs ({epochs}) must be at least the initial window ({})",
            cfg.window.min_window()
        ))
        .into());
    }
    if data.is_empty() {
        return Err(Error::invalid("training data is empty").into());
    }
    let started = Instant::now();
    let mut model = model.clone();
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let arm_dim = cfg.terms.saturating_sub(1);

    // `arm` is what the GP sees; `schedule` is its sorted evaluation form.
    let mut arm: Vec<f64> = initial.interior().to_vec();
    let mut schedule = initial;

    let estimate =
        |m: &BernoulliLatentModel, epoch: usize| cfg.reward.estimate(m, data, mix_seed(seed, 1, epoch as u64));
    let initial_estimate = estimate(&model, 0)?;
    let initial_exact = model.log_evidence(data)?;

    let mut trace = BanditTrace {
        method: method.to_string(),
        seed,
        initial_estimate,
        initial_exact,
        epochs: Vec::with_capacity(epochs),
        rounds: Vec::new(),
        gp_history: 0,
        elapsed_seconds: 0.0,
    };

    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    trace.elapsed_seconds = started.elapsed().as_secs_f64();
                    return Err(Interrupted {
                        error,
                        trace: Some(Box::new(trace)),
                    });
                }
            }
        };
    }

    let mut prev_l = initial_estimate;
    let mut window_start_l = initial_estimate;
    let mut window_start_epoch = 0usize;

    for epoch in 1..=epochs {
        let round = trace.rounds.len() + 1;
        let partition = schedule.partition();
        let (objective, skipped, exact_after) = match train_step(&mut model, &mut adam, data, &partition) {
            Ok(o) => (o.objective, o.skipped, Some(o.log_evidence)),
            Err(e) => {
                log::warn!("epoch {epoch}: training step failed: {e}");
                (f64::NAN, true, None)
            }
        };
        let l = match (cfg.reward, exact_after) {
            (RewardEstimator::Exact, Some(v)) => v,
            _ => bail!(estimate(&model, epoch)),
        };
        let exact = match exact_after {
            Some(v) => v,
            None => bail!(model.log_evidence(data)),
        };
        trace.epochs.push(EpochRecord {
            epoch,
            round,
            partition,
            estimate: l,
            exact_log_evidence: exact,
            objective,
            skipped,
        });

        if let Scheduler::Moments { refresh } = scheduler {
            if epoch % refresh == 0 && epoch < epochs {
                match model
                    .enumerate_latents(data)
                    .and_then(|b| moments_schedule(&b, cfg.terms))
                {
                    Ok(s) => {
                        arm = s.interior().to_vec();
                        schedule = s;
                    }
                    Err(e) => log::warn!("epoch {epoch}: moments refresh failed: {e}"),
                }
            }
        }

        let w = cfg.window.window(trace.rounds.len());
        let len = epoch - window_start_epoch;
        let early = cfg.window.early_update_threshold.is_some_and(|thr| l - prev_l <= thr) && len < w;
        prev_l = l;
        if !(len >= w || early || epoch == epochs) {
            continue;
        }

        let raw = l - window_start_l;
        let mut record = RoundRecord {
            round,
            epoch,
            window: len,
            beta: arm.clone(),
            raw_reward: raw,
            standardized_reward: 0.0,
            l_start: window_start_l,
            l_end: l,
            early,
            kappa: None,
            hyperparams: None,
            selection_failed: false,
        };

        match &mut scheduler {
            Scheduler::Bandit(st) => {
                record.standardized_reward = standardize_reward(&st.raw_rewards, raw);
                st.raw_rewards.push(raw);
                match bandit_select(st, cfg, &arm, round, arm_dim, seed) {
                    Ok((next, k)) => {
                        record.kappa = Some(k);
                        record.hyperparams = Some(*st.gp.hyperparams());
                        schedule = bail!(Schedule::project(&next, cfg.arm_bounds));
                        arm = next;
                    }
                    Err(e) => {
                        log::warn!("round {round}: selection failed, keeping previous arm: {e}");
                        record.hyperparams = Some(*st.gp.hyperparams());
                        record.selection_failed = true;
                    }
                }
            }
            Scheduler::Random(rng) => {
                let hist: Vec<f64> = trace.rounds.iter().map(|r| r.raw_reward).collect();
                record.standardized_reward = standardize_reward(&hist, raw);
                schedule = bail!(random_arm(cfg, rng));
                arm = schedule.interior().to_vec();
            }
            Scheduler::Static | Scheduler::Moments { .. } => {
                let hist: Vec<f64> = trace.rounds.iter().map(|r| r.raw_reward).collect();
                record.standardized_reward = standardize_reward(&hist, raw);
            }
        }
        trace.rounds.push(record);
        window_start_l = l;
        window_start_epoch = epoch;
    }
    if let Scheduler::Bandit(st) = &scheduler {
        trace.gp_history = st.gp.len();
    }
    trace.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// Augment the history with the just-closed window, refit, and maximize the UCB.
fn bandit_select(
    st: &mut BanditState,
    cfg: &BanditConfig,
    arm: &[f64],
    round: usize,
    arm_dim: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    st.gp.push(Point::new(arm.to_vec(), round), 0.0)?;
    st.gp.set_targets(standardize_all(&st.raw_rewards))?;
    if st.gp.len() >= 2 {
        let fitted = st.gp.fit_map(&FitOptions {
            bounds: cfg.hyper_bounds,
            random_starts: 2,
            max_iters: 100,
            seed: mix_seed(seed, 2, round as u64),
        });
        st.gp.set_hyperparams(fitted)?;
    }
    let mut acq = cfg.acquisition;
    acq.dim = arm_dim;
    let k = kappa(round, &acq)?;
    let best = maximize_acquisition(
        &st.gp,
        round + 1,
        k,
        arm_dim,
        cfg.arm_bounds,
        Some(arm),
        MaximizeOptions::from(&acq),
        mix_seed(seed, 3, round as u64),
    )?;
    Ok((best.beta, k))
}
