//! Experiment configuration: JSON schema, defaults and field-level validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tvo_gpbandit::acquisition::AcquisitionConfig;
use tvo_gpbandit::bandit::{BanditConfig, BaselineKind, RewardEstimator, WindowPolicy};
use tvo_gpbandit::regret::{GridSpec, ObjectiveSpec, Policy, RegretLabConfig};
use tvo_gpbandit::KernelHyperparams;

use crate::error::{CliError, FieldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TvoTrain,
    RegretLab,
    BoundCheck,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    GpBandit,
    Linear,
    Log,
    Moments,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Exact,
    Snis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub latent: usize,
    pub observed: usize,
    pub n_data: usize,
    /// Scale of the N(0, scale²) initial parameters.
    pub init_scale: f64,
    /// Seed of the generated dataset; defaults to the run seed.
    pub data_seed: Option<u64>,
    /// Fixture JSON (ground truth plus data), relative to the config file.
    pub fixture: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            latent: 8,
            observed: 12,
            n_data: 64,
            init_scale: 0.1,
            data_seed: None,
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretSpec {
    pub grid_dim: usize,
    pub per_axis: usize,
    pub omega: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub rounds: usize,
    pub policies: Vec<Policy>,
}

impl Default for RegretSpec {
    fn default() -> Self {
        RegretSpec {
            grid_dim: 1,
            per_axis: 64,
            omega: 0.01,
            lengthscale: 0.1,
            noise_variance: 0.01,
            rounds: 100,
            policies: Policy::ALL.to_vec(),
        }
    }
}

impl RegretSpec {
    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            grid: GridSpec {
                dim: self.grid_dim,
                per_axis: self.per_axis,
            },
            omega: self.omega,
            lengthscale: self.lengthscale,
            noise_variance: self.noise_variance,
            rounds: self.rounds,
        }
    }

    pub fn hyperparams(&self) -> KernelHyperparams {
        KernelHyperparams {
            lengthscale: self.lengthscale,
            omega: self.omega,
            noise_variance: self.noise_variance,
            permutation_invariant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Toggle the sorted projection in the GP.
    pub permutation_invariance: bool,
    /// Toggle exact versus SNIS rewards.
    pub reward_estimator: bool,
    /// Extra κ overrides to compare against the closed form.
    pub kappa_override: Vec<f64>,
    /// Table rows; defaults to the top-level `d`.
    pub d_values: Vec<usize>,
    /// Table columns (epoch budgets); defaults to `epochs`.
    pub budgets: Vec<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            permutation_invariance: true,
            reward_estimator: false,
            kappa_override: Vec::new(),
            d_values: Vec::new(),
            budgets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub scheduler: SchedulerKind,
    /// Number of Riemann terms.
    pub d: usize,
    pub reward: RewardKind,
    /// SNIS samples per datum (S).
    pub samples: usize,
    pub epochs: usize,
    pub window: WindowPolicy,
    pub acquisition: AcquisitionConfig,
    pub learning_rate: f64,
    pub permutation_invariant: bool,
    pub log_beta1: f64,
    pub moments_refresh: usize,
    pub regret: RegretSpec,
    pub ablation: AblationSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::TvoTrain,
            model: ModelSpec::default(),
            scheduler: SchedulerKind::GpBandit,
            d: 5,
            reward: RewardKind::Exact,
            samples: 50,
            epochs: 600,
            window: WindowPolicy::default(),
            acquisition: AcquisitionConfig::default(),
            learning_rate: 0.01,
            permutation_invariant: true,
            log_beta1: 0.025,
            moments_refresh: 100,
            regret: RegretSpec::default(),
            ablation: AblationSpec::default(),
            seeds: Vec::new(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Read and parse; call [`ExperimentConfig::validate`] afterwards. A
    /// relative fixture path is resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(vec![FieldError::new(
                "<file>",
                format!("cannot read {}: {e}", path.display()),
            )])
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(f) = &cfg.model.fixture {
            if f.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.model.fixture = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    /// Parse without validating; errors name the offending JSON path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let field = if field == "." { "<root>".to_string() } else { field };
            CliError::Config(vec![FieldError::new(field, e.into_inner().to_string())])
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, msg: String| errs.push(FieldError::new(field, msg));
        if self.seeds.is_empty() {
            bad("seeds", "must list at least one seed".into());
        }
        if self.d == 0 {
            bad("d", "must be at least 1".into());
        }
        if self.scheduler == SchedulerKind::GpBandit && self.d < 2 && self.uses_training() {
            bad("d", "gp-bandit needs d >= 2 so that one knot is free".into());
        }
        if self.uses_training() {
            if let Err(e) = self.window.validate() {
                bad("window", e.to_string());
            }
            if self.epochs < self.window.min_window() {
                bad(
                    "epochs",
                    format!("must be at least the initial window ({})", self.window.min_window()),
                );
            }
            if !(self.learning_rate >= 0.0) {
                bad("learning_rate", "must be nonnegative".into());
            }
            if self.reward == RewardKind::Snis && self.samples == 0 {
                bad("samples", "SNIS rewards need at least one sample".into());
            }
            if !(self.log_beta1 > 0.0 && self.log_beta1 < 1.0) {
                bad("log_beta1", "must lie in (0, 1)".into());
            }
            if self.moments_refresh == 0 {
                bad("moments_refresh", "must be at least 1".into());
            }
            let m = &self.model;
            match &m.fixture {
                Some(f) if !f.is_file() => bad("model.fixture", format!("file {} does not exist", f.display())),
                Some(_) => {}
                None => {
                    if !(1..=12).contains(&m.latent) {
                        bad("model.latent", "must be in 1..=12".into());
                    }
                    if !(1..=16).contains(&m.observed) {
                        bad("model.observed", "must be in 1..=16".into());
                    }
                    if !(1..=64).contains(&m.n_data) {
                        bad("model.n_data", "must be in 1..=64".into());
                    }
                }
            }
            if !(m.init_scale >= 0.0 && m.init_scale.is_finite()) {
                bad("model.init_scale", "must be finite and nonnegative".into());
            }
        }
        if let Err(e) = self.acquisition.validate() {
            bad("acquisition", e.to_string());
        }
        if matches!(self.kind, ExperimentKind::RegretLab | ExperimentKind::BoundCheck) {
            let r = &self.regret;
            if !(1..=2).contains(&r.grid_dim) {
                bad("regret.grid_dim", "must be 1 or 2".into());
            }
            if r.per_axis == 0 || r.per_axis.saturating_pow(r.grid_dim as u32) > 256 {
                bad("regret.per_axis", "grid must have between 1 and 256 arms".into());
            }
            if r.rounds == 0 {
                bad("regret.rounds", "must be at least 1".into());
            }
            if !(0.0..=1.0).contains(&r.omega) {
                bad("regret.omega", "must lie in [0, 1]".into());
            }
            if !(r.lengthscale > 0.0) {
                bad("regret.lengthscale", "must be positive".into());
            }
            if !(r.noise_variance > 0.0) {
                bad("regret.noise_variance", "must be positive".into());
            }
            if r.policies.is_empty() {
                bad("regret.policies", "must name at least one policy".into());
            }
        }
        if self.kind == ExperimentKind::Ablation {
            if self.scheduler != SchedulerKind::GpBandit {
                bad("scheduler", "ablation needs the gp-bandit scheduler".into());
            }
            if self.ablation.d_values.contains(&0) || self.ablation.d_values.contains(&1) {
                bad("ablation.d_values", "every d must be at least 2".into());
            }
            if self.ablation.budgets.iter().any(|&b| b == 0 || b > self.epochs) {
                bad("ablation.budgets", format!("budgets must lie in 1..={}", self.epochs));
            }
            if self.ablation.kappa_override.iter().any(|k| !(*k >= 0.0)) {
                bad("ablation.kappa_override", "overrides must be nonnegative".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    fn uses_training(&self) -> bool {
        matches!(self.kind, ExperimentKind::TvoTrain | ExperimentKind::Ablation)
    }

    pub fn bandit_config(&self) -> BanditConfig {
        BanditConfig {
            terms: self.d,
            window: self.window,
            acquisition: self.acquisition,
            learning_rate: self.learning_rate,
            reward: self.reward_estimator(self.reward),
            permutation_invariant: self.permutation_invariant,
            ..Default::default()
        }
    }

    pub fn reward_estimator(&self, kind: RewardKind) -> RewardEstimator {
        match kind {
            RewardKind::Exact => RewardEstimator::Exact,
            RewardKind::Snis => RewardEstimator::Snis {
                samples: self.samples,
                terms: 50,
            },
        }
    }

    /// `None` for the bandit.
    pub fn baseline(&self) -> Option<BaselineKind> {
        match self.scheduler {
            SchedulerKind::GpBandit => None,
            SchedulerKind::Linear => Some(BaselineKind::Linear),
            SchedulerKind::Log => Some(BaselineKind::Log { beta1: self.log_beta1 }),
            SchedulerKind::Moments => Some(BaselineKind::Moments {
                refresh: self.moments_refresh,
            }),
            SchedulerKind::Random => Some(BaselineKind::Random),
        }
    }

    pub fn regret_lab(&self) -> RegretLabConfig {
        RegretLabConfig {
            acquisition: self.acquisition,
        }
    }
}
