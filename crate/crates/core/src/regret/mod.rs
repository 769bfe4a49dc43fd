//! Regret lab: synthetic time-varying objectives on a finite grid, regret
//! accounting, information gain and a numeric check of the block bound on
//! the time-varying information gain.

mod info_gain;
mod objective;
mod policies;

pub use info_gain::{bound_report, information_gain, BlockBound, BoundReport};
pub use objective::{
    cumulative_regret, regret_from_indices, sample_tv_objective, GridSpec, ObjectiveSpec, SyntheticTVObjective,
};
pub use policies::{
    compare_on_fresh_objectives, compare_policies, Policy, PolicyCurve, RegretLabConfig, RegretSummary,
};
