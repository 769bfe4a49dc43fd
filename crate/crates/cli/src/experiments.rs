//! Experiment drivers. Each seed runs on the worker pool and writes its own
//! files; one aggregation pass on the calling thread writes the shared tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use tvo_gpbandit::bandit::{run_bandit_traced, run_baseline_traced, write_epoch_table, BanditConfig, BanditTrace};
use tvo_gpbandit::models::{BernoulliLatentModel, BinaryDatum, Fixture};
use tvo_gpbandit::regret::{bound_report, compare_on_fresh_objectives, compare_policies, sample_tv_objective};
use tvo_gpbandit::regret::{BoundReport, Policy, RegretSummary};
use tvo_gpbandit::Error as CoreError;

use crate::config::{ExperimentConfig, ExperimentKind, RewardKind};
use crate::error::{CliError, FieldError};
use crate::svg::{line_chart, Series};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub seed_override: Option<Vec<u64>>,
    /// Force the ablation driver regardless of `kind`.
    pub ablate: bool,
}

/// Load, apply overrides, then validate.
pub fn prepare(path: &Path, opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seeds) = &opts.seed_override {
        cfg.seeds = seeds.clone();
    }
    if opts.ablate {
        cfg.kind = ExperimentKind::Ablation;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths written by a successful run, relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

pub fn run(cfg: &ExperimentConfig, jobs: usize) -> Result<Artifacts, CliError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(vec![FieldError::new("--jobs", e.to_string())]))?;
    let mut art = Artifacts::default();
    write_json(&out.join("resolved_config.json"), cfg)?;
    art.files.push("resolved_config.json".into());
    pool.install(|| match cfg.kind {
        ExperimentKind::TvoTrain => tvo_train(cfg, &mut art),
        ExperimentKind::RegretLab => regret_lab(cfg, &mut art),
        ExperimentKind::BoundCheck => bound_check(cfg, &mut art),
        ExperimentKind::Ablation => ablation(cfg, &mut art),
    })?;
    Ok(art)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_with<F, E>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    E: std::fmt::Display,
{
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header row from the field names, LF line endings.
fn write_csv_table<R: Serialize>(
    rows: impl IntoIterator<Item = R>,
    out: &mut BufWriter<File>,
) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.flush()?)
}

/// First error in seed order wins, so the exit status does not depend on scheduling.
fn first_error<T>(results: Vec<Result<T, CliError>>) -> Result<Vec<T>, CliError> {
    results.into_iter().collect()
}

struct Problem {
    data: Vec<BinaryDatum>,
    init: BernoulliLatentModel,
}

fn problem(cfg: &ExperimentConfig, seed: u64) -> Result<Problem, CliError> {
    let m = &cfg.model;
    let fixture = match &m.fixture {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<Fixture>(&text).map_err(|e| {
                CliError::Config(vec![FieldError::new(
                    "model.fixture",
                    format!("{}: {e}", path.display()),
                )])
            })?
        }
        None => Fixture::generate(m.latent, m.observed, m.n_data, m.data_seed.unwrap_or(seed))
            .map_err(|e| CliError::from_core(seed, &e))?,
    };
    let (k, d) = (fixture.truth.latent_bits(), fixture.truth.observed_bits());
    let init = BernoulliLatentModel::random(k, d, m.init_scale, seed ^ 0x1A17_0000_0000_0001)
        .map_err(|e| CliError::from_core(seed, &e))?;
    Ok(Problem {
        data: fixture.data,
        init,
    })
}

/// Train one seed. A numeric failure still writes the partial trace.
fn train(cfg: &ExperimentConfig, bandit: &BanditConfig, seed: u64, trace_path: &Path) -> Result<BanditTrace, CliError> {
    let p = problem(cfg, seed)?;
    let result = match cfg.baseline() {
        None => run_bandit_traced(&p.init, &p.data, cfg.epochs, bandit, seed),
        Some(kind) => run_baseline_traced(&p.init, &p.data, cfg.epochs, kind, bandit, seed),
    };
    match result {
        Ok(trace) => {
            write_json(trace_path, &trace)?;
            Ok(trace)
        }
        Err(interrupted) => {
            if let Some(partial) = &interrupted.trace {
                write_json(trace_path, partial.as_ref())?;
            }
            log::error!("seed {seed} stopped: {}", interrupted.error);
            Err(CliError::from_core(seed, &interrupted.error))
        }
    }
}

fn evidence_series(label: String, t: &BanditTrace) -> Series {
    let mut points = vec![(0.0, t.initial_exact)];
    points.extend(t.epochs.iter().map(|e| (e.epoch as f64, e.exact_log_evidence)));
    Series { label, points }
}

fn tvo_train(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let bandit = cfg.bandit_config();
    let results: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let name = format!("trace_seed{s}.json");
            train(cfg, &bandit, s, &out.join(&name)).map(|t| (name, t))
        })
        .collect();
    let runs = first_error(results)?;
    let traces: Vec<&BanditTrace> = runs.iter().map(|(_, t)| t).collect();
    art.files.extend(runs.iter().map(|(n, _)| PathBuf::from(n)));

    write_with(&out.join("aggregate.csv"), |w| write_epoch_table(&traces, w))?;
    art.files.push("aggregate.csv".into());

    let series: Vec<Series> = traces
        .iter()
        .map(|t| evidence_series(format!("{} seed {}", t.method, t.seed), t))
        .collect();
    write_text(
        &out.join("evidence.svg"),
        &line_chart("Exact log evidence", "epoch", "log p(x)", &series),
    )?;
    art.files.push("evidence.svg".into());
    Ok(())
}

fn regret_lab(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let spec = cfg.regret.objective();
    let lab = cfg.regret_lab();
    let results: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let summary = compare_on_fresh_objectives(&spec, &cfg.regret.policies, &[s], &lab)
                .map_err(|e| CliError::from_core(s, &e))?;
            let name = format!("regret_seed{s}.json");
            write_json(&out.join(&name), &summary)?;
            Ok((name, summary))
        })
        .collect();
    let runs = first_error(results)?;
    art.files.extend(runs.iter().map(|(n, _)| PathBuf::from(n)));
    let all = RegretSummary {
        curves: runs.into_iter().flat_map(|(_, s)| s.curves).collect(),
    };
    write_with(&out.join("aggregate.csv"), |w| all.write_csv(w))?;
    art.files.push("aggregate.csv".into());

    let series: Vec<Series> = all
        .mean_curves()
        .into_iter()
        .map(|(p, c)| Series {
            label: p.name().to_string(),
            points: c.iter().enumerate().map(|(i, &r)| ((i + 1) as f64, r)).collect(),
        })
        .collect();
    write_text(
        &out.join("regret.svg"),
        &line_chart("Mean cumulative regret", "round", "regret", &series),
    )?;
    art.files.push("regret.svg".into());
    Ok(())
}

fn bound_check(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let spec = cfg.regret.objective();
    let hyp = cfg.regret.hyperparams();
    let lab = cfg.regret_lab();
    let mut acq = cfg.acquisition;
    acq.dim = cfg.regret.grid_dim;
    let results: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let core = |e: CoreError| CliError::from_core(s, &e);
            let obj = sample_tv_objective(&spec, s).map_err(core)?;
            let pulls = compare_policies(&obj, &[Policy::GpUcb], &[s], &lab).map_err(core)?;
            let arms: Vec<Vec<f64>> = pulls.curves[0].arms.iter().map(|&a| obj.arms[a].clone()).collect();
            let report = bound_report(&arms, &hyp, &acq).map_err(core)?;
            let name = format!("bound_seed{s}.json");
            write_json(&out.join(&name), &report)?;
            Ok((s, name, report))
        })
        .collect();
    let runs = first_error(results)?;
    art.files.extend(runs.iter().map(|(_, n, _)| PathBuf::from(n)));

    #[derive(Serialize)]
    struct Row {
        seed: u64,
        rounds: usize,
        gamma: f64,
        min_rhs: f64,
        argmin_n_tilde: usize,
        violated: bool,
        tightening_holds: bool,
        c1: f64,
        kappa: Option<f64>,
        regret_bound: Option<f64>,
    }
    let rows = runs.iter().map(|(s, _, r): &(u64, String, BoundReport)| Row {
        seed: *s,
        rounds: r.rounds,
        gamma: r.gamma,
        min_rhs: r.min_rhs,
        argmin_n_tilde: r.argmin_n_tilde,
        violated: r.violated,
        tightening_holds: r.tightening_holds,
        c1: r.c1,
        kappa: r.kappa,
        regret_bound: r.regret_bound,
    });
    write_with(&out.join("aggregate.csv"), |w| write_csv_table(rows, w))?;
    art.files.push("aggregate.csv".into());

    let series: Vec<Series> = runs
        .iter()
        .map(|(s, _, r)| Series {
            label: format!("seed {s} (gain {:.2})", r.gamma),
            points: r.blocks.iter().map(|b| (b.n_tilde as f64, b.rhs)).collect(),
        })
        .collect();
    write_text(
        &out.join("bounds.svg"),
        &line_chart("Block bound on the information gain", "block size", "bound", &series),
    )?;
    art.files.push("bounds.svg".into());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Variant {
    invariant: bool,
    reward: RewardKind,
    kappa: Option<f64>,
}

impl Variant {
    fn name(&self) -> String {
        let inv = if self.invariant { "invariant" } else { "noninvariant" };
        let rew = match self.reward {
            RewardKind::Exact => "exact",
            RewardKind::Snis => "snis",
        };
        let kap = match self.kappa {
            None => "theory".to_string(),
            Some(k) => format!("{k}"),
        };
        format!("{inv}_{rew}_kappa-{kap}")
    }
}

fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let a = &cfg.ablation;
    let inv = if a.permutation_invariance {
        vec![true, false]
    } else {
        vec![cfg.permutation_invariant]
    };
    let rew = if a.reward_estimator {
        vec![RewardKind::Exact, RewardKind::Snis]
    } else {
        vec![cfg.reward]
    };
    let mut kap = vec![cfg.acquisition.kappa_override];
    kap.extend(a.kappa_override.iter().map(|&k| Some(k)));
    kap.dedup();
    let mut out = Vec::new();
    for &invariant in &inv {
        for &reward in &rew {
            for &kappa in &kap {
                out.push(Variant {
                    invariant,
                    reward,
                    kappa,
                });
            }
        }
    }
    out
}

fn ablation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let ds = if cfg.ablation.d_values.is_empty() {
        vec![cfg.d]
    } else {
        cfg.ablation.d_values.clone()
    };
    let budgets = if cfg.ablation.budgets.is_empty() {
        vec![cfg.epochs]
    } else {
        cfg.ablation.budgets.clone()
    };
    let mut tasks = Vec::new();
    for v in variants(cfg) {
        for &d in &ds {
            for &s in &cfg.seeds {
                tasks.push((v, d, s));
            }
        }
    }
    let results: Vec<_> = tasks
        .par_iter()
        .map(|&(v, d, s)| {
            let mut b = cfg.bandit_config();
            b.terms = d;
            b.permutation_invariant = v.invariant;
            b.reward = cfg.reward_estimator(v.reward);
            b.acquisition.kappa_override = v.kappa;
            let name = format!("ablation_{}_d{d}_seed{s}.json", v.name());
            train(cfg, &b, s, &out.join(&name)).map(|t| (v, d, name, t))
        })
        .collect();
    let runs = first_error(results)?;
    art.files.extend(runs.iter().map(|(_, _, n, _)| PathBuf::from(n)));

    let at = |t: &BanditTrace, b: usize| t.epochs[b - 1].exact_log_evidence;

    #[derive(Serialize)]
    struct RunRow {
        variant: String,
        invariant: bool,
        reward: &'static str,
        kappa: String,
        d: usize,
        seed: u64,
        budget: usize,
        exact_log_evidence: f64,
        estimate: f64,
        total_reward: f64,
    }
    let mut rows = Vec::new();
    for (v, d, _, t) in &runs {
        for &b in &budgets {
            rows.push(RunRow {
                variant: v.name(),
                invariant: v.invariant,
                reward: match v.reward {
                    RewardKind::Exact => "exact",
                    RewardKind::Snis => "snis",
                },
                kappa: v.kappa.map_or("theory".into(), |k| format!("{k}")),
                d: *d,
                seed: t.seed,
                budget: b,
                exact_log_evidence: at(t, b),
                estimate: t.epochs[b - 1].estimate,
                total_reward: t.total_reward(),
            });
        }
    }
    write_with(&out.join("ablation_runs.csv"), |w| write_csv_table(rows, w))?;
    art.files.push("ablation_runs.csv".into());

    // Rows (variant, d), one column per budget, mean over seeds.
    let mut groups: BTreeMap<(usize, usize), Vec<&BanditTrace>> = BTreeMap::new();
    let vlist = variants(cfg);
    for (v, d, _, t) in &runs {
        let vi = vlist.iter().position(|x| x == v).expect("variant from the same list");
        let di = ds.iter().position(|x| x == d).expect("d from the same list");
        groups.entry((vi, di)).or_default().push(t);
    }
    let path = out.join("ablation_table.csv");
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    let mut header = vec!["variant".to_string(), "d".to_string()];
    header.extend(budgets.iter().map(|b| format!("T={b}")));
    w.write_record(&header).map_err(|e| CliError::io(&path, e))?;
    let mut series = Vec::new();
    for ((vi, di), ts) in &groups {
        let mut rec = vec![vlist[*vi].name(), ds[*di].to_string()];
        for &b in &budgets {
            let m = ts.iter().map(|t| at(t, b)).sum::<f64>() / ts.len() as f64;
            rec.push(format!("{m}"));
        }
        w.write_record(&rec).map_err(|e| CliError::io(&path, e))?;
        let n = ts[0].epochs.len();
        let points = (0..n)
            .map(|i| {
                let m = ts.iter().map(|t| t.epochs[i].exact_log_evidence).sum::<f64>() / ts.len() as f64;
                ((i + 1) as f64, m)
            })
            .collect();
        series.push(Series {
            label: format!("{} d={}", vlist[*vi].name(), ds[*di]),
            points,
        });
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    art.files.push("ablation_table.csv".into());

    write_text(
        &out.join("ablation.svg"),
        &line_chart("Ablation: mean exact log evidence", "epoch", "log p(x)", &series),
    )?;
    art.files.push("ablation.svg".into());
    Ok(())
}
