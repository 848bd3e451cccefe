//! Experiment configuration and orchestration: training runs with periodic
//! greedy evaluation, sweeps over `G`, `N` or the attacker count, per-slot
//! heatmaps, and the CSV / JSON files they produce.
//!
//! Runs execute in parallel but every file is written once, after all
//! records are collected in a fixed order, so outputs are byte-identical for
//! identical inputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{build_agent, evaluate, AgentConfig, AgentError, Algorithm, Policy, TrainStats, RETURN_TOL};
use crate::channel::{ChannelError, LinkGeometry, RadioParams};
use crate::env::{CovertEnv, EnvError, EpisodeConfig, EpisodeMetrics, Scenario};
use crate::neural::{Checkpoint, NeuralError};
use crate::seeding::{derive_seed, stream};
use crate::semcore::{SemError, SemanticScene};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Semantic(#[from] SemError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("episode {episode}: summed reward {summed} differs from closed-form return {closed}")]
    ReturnMismatch { episode: usize, summed: f64, closed: f64 },
}

fn config_err(path: &str, message: impl fmt::Display) -> HarnessError {
    HarnessError::Config { path: path.into(), message: message.to_string() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticSection {
    /// Number of triples `K` in the synthetic scene.
    pub triples: usize,
    pub dim: usize,
    pub seed: u64,
    pub key_count: usize,
    /// Scene JSON file used instead of the synthetic scene.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_file: Option<PathBuf>,
}

impl Default for SemanticSection {
    fn default() -> Self {
        Self { triples: 8, dim: 16, seed: 0, key_count: 1, embedding_file: None }
    }
}

impl SemanticSection {
    pub fn scene(&self) -> Result<SemanticScene, SemError> {
        match &self.embedding_file {
            Some(path) => SemanticScene::load(path),
            None => SemanticScene::synthetic(self.triples, self.dim, self.seed, self.key_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Training seeds; one run per seed.
    pub seeds: Vec<u64>,
    /// Greedy evaluation episodes per evaluation point.
    pub eval_episodes: usize,
    /// Iterations between evaluations. The last iteration is always evaluated.
    pub eval_interval: usize,
    /// Master seed of the evaluation and heatmap episodes, shared by all runs.
    pub eval_seed: u64,
    pub heatmap_episodes: usize,
    /// Smallest accepted `heatmap_episodes`.
    pub heatmap_floor: usize,
    /// Trailing evaluation points averaged into the final statistics.
    pub final_window: usize,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            eval_episodes: 100,
            eval_interval: 1,
            eval_seed: 12345,
            heatmap_episodes: 1000,
            heatmap_floor: 100,
            final_window: 10,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// One experiment. Every field has a default, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub semantic: SemanticSection,
    pub geometry: LinkGeometry,
    pub radio: RadioParams,
    pub episode: EpisodeConfig,
    pub agent: AgentConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Errors name the offending field.
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self =
            serde_path_to_error::deserialize(&mut de).map_err(|e| config_err(&e.path().to_string(), e.inner()))?;
        de.end().map_err(|e| config_err(".", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.agent.validate().map_err(|e| config_err("agent", e))?;
        if self.agent.iterations == 0 {
            return Err(config_err("agent.iterations", "must be >= 1"));
        }
        let run = &self.run;
        for (name, v) in [
            ("run.eval_episodes", run.eval_episodes),
            ("run.eval_interval", run.eval_interval),
            ("run.final_window", run.final_window),
        ] {
            if v == 0 {
                return Err(config_err(name, "must be >= 1"));
            }
        }
        if run.seeds.is_empty() {
            return Err(config_err("run.seeds", "at least one seed is required"));
        }
        if run.heatmap_episodes < run.heatmap_floor.max(1) {
            return Err(config_err(
                "run.heatmap_episodes",
                format!("{} is below the floor of {}", run.heatmap_episodes, run.heatmap_floor.max(1)),
            ));
        }
        self.scenario().map(|_| ())
    }

    pub fn scenario(&self) -> Result<Arc<Scenario>, HarnessError> {
        let scene = self.semantic.scene().map_err(|e| config_err("semantic", e))?;
        let scenario = Scenario::new(scene, self.geometry, self.radio, self.episode.clone()).map_err(|e| match e {
            EnvError::Channel(ChannelError::Geometry(m)) => config_err("geometry", m),
            EnvError::Channel(ChannelError::Radio(m)) => config_err("radio", m),
            EnvError::Channel(ChannelError::Detector(m)) => config_err("episode.attackers", m),
            other => config_err("episode", other),
        })?;
        Ok(Arc::new(scenario))
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        episode_seeds(self.run.eval_seed, stream::EVAL_EPISODES, self.run.eval_episodes)
    }

    pub fn heatmap_seeds(&self) -> Vec<u64> {
        episode_seeds(self.run.eval_seed, stream::HEATMAP_EPISODES, self.run.heatmap_episodes)
    }
}

fn episode_seeds(master: u64, label: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(master, &[label, i])).collect()
}

/// Aggregate of a batch of greedy evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub e_user: f64,
    pub e_attacker: f64,
    /// Share of episodes that ended with `E_A <= gamma`.
    pub private_prob: f64,
    /// Mean share of triples delivered, in percent.
    pub delivery_pct: f64,
    /// Per slot: share of episodes that transmitted.
    pub transmit_freq: Vec<f64>,
    /// Per slot: share of episodes in which some attacker monitored.
    pub detect_freq: Vec<f64>,
    /// Per slot: share of episodes in which some radiometer fired.
    pub alarm_freq: Vec<f64>,
}

impl EvalSummary {
    /// Summarizes finished episodes, rejecting any whose summed rewards do
    /// not reproduce the closed-form return.
    pub fn from_episodes(metrics: &[EpisodeMetrics]) -> Result<Self, HarnessError> {
        let Some(first) = metrics.first() else {
            return Err(config_err("run.eval_episodes", "no episodes to summarize"));
        };
        for (episode, m) in metrics.iter().enumerate() {
            if (m.episode_return - m.closed_form_return).abs() > RETURN_TOL {
                return Err(HarnessError::ReturnMismatch {
                    episode,
                    summed: m.episode_return,
                    closed: m.closed_form_return,
                });
            }
        }
        let n = metrics.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
        let per_slot = |f: &dyn Fn(&EpisodeMetrics) -> &[bool]| -> Vec<f64> {
            (0..first.transmit_slots.len()).map(|s| metrics.iter().filter(|m| f(m)[s]).count() as f64 / n).collect()
        };
        Ok(Self {
            episodes: metrics.len(),
            mean_return: mean(&|m| m.episode_return),
            e_user: mean(&|m| m.e_user),
            e_attacker: mean(&|m| m.e_attacker),
            private_prob: metrics.iter().filter(|m| m.private).count() as f64 / n,
            delivery_pct: 100.0 * mean(&|m| m.delivery_frac),
            transmit_freq: per_slot(&|m| &m.transmit_slots),
            detect_freq: per_slot(&|m| &m.monitored_slots),
            alarm_freq: per_slot(&|m| &m.detected_slots),
        })
    }

    /// Field-wise mean of several summaries.
    pub fn average(items: &[&EvalSummary]) -> Option<Self> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mean = |f: &dyn Fn(&EvalSummary) -> f64| items.iter().map(|s| f(s)).sum::<f64>() / n;
        let vec_mean = |f: &dyn Fn(&EvalSummary) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len()).map(|i| items.iter().map(|s| f(s)[i]).sum::<f64>() / n).collect()
        };
        Some(Self {
            episodes: items.iter().map(|s| s.episodes).sum(),
            mean_return: mean(&|s| s.mean_return),
            e_user: mean(&|s| s.e_user),
            e_attacker: mean(&|s| s.e_attacker),
            private_prob: mean(&|s| s.private_prob),
            delivery_pct: mean(&|s| s.delivery_pct),
            transmit_freq: vec_mean(&|s| &s.transmit_freq),
            detect_freq: vec_mean(&|s| &s.detect_freq),
            alarm_freq: vec_mean(&|s| &s.alarm_freq),
        })
    }
}

/// One training iteration: statistics of the exploratory episodes and, when
/// the iteration was evaluated, the greedy mean return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub eval_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub curve: Vec<CurveRow>,
    pub evals: Vec<EvalPoint>,
    pub stats: TrainStats,
    /// Constraint violations found in evaluation episodes.
    pub eval_violations: usize,
    /// Set when training stopped on non-finite values.
    pub diverged: Option<String>,
}

impl RunRecord {
    pub fn eval_returns(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.summary.mean_return).collect()
    }

    /// Mean of the last `window` evaluation summaries.
    pub fn final_eval(&self, window: usize) -> Option<EvalSummary> {
        let tail: Vec<&EvalSummary> = self.evals.iter().rev().take(window.max(1)).map(|e| &e.summary).collect();
        EvalSummary::average(&tail)
    }

    pub fn last_eval(&self) -> Option<&EvalSummary> {
        self.evals.last().map(|e| &e.summary)
    }

    /// Total constraint violations over training and evaluation episodes.
    pub fn violations(&self) -> u64 {
        self.stats.constraint_violations + self.eval_violations as u64
    }
}

/// Index of the first evaluation point whose return reaches
/// `final - tolerance * |final|`, where `final` is the mean of the last
/// `window` points.
pub fn convergence_point(returns: &[f64], window: usize, tolerance: f64) -> Option<usize> {
    let window = window.clamp(1, returns.len().max(1));
    let tail = returns.get(returns.len().checked_sub(window)?..)?;
    let final_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let threshold = final_mean - tolerance * final_mean.abs();
    returns.iter().position(|&r| r >= threshold)
}

/// Greedy evaluation of `policy` on the configured evaluation episodes.
pub fn evaluate_policy<P: Policy + ?Sized>(
    scenario: &Arc<Scenario>,
    policy: &P,
    seeds: &[u64],
) -> Result<(EvalSummary, usize), HarnessError> {
    let metrics = evaluate(scenario, policy, seeds)?;
    let violations = metrics.iter().map(|m| m.audit(scenario).total()).sum();
    Ok((EvalSummary::from_episodes(&metrics)?, violations))
}

/// Trains `algorithm` with one seed, evaluating the greedy policy every
/// `run.eval_interval` iterations. The random algorithm does not learn; its
/// iterations only roll out episodes.
pub fn run_train(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
) -> Result<(RunRecord, Checkpoint), HarnessError> {
    let scenario = config.scenario()?;
    let mut agent = build_agent(algorithm, &scenario, &config.agent, seed)?;
    let mut env = CovertEnv::new(Arc::clone(&scenario));
    let eval_seeds = config.eval_seeds();
    let iterations = config.agent.iterations;
    let mut record = RunRecord {
        algorithm,
        seed,
        curve: Vec::with_capacity(iterations),
        evals: Vec::new(),
        stats: TrainStats::default(),
        eval_violations: 0,
        diverged: None,
    };
    for iteration in 1..=iterations {
        let stats = match agent.run_iteration(&mut env) {
            Ok(s) => s,
            Err(AgentError::Diverged(msg)) => {
                record.diverged = Some(format!("iteration {iteration}: {msg}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let eval_return = if iteration % config.run.eval_interval == 0 || iteration == iterations {
            let (summary, violations) = evaluate_policy(&scenario, agent.as_ref(), &eval_seeds)?;
            record.eval_violations += violations;
            let r = summary.mean_return;
            record.evals.push(EvalPoint { iteration, summary });
            Some(r)
        } else {
            None
        };
        record.curve.push(CurveRow { iteration, mean_return: stats.mean(), std_return: stats.std(), eval_return });
    }
    record.stats = agent.stats().clone();
    Ok((record, agent.checkpoint()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Monitoring budget `G`.
    #[serde(rename = "G")]
    MonitorBudget,
    /// Slot count `N`.
    #[serde(rename = "N")]
    Slots,
    /// Number of attackers: the first `v` configured attackers, padded with
    /// copies of the last one.
    #[serde(rename = "attackers")]
    Attackers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::MonitorBudget => "G",
            Self::Slots => "N",
            Self::Attackers => "attackers",
        }
    }

    /// `base` with the axis set to `value`, validated.
    pub fn apply(self, base: &ExperimentConfig, value: usize) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = base.clone();
        match self {
            Self::MonitorBudget => cfg.episode.monitor_budget = value,
            Self::Slots => cfg.episode.slots = value,
            Self::Attackers => {
                if value == 0 {
                    return Err(config_err("episode.attackers", "at least one attacker is required"));
                }
                let list = &base.episode.attackers;
                let last = list.last().ok_or_else(|| config_err("episode.attackers", "no attacker configured"))?;
                cfg.episode.attackers = (0..value).map(|i| list.get(i).unwrap_or(last).clone()).collect();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "G" | "g" => Ok(Self::MonitorBudget),
            "N" | "n" => Ok(Self::Slots),
            "attackers" => Ok(Self::Attackers),
            other => Err(format!("unknown sweep axis `{other}` (expected G, N or attackers)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub axis_value: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PointRun {
    pub axis_value: Option<usize>,
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// All runs of one `train` or `sweep` invocation.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub algorithm: Algorithm,
    pub axis: Option<SweepAxis>,
    pub runs: Vec<PointRun>,
    pub skipped: Vec<SkippedPoint>,
}

/// Trains `algorithm` once per configured seed.
pub fn train_all(config: &ExperimentConfig, algorithm: Algorithm) -> Result<Experiment, HarnessError> {
    let runs = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let (record, checkpoint) = run_train(config, algorithm, seed)?;
            Ok(PointRun { axis_value: None, record, checkpoint })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Experiment { config: config.clone(), algorithm, axis: None, runs, skipped: Vec::new() })
}

/// Trains and evaluates `algorithm` at every axis value and seed. Infeasible
/// values are skipped with their reason. All points of a seed share its
/// training and evaluation streams, so differences between values are not
/// blurred by independent noise.
pub fn run_sweep(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    axis: SweepAxis,
    values: &[usize],
) -> Result<Experiment, HarnessError> {
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for &value in values {
        match axis.apply(config, value) {
            Ok(cfg) => jobs.extend(config.run.seeds.iter().map(|&seed| (value, cfg.clone(), seed))),
            Err(e) => skipped.push(SkippedPoint { axis_value: value, reason: e.to_string() }),
        }
    }
    let runs = jobs
        .par_iter()
        .map(|(value, cfg, seed)| {
            let (record, checkpoint) = run_train(cfg, algorithm, *seed)?;
            Ok(PointRun { axis_value: Some(*value), record, checkpoint })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Experiment { config: config.clone(), algorithm, axis: Some(axis), runs, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub slot: usize,
    pub detect_freq: f64,
    pub transmit_freq: f64,
    /// `|detect_freq - (1 - transmit_freq)|`
    pub abs_diff: f64,
}

pub fn heatmap_rows(summary: &EvalSummary) -> Vec<HeatmapRow> {
    summary
        .detect_freq
        .iter()
        .zip(&summary.transmit_freq)
        .enumerate()
        .map(|(slot, (&d, &t))| HeatmapRow { slot, detect_freq: d, transmit_freq: t, abs_diff: (d - (1.0 - t)).abs() })
        .collect()
}

/// Runs `run.heatmap_episodes` greedy episodes and writes `heatmap.csv`
/// into `out_dir`.
pub fn emit_slot_heatmap<P: Policy + ?Sized>(
    config: &ExperimentConfig,
    policy: &P,
    out_dir: &Path,
) -> Result<Vec<HeatmapRow>, HarnessError> {
    let scenario = config.scenario()?;
    let (summary, _) = evaluate_policy(&scenario, policy, &config.heatmap_seeds())?;
    let rows = heatmap_rows(&summary);
    write_csv(&out_dir.join("heatmap.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, median: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self { mean, std, median: median(values) }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, Serialize)]
struct CurveCsvRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    axis_value: Option<usize>,
    iteration: usize,
    seed: u64,
    algorithm: Algorithm,
    mean_return: f64,
    std_return: f64,
    eval_return: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct MetricsCsvRow {
    axis_value: Option<usize>,
    seed: u64,
    algorithm: Algorithm,
    #[serde(rename = "E_U")]
    e_user: f64,
    #[serde(rename = "E_A")]
    e_attacker: f64,
    private_prob: f64,
    delivery_pct: f64,
    mean_return: f64,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    axis_value: Option<usize>,
    seed: u64,
    #[serde(rename = "final")]
    final_eval: Option<EvalSummary>,
    convergence_point: Option<usize>,
    stats: TrainStats,
    eval_violations: usize,
    diverged: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct AggregateRow {
    axis_value: Option<usize>,
    runs: usize,
    mean_return: Stat,
    e_user: Stat,
    e_attacker: Stat,
    private_prob: Stat,
    delivery_pct: Stat,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    algorithm: Algorithm,
    axis: Option<SweepAxis>,
    config: &'a ExperimentConfig,
    aggregate: Vec<AggregateRow>,
    runs: Vec<RunSummary>,
    skipped: &'a [SkippedPoint],
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

impl Experiment {
    /// Runs that stopped on divergence, as `(seed, message)`.
    pub fn divergences(&self) -> Vec<(u64, &str)> {
        self.runs.iter().filter_map(|r| r.record.diverged.as_deref().map(|m| (r.record.seed, m))).collect()
    }

    /// Writes `curve.csv`, `metrics.csv`, `summary.json` and one checkpoint
    /// per run under `ckpt/`.
    pub fn write(&self, out_dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let curve: Vec<CurveCsvRow> = self
            .runs
            .iter()
            .flat_map(|p| {
                p.record.curve.iter().map(move |c| CurveCsvRow {
                    axis_value: p.axis_value,
                    iteration: c.iteration,
                    seed: p.record.seed,
                    algorithm: p.record.algorithm,
                    mean_return: c.mean_return,
                    std_return: c.std_return,
                    eval_return: c.eval_return,
                })
            })
            .collect();
        write_csv(&out_dir.join("curve.csv"), &curve)?;

        let metrics: Vec<MetricsCsvRow> = self
            .runs
            .iter()
            .filter_map(|p| {
                p.record.last_eval().map(|s| MetricsCsvRow {
                    axis_value: p.axis_value,
                    seed: p.record.seed,
                    algorithm: p.record.algorithm,
                    e_user: s.e_user,
                    e_attacker: s.e_attacker,
                    private_prob: s.private_prob,
                    delivery_pct: s.delivery_pct,
                    mean_return: s.mean_return,
                })
            })
            .collect();
        write_csv(&out_dir.join("metrics.csv"), &metrics)?;

        let window = self.config.run.final_window;
        let runs: Vec<RunSummary> = self
            .runs
            .iter()
            .map(|p| RunSummary {
                axis_value: p.axis_value,
                seed: p.record.seed,
                final_eval: p.record.final_eval(window),
                convergence_point: convergence_point(&p.record.eval_returns(), window, 0.05),
                stats: p.record.stats.clone(),
                eval_violations: p.record.eval_violations,
                diverged: p.record.diverged.clone(),
            })
            .collect();
        let summary = Summary {
            algorithm: self.algorithm,
            axis: self.axis,
            config: &self.config,
            aggregate: self.aggregate(&runs),
            runs,
            skipped: &self.skipped,
        };
        let path = out_dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&path))?;

        for p in &self.runs {
            let name = match p.axis_value {
                Some(v) => format!(
                    "{}-{}{}-seed{}.json",
                    self.algorithm,
                    self.axis.map_or("", SweepAxis::name),
                    v,
                    p.record.seed
                ),
                None => format!("{}-seed{}.json", self.algorithm, p.record.seed),
            };
            p.checkpoint.save(&out_dir.join("ckpt").join(name))?;
        }
        Ok(())
    }

    fn aggregate(&self, runs: &[RunSummary]) -> Vec<AggregateRow> {
        let mut values: Vec<Option<usize>> = runs.iter().map(|r| r.axis_value).collect();
        values.dedup();
        values
            .into_iter()
            .map(|v| {
                let finals: Vec<&EvalSummary> =
                    runs.iter().filter(|r| r.axis_value == v).filter_map(|r| r.final_eval.as_ref()).collect();
                let stat = |f: fn(&EvalSummary) -> f64| Stat::of(&finals.iter().map(|s| f(s)).collect::<Vec<_>>());
                AggregateRow {
                    axis_value: v,
                    runs: finals.len(),
                    mean_return: stat(|s| s.mean_return),
                    e_user: stat(|s| s.e_user),
                    e_attacker: stat(|s| s.e_attacker),
                    private_prob: stat(|s| s.private_prob),
                    delivery_pct: stat(|s| s.delivery_pct),
                }
            })
            .collect()
    }
}

/// Greedy evaluation of a saved policy; writes `metrics.csv` and
/// `summary.json` into `out_dir`.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    out_dir: &Path,
) -> Result<EvalSummary, HarnessError> {
    let scenario = config.scenario()?;
    let policy = crate::agents::policy_from_checkpoint(checkpoint, &scenario)?;
    let (summary, violations) = evaluate_policy(&scenario, policy.as_ref(), &config.eval_seeds())?;
    let algorithm: Algorithm = checkpoint.algorithm.parse().map_err(|e| config_err("checkpoint.algorithm", e))?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let row = MetricsCsvRow {
        axis_value: None,
        seed: config.run.eval_seed,
        algorithm,
        e_user: summary.e_user,
        e_attacker: summary.e_attacker,
        private_prob: summary.private_prob,
        delivery_pct: summary.delivery_pct,
        mean_return: summary.mean_return,
    };
    write_csv(&out_dir.join("metrics.csv"), &[row])?;
    #[derive(Serialize)]
    struct EvalOutput<'a> {
        algorithm: Algorithm,
        config: &'a ExperimentConfig,
        eval: &'a EvalSummary,
        constraint_violations: usize,
    }
    let out = EvalOutput { algorithm, config, eval: &summary, constraint_violations: violations };
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&out)? + "\n").map_err(io_err(&path))?;
    Ok(summary)
}
