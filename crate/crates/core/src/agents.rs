//! Learning agents and the action encoding they share.
//!
//! The actor-critic family (PS-TD3, plain TD3, DDPG) emits a vector in
//! `[-1, 1]^(K+2)`: one score per triple, one IDLE score and one power
//! coordinate. [`encode_action`] turns it into an environment command. DQN
//! picks from `(K+1) x L` discrete (selection, power level) pairs. The random
//! policy is the comparison floor.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionCommand, CovertEnv, EnvError, EpisodeMetrics, Scenario, Selection};
use crate::neural::{soft_update, Activation, Adam, Checkpoint, DenseNet, NeuralError};
use crate::replay::{PrioritizedBuffer, ReplayBuffer, ReplayError, SampleIndex, Transition, UniformBuffer};
use crate::seeding::{derive_seed, rng_from, stream, Rng};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("no legal action in mask {0:?}")]
    NoLegalAction(Vec<bool>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "ps-td3")]
    PsTd3,
    #[serde(rename = "td3")]
    Td3,
    #[serde(rename = "ddpg")]
    Ddpg,
    #[serde(rename = "dqn")]
    Dqn,
    #[serde(rename = "random")]
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::PsTd3, Self::Td3, Self::Ddpg, Self::Dqn, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::PsTd3 => "ps-td3",
            Self::Td3 => "td3",
            Self::Ddpg => "ddpg",
            Self::Dqn => "dqn",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}; expected one of ps-td3, td3, ddpg, dqn, random"))
    }
}

/// Hyperparameters for every algorithm. Fields irrelevant to an algorithm
/// are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Algorithm a harness run uses when the caller names none.
    pub algorithm: Algorithm,
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub policy_delay: usize,
    pub explore_noise_std: f64,
    pub explore_noise_clip: f64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    /// Priority exponent; 0 disables prioritization.
    pub alpha: f64,
    pub buffer_capacity: usize,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub updates_per_iteration: usize,
    /// Recompute priorities of sampled transitions after each critic update.
    pub refresh_priorities: bool,
    /// Act with the target actor during exploration instead of the online one.
    pub explore_with_target: bool,
    pub dqn_levels: usize,
    pub lr_dqn: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_decay_steps: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::PsTd3,
            hidden: vec![64, 64],
            tau: 0.005,
            policy_delay: 2,
            explore_noise_std: 0.2,
            explore_noise_clip: 0.5,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            lr_actor: 1e-5,
            lr_critic: 3e-4,
            batch_size: 64,
            alpha: 2.0,
            buffer_capacity: 10_000,
            iterations: 100,
            episodes_per_iteration: 5,
            updates_per_iteration: 60,
            refresh_priorities: true,
            explore_with_target: true,
            dqn_levels: 10,
            lr_dqn: 3e-4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 3000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau = {} must lie in (0, 1]", self.tau));
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be >= 1".into());
        }
        for (name, v) in
            [("explore_noise_clip", self.explore_noise_clip), ("target_noise_clip", self.target_noise_clip)]
        {
            if v.is_nan() || v <= 0.0 {
                return bad(format!("{name} = {v} must be > 0"));
            }
        }
        for (name, v) in [("explore_noise_std", self.explore_noise_std), ("target_noise_std", self.target_noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        for (name, v) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_dqn", self.lr_dqn)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be finite and >= 0", self.alpha));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.dqn_levels == 0 {
            return bad("batch_size, buffer_capacity and dqn_levels must be positive".into());
        }
        if self.episodes_per_iteration == 0 {
            return bad("episodes_per_iteration must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(&self.hidden);
        dims.push(output);
        dims
    }
}

/// Maps an actor vector to a command: argmax over legal entries of the
/// `K + 1` scores (lowest index wins ties) and power `(c + 1) / 2 * p_max`
/// from the last coordinate `c`. IDLE always carries zero power.
pub fn encode_action(actor_out: &[f64], mask: &[bool], p_max: f64) -> Result<ActionCommand, AgentError> {
    let selections = mask.len();
    if actor_out.len() != selections + 1 {
        return Err(AgentError::Config(format!(
            "actor output has {} entries, expected {}",
            actor_out.len(),
            selections + 1
        )));
    }
    let best = argmax_legal(&actor_out[..selections], mask).ok_or_else(|| AgentError::NoLegalAction(mask.to_vec()))?;
    if best == selections - 1 {
        return Ok(ActionCommand::idle());
    }
    let coord = actor_out[selections].clamp(-1.0, 1.0);
    Ok(ActionCommand { selection: Selection::Triple(best), power_w: (coord + 1.0) / 2.0 * p_max })
}

/// Index of the largest legal score, lowest index on ties.
fn argmax_legal(scores: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &legal)) in scores.iter().zip(mask).enumerate() {
        if legal && best.is_none_or(|b| v > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn clip_noise(raw: f64, clip: f64) -> f64 {
    raw.clamp(-clip, clip)
}

/// Adds clipped Gaussian noise to every coordinate, then clamps to `[-1, 1]`.
/// One normal draw per coordinate, even when `std` is zero.
pub fn perturb(out: &mut [f64], std: f64, clip: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).expect("std validated as finite and >= 0");
    for v in out {
        *v = (*v + clip_noise(normal.sample(rng), clip)).clamp(-1.0, 1.0);
    }
}

/// Exploration step: the behaviour actor's output plus clipped noise.
pub fn explore(actor: &DenseNet, obs: &[f64], std: f64, clip: f64, rng: &mut Rng) -> Result<Vec<f64>, AgentError> {
    let mut out = actor.forward(obs)?;
    perturb(&mut out, std, clip, rng);
    Ok(out)
}

/// Clipped double-Q target `r + discount * (1 - done) * min(q1, q2)`.
pub fn clipped_double_q_target(
    reward: ArrayView1<f64>,
    not_done: ArrayView1<f64>,
    q1: ArrayView1<f64>,
    q2: ArrayView1<f64>,
    discount: f64,
) -> Array1<f64> {
    let mut y = Array1::zeros(reward.len());
    for i in 0..y.len() {
        y[i] = reward[i] + discount * not_done[i] * q1[i].min(q2[i]);
    }
    y
}

/// Single-critic target `r + discount * (1 - done) * q`.
pub fn single_q_target(
    reward: ArrayView1<f64>,
    not_done: ArrayView1<f64>,
    q: ArrayView1<f64>,
    discount: f64,
) -> Array1<f64> {
    let mut y = Array1::zeros(reward.len());
    for i in 0..y.len() {
        y[i] = reward[i] + discount * not_done[i] * q[i];
    }
    y
}

/// Rows where `y` exceeds `r + discount * (1 - done) * q` for either critic.
pub fn target_dominance_violations(
    y: ArrayView1<f64>,
    reward: ArrayView1<f64>,
    not_done: ArrayView1<f64>,
    critics: &[ArrayView1<f64>],
    discount: f64,
) -> usize {
    (0..y.len()).filter(|&i| critics.iter().any(|q| y[i] > reward[i] + discount * not_done[i] * q[i])).count()
}

/// One squared-error regression step of a scalar-output network toward `y`.
/// Returns the loss and the predictions before the step.
pub fn regress(
    net: &mut DenseNet,
    opt: &mut Adam,
    input: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>), AgentError> {
    let cache = net.forward_cached(input)?;
    let q = cache.output.column(0).to_owned();
    let diff = &q - &y;
    let b = y.len() as f64;
    let loss = diff.mapv(|d| d * d).sum() / b;
    if !loss.is_finite() {
        return Err(AgentError::Diverged(format!("critic loss {loss}")));
    }
    let upstream = diff.mapv(|d| 2.0 * d / b).insert_axis(Axis(1));
    let (grads, _) = net.backward(&cache, upstream.view())?;
    opt.step(net, &grads)?;
    Ok((loss, q))
}

/// One policy-gradient ascent step: `dq_da` maps the actor's batch output to
/// `dQ/da` per row, and the actor moves to increase the batch-mean `Q`.
pub fn actor_ascent_step<F>(
    actor: &mut DenseNet,
    opt: &mut Adam,
    obs: ArrayView2<f64>,
    dq_da: F,
) -> Result<(), AgentError>
where
    F: FnOnce(&Array2<f64>) -> Result<Array2<f64>, AgentError>,
{
    let cache = actor.forward_cached(obs)?;
    let grad_a = dq_da(&cache.output)?;
    let b = obs.nrows() as f64;
    let upstream = grad_a.mapv(|g| -g / b);
    let (grads, _) = actor.backward(&cache, upstream.view())?;
    opt.step(actor, &grads)?;
    Ok(())
}

fn join(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("equal row counts")
}

fn rows(data: &[&[f64]], width: usize) -> Array2<f64> {
    let mut flat = Vec::with_capacity(data.len() * width);
    for r in data {
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((data.len(), width), flat).expect("uniform row width")
}

struct Batch {
    obs: Array2<f64>,
    action: Array2<f64>,
    reward: Array1<f64>,
    next_obs: Array2<f64>,
    not_done: Array1<f64>,
}

impl Batch {
    fn from_transitions(ts: &[&Transition]) -> Self {
        let obs_dim = ts[0].obs.len();
        let act_dim = ts[0].action.len();
        let obs: Vec<&[f64]> = ts.iter().map(|t| t.obs.as_slice()).collect();
        let act: Vec<&[f64]> = ts.iter().map(|t| t.action.as_slice()).collect();
        let next: Vec<&[f64]> = ts.iter().map(|t| t.next_obs.as_slice()).collect();
        Self {
            obs: rows(&obs, obs_dim),
            action: rows(&act, act_dim),
            reward: ts.iter().map(|t| t.reward).collect(),
            next_obs: rows(&next, obs_dim),
            not_done: ts.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect(),
        }
    }
}

/// Running counters over a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub episodes: u64,
    pub env_steps: u64,
    pub transmissions: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    /// Batch rows checked for clipped-target dominance, and failures.
    pub target_checks: u64,
    pub target_violations: u64,
    pub stale_priority_updates: u64,
    pub last_critic_loss: f64,
    /// Constraint violations found by auditing every training episode.
    pub constraint_violations: u64,
    /// Training episodes whose summed rewards differ from the closed-form
    /// return by more than [`RETURN_TOL`].
    pub return_mismatches: u64,
}

/// Tolerance for the summed-reward versus closed-form return cross-check.
pub const RETURN_TOL: f64 = 1e-12;

impl TrainStats {
    /// Bookkeeping at the end of a training episode.
    fn finish_episode(&mut self, env: &CovertEnv) -> Result<(), AgentError> {
        let m = env.episode_metrics()?;
        self.constraint_violations += m.audit(env.scenario()).total() as u64;
        self.return_mismatches += u64::from((m.episode_return - m.closed_form_return).abs() > RETURN_TOL);
        self.episodes += 1;
        Ok(())
    }
}

/// Returns of the exploratory episodes collected in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub returns: Vec<f64>,
}

impl IterationStats {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / self.returns.len() as f64).sqrt()
    }
}

/// A frozen decision rule. `rng` is only consumed by stochastic policies.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64], mask: &[bool], rng: &mut Rng) -> Result<ActionCommand, AgentError>;

    fn act_batch(
        &self,
        obs: &[Vec<f64>],
        masks: &[Vec<bool>],
        rngs: &mut [Rng],
    ) -> Result<Vec<ActionCommand>, AgentError> {
        obs.iter().zip(masks).zip(rngs.iter_mut()).map(|((o, m), r)| self.act(o, m, r)).collect()
    }
}

pub trait Agent: Policy + Send {
    fn algorithm(&self) -> Algorithm;

    /// One outer iteration: an interaction stage followed by an update stage.
    fn run_iteration(&mut self, env: &mut CovertEnv) -> Result<IterationStats, AgentError>;

    fn stats(&self) -> &TrainStats;

    fn checkpoint(&self) -> Checkpoint;
}

/// Greedy actor-network policy.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub actor: DenseNet,
    pub p_max: f64,
}

impl Policy for ActorPolicy {
    fn act(&self, obs: &[f64], mask: &[bool], _rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        encode_action(&self.actor.forward(obs)?, mask, self.p_max)
    }

    fn act_batch(
        &self,
        obs: &[Vec<f64>],
        masks: &[Vec<bool>],
        _rngs: &mut [Rng],
    ) -> Result<Vec<ActionCommand>, AgentError> {
        let views: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let out = self.actor.forward_batch(rows(&views, self.actor.input_dim()).view())?;
        out.outer_iter()
            .zip(masks)
            .map(|(row, m)| encode_action(row.as_slice().expect("standard layout"), m, self.p_max))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Flavor {
    Td3,
    Ddpg,
}

/// PS-TD3, plain TD3 (uniform replay) and DDPG.
pub struct ActorCriticAgent {
    algorithm: Algorithm,
    flavor: Flavor,
    cfg: AgentConfig,
    seed: u64,
    discount: f64,
    obs_dim: usize,
    p_max: f64,
    actor: DenseNet,
    actor_target: DenseNet,
    critics: Vec<DenseNet>,
    critic_targets: Vec<DenseNet>,
    actor_opt: Adam,
    critic_opts: Vec<Adam>,
    replay: ReplayBuffer,
    rng: Rng,
    critic_updates_since_actor: usize,
    stats: TrainStats,
}

impl ActorCriticAgent {
    /// `algorithm` must be one of PS-TD3, TD3 or DDPG. PS-TD3 uses a
    /// prioritized buffer with exponent `cfg.alpha`; the others replay
    /// uniformly.
    pub fn new(algorithm: Algorithm, scenario: &Scenario, cfg: &AgentConfig, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let flavor = match algorithm {
            Algorithm::PsTd3 | Algorithm::Td3 => Flavor::Td3,
            Algorithm::Ddpg => Flavor::Ddpg,
            other => return Err(AgentError::Config(format!("{other} is not an actor-critic algorithm"))),
        };
        let obs_dim = scenario.observation_dim();
        let act_dim = scenario.selection_count() + 1;
        let mut init = rng_from(derive_seed(seed, &[stream::NETWORK_INIT]));
        let actor = DenseNet::new(&cfg.layer_dims(obs_dim, act_dim), Activation::Tanh, &mut init)?;
        let n_critics = if flavor == Flavor::Td3 { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|_| DenseNet::new(&cfg.layer_dims(obs_dim + act_dim, 1), Activation::Identity, &mut init))
            .collect::<Result<Vec<_>, _>>()?;
        let replay = match algorithm {
            Algorithm::PsTd3 => ReplayBuffer::Prioritized(PrioritizedBuffer::new(cfg.buffer_capacity, cfg.alpha)?),
            _ => ReplayBuffer::Uniform(UniformBuffer::new(cfg.buffer_capacity)?),
        };
        Ok(Self {
            algorithm,
            flavor,
            cfg: cfg.clone(),
            seed,
            discount: scenario.episode.discount,
            obs_dim,
            p_max: scenario.radio.p_s_max_w,
            actor_target: actor.clone(),
            actor_opt: Adam::new(&actor, cfg.lr_actor),
            critic_targets: critics.clone(),
            critic_opts: critics.iter().map(|c| Adam::new(c, cfg.lr_critic)).collect(),
            actor,
            critics,
            replay,
            rng: rng_from(derive_seed(seed, &[stream::AGENT])),
            critic_updates_since_actor: 0,
            stats: TrainStats::default(),
        })
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn actor_target(&self) -> &DenseNet {
        &self.actor_target
    }

    pub fn critics(&self) -> &[DenseNet] {
        &self.critics
    }

    pub fn critic_targets(&self) -> &[DenseNet] {
        &self.critic_targets
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    fn policy_delay(&self) -> usize {
        match self.flavor {
            Flavor::Td3 => self.cfg.policy_delay,
            Flavor::Ddpg => 1,
        }
    }

    fn p_max(&self) -> f64 {
        self.p_max
    }

    /// Minimum over target critics at `(s', target_action)`.
    fn target_values(
        &self,
        next_obs: ArrayView2<f64>,
        next_action: ArrayView2<f64>,
    ) -> Result<Vec<Array1<f64>>, AgentError> {
        let sa = join(next_obs, next_action);
        self.critic_targets.iter().map(|c| Ok(c.forward_batch(sa.view())?.column(0).to_owned())).collect()
    }

    /// TD errors of fresh transitions under the current networks, without
    /// target smoothing: `r + discount * (1 - done) * min_i Q'_i(s', pi'(s')) - Q_1(s, a)`.
    fn insertion_td_errors(&self, ts: &[Transition]) -> Result<Vec<f64>, AgentError> {
        let refs: Vec<&Transition> = ts.iter().collect();
        let batch = Batch::from_transitions(&refs);
        let next_a = self.actor_target.forward_batch(batch.next_obs.view())?;
        let qs = self.target_values(batch.next_obs.view(), next_a.view())?;
        let y = match &qs[..] {
            [q1, q2] => {
                clipped_double_q_target(batch.reward.view(), batch.not_done.view(), q1.view(), q2.view(), self.discount)
            }
            [q] => single_q_target(batch.reward.view(), batch.not_done.view(), q.view(), self.discount),
            _ => unreachable!("one or two critics"),
        };
        let q1 = self.critics[0].forward_batch(join(batch.obs.view(), batch.action.view()).view())?;
        Ok(y.iter().zip(q1.column(0)).map(|(y, q)| y - q).collect())
    }

    /// Updates the critics on one batch and returns `|y - Q_1(s, a)|`.
    fn update_critics(&mut self, batch: &Batch) -> Result<Vec<f64>, AgentError> {
        let mut next_a = self.actor_target.forward_batch(batch.next_obs.view())?;
        if self.flavor == Flavor::Td3 {
            perturb(
                next_a.as_slice_mut().expect("standard layout"),
                self.cfg.target_noise_std,
                self.cfg.target_noise_clip,
                &mut self.rng,
            );
        }
        let qs = self.target_values(batch.next_obs.view(), next_a.view())?;
        let y = if qs.len() == 2 {
            let y = clipped_double_q_target(
                batch.reward.view(),
                batch.not_done.view(),
                qs[0].view(),
                qs[1].view(),
                self.discount,
            );
            let views: Vec<_> = qs.iter().map(|q| q.view()).collect();
            self.stats.target_checks += y.len() as u64;
            self.stats.target_violations += target_dominance_violations(
                y.view(),
                batch.reward.view(),
                batch.not_done.view(),
                &views,
                self.discount,
            ) as u64;
            y
        } else {
            single_q_target(batch.reward.view(), batch.not_done.view(), qs[0].view(), self.discount)
        };
        let sa = join(batch.obs.view(), batch.action.view());
        let mut abs_delta = Vec::new();
        for (i, (critic, opt)) in self.critics.iter_mut().zip(&mut self.critic_opts).enumerate() {
            let (loss, q) = regress(critic, opt, sa.view(), y.view())?;
            if i == 0 {
                abs_delta = q.iter().zip(&y).map(|(q, y)| (y - q).abs()).collect();
                self.stats.last_critic_loss = loss;
            }
        }
        self.stats.critic_updates += 1;
        Ok(abs_delta)
    }

    /// Policy-gradient step on the actor through critic 1, then soft updates
    /// of all target networks.
    fn update_actor(&mut self, obs: &Array2<f64>) -> Result<(), AgentError> {
        let critic = &self.critics[0];
        let obs_dim = self.obs_dim;
        actor_ascent_step(&mut self.actor, &mut self.actor_opt, obs.view(), |actions| {
            let cache = critic.forward_cached(join(obs.view(), actions.view()).view())?;
            let ones = Array2::ones((actions.nrows(), 1));
            let (_, d_input) = critic.backward(&cache, ones.view())?;
            Ok(d_input.slice(s![.., obs_dim..]).to_owned())
        })?;
        soft_update(&mut self.actor_target, &self.actor, self.cfg.tau)?;
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            soft_update(t, c, self.cfg.tau)?;
        }
        self.stats.actor_updates += 1;
        Ok(())
    }

    /// One update step: sample, critic update, priority refresh, and a
    /// delayed actor update. Skipped until the buffer holds a full batch.
    pub fn update_step(&mut self) -> Result<bool, AgentError> {
        if self.replay.len() < self.cfg.batch_size {
            return Ok(false);
        }
        let idx: Vec<SampleIndex> = self.replay.sample(self.cfg.batch_size, &mut self.rng)?;
        let refs: Vec<&Transition> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let batch = Batch::from_transitions(&refs);
        let abs_delta = self.update_critics(&batch)?;
        if self.replay.is_prioritized() && self.cfg.refresh_priorities {
            self.stats.stale_priority_updates += self.replay.update_priorities(&idx, &abs_delta)? as u64;
        }
        self.critic_updates_since_actor += 1;
        if self.critic_updates_since_actor == self.policy_delay() {
            self.update_actor(&batch.obs)?;
            self.critic_updates_since_actor = 0;
        }
        Ok(true)
    }

    fn play_episode(&mut self, env: &mut CovertEnv, out: &mut Vec<Transition>) -> Result<f64, AgentError> {
        let seed = derive_seed(self.seed, &[stream::TRAIN_EPISODES, self.stats.episodes]);
        let mut obs = env.reset(seed);
        let mut ret = 0.0;
        loop {
            let mask = env.feasibility_mask();
            let behaviour = if self.cfg.explore_with_target { &self.actor_target } else { &self.actor };
            let action =
                explore(behaviour, &obs, self.cfg.explore_noise_std, self.cfg.explore_noise_clip, &mut self.rng)?;
            let cmd = encode_action(&action, &mask, self.p_max())?;
            let step = env.step(cmd)?;
            self.stats.env_steps += 1;
            self.stats.transmissions += u64::from(step.outcome.transmitted.is_some());
            ret += step.reward;
            out.push(Transition {
                obs,
                action,
                reward: step.reward,
                next_obs: step.observation.clone(),
                done: step.done,
                next_mask: env.feasibility_mask(),
            });
            if step.done {
                break;
            }
            obs = step.observation;
        }
        self.stats.finish_episode(env)?;
        Ok(ret)
    }

    fn check_finite(&self) -> Result<(), AgentError> {
        let nets = std::iter::once(&self.actor)
            .chain(std::iter::once(&self.actor_target))
            .chain(&self.critics)
            .chain(&self.critic_targets);
        for (i, n) in nets.enumerate() {
            if !n.is_finite() {
                return Err(AgentError::Diverged(format!(
                    "non-finite parameters in network {i} after {} critic updates",
                    self.stats.critic_updates
                )));
            }
        }
        Ok(())
    }

    /// Noise-free online actor.
    pub fn greedy_policy(&self) -> ActorPolicy {
        ActorPolicy { actor: self.actor.clone(), p_max: self.p_max }
    }
}

impl Policy for ActorCriticAgent {
    fn act(&self, obs: &[f64], mask: &[bool], _rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        encode_action(&self.actor.forward(obs)?, mask, self.p_max)
    }

    fn act_batch(
        &self,
        obs: &[Vec<f64>],
        masks: &[Vec<bool>],
        rngs: &mut [Rng],
    ) -> Result<Vec<ActionCommand>, AgentError> {
        self.greedy_policy().act_batch(obs, masks, rngs)
    }
}

impl Agent for ActorCriticAgent {
    fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    fn run_iteration(&mut self, env: &mut CovertEnv) -> Result<IterationStats, AgentError> {
        let mut fresh = Vec::new();
        let mut returns = Vec::with_capacity(self.cfg.episodes_per_iteration);
        for _ in 0..self.cfg.episodes_per_iteration {
            returns.push(self.play_episode(env, &mut fresh)?);
        }
        // Networks are fixed during interaction, so TD errors for the whole
        // stage can be computed in one pass before insertion.
        let deltas =
            if self.replay.is_prioritized() { self.insertion_td_errors(&fresh)? } else { vec![0.0; fresh.len()] };
        for (t, d) in fresh.into_iter().zip(deltas) {
            self.replay.push(t, d.abs())?;
        }
        for _ in 0..self.cfg.updates_per_iteration {
            if !self.update_step()? {
                break;
            }
        }
        self.check_finite()?;
        Ok(IterationStats { returns })
    }

    fn stats(&self) -> &TrainStats {
        &self.stats
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.actor.to_tensors("actor");
        tensors.extend(self.actor_target.to_tensors("actor_target"));
        for (i, (c, t)) in self.critics.iter().zip(&self.critic_targets).enumerate() {
            tensors.extend(c.to_tensors(&format!("critic{}", i + 1)));
            tensors.extend(t.to_tensors(&format!("critic{}_target", i + 1)));
        }
        Checkpoint { algorithm: self.algorithm.name().into(), tensors }
    }
}

/// Power of DQN level `level` out of `levels`, evenly spaced on `[0, p_max]`;
/// a single level means full power.
pub fn dqn_power(level: usize, levels: usize, p_max: f64) -> f64 {
    if levels == 1 {
        p_max
    } else {
        level as f64 / (levels - 1) as f64 * p_max
    }
}

/// Discrete action `index` over `(K + 1) x levels`, selection-major.
pub fn decode_discrete(index: usize, levels: usize, mask_len: usize, p_max: f64) -> ActionCommand {
    let selection = index / levels;
    if selection == mask_len - 1 {
        ActionCommand::idle()
    } else {
        ActionCommand { selection: Selection::Triple(selection), power_w: dqn_power(index % levels, levels, p_max) }
    }
}

/// Legality of each discrete action given the selection mask.
fn discrete_mask(mask: &[bool], levels: usize) -> Vec<bool> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(m, levels)).collect()
}

/// Greedy Q-network policy over the discrete grid.
#[derive(Debug, Clone)]
pub struct QPolicy {
    pub net: DenseNet,
    pub levels: usize,
    pub p_max: f64,
}

impl QPolicy {
    fn greedy_index(&self, q: &[f64], mask: &[bool]) -> Result<usize, AgentError> {
        argmax_legal(q, &discrete_mask(mask, self.levels)).ok_or_else(|| AgentError::NoLegalAction(mask.to_vec()))
    }
}

impl Policy for QPolicy {
    fn act(&self, obs: &[f64], mask: &[bool], _rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        let j = self.greedy_index(&self.net.forward(obs)?, mask)?;
        Ok(decode_discrete(j, self.levels, mask.len(), self.p_max))
    }

    fn act_batch(
        &self,
        obs: &[Vec<f64>],
        masks: &[Vec<bool>],
        _rngs: &mut [Rng],
    ) -> Result<Vec<ActionCommand>, AgentError> {
        let views: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let q = self.net.forward_batch(rows(&views, self.net.input_dim()).view())?;
        q.outer_iter()
            .zip(masks)
            .map(|(row, m)| {
                let j = self.greedy_index(row.as_slice().expect("standard layout"), m)?;
                Ok(decode_discrete(j, self.levels, m.len(), self.p_max))
            })
            .collect()
    }
}

/// Deep Q-network baseline with epsilon-greedy exploration and soft target
/// tracking.
pub struct DqnAgent {
    cfg: AgentConfig,
    seed: u64,
    discount: f64,
    policy: QPolicy,
    target: DenseNet,
    opt: Adam,
    replay: UniformBuffer,
    rng: Rng,
    stats: TrainStats,
}

impl DqnAgent {
    pub fn new(scenario: &Scenario, cfg: &AgentConfig, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let outputs = scenario.selection_count() * cfg.dqn_levels;
        let mut init = rng_from(derive_seed(seed, &[stream::NETWORK_INIT]));
        let net = DenseNet::new(&cfg.layer_dims(scenario.observation_dim(), outputs), Activation::Identity, &mut init)?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            discount: scenario.episode.discount,
            target: net.clone(),
            opt: Adam::new(&net, cfg.lr_dqn),
            policy: QPolicy { net, levels: cfg.dqn_levels, p_max: scenario.radio.p_s_max_w },
            replay: UniformBuffer::new(cfg.buffer_capacity)?,
            rng: rng_from(derive_seed(seed, &[stream::AGENT])),
            stats: TrainStats::default(),
        })
    }

    pub fn epsilon(&self) -> f64 {
        let frac = if self.cfg.epsilon_decay_steps == 0 {
            1.0
        } else {
            (self.stats.env_steps as f64 / self.cfg.epsilon_decay_steps as f64).min(1.0)
        };
        self.cfg.epsilon_start + (self.cfg.epsilon_end - self.cfg.epsilon_start) * frac
    }

    pub fn q_policy(&self) -> &QPolicy {
        &self.policy
    }

    fn choose(&mut self, obs: &[f64], mask: &[bool]) -> Result<usize, AgentError> {
        let legal = discrete_mask(mask, self.policy.levels);
        if self.rng.random::<f64>() < self.epsilon() {
            let choices: Vec<usize> = (0..legal.len()).filter(|&j| legal[j]).collect();
            if choices.is_empty() {
                return Err(AgentError::NoLegalAction(mask.to_vec()));
            }
            Ok(choices[self.rng.random_range(0..choices.len())])
        } else {
            self.policy.greedy_index(&self.policy.net.forward(obs)?, mask)
        }
    }

    fn update_step(&mut self) -> Result<bool, AgentError> {
        if self.replay.len() < self.cfg.batch_size {
            return Ok(false);
        }
        let idx = self.replay.sample(self.cfg.batch_size, &mut self.rng)?;
        let refs: Vec<&Transition> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let batch = Batch::from_transitions(&refs);
        let q_next = self.target.forward_batch(batch.next_obs.view())?;
        let levels = self.policy.levels;
        let mut best_next = Array1::zeros(refs.len());
        for (i, t) in refs.iter().enumerate() {
            if !t.done {
                let legal = discrete_mask(&t.next_mask, levels);
                let row = q_next.row(i);
                best_next[i] = (0..row.len()).filter(|&j| legal[j]).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let y = single_q_target(batch.reward.view(), batch.not_done.view(), best_next.view(), self.discount);
        let cache = self.policy.net.forward_cached(batch.obs.view())?;
        let b = refs.len() as f64;
        let mut upstream = Array2::zeros(cache.output.raw_dim());
        let mut loss = 0.0;
        for (i, t) in refs.iter().enumerate() {
            let j = t.action[0] as usize;
            let d = cache.output[[i, j]] - y[i];
            loss += d * d / b;
            upstream[[i, j]] = 2.0 * d / b;
        }
        if !loss.is_finite() {
            return Err(AgentError::Diverged(format!("Q loss {loss}")));
        }
        let (grads, _) = self.policy.net.backward(&cache, upstream.view())?;
        self.opt.step(&mut self.policy.net, &grads)?;
        soft_update(&mut self.target, &self.policy.net, self.cfg.tau)?;
        self.stats.critic_updates += 1;
        self.stats.last_critic_loss = loss;
        Ok(true)
    }
}

impl Policy for DqnAgent {
    fn act(&self, obs: &[f64], mask: &[bool], rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        self.policy.act(obs, mask, rng)
    }

    fn act_batch(
        &self,
        obs: &[Vec<f64>],
        masks: &[Vec<bool>],
        rngs: &mut [Rng],
    ) -> Result<Vec<ActionCommand>, AgentError> {
        self.policy.act_batch(obs, masks, rngs)
    }
}

impl Agent for DqnAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Dqn
    }

    fn run_iteration(&mut self, env: &mut CovertEnv) -> Result<IterationStats, AgentError> {
        let mut returns = Vec::with_capacity(self.cfg.episodes_per_iteration);
        let p_max = self.policy.p_max;
        for _ in 0..self.cfg.episodes_per_iteration {
            let seed = derive_seed(self.seed, &[stream::TRAIN_EPISODES, self.stats.episodes]);
            let mut obs = env.reset(seed);
            let mut ret = 0.0;
            loop {
                let mask = env.feasibility_mask();
                let j = self.choose(&obs, &mask)?;
                let step = env.step(decode_discrete(j, self.policy.levels, mask.len(), p_max))?;
                self.stats.env_steps += 1;
                self.stats.transmissions += u64::from(step.outcome.transmitted.is_some());
                ret += step.reward;
                self.replay.push(Transition {
                    obs,
                    action: vec![j as f64],
                    reward: step.reward,
                    next_obs: step.observation.clone(),
                    done: step.done,
                    next_mask: env.feasibility_mask(),
                });
                if step.done {
                    break;
                }
                obs = step.observation;
            }
            self.stats.finish_episode(env)?;
            returns.push(ret);
        }
        for _ in 0..self.cfg.updates_per_iteration {
            if !self.update_step()? {
                break;
            }
        }
        if !self.policy.net.is_finite() {
            return Err(AgentError::Diverged("non-finite Q-network parameters".into()));
        }
        Ok(IterationStats { returns })
    }

    fn stats(&self) -> &TrainStats {
        &self.stats
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.policy.net.to_tensors("q");
        tensors.extend(self.target.to_tensors("q_target"));
        Checkpoint { algorithm: Algorithm::Dqn.name().into(), tensors }
    }
}

/// Uniform choice among legal selections with power uniform on `[0, p_max]`.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub p_max: f64,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &[f64], mask: &[bool], rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if legal.is_empty() {
            return Err(AgentError::NoLegalAction(mask.to_vec()));
        }
        let pick = legal[rng.random_range(0..legal.len())];
        let power = rng.random_range(0.0..=self.p_max);
        if pick == mask.len() - 1 {
            Ok(ActionCommand::idle())
        } else {
            Ok(ActionCommand { selection: Selection::Triple(pick), power_w: power })
        }
    }
}

/// The random policy wrapped as a non-learning agent, so it produces a
/// learning curve like the others.
pub struct RandomAgent {
    policy: RandomPolicy,
    seed: u64,
    episodes_per_iteration: usize,
    rng: Rng,
    stats: TrainStats,
}

impl RandomAgent {
    pub fn new(scenario: &Scenario, cfg: &AgentConfig, seed: u64) -> Self {
        Self {
            policy: RandomPolicy { p_max: scenario.radio.p_s_max_w },
            seed,
            episodes_per_iteration: cfg.episodes_per_iteration,
            rng: rng_from(derive_seed(seed, &[stream::RANDOM_POLICY])),
            stats: TrainStats::default(),
        }
    }
}

impl Policy for RandomAgent {
    fn act(&self, obs: &[f64], mask: &[bool], rng: &mut Rng) -> Result<ActionCommand, AgentError> {
        self.policy.act(obs, mask, rng)
    }
}

impl Agent for RandomAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Random
    }

    fn run_iteration(&mut self, env: &mut CovertEnv) -> Result<IterationStats, AgentError> {
        let mut returns = Vec::with_capacity(self.episodes_per_iteration);
        for _ in 0..self.episodes_per_iteration {
            let seed = derive_seed(self.seed, &[stream::TRAIN_EPISODES, self.stats.episodes]);
            let mut obs = env.reset(seed);
            let mut ret = 0.0;
            loop {
                let cmd = self.policy.act(&obs, &env.feasibility_mask(), &mut self.rng)?;
                let step = env.step(cmd)?;
                self.stats.env_steps += 1;
                self.stats.transmissions += u64::from(step.outcome.transmitted.is_some());
                ret += step.reward;
                if step.done {
                    break;
                }
                obs = step.observation;
            }
            self.stats.finish_episode(env)?;
            returns.push(ret);
        }
        Ok(IterationStats { returns })
    }

    fn stats(&self) -> &TrainStats {
        &self.stats
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { algorithm: Algorithm::Random.name().into(), tensors: Vec::new() }
    }
}

pub fn build_agent(
    algorithm: Algorithm,
    scenario: &Scenario,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<Box<dyn Agent>, AgentError> {
    Ok(match algorithm {
        Algorithm::PsTd3 | Algorithm::Td3 | Algorithm::Ddpg => {
            Box::new(ActorCriticAgent::new(algorithm, scenario, cfg, seed)?)
        }
        Algorithm::Dqn => Box::new(DqnAgent::new(scenario, cfg, seed)?),
        Algorithm::Random => Box::new(RandomAgent::new(scenario, cfg, seed)),
    })
}

/// Restores the greedy policy stored in a checkpoint.
pub fn policy_from_checkpoint(ckpt: &Checkpoint, scenario: &Scenario) -> Result<Box<dyn Policy + Send>, AgentError> {
    let p_max = scenario.radio.p_s_max_w;
    let algorithm: Algorithm = ckpt.algorithm.parse().map_err(AgentError::Config)?;
    let policy: Box<dyn Policy + Send> = match algorithm {
        Algorithm::PsTd3 | Algorithm::Td3 | Algorithm::Ddpg => {
            Box::new(ActorPolicy { actor: DenseNet::from_tensors(&ckpt.tensors, "actor", Activation::Tanh)?, p_max })
        }
        Algorithm::Dqn => {
            let net = DenseNet::from_tensors(&ckpt.tensors, "q", Activation::Identity)?;
            let outputs = net.output_dim();
            let selections = scenario.selection_count();
            if outputs % selections != 0 {
                return Err(AgentError::Config(format!("{outputs} Q outputs for {selections} selections")));
            }
            Box::new(QPolicy { net, levels: outputs / selections, p_max })
        }
        Algorithm::Random => Box::new(RandomPolicy { p_max }),
    };
    Ok(policy)
}

/// Runs one episode per seed with `policy`, all episodes in lockstep so
/// network policies act on whole batches. Each episode gets its own policy
/// RNG derived from its seed.
pub fn evaluate<P: Policy + ?Sized>(
    scenario: &Arc<Scenario>,
    policy: &P,
    episode_seeds: &[u64],
) -> Result<Vec<EpisodeMetrics>, AgentError> {
    let mut envs: Vec<CovertEnv> = episode_seeds.iter().map(|_| CovertEnv::new(Arc::clone(scenario))).collect();
    let mut obs: Vec<Vec<f64>> = envs.iter_mut().zip(episode_seeds).map(|(e, &s)| e.reset(s)).collect();
    let mut rngs: Vec<Rng> =
        episode_seeds.iter().map(|&s| rng_from(derive_seed(s, &[stream::RANDOM_POLICY]))).collect();
    for _ in 0..scenario.episode.slots {
        let masks: Vec<Vec<bool>> = envs.iter().map(CovertEnv::feasibility_mask).collect();
        let cmds = policy.act_batch(&obs, &masks, &mut rngs)?;
        for ((env, o), cmd) in envs.iter_mut().zip(&mut obs).zip(cmds) {
            *o = env.step(cmd)?.observation;
        }
    }
    envs.iter().map(|e| e.episode_metrics().map_err(AgentError::from)).collect()
}

/// Random-policy episodes, one per seed.
pub fn random_policy(scenario: &Arc<Scenario>, episode_seeds: &[u64]) -> Result<Vec<EpisodeMetrics>, AgentError> {
    evaluate(scenario, &RandomPolicy { p_max: scenario.radio.p_s_max_w }, episode_seeds)
}
