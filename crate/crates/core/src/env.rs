//! Episodic covert-transmission environment.
//!
//! One episode spans `N` slots. In every slot the server either idles or
//! sends one pending triple at a chosen power; the jammer draws a fresh power;
//! the user keeps the triple if it arrives within the latency threshold; and
//! every attacker that monitors the slot runs its radiometer and keeps the
//! triple when it both detects the transmission and decodes it in time.
//!
//! Step rewards are the change in `E_U - E_A`, gated on `E_A <= gamma`. The
//! final step adds `+gamma` for a private episode, or whatever brings the
//! episode return to exactly `-eta` otherwise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    self, detect, detector_threshold, downlink_rate, jammer_draw, latency, received_power, within_deadline,
    ChannelError, DetectorPolicy, LinkGeometry, RadioParams, Receiver,
};
use crate::seeding::{rng_from, Rng};
use crate::semcore::{fill_state_matrix, SemError, SemanticScene, SimilarityMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid episode configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Semantic(#[from] SemError),
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("episode has not finished")]
    NotDone,
    #[error("reset must be called before step")]
    NotReset,
}

/// Which slots an attacker listens to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MonitoringStrategy {
    /// Fresh uniform `G`-subset every episode.
    #[default]
    Uniform,
    /// The first `G` slots.
    FirstG,
    /// A fixed slot list of length `min(G, N)`.
    Fixed { slots: Vec<usize> },
}

/// One attacker. Distances left unset take the scenario geometry's values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_sa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ja: Option<f64>,
    pub detector: DetectorPolicy,
    pub monitoring: MonitoringStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub slots: usize,
    pub per_slot: usize,
    pub monitor_budget: usize,
    pub gamma_privacy: f64,
    pub eta: f64,
    pub attackers: Vec<AttackerConfig>,
    pub discount: f64,
    pub aux_features: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            slots: 12,
            per_slot: 1,
            monitor_budget: 8,
            gamma_privacy: 0.5,
            eta: 1.0,
            attackers: vec![AttackerConfig::default()],
            discount: 1.0,
            aux_features: true,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, triple_count: usize) -> Result<(), EnvError> {
        let cfg = |msg: String| Err(EnvError::Config(msg));
        if self.slots == 0 {
            return cfg("N must be >= 1".into());
        }
        if self.per_slot != 1 {
            return cfg(format!("B = {} is unsupported; one triple per slot (B = 1) only", self.per_slot));
        }
        if triple_count > self.slots * self.per_slot {
            return cfg(format!(
                "K = {triple_count} exceeds N*B = {}; every triple must be sent exactly once",
                self.slots * self.per_slot
            ));
        }
        if !(self.gamma_privacy > 0.0 && self.gamma_privacy < 1.0) {
            return cfg(format!("gamma = {} must lie in (0, 1)", self.gamma_privacy));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return cfg(format!("eta = {} must be > 0", self.eta));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return cfg(format!("discount = {} must lie in (0, 1]", self.discount));
        }
        let budget = self.monitor_budget.min(self.slots);
        for (i, a) in self.attackers.iter().enumerate() {
            a.detector.validate()?;
            if [a.d_sa, a.d_ja].iter().flatten().any(|d| !(*d > 0.0 && d.is_finite())) {
                return cfg(format!("attacker {i}: distances must be > 0"));
            }
            if let MonitoringStrategy::Fixed { slots } = &a.monitoring {
                let mut s = slots.clone();
                s.sort_unstable();
                s.dedup();
                if s.len() != slots.len() || s.len() != budget || s.iter().any(|&n| n >= self.slots) {
                    return cfg(format!(
                        "attacker {i}: fixed monitoring needs {budget} distinct slots below {}",
                        self.slots
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Everything about an episode that does not change between resets.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub scene: SemanticScene,
    pub similarity: SimilarityMatrix,
    pub geometry: LinkGeometry,
    pub radio: RadioParams,
    pub episode: EpisodeConfig,
    attacker_geometry: Vec<LinkGeometry>,
}

impl Scenario {
    pub fn new(
        scene: SemanticScene,
        geometry: LinkGeometry,
        radio: RadioParams,
        episode: EpisodeConfig,
    ) -> Result<Self, EnvError> {
        geometry.validate()?;
        radio.validate()?;
        let k = scene.graph.len();
        if scene.table.len() != k {
            return Err(EnvError::Config(format!("{} embeddings for {k} triples", scene.table.len())));
        }
        episode.validate(k)?;
        let attacker_geometry = episode
            .attackers
            .iter()
            .map(|a| geometry.with_attacker(a.d_sa.unwrap_or(geometry.d_sa), a.d_ja.unwrap_or(geometry.d_ja)))
            .collect();
        let similarity = scene.table.similarity();
        Ok(Self { scene, similarity, geometry, radio, episode, attacker_geometry })
    }

    pub fn triple_count(&self) -> usize {
        self.scene.graph.len()
    }

    pub fn observation_dim(&self) -> usize {
        let k = self.triple_count();
        k * k + if self.episode.aux_features { 2 } else { 0 }
    }

    /// Number of selectable entries: `K` triples plus IDLE.
    pub fn selection_count(&self) -> usize {
        self.triple_count() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Triple(usize),
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionCommand {
    pub selection: Selection,
    pub power_w: f64,
}

impl ActionCommand {
    pub fn idle() -> Self {
        Self { selection: Selection::Idle, power_w: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackerSlot {
    pub monitored: bool,
    pub detected: bool,
    pub eavesdropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub slot: usize,
    pub transmitted: Option<usize>,
    pub power_w: f64,
    pub jammer_w: f64,
    pub user_success: bool,
    pub attackers: Vec<AttackerSlot>,
    pub reward: f64,
    pub e_user: f64,
    pub e_attacker: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub outcome: SlotOutcome,
}

/// Summary of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub e_user: f64,
    pub e_attacker: f64,
    pub private: bool,
    /// Fraction of the `K` triples the user received, in `[0, 1]`.
    pub delivery_frac: f64,
    /// Sum of all emitted rewards, terminal bonus or penalty included.
    pub episode_return: f64,
    /// `E_U - E_A + gamma` when private, `-eta` otherwise.
    pub closed_form_return: f64,
    pub transmitted: Vec<Option<usize>>,
    pub powers: Vec<f64>,
    pub transmit_slots: Vec<bool>,
    /// Slots monitored by at least one attacker.
    pub monitored_slots: Vec<bool>,
    /// Slots where at least one monitoring attacker's radiometer fired.
    pub detected_slots: Vec<bool>,
    pub monitored_counts: Vec<usize>,
}

/// Violations of the power cap, once-only transmission, per-slot capacity
/// and monitoring budget found in a finished episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConstraintAudit {
    pub power_cap: usize,
    pub repeated_triple: usize,
    pub slot_capacity: usize,
    pub monitor_budget: usize,
}

impl ConstraintAudit {
    pub fn total(&self) -> usize {
        self.power_cap + self.repeated_triple + self.slot_capacity + self.monitor_budget
    }

    pub fn merge(&mut self, other: &ConstraintAudit) {
        self.power_cap += other.power_cap;
        self.repeated_triple += other.repeated_triple;
        self.slot_capacity += other.slot_capacity;
        self.monitor_budget += other.monitor_budget;
    }
}

impl EpisodeMetrics {
    /// Independent recount of the problem constraints from the episode log.
    pub fn audit(&self, scenario: &Scenario) -> ConstraintAudit {
        let mut audit = ConstraintAudit::default();
        let k = scenario.triple_count();
        let mut sent = vec![0usize; k];
        for (slot, sel) in self.transmitted.iter().enumerate() {
            let p = self.powers[slot];
            if !(0.0..=scenario.radio.p_s_max_w).contains(&p) {
                audit.power_cap += 1;
            }
            if let Some(id) = sel {
                sent[*id] += 1;
            }
        }
        audit.slot_capacity =
            self.transmitted.iter().filter(|s| usize::from(s.is_some()) > scenario.episode.per_slot).count();
        audit.repeated_triple = sent.iter().filter(|&&c| c > 1).count();
        let budget = scenario.episode.monitor_budget.min(scenario.episode.slots);
        audit.monitor_budget = self.monitored_counts.iter().filter(|&&c| c != budget).count();
        audit
    }
}

/// Single-writer environment instance; clone the `Arc<Scenario>` to run
/// independent environments in parallel.
#[derive(Debug, Clone)]
pub struct CovertEnv {
    scenario: Arc<Scenario>,
    rng: Rng,
    started: bool,
    slot: usize,
    done: bool,
    retired: Vec<bool>,
    pending: usize,
    user_rx: Vec<bool>,
    attacker_rx: Vec<Vec<bool>>,
    monitored: Vec<Vec<bool>>,
    e_user: f64,
    e_attacker: f64,
    reward_sum: f64,
    step_reward_sum: f64,
    transmitted: Vec<Option<usize>>,
    powers: Vec<f64>,
    detected: Vec<bool>,
}

impl CovertEnv {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let k = scenario.triple_count();
        let n = scenario.episode.slots;
        let a = scenario.episode.attackers.len();
        Self {
            rng: rng_from(0),
            started: false,
            slot: 0,
            done: false,
            retired: vec![false; k],
            pending: k,
            user_rx: vec![false; k],
            attacker_rx: vec![vec![false; k]; a],
            monitored: vec![vec![false; n]; a],
            e_user: 0.0,
            e_attacker: 0.0,
            reward_sum: 0.0,
            step_reward_sum: 0.0,
            transmitted: Vec::with_capacity(n),
            powers: Vec::with_capacity(n),
            detected: Vec::with_capacity(n),
            scenario,
        }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn e_user(&self) -> f64 {
        self.e_user
    }

    pub fn e_attacker(&self) -> f64 {
        self.e_attacker
    }

    pub fn monitored(&self, attacker: usize) -> &[bool] {
        &self.monitored[attacker]
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let sc = Arc::clone(&self.scenario);
        let n = sc.episode.slots;
        let budget = sc.episode.monitor_budget.min(n);
        self.rng = rng_from(seed);
        self.started = true;
        self.slot = 0;
        self.done = false;
        self.pending = sc.triple_count();
        self.retired.iter_mut().for_each(|r| *r = false);
        self.user_rx.iter_mut().for_each(|r| *r = false);
        for rx in &mut self.attacker_rx {
            rx.iter_mut().for_each(|r| *r = false);
        }
        for (mon, attacker) in self.monitored.iter_mut().zip(&sc.episode.attackers) {
            mon.iter_mut().for_each(|m| *m = false);
            match &attacker.monitoring {
                MonitoringStrategy::Uniform => {
                    for s in rand::seq::index::sample(&mut self.rng, n, budget) {
                        mon[s] = true;
                    }
                }
                MonitoringStrategy::FirstG => mon[..budget].iter_mut().for_each(|m| *m = true),
                MonitoringStrategy::Fixed { slots } => slots.iter().for_each(|&s| mon[s] = true),
            }
        }
        self.e_user = 0.0;
        self.e_attacker = 0.0;
        self.reward_sum = 0.0;
        self.step_reward_sum = 0.0;
        self.transmitted.clear();
        self.powers.clear();
        self.detected.clear();
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        let sc = &self.scenario;
        let k = sc.triple_count();
        let mut obs = vec![0.0; sc.observation_dim()];
        fill_state_matrix(&sc.similarity, &self.retired, &mut obs[..k * k]);
        if sc.episode.aux_features {
            obs[k * k] = self.slot as f64 / sc.episode.slots as f64;
            obs[k * k + 1] = self.pending as f64 / k as f64;
        }
        obs
    }

    /// Legal selections: one flag per triple followed by the IDLE flag.
    pub fn feasibility_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> = self.retired.iter().map(|r| !r).collect();
        let remaining_slots = self.scenario.episode.slots - self.slot.min(self.scenario.episode.slots);
        mask.push(remaining_slots > self.pending);
        mask
    }

    pub fn step(&mut self, action: ActionCommand) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let sc = Arc::clone(&self.scenario);
        let radio = &sc.radio;
        let mask = self.feasibility_mask();
        let k = sc.triple_count();
        let transmitted = match action.selection {
            Selection::Triple(id) if id < k && mask[id] => Some(id),
            Selection::Triple(id) => return Err(EnvError::IllegalAction(format!("triple {id} is retired or unknown"))),
            Selection::Idle if mask[k] => None,
            Selection::Idle => {
                return Err(EnvError::IllegalAction(format!(
                    "IDLE leaves {} triples for {} slots",
                    self.pending,
                    sc.episode.slots - self.slot
                )))
            }
        };
        if !(action.power_w >= 0.0 && action.power_w <= radio.p_s_max_w) {
            return Err(EnvError::IllegalAction(format!(
                "power {} W outside [0, {}] W",
                action.power_w, radio.p_s_max_w
            )));
        }
        let p_s = if transmitted.is_some() { action.power_w } else { 0.0 };
        let p_j = jammer_draw(&mut self.rng, radio);

        let mut user_success = false;
        if let Some(id) = transmitted {
            let bits = sc.scene.graph.payload_bits(id);
            let rate = downlink_rate(p_s, p_j, &sc.geometry, Receiver::User, radio)?;
            user_success = within_deadline(latency(bits, rate), radio);
            if user_success {
                self.user_rx[id] = true;
            }
            self.retired[id] = true;
            self.pending -= 1;
        }

        let mut attackers = Vec::with_capacity(sc.episode.attackers.len());
        let mut any_detect = false;
        for (a, spec) in sc.episode.attackers.iter().enumerate() {
            let geom = &sc.attacker_geometry[a];
            let monitored = self.monitored[a][self.slot];
            let mut detected = false;
            let mut eavesdropped = false;
            if monitored {
                let eps = detector_threshold(&spec.detector, p_j, geom, radio);
                let zeta = received_power(p_s, p_j, geom, Receiver::Attacker, radio)?;
                detected = detect(zeta, eps);
                if let (true, Some(id)) = (detected, transmitted) {
                    let rate = downlink_rate(p_s, p_j, geom, Receiver::Attacker, radio)?;
                    if channel::within_deadline(latency(sc.scene.graph.payload_bits(id), rate), radio) {
                        self.attacker_rx[a][id] = true;
                        eavesdropped = true;
                    }
                }
            }
            any_detect |= detected;
            attackers.push(AttackerSlot { monitored, detected, eavesdropped });
        }

        let e_user = sc.similarity.gnt_mask(&self.user_rx);
        let e_attacker = self.attacker_rx.iter().map(|rx| sc.similarity.gnt_mask(rx)).fold(0.0, f64::max);
        let gamma = sc.episode.gamma_privacy;
        let gate = if e_attacker <= gamma { 1.0 } else { 0.0 };
        let mut reward = (e_user - self.e_user - e_attacker + self.e_attacker) * gate;
        self.e_user = e_user;
        self.e_attacker = e_attacker;
        self.step_reward_sum += reward;

        self.transmitted.push(transmitted);
        self.powers.push(p_s);
        self.detected.push(any_detect);
        let slot = self.slot;
        self.slot += 1;
        if self.slot == sc.episode.slots {
            self.done = true;
            reward += if e_attacker <= gamma { gamma } else { -sc.episode.eta - self.step_reward_sum };
        }
        self.reward_sum += reward;

        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            outcome: SlotOutcome {
                slot,
                transmitted,
                power_w: p_s,
                jammer_w: p_j,
                user_success,
                attackers,
                reward,
                e_user,
                e_attacker,
            },
        })
    }

    pub fn episode_metrics(&self) -> Result<EpisodeMetrics, EnvError> {
        if !self.done {
            return Err(EnvError::NotDone);
        }
        let sc = &self.scenario;
        let k = sc.triple_count();
        let n = sc.episode.slots;
        let private = self.e_attacker <= sc.episode.gamma_privacy;
        let delivered = self.user_rx.iter().filter(|&&r| r).count();
        let monitored_slots = (0..n).map(|s| self.monitored.iter().any(|m| m[s])).collect();
        Ok(EpisodeMetrics {
            e_user: self.e_user,
            e_attacker: self.e_attacker,
            private,
            delivery_frac: delivered as f64 / k as f64,
            episode_return: self.reward_sum,
            closed_form_return: if private {
                self.e_user - self.e_attacker + sc.episode.gamma_privacy
            } else {
                -sc.episode.eta
            },
            transmitted: self.transmitted.clone(),
            powers: self.powers.clone(),
            transmit_slots: self.transmitted.iter().map(Option::is_some).collect(),
            monitored_slots,
            detected_slots: self.detected.clone(),
            monitored_counts: self.monitored.iter().map(|m| m.iter().filter(|&&x| x).count()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semcore::{synth_graph, EmbeddingTable};

    fn orthogonal_scene(k: usize) -> SemanticScene {
        let vectors = (0..k)
            .map(|i| {
                let mut v = vec![0.0; k.max(2)];
                v[i] = 1.0;
                v
            })
            .collect();
        SemanticScene {
            graph: synth_graph(k, 1).unwrap(),
            table: EmbeddingTable::from_vectors(k.max(2), vectors).unwrap(),
        }
    }

    fn scenario(scene: SemanticScene, episode: EpisodeConfig) -> Arc<Scenario> {
        Arc::new(Scenario::new(scene, LinkGeometry::default(), RadioParams::default(), episode).unwrap())
    }

    fn default_env() -> CovertEnv {
        let scene = SemanticScene::synthetic(8, 16, 3, 1).unwrap();
        CovertEnv::new(scenario(scene, EpisodeConfig::default()))
    }

    #[test]
    fn rejects_infeasible_configs() {
        let scene = SemanticScene::synthetic(8, 16, 3, 1).unwrap();
        let short = EpisodeConfig { slots: 4, ..Default::default() };
        let err = Scenario::new(scene.clone(), LinkGeometry::default(), RadioParams::default(), short);
        assert!(matches!(err, Err(EnvError::Config(_))));
        let two_per_slot = EpisodeConfig { per_slot: 2, ..Default::default() };
        assert!(Scenario::new(scene, LinkGeometry::default(), RadioParams::default(), two_per_slot).is_err());
    }

    #[test]
    fn single_triple_initial_observation() {
        let ep = EpisodeConfig { slots: 1, monitor_budget: 1, ..Default::default() };
        let mut env = CovertEnv::new(scenario(orthogonal_scene(1), ep));
        assert_eq!(env.reset(0), vec![1.0, 0.0, 1.0]);
        // The only slot must carry the only triple.
        assert_eq!(env.feasibility_mask(), vec![true, false]);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = default_env();
        let mut b = default_env();
        assert_eq!(a.reset(42), b.reset(42));
        for slot in 0..12 {
            let action = if slot < 8 {
                ActionCommand { selection: Selection::Triple(slot), power_w: 0.4 }
            } else {
                ActionCommand::idle()
            };
            assert_eq!(a.step(action).unwrap(), b.step(action).unwrap());
        }
    }

    #[test]
    fn full_budget_monitors_every_slot() {
        let ep = EpisodeConfig { monitor_budget: 12, ..Default::default() };
        let mut env = CovertEnv::new(scenario(SemanticScene::synthetic(8, 16, 3, 1).unwrap(), ep));
        env.reset(5);
        assert!(env.monitored(0).iter().all(|&m| m));
    }

    #[test]
    fn monitoring_strategies() {
        let scene = SemanticScene::synthetic(8, 16, 3, 1).unwrap();
        let mut ep = EpisodeConfig::default();
        ep.attackers[0].monitoring = MonitoringStrategy::FirstG;
        let mut env = CovertEnv::new(scenario(scene.clone(), ep.clone()));
        env.reset(1);
        assert_eq!(env.monitored(0).iter().filter(|&&m| m).count(), 8);
        assert!(env.monitored(0)[..8].iter().all(|&m| m));

        ep.attackers[0].monitoring = MonitoringStrategy::Fixed { slots: vec![0, 2, 4, 6, 8, 10, 11, 1] };
        let mut env = CovertEnv::new(scenario(scene.clone(), ep.clone()));
        env.reset(1);
        assert!(env.monitored(0)[10] && !env.monitored(0)[3]);

        ep.attackers[0].monitoring = MonitoringStrategy::Fixed { slots: vec![0, 1] };
        assert!(Scenario::new(scene, LinkGeometry::default(), RadioParams::default(), ep).is_err());
    }

    #[test]
    fn feasibility_mask_examples() {
        let ep = EpisodeConfig::default();
        let mut env = CovertEnv::new(scenario(SemanticScene::synthetic(3, 8, 3, 1).unwrap(), ep));
        env.reset(0);
        assert_eq!(env.feasibility_mask(), vec![true, true, true, true]);
        for _ in 0..9 {
            env.step(ActionCommand::idle()).unwrap();
        }
        // 3 triples pending, 3 slots left.
        assert_eq!(env.feasibility_mask(), vec![true, true, true, false]);
        assert!(matches!(env.step(ActionCommand::idle()), Err(EnvError::IllegalAction(_))));
        for id in 0..3 {
            env.step(ActionCommand { selection: Selection::Triple(id), power_w: 0.1 }).unwrap();
        }
        assert!(env.is_done());

        let mut env = CovertEnv::new(scenario(SemanticScene::synthetic(3, 8, 3, 1).unwrap(), EpisodeConfig::default()));
        env.reset(0);
        for id in 0..3 {
            env.step(ActionCommand { selection: Selection::Triple(id), power_w: 0.1 }).unwrap();
        }
        assert_eq!(env.feasibility_mask(), vec![false, false, false, true]);
    }

    #[test]
    fn illegal_actions_are_errors() {
        let mut env = default_env();
        assert_eq!(env.step(ActionCommand::idle()), Err(EnvError::NotReset));
        env.reset(0);
        env.step(ActionCommand { selection: Selection::Triple(0), power_w: 0.2 }).unwrap();
        assert!(matches!(
            env.step(ActionCommand { selection: Selection::Triple(0), power_w: 0.2 }),
            Err(EnvError::IllegalAction(_))
        ));
        assert!(matches!(
            env.step(ActionCommand { selection: Selection::Triple(1), power_w: 1.5 }),
            Err(EnvError::IllegalAction(_))
        ));
        assert!(matches!(
            env.step(ActionCommand { selection: Selection::Triple(99), power_w: 0.1 }),
            Err(EnvError::IllegalAction(_))
        ));
        assert_eq!(env.episode_metrics(), Err(EnvError::NotDone));
    }

    #[test]
    fn step_after_done_fails() {
        let mut env = default_env();
        env.reset(3);
        for slot in 0..12 {
            let a = if slot < 8 {
                ActionCommand { selection: Selection::Triple(slot), power_w: 0.3 }
            } else {
                ActionCommand::idle()
            };
            env.step(a).unwrap();
        }
        assert_eq!(env.step(ActionCommand::idle()), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn delivering_half_of_orthogonal_pair_rewards_half() {
        // Two orthogonal triples, no attackers: delivering one gives E_U = 0.5.
        let ep = EpisodeConfig { slots: 2, monitor_budget: 0, attackers: vec![], ..Default::default() };
        let mut env = CovertEnv::new(scenario(orthogonal_scene(2), ep));
        env.reset(0);
        let r = env.step(ActionCommand { selection: Selection::Triple(0), power_w: 1.0 }).unwrap();
        // d_JU = 1.2 and p_J <= 1 keep the SINR at or above 1.44 at full power.
        assert!(r.outcome.user_success);
        assert_eq!(r.reward, 0.5);
        assert_eq!(r.outcome.e_attacker, 0.0);
    }

    #[test]
    fn terminal_rewards_match_closed_form() {
        // Orthogonal triples, attacker always monitoring with an oracle
        // detector: full power gets eavesdropped, tiny power does not.
        let attacker = AttackerConfig {
            d_sa: Some(1.0),
            d_ja: Some(10.0),
            detector: DetectorPolicy::OracleMargin { margin_w: 0.01 },
            monitoring: MonitoringStrategy::FirstG,
        };
        let ep = EpisodeConfig { slots: 2, monitor_budget: 2, attackers: vec![attacker], ..Default::default() };
        let sc = scenario(orthogonal_scene(2), ep);

        let mut env = CovertEnv::new(Arc::clone(&sc));
        env.reset(0);
        let mut total = 0.0;
        for id in 0..2 {
            total += env.step(ActionCommand { selection: Selection::Triple(id), power_w: 1.0 }).unwrap().reward;
        }
        let m = env.episode_metrics().unwrap();
        assert!(!m.private);
        assert!((total + 1.0).abs() < 1e-12);
        assert_eq!(m.closed_form_return, -1.0);

        let mut env = CovertEnv::new(sc);
        env.reset(0);
        let mut total = 0.0;
        for id in 0..2 {
            total += env.step(ActionCommand { selection: Selection::Triple(id), power_w: 0.0 }).unwrap().reward;
        }
        let m = env.episode_metrics().unwrap();
        assert!(m.private);
        assert_eq!(m.e_user, 0.0);
        assert!((total - 0.5).abs() < 1e-12);
        assert_eq!(m.delivery_frac, 0.0);
    }

    #[test]
    fn privacy_boundary_is_inclusive() {
        // K = 2 orthogonal; attacker gets exactly one triple -> E_A = 0.5 = gamma.
        let attacker = AttackerConfig {
            d_sa: Some(1.0),
            d_ja: Some(10.0),
            detector: DetectorPolicy::OracleMargin { margin_w: 0.01 },
            monitoring: MonitoringStrategy::Fixed { slots: vec![0] },
        };
        let ep = EpisodeConfig { slots: 2, monitor_budget: 1, attackers: vec![attacker], ..Default::default() };
        let mut env = CovertEnv::new(scenario(orthogonal_scene(2), ep));
        env.reset(0);
        let r0 = env.step(ActionCommand { selection: Selection::Triple(0), power_w: 1.0 }).unwrap();
        assert!(r0.outcome.attackers[0].eavesdropped);
        assert_eq!(r0.outcome.e_attacker, 0.5);
        env.step(ActionCommand { selection: Selection::Triple(1), power_w: 1.0 }).unwrap();
        let m = env.episode_metrics().unwrap();
        assert_eq!(m.e_attacker, 0.5);
        assert!(m.private);
        assert_eq!(m.delivery_frac, 1.0);
        assert!((m.episode_return - m.closed_form_return).abs() < 1e-12);
    }

    #[test]
    fn gated_step_reward_is_zero_above_threshold() {
        let attacker = AttackerConfig {
            d_sa: Some(1.0),
            d_ja: Some(10.0),
            detector: DetectorPolicy::OracleMargin { margin_w: 0.01 },
            monitoring: MonitoringStrategy::FirstG,
        };
        let scene = SemanticScene::synthetic(4, 8, 2, 0).unwrap();
        let ep = EpisodeConfig { slots: 4, monitor_budget: 4, attackers: vec![attacker], ..Default::default() };
        let mut env = CovertEnv::new(scenario(scene, ep));
        env.reset(0);
        let r = env.step(ActionCommand { selection: Selection::Triple(0), power_w: 1.0 }).unwrap();
        assert!(r.outcome.e_attacker > 0.5);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn eavesdropping_requires_monitoring_detection_and_transmission() {
        let mut env = default_env();
        for seed in 0..200 {
            env.reset(seed);
            let mut slot = 0;
            while !env.is_done() {
                let a = if slot % 3 == 2 || slot >= 8 {
                    ActionCommand::idle()
                } else {
                    let id = env.feasibility_mask().iter().position(|&m| m).unwrap();
                    ActionCommand { selection: Selection::Triple(id), power_w: (slot as f64 * 0.13) % 1.0 }
                };
                let a = if env.feasibility_mask()[8] || !matches!(a.selection, Selection::Idle) {
                    a
                } else {
                    let id = env.feasibility_mask().iter().position(|&m| m).unwrap();
                    ActionCommand { selection: Selection::Triple(id), power_w: 0.9 }
                };
                let out = env.step(a).unwrap().outcome;
                for at in &out.attackers {
                    if at.eavesdropped {
                        assert!(at.monitored && at.detected && out.transmitted.is_some());
                    }
                }
                slot += 1;
            }
            let m = env.episode_metrics().unwrap();
            assert_eq!(m.audit(env.scenario()).total(), 0);
        }
    }
}
