//! Experience replay.
//!
//! [`PrioritizedBuffer`] samples transition `n` with probability
//! `b_n / sum_i b_i`, where `b_n = max(|delta_n|^alpha, PRIORITY_FLOOR)`.
//! [`UniformBuffer`] keeps the same ring semantics without priorities and is
//! used by the baselines.

use rand::Rng;
use thiserror::Error;

/// Smallest stored priority, so zero-error transitions stay reachable.
pub const PRIORITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("buffer is empty")]
    Empty,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("alpha = {0} must be finite and >= 0")]
    Alpha(f64),
    #[error("{indices} indices but {deltas} deltas")]
    LengthMismatch { indices: usize, deltas: usize },
    #[error("non-finite TD error {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Raw agent output: the actor vector, or for DQN the discrete action
    /// index as a single coordinate.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Feasibility mask of the next state, for targets that maximize over
    /// legal actions.
    pub next_mask: Vec<bool>,
}

/// Handle to a stored transition. The generation detects slots that were
/// overwritten since the handle was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Debug, Clone)]
struct Ring {
    capacity: usize,
    items: Vec<Transition>,
    generations: Vec<u64>,
    next: usize,
}

impl Ring {
    fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity), generations: Vec::with_capacity(capacity), next: 0 })
    }

    /// Stores `t`, evicting the oldest entry at capacity. Returns the slot.
    fn push(&mut self, t: Transition) -> usize {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
            self.generations.push(0);
        } else {
            self.items[slot] = t;
            self.generations[slot] += 1;
        }
        self.next = (slot + 1) % self.capacity;
        slot
    }

    fn handle(&self, slot: usize) -> SampleIndex {
        SampleIndex { slot, generation: self.generations[slot] }
    }

    fn is_current(&self, idx: SampleIndex) -> bool {
        idx.slot < self.items.len() && self.generations[idx.slot] == idx.generation
    }
}

/// Binary sum tree over a power-of-two number of leaves. Internal nodes are
/// always recomputed from their children, so no drift accumulates.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, slot: usize) -> f64 {
        self.nodes[self.leaves + slot]
    }

    fn set(&mut self, slot: usize, value: f64) {
        let mut i = self.leaves + slot;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`, for `u` in `[0, total)`.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = 2 * i;
            if u < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                i = left;
            } else {
                u -= self.nodes[left];
                i = left + 1;
            }
        }
        i - self.leaves
    }
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer {
    ring: Ring,
    tree: SumTree,
    alpha: f64,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self, ReplayError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(ReplayError::Alpha(alpha));
        }
        Ok(Self { ring: Ring::new(capacity)?, tree: SumTree::new(capacity), alpha })
    }

    pub fn len(&self) -> usize {
        self.ring.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn priority_of(&self, abs_delta: f64) -> Result<f64, ReplayError> {
        if !abs_delta.is_finite() {
            return Err(ReplayError::NonFinite(abs_delta));
        }
        Ok(abs_delta.abs().powf(self.alpha).max(PRIORITY_FLOOR))
    }

    /// Stores `t` with priority derived from its TD error.
    pub fn push(&mut self, t: Transition, abs_delta: f64) -> Result<SampleIndex, ReplayError> {
        let p = self.priority_of(abs_delta)?;
        let slot = self.ring.push(t);
        self.tree.set(slot, p);
        Ok(self.ring.handle(slot))
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    /// Sampling probability of every stored transition, in slot order.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = (0..self.len()).map(|s| self.tree.get(s)).sum();
        (0..self.len()).map(|s| self.tree.get(s) / total).collect()
    }

    /// `batch` independent draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampleIndex>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let total = self.tree.total();
        let last = self.len() - 1;
        Ok((0..batch)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                self.ring.handle(self.tree.find(u).min(last))
            })
            .collect())
    }

    pub fn get(&self, idx: SampleIndex) -> &Transition {
        &self.ring.items[idx.slot]
    }

    /// Re-prioritizes sampled transitions. Handles whose slot has since been
    /// overwritten are skipped; their count is returned.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], abs_deltas: &[f64]) -> Result<usize, ReplayError> {
        if indices.len() != abs_deltas.len() {
            return Err(ReplayError::LengthMismatch { indices: indices.len(), deltas: abs_deltas.len() });
        }
        let mut stale = 0;
        for (&idx, &d) in indices.iter().zip(abs_deltas) {
            let p = self.priority_of(d)?;
            if self.ring.is_current(idx) {
                self.tree.set(idx.slot, p);
            } else {
                stale += 1;
            }
        }
        Ok(stale)
    }
}

#[derive(Debug, Clone)]
pub struct UniformBuffer {
    ring: Ring,
}

impl UniformBuffer {
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        Ok(Self { ring: Ring::new(capacity)? })
    }

    pub fn len(&self) -> usize {
        self.ring.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> SampleIndex {
        let slot = self.ring.push(t);
        self.ring.handle(slot)
    }

    /// Draws one `f64` per index, like the prioritized buffer, so equal
    /// priorities there reproduce this sampler draw for draw.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampleIndex>, ReplayError> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.len();
        Ok((0..batch)
            .map(|_| {
                let slot = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
                self.ring.handle(slot)
            })
            .collect())
    }

    pub fn get(&self, idx: SampleIndex) -> &Transition {
        &self.ring.items[idx.slot]
    }
}

/// Either buffer behind one interface, selected by the agent configuration.
#[derive(Debug, Clone)]
pub enum ReplayBuffer {
    Prioritized(PrioritizedBuffer),
    Uniform(UniformBuffer),
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        match self {
            Self::Prioritized(b) => b.len(),
            Self::Uniform(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `abs_delta` is ignored by the uniform buffer.
    pub fn push(&mut self, t: Transition, abs_delta: f64) -> Result<SampleIndex, ReplayError> {
        match self {
            Self::Prioritized(b) => b.push(t, abs_delta),
            Self::Uniform(b) => Ok(b.push(t)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampleIndex>, ReplayError> {
        match self {
            Self::Prioritized(b) => b.sample(batch, rng),
            Self::Uniform(b) => b.sample(batch, rng),
        }
    }

    pub fn get(&self, idx: SampleIndex) -> &Transition {
        match self {
            Self::Prioritized(b) => b.get(idx),
            Self::Uniform(b) => b.get(idx),
        }
    }

    pub fn update_priorities(&mut self, indices: &[SampleIndex], abs_deltas: &[f64]) -> Result<usize, ReplayError> {
        match self {
            Self::Prioritized(b) => b.update_priorities(indices, abs_deltas),
            Self::Uniform(_) => Ok(0),
        }
    }

    pub fn is_prioritized(&self) -> bool {
        matches!(self, Self::Prioritized(_))
    }
}
