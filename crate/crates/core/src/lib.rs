//! Covert semantic communication laboratory.
//!
//! A server streams the semantic triples of an image to a user over `N` time
//! slots while a friendly jammer emits uniformly random interference and one
//! or more attackers monitor a subset of slots with a radiometer detector.
//! The server picks which triple to send in every slot and at what power.
//!
//! Crate layout:
//!
//! - [`semcore`]: triples, embeddings, the graph-to-nearest-triple (GNT)
//!   similarity metric and the masked importance matrix used as RL state.
//! - [`channel`]: path loss, Shannon rate, latency and the attacker detectors.
//! - [`env`]: the episodic decision process with rewards and constraint checks.
//! - [`neural`]: dense networks with exact backpropagation, Adam, soft updates.
//! - [`replay`]: uniform and TD-error prioritized replay.
//! - [`agents`]: PS-TD3 / TD3, DDPG, DQN and a random policy.
//! - [`harness`]: configuration, training/evaluation runs, sweeps and CSV output.

pub mod agents;
pub mod channel;
pub mod env;
pub mod harness;
pub mod neural;
pub mod replay;
pub mod seeding;
pub mod semcore;
