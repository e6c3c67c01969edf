//! Personalized lane-change decision lab.
//!
//! The crate is organised the way data flows through an experiment:
//!
//! - [`sim`]: two-lane highway scenario sampling, kinematic stepping and
//!   state normalization.
//! - [`indicators`]: the `(t_f, t_nf, dv_nb)` personalization triple, style
//!   reference lines, OLS fitting, correlation and style clustering.
//! - [`reward`]: the complementary piecewise-linear personalization reward.
//! - [`qnet`]: a from-scratch fully connected Q-network with exact
//!   backpropagation, Adam and JSON checkpoints.
//! - [`agent`]: replay buffer, epsilon-greedy DQN training and the greedy
//!   one-step-reward benchmark.
//! - [`eval`]: rollouts, MAE against reference lines, decision agreement and
//!   result export.
//! - [`dil`]: driver-in-the-loop session server speaking newline-delimited JSON.

pub mod agent;
pub mod dil;
pub mod eval;
pub mod indicators;
mod linalg;
pub mod qnet;
pub mod reward;
pub mod seed;
pub mod sim;

pub use agent::{Agent, TrainingConfig};
pub use indicators::{DecisionRecord, IndicatorVector, StyleProfile};
pub use qnet::Network;
pub use reward::RewardParams;
pub use sim::{Action, ScenarioConfig, ScenarioState};
