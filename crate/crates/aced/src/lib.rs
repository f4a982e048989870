//! Reliability-arbitrated ensemble of tabular DQN variants for continual RL.
//!
//! The crate wires four pieces together:
//!
//! * [`arbitration`] — per-agent reliabilities from recent losses, smoothed,
//!   clamped and normalized into action-selection weights.
//! * [`replay`] — proportional prioritized replay with n-step returns and
//!   agency-based assignment of presampled transitions to ensemble members.
//! * [`agents`] — tabular analogues of the five DQN variants (standard,
//!   double, dueling, noisy, distributional), each reporting a scalar loss
//!   the arbiter can consume.
//! * [`env`] — small gridworld families on a block schedule that flips the
//!   reward objective and injects random-action probability.
//!
//! [`oracle`] implements the tabular theory checks (Bellman contraction,
//! value iteration, stochastic-approximation runs, operator-gap and
//! tracking-error diagnostics) and [`runner`] orchestrates full experiments,
//! evaluation and the analysis pipeline.

pub mod agents;
pub mod arbitration;
pub mod env;
pub mod error;
pub mod oracle;
pub mod replay;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
