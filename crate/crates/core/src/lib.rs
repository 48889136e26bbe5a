//! Risk-averse robust adversarial reinforcement learning on a toy speedway.
//!
//! A protagonist and an adversary share control of one car, alternating on
//! a fixed schedule. Both learn ensemble Q-networks whose head disagreement
//! serves as a risk estimate: the protagonist avoids high-variance actions,
//! the adversary seeks them.

pub mod cli;
pub mod credit;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod train;
