//! Cross-agent multi-step targets.
//!
//! A role's transition window starts with its own action and runs through
//! every intervening step of the other agent up to its next decision (or the
//! end of the episode). All rewards in the window are signed from the
//! window owner's point of view: `+r` for the protagonist, `-r` for the
//! adversary.

use crate::ensemble::{AgentRole, BootstrapMask, EnsembleQNetwork};
use crate::env::Observation;
use crate::error::{Error, Result};

/// One environment step as seen by the agent that took it.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    /// Environment reward `r_t` (unsigned).
    pub reward: f64,
    pub next_obs: Observation,
    /// Terminal (catastrophe) step; time-limit cutoffs are not terminal.
    pub done: bool,
    pub role: AgentRole,
    pub t: u64,
}

/// A collapsed window, ready for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepTransition {
    pub role: AgentRole,
    pub obs: Observation,
    pub action: usize,
    /// `sum_j gamma^j * sign(role) * r_j` over the window.
    pub cumulative_reward: f64,
    /// Discount exponent of the bootstrap term (window length).
    pub horizon: u32,
    pub bootstrap_obs: Observation,
    pub terminal: bool,
}

/// Checks the window shape and folds it into an [`NStepTransition`].
pub fn collapse_window(window: &[Transition], role: AgentRole, gamma: f64) -> Result<NStepTransition> {
    let first = window
        .first()
        .ok_or_else(|| Error::Sequencing("empty window".into()))?;
    if first.role != role {
        return Err(Error::Sequencing(format!(
            "window for {role} starts with a {} step",
            first.role
        )));
    }
    for (i, pair) in window.windows(2).enumerate() {
        if pair[1].role == role {
            return Err(Error::Sequencing(format!(
                "{role} acts again at window position {} before the window closed",
                i + 1
            )));
        }
        if pair[1].t != pair[0].t + 1 {
            return Err(Error::Sequencing(format!(
                "non-consecutive steps {} -> {}",
                pair[0].t, pair[1].t
            )));
        }
        if pair[0].done {
            return Err(Error::Sequencing(format!("terminal step {} is not last", pair[0].t)));
        }
    }
    let sign = role.reward_sign();
    let mut cumulative = sign * first.reward;
    let mut discount = 1.0;
    for tr in &window[1..] {
        discount *= gamma;
        cumulative += discount * (sign * tr.reward);
    }
    let last = window.last().expect("non-empty");
    Ok(NStepTransition {
        role,
        obs: first.obs,
        action: first.action,
        cumulative_reward: cumulative,
        horizon: window.len() as u32,
        bootstrap_obs: last.next_obs,
        terminal: last.done,
    })
}

/// Mean over the heads active in `mask` (all heads when the mask is empty)
/// of each target head's `max_a Q*_i(obs, a)`.
pub fn bootstrap_value(target_net: &EnsembleQNetwork, obs: &[f64], mask: &BootstrapMask) -> Result<f64> {
    let mut heads = mask.active_heads();
    if heads.is_empty() {
        heads = (0..target_net.k()).collect();
    }
    let rows = target_net.q_heads(obs, &heads)?;
    let sum: f64 = rows
        .iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(sum / rows.len() as f64)
}

/// Regression target for a collapsed window.
pub fn nstep_target(
    tr: &NStepTransition,
    gamma: f64,
    target_net: &EnsembleQNetwork,
    mask: &BootstrapMask,
) -> Result<f64> {
    if tr.terminal {
        return Ok(tr.cumulative_reward);
    }
    let boot = bootstrap_value(target_net, tr.bootstrap_obs.as_slice(), mask)?;
    Ok(tr.cumulative_reward + gamma.powi(tr.horizon as i32) * boot)
}

/// Collapses `window` and computes its target in one go.
pub fn build_nstep_target(
    window: &[Transition],
    role: AgentRole,
    gamma: f64,
    target_net: &EnsembleQNetwork,
    mask: &BootstrapMask,
) -> Result<(NStepTransition, f64)> {
    let tr = collapse_window(window, role, gamma)?;
    let y = nstep_target(&tr, gamma, target_net, mask)?;
    Ok((tr, y))
}
