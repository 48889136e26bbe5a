//! Splitting an episode's value change between the two agents.
//!
//! With `V~(s_i) = +V*(s_i)` on protagonist steps and `-V*(s_i)` on
//! adversary steps, each step's temporal difference
//! `TD_i = V~(s_{i+1}) - V~(s_i)` is credited to whoever acted at `i`.
//! The two totals telescope to `V~(s_T) - V~(s_1)`.

use std::io::Write;

use crate::ensemble::AgentRole;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CreditStep {
    pub role: AgentRole,
    /// `+1` for protagonist steps, `-1` for adversary steps.
    pub indicator: f64,
    pub value: f64,
    pub signed_value: f64,
    /// Zero on the last state, which has no successor.
    pub td: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreditTrace {
    pub steps: Vec<CreditStep>,
    pub td_p: f64,
    pub td_a: f64,
}

impl CreditTrace {
    /// `V~(s_T) - V~(s_1)`.
    pub fn signed_value_change(&self) -> f64 {
        self.steps.last().map_or(0.0, |l| l.signed_value) - self.steps.first().map_or(0.0, |f| f.signed_value)
    }

    pub const STEPS_HEADER: [&'static str; 7] =
        ["episode", "step", "role", "value", "signed_value", "td", "indicator"];

    pub fn write_steps<W: Write>(&self, episode: usize, wr: &mut csv::Writer<W>) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            wr.write_record([
                episode.to_string(),
                i.to_string(),
                s.role.to_string(),
                s.value.to_string(),
                s.signed_value.to_string(),
                s.td.to_string(),
                s.indicator.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// Decomposes a single-episode trajectory of `(state, acting role)` pairs.
pub fn credit_decompose<S>(
    trajectory: &[(S, AgentRole)],
    mut value_fn: impl FnMut(&S, AgentRole) -> Result<f64>,
) -> Result<CreditTrace> {
    if trajectory.len() < 2 {
        return Err(Error::Usage(format!(
            "credit assignment needs at least 2 states, got {}",
            trajectory.len()
        )));
    }
    let mut steps = Vec::with_capacity(trajectory.len());
    for (state, role) in trajectory {
        let value = value_fn(state, *role)?;
        let indicator = role.reward_sign();
        steps.push(CreditStep {
            role: *role,
            indicator,
            value,
            signed_value: indicator * value,
            td: 0.0,
        });
    }
    let (mut td_p, mut td_a) = (0.0, 0.0);
    for i in 0..steps.len() - 1 {
        let td = steps[i + 1].signed_value - steps[i].signed_value;
        steps[i].td = td;
        let ind = steps[i].indicator;
        td_p += (1.0 + ind) / 2.0 * td;
        td_a += (1.0 - ind) / 2.0 * td;
    }
    Ok(CreditTrace { steps, td_p, td_a })
}
