//! Test-time robustness evaluation.
//!
//! The protagonist always acts greedily on the ensemble mean. In the two
//! perturbed regimes every 11th step of an episode is handed to a perturber
//! (uniform random actions, or a trained adversary acting greedily).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ensemble::{select_action_test, AgentRole, EnsembleQNetwork, RiskConfig};
use crate::env::{Observation, Speedway, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{active_agent, ScheduleXi};

/// 10 protagonist actions, then 1 foreign action, from the first step.
pub const EVAL_SCHEDULE: ScheduleXi = ScheduleXi { xi: 0, m: 10, n: 1 };

pub const DEFAULT_EPISODES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    None,
    RandomPerturb,
    AdversarialPerturb,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::None, Regime::RandomPerturb, Regime::AdversarialPerturb];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::RandomPerturb => "random",
            Regime::AdversarialPerturb => "adversarial",
        }
    }

    pub fn is_perturbed(self) -> bool {
        self != Regime::None
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown regime {s:?}; expected none, random or adversarial")))
    }
}

/// Anything that picks an action from an observation.
pub trait Controller: Sync {
    fn act(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize>;
}

/// Greedy choice on the risk-modified ensemble mean.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub net: &'a EnsembleQNetwork,
    pub role: AgentRole,
    pub risk: RiskConfig,
}

impl Controller for GreedyPolicy<'_> {
    fn act(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<usize> {
        select_action_test(self.net, obs.as_slice(), self.role, &self.risk)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

impl Controller for UniformRandom {
    fn act(&self, _obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(rng.random_range(0..NUM_ACTIONS))
    }
}

/// Always the same action; handy for scripted baselines.
#[derive(Debug, Clone, Copy)]
pub struct FixedAction(pub usize);

impl Controller for FixedAction {
    fn act(&self, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub progress_total: f64,
    pub progress_pure: f64,
    pub catastrophe_reward: f64,
    pub steps: u32,
    pub perturbation_steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stats {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Stats { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stats { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub regime: Regime,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn progress_total(&self) -> Stats {
        Stats::of(self.episodes.iter().map(|e| e.progress_total))
    }

    pub fn progress_pure(&self) -> Stats {
        Stats::of(self.episodes.iter().map(|e| e.progress_pure))
    }

    pub fn catastrophe_reward(&self) -> Stats {
        Stats::of(self.episodes.iter().map(|e| e.catastrophe_reward))
    }

    pub fn steps(&self) -> Stats {
        Stats::of(self.episodes.iter().map(|e| e.steps as f64))
    }

    pub const CSV_HEADER: [&'static str; 7] = [
        "episode",
        "regime",
        "progress_total",
        "progress_pure",
        "catastrophe_reward",
        "steps",
        "perturbation_steps",
    ];

    /// One row per episode followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::CSV_HEADER)?;
        for e in &self.episodes {
            wr.write_record([
                e.episode.to_string(),
                self.regime.to_string(),
                e.progress_total.to_string(),
                e.progress_pure.to_string(),
                e.catastrophe_reward.to_string(),
                e.steps.to_string(),
                e.perturbation_steps.to_string(),
            ])?;
        }
        let pert = Stats::of(self.episodes.iter().map(|e| e.perturbation_steps as f64));
        wr.write_record([
            "mean".to_string(),
            self.regime.to_string(),
            self.progress_total().mean.to_string(),
            self.progress_pure().mean.to_string(),
            self.catastrophe_reward().mean.to_string(),
            self.steps().mean.to_string(),
            pert.mean.to_string(),
        ])?;
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Rolls out `episodes` test episodes under `regime`.
///
/// Episode `i` draws its start state and any random perturbations from
/// streams keyed by `seed` and `i` only, so results do not depend on
/// evaluation order or on other regimes being evaluated.
pub fn evaluate(
    protagonist: &dyn Controller,
    adversary: Option<&dyn Controller>,
    regime: Regime,
    episodes: usize,
    env: &Speedway,
    seed: u64,
) -> Result<EvalReport> {
    let perturber: Option<&dyn Controller> = match (regime, adversary) {
        (Regime::AdversarialPerturb, None) => {
            return Err(Error::Usage("adversarial regime needs an adversary".into()))
        }
        (Regime::AdversarialPerturb, Some(a)) => Some(a),
        (Regime::RandomPerturb, None) => Some(&UniformRandom),
        (_, Some(_)) => {
            return Err(Error::Usage(format!("an adversary only applies to the adversarial regime, not {regime}")))
        }
        (Regime::None, None) => None,
    };
    let results = (0..episodes)
        .into_par_iter()
        .map(|i| run_episode(i, protagonist, perturber, env, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        regime,
        episodes: results,
    })
}

fn run_episode(
    episode: usize,
    protagonist: &dyn Controller,
    perturber: Option<&dyn Controller>,
    env: &Speedway,
    seed: u64,
) -> Result<EpisodeResult> {
    rollout(episode, protagonist, perturber, env, seed, false).map(|t| t.result)
}

/// States visited in one test episode, each tagged with the agent that
/// acts there (for the final state: the agent that would act next).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(Observation, AgentRole)>,
    pub result: EpisodeResult,
}

/// Plays test episode `episode`; states are only kept when `record` is set.
pub fn rollout(
    episode: usize,
    protagonist: &dyn Controller,
    perturber: Option<&dyn Controller>,
    env: &Speedway,
    seed: u64,
    record: bool,
) -> Result<Trajectory> {
    let key = rng::EVAL_BASE + 2 * episode as u64;
    let mut env_rng = rng::stream(seed, key);
    let mut act_rng = rng::stream(seed, key + 1);
    let (mut state, mut obs) = env.reset(&mut env_rng);
    let mut states = Vec::new();
    let mut res = EpisodeResult {
        episode,
        progress_total: 0.0,
        progress_pure: 0.0,
        catastrophe_reward: 0.0,
        steps: 0,
        perturbation_steps: 0,
    };
    let actor = |t: u64| match perturber {
        Some(_) => active_agent(t, &EVAL_SCHEDULE),
        None => AgentRole::Protagonist,
    };
    loop {
        let local_t = res.steps as u64;
        let role = actor(local_t);
        if record {
            states.push((obs, role));
        }
        let action = match (role, perturber) {
            (AgentRole::Adversary, Some(p)) => {
                res.perturbation_steps += 1;
                p.act(&obs, &mut act_rng)?
            }
            _ => protagonist.act(&obs, &mut act_rng)?,
        };
        let out = env.step(&state, &obs, action)?;
        res.steps += 1;
        res.progress_total += out.reward.progress_total;
        res.progress_pure += out.reward.progress_pure;
        res.catastrophe_reward += out.reward.catastrophe;
        if out.done {
            if record {
                states.push((out.obs, actor(res.steps as u64)));
            }
            return Ok(Trajectory { states, result: res });
        }
        state = out.state;
        obs = out.obs;
    }
}

/// Best (highest) per-checkpoint mean catastrophe reward.
pub fn best_catastrophe_reward(reports: &[EvalReport]) -> Option<f64> {
    reports
        .iter()
        .map(|r| r.catastrophe_reward().mean)
        .reduce(f64::max)
}

/// One checkpoint of a model taking part in a comparison.
pub struct CompareEntry<'a> {
    pub name: String,
    pub protagonist: &'a dyn Controller,
    /// Used for the adversarial column only.
    pub adversary: Option<&'a dyn Controller>,
}

/// Rows are models, columns regimes, cells the average best catastrophe
/// reward over each model's checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub regimes: Vec<Regime>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ComparisonTable {
    pub fn cell(&self, model: &str, regime: Regime) -> Option<f64> {
        let col = self.regimes.iter().position(|r| *r == regime)?;
        self.rows.iter().find(|(n, _)| n == model).map(|(_, v)| v[col])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(self.regimes.iter().map(|r| r.to_string()));
        wr.write_record(&header)?;
        for (name, cells) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(cells.iter().map(|c| c.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Evaluates every entry under every regime. Entries sharing a name are
/// checkpoints of one model and are folded with [`best_catastrophe_reward`].
pub fn compare_models(
    entries: &[CompareEntry<'_>],
    regimes: &[Regime],
    episodes: usize,
    env: &Speedway,
    seed: u64,
) -> Result<ComparisonTable> {
    if entries.is_empty() {
        return Err(Error::Usage("nothing to compare".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    for e in entries {
        if !names.contains(&e.name.as_str()) {
            names.push(&e.name);
        }
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let mut cells = Vec::with_capacity(regimes.len());
        for &regime in regimes {
            let mut reports = Vec::new();
            for e in entries.iter().filter(|e| e.name == name) {
                let adversary = if regime == Regime::AdversarialPerturb {
                    Some(e.adversary.ok_or_else(|| {
                        Error::Usage(format!("model {name} has no adversary for the adversarial regime"))
                    })?)
                } else {
                    None
                };
                reports.push(evaluate(e.protagonist, adversary, regime, episodes, env, seed)?);
            }
            cells.push(best_catastrophe_reward(&reports).expect("at least one entry per name"));
        }
        rows.push((name.to_string(), cells));
    }
    Ok(ComparisonTable {
        regimes: regimes.to_vec(),
        rows,
    })
}
