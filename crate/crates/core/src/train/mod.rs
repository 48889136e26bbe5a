//! Two-agent training loop with alternating control.
//!
//! Each step the schedule picks who drives. The protagonist (and a trained
//! adversary, when present) acts epsilon-greedily on its risk-modified
//! action values, using one ensemble head sampled per episode. Every agent
//! keeps its own replay buffer of collapsed multi-step windows; every
//! `train_freq` steps each learner draws a batch plus bootstrap masks and
//! takes one Adam step, and every `target_update_freq` steps the target
//! networks are synchronized.

pub mod nstep;
pub mod replay;
pub mod schedule;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{
    sample_mask, select_action_detailed, sync_target, td_update, AgentRole, Architecture,
    BootstrapMask, EnsembleQNetwork, MaskScheme, RiskConfig, TdSample,
};
use crate::env::{Observation, Speedway, TrackState, NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::io::metrics::{MetricsLog, MetricsRow};
use crate::rng;

pub use nstep::{build_nstep_target, collapse_window, nstep_target, NStepTransition, Transition};
pub use replay::ReplayBuffer;
pub use schedule::{active_agent, EpsilonSchedule, ScheduleXi};

/// Baseline roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Dqn,
    Bsdqn,
    Bsdqnrand,
    Bsdqnrandriskaverse,
    Bsdqnadv,
    Bsdqnadvriskaverse,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dqn,
        Variant::Bsdqn,
        Variant::Bsdqnrand,
        Variant::Bsdqnrandriskaverse,
        Variant::Bsdqnadv,
        Variant::Bsdqnadvriskaverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dqn => "dqn",
            Variant::Bsdqn => "bsdqn",
            Variant::Bsdqnrand => "bsdqnrand",
            Variant::Bsdqnrandriskaverse => "bsdqnrandriskaverse",
            Variant::Bsdqnadv => "bsdqnadv",
            Variant::Bsdqnadvriskaverse => "bsdqnadvriskaverse",
        }
    }

    pub fn is_risk_averse(self) -> bool {
        matches!(self, Variant::Bsdqnrandriskaverse | Variant::Bsdqnadvriskaverse)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Usage(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub total_steps: u64,
    pub train_freq: u64,
    pub target_update_freq: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub buffer_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub schedule: ScheduleXi,
    pub risk: RiskConfig,
    pub zero_sum: bool,
    /// Ensemble size override; ensemble variants default to 10, dqn is 1.
    pub heads: Option<usize>,
    pub mask_rate: f64,
    /// `Some(n)`: n heads per sample weighted `1 + Poisson(rate)`;
    /// `None`: plain `Poisson(rate)` per head.
    pub heads_per_update: Option<usize>,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bsdqnadvriskaverse,
            total_steps: 100_000,
            train_freq: 4,
            target_update_freq: 1_000,
            batch_size: 32,
            gamma: 0.99,
            learning_rate: 1e-3,
            grad_clip: Some(10.0),
            buffer_capacity: 10_000,
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.02,
                t0: 1_000,
                t1: 50_000,
            },
            schedule: ScheduleXi {
                xi: 55_000,
                m: 10,
                n: 1,
            },
            risk: RiskConfig::new(0.1, 0.1),
            zero_sum: true,
            heads: None,
            mask_rate: 0.03,
            heads_per_update: Some(5),
            trunk_hidden: vec![64, 64],
            head_hidden: vec![],
            seed: 0,
        }
    }
}

pub const DEFAULT_ENSEMBLE_HEADS: usize = 10;

/// What the protagonist learner looks like for a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtagonistSpec {
    pub heads: usize,
    pub lambda_p: f64,
    pub mask_rate: f64,
    pub mask_scheme: MaskScheme,
}

/// Who takes the adversary's slots in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturberSpec {
    None,
    Random,
    Adversary {
        heads: usize,
        lambda_a: f64,
        mask_rate: f64,
        mask_scheme: MaskScheme,
    },
}

impl TrainConfig {
    /// All problems at once, one diagnostic each.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.train_freq == 0 {
            errs.push("train.train_freq must be >= 1".to_string());
        }
        if self.target_update_freq == 0 {
            errs.push("train.target_update_freq must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errs.push(format!("train.gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            errs.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                errs.push(format!("train.grad_clip must be > 0, got {c}"));
            }
        }
        if self.buffer_capacity == 0 {
            errs.push("train.buffer_capacity must be >= 1".to_string());
        }
        if self.schedule.m == 0 {
            errs.push("schedule.m must be >= 1".to_string());
        }
        if !(self.mask_rate >= 0.0) || !self.mask_rate.is_finite() {
            errs.push(format!("mask.rate must be >= 0, got {}", self.mask_rate));
        }
        if self.trunk_hidden.is_empty() || self.trunk_hidden.iter().any(|d| *d == 0) {
            errs.push(format!("network.trunk_hidden must be non-empty and positive, got {:?}", self.trunk_hidden));
        }
        if self.head_hidden.iter().any(|d| *d == 0) {
            errs.push(format!("network.head_hidden must be positive, got {:?}", self.head_hidden));
        }
        if let Err(Error::Config(e)) = self.epsilon.validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.risk.validate(self.zero_sum) {
            errs.extend(e);
        }
        let k = match (self.variant, self.heads) {
            (Variant::Dqn, Some(k)) if k != 1 => {
                errs.push(format!("train.heads = {k} conflicts with variant dqn, which uses a single head"));
                1
            }
            (Variant::Dqn, _) => 1,
            (_, Some(0)) => {
                errs.push("train.heads must be >= 1".to_string());
                1
            }
            (_, Some(k)) => k,
            (_, None) => DEFAULT_ENSEMBLE_HEADS,
        };
        if self.variant != Variant::Dqn {
            if let Some(h) = self.heads_per_update {
                if h == 0 || h > k {
                    errs.push(format!("mask.heads_per_update must lie in 1..={k}, got {h}"));
                }
            }
        }
        if self.variant.is_risk_averse() && self.risk.lambda_p == 0.0 {
            errs.push(format!("variant {} needs risk.lambda_p > 0", self.variant));
        }
        if self.variant == Variant::Bsdqnadvriskaverse && self.risk.lambda_a == 0.0 {
            errs.push(format!("variant {} needs risk.lambda_a > 0", self.variant));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Resolves the variant into learner and perturber settings.
pub fn make_variant(cfg: &TrainConfig) -> Result<(ProtagonistSpec, PerturberSpec)> {
    cfg.validate()?;
    let k = cfg.heads.unwrap_or(DEFAULT_ENSEMBLE_HEADS);
    let scheme = match cfg.heads_per_update {
        Some(h) => MaskScheme::Subset { heads_per_update: h },
        None => MaskScheme::Plain,
    };
    let ensemble = |lambda_p: f64| ProtagonistSpec {
        heads: k,
        lambda_p,
        mask_rate: cfg.mask_rate,
        mask_scheme: scheme,
    };
    let adversary = |lambda_a: f64| PerturberSpec::Adversary {
        heads: k,
        lambda_a,
        mask_rate: cfg.mask_rate,
        mask_scheme: scheme,
    };
    Ok(match cfg.variant {
        Variant::Dqn => (
            ProtagonistSpec {
                heads: 1,
                lambda_p: 0.0,
                mask_rate: 0.0,
                mask_scheme: MaskScheme::Subset { heads_per_update: 1 },
            },
            PerturberSpec::None,
        ),
        Variant::Bsdqn => (ensemble(0.0), PerturberSpec::None),
        Variant::Bsdqnrand => (ensemble(0.0), PerturberSpec::Random),
        Variant::Bsdqnrandriskaverse => (ensemble(cfg.risk.lambda_p), PerturberSpec::Random),
        Variant::Bsdqnadv => (ensemble(0.0), adversary(0.0)),
        Variant::Bsdqnadvriskaverse => (ensemble(cfg.risk.lambda_p), adversary(cfg.risk.lambda_a)),
    })
}

fn architecture(cfg: &TrainConfig, heads: usize) -> Architecture {
    Architecture {
        input_dim: OBS_DIM,
        trunk_hidden: cfg.trunk_hidden.clone(),
        head_hidden: cfg.head_hidden.clone(),
        heads,
        num_actions: NUM_ACTIONS,
    }
}

/// One value-learning agent: online and target ensembles plus its replay.
#[derive(Debug, Clone)]
pub struct Learner {
    pub role: AgentRole,
    pub online: EnsembleQNetwork,
    pub target: EnsembleQNetwork,
    pub buffer: ReplayBuffer<NStepTransition>,
    pub risk: RiskConfig,
    head: usize,
    mask_rate: f64,
    mask_scheme: MaskScheme,
    window: Vec<Transition>,
    rng_action: ChaCha8Rng,
    rng_mask: ChaCha8Rng,
    rng_replay: ChaCha8Rng,
    rng_head: ChaCha8Rng,
}

impl Learner {
    fn new(
        role: AgentRole,
        arch: &Architecture,
        risk: RiskConfig,
        mask_rate: f64,
        mask_scheme: MaskScheme,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let (init, action, mask, replay, head) = match role {
            AgentRole::Protagonist => (
                rng::INIT_PROTAGONIST,
                rng::ACTION_PROTAGONIST,
                rng::MASK_PROTAGONIST,
                rng::REPLAY_PROTAGONIST,
                rng::HEAD_PROTAGONIST,
            ),
            AgentRole::Adversary => (
                rng::INIT_ADVERSARY,
                rng::ACTION_ADVERSARY,
                rng::MASK_ADVERSARY,
                rng::REPLAY_ADVERSARY,
                rng::HEAD_ADVERSARY,
            ),
        };
        let online = EnsembleQNetwork::new(arch, &mut rng::stream(cfg.seed, init))?;
        let mut rng_head = rng::stream(cfg.seed, head);
        let first_head = rng_head.random_range(0..arch.heads);
        Ok(Self {
            role,
            target: online.clone(),
            online,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            risk,
            head: first_head,
            mask_rate,
            mask_scheme,
            window: Vec::new(),
            rng_action: rng::stream(cfg.seed, action),
            rng_mask: rng::stream(cfg.seed, mask),
            rng_replay: rng::stream(cfg.seed, replay),
            rng_head,
        })
    }

    /// Head used for action selection in the current episode.
    pub fn head(&self) -> usize {
        self.head
    }

    fn close_window(&mut self, gamma: f64) -> Result<()> {
        if self.window.is_empty() {
            return Ok(());
        }
        let tr = collapse_window(&self.window, self.role, gamma)?;
        self.buffer.push(tr);
        self.window.clear();
        Ok(())
    }

    fn update(&mut self, cfg: &TrainConfig) -> Result<Option<f64>> {
        if self.buffer.len() < cfg.batch_size {
            return Ok(None);
        }
        let k = self.online.k();
        let slots = self.buffer.sample_slots(cfg.batch_size, &mut self.rng_replay);
        let masks = (0..cfg.batch_size)
            .map(|_| sample_mask(k, self.mask_rate, self.mask_scheme, &mut self.rng_mask))
            .collect::<Result<Vec<BootstrapMask>>>()?;
        let mut samples = Vec::with_capacity(slots.len());
        for (slot, mask) in slots.iter().zip(&masks) {
            let tr = self.buffer.get(*slot).expect("sampled slot in range");
            if mask.is_empty() {
                samples.push(TdSample {
                    obs: tr.obs.as_slice(),
                    action: tr.action,
                    target: 0.0,
                });
                continue;
            }
            let target = nstep_target(tr, cfg.gamma, &self.target, mask)?;
            samples.push(TdSample {
                obs: tr.obs.as_slice(),
                action: tr.action,
                target,
            });
        }
        let loss = td_update(&mut self.online, &samples, &masks, cfg.learning_rate, cfg.grad_clip)?;
        Ok(Some(loss))
    }
}

enum Perturber {
    None,
    Random(ChaCha8Rng),
    Adversary(Box<Learner>),
}

/// Networks produced by a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub protagonist: EnsembleQNetwork,
    pub protagonist_target: EnsembleQNetwork,
    pub adversary: Option<(EnsembleQNetwork, EnsembleQNetwork)>,
    pub metrics: MetricsLog,
}

/// Incremental driver for one training run.
pub struct Trainer {
    cfg: TrainConfig,
    env: Speedway,
    protagonist: Learner,
    perturber: Perturber,
    state: TrackState,
    obs: Observation,
    t: u64,
    episode: u64,
    episode_catastrophes: u32,
    episode_variance_sum: f64,
    episode_decisions: u32,
    rng_env: ChaCha8Rng,
    metrics: MetricsLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env: Speedway) -> Result<Self> {
        let (p_spec, perturber_spec) = make_variant(&cfg)?;
        let protagonist = Learner::new(
            AgentRole::Protagonist,
            &architecture(&cfg, p_spec.heads),
            RiskConfig::new(p_spec.lambda_p, 0.0),
            p_spec.mask_rate,
            p_spec.mask_scheme,
            &cfg,
        )?;
        let perturber = match perturber_spec {
            PerturberSpec::None => Perturber::None,
            PerturberSpec::Random => Perturber::Random(rng::stream(cfg.seed, rng::ACTION_ADVERSARY)),
            PerturberSpec::Adversary {
                heads,
                lambda_a,
                mask_rate,
                mask_scheme,
            } => Perturber::Adversary(Box::new(Learner::new(
                AgentRole::Adversary,
                &architecture(&cfg, heads),
                RiskConfig::new(0.0, lambda_a),
                mask_rate,
                mask_scheme,
                &cfg,
            )?)),
        };
        let mut rng_env = rng::stream(cfg.seed, rng::ENV);
        let (state, obs) = env.reset(&mut rng_env);
        Ok(Self {
            cfg,
            env,
            protagonist,
            perturber,
            state,
            obs,
            t: 0,
            episode: 0,
            episode_catastrophes: 0,
            episode_variance_sum: 0.0,
            episode_decisions: 0,
            rng_env,
            metrics: MetricsLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn protagonist(&self) -> &Learner {
        &self.protagonist
    }

    pub fn adversary(&self) -> Option<&Learner> {
        match &self.perturber {
            Perturber::Adversary(a) => Some(a),
            _ => None,
        }
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    fn has_perturber(&self) -> bool {
        !matches!(self.perturber, Perturber::None)
    }

    fn actor_at(&self, t: u64) -> AgentRole {
        if self.has_perturber() {
            active_agent(t, &self.cfg.schedule)
        } else {
            AgentRole::Protagonist
        }
    }

    /// Runs `steps` more steps, stopping early at `total_steps`.
    pub fn advance(&mut self, steps: u64) -> Result<()> {
        let end = self.t.saturating_add(steps).min(self.cfg.total_steps);
        while self.t < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.advance(self.cfg.total_steps - self.t.min(self.cfg.total_steps))
    }

    fn step(&mut self) -> Result<()> {
        let t = self.t;
        let role = self.actor_at(t);
        let eps = self.cfg.epsilon.value(t);
        let obs_slice = self.obs.as_slice();
        let (action, variance) = match role {
            AgentRole::Protagonist => {
                let p = &mut self.protagonist;
                let d = select_action_detailed(&p.online, obs_slice, role, p.head, &p.risk, eps, &mut p.rng_action)?;
                (d.action, Some(d.variance))
            }
            AgentRole::Adversary => match &mut self.perturber {
                Perturber::Random(r) => (r.random_range(0..NUM_ACTIONS), None),
                Perturber::Adversary(a) => {
                    let d = select_action_detailed(&a.online, obs_slice, role, a.head, &a.risk, eps, &mut a.rng_action)?;
                    (d.action, Some(d.variance))
                }
                Perturber::None => unreachable!("no adversary slots without a perturber"),
            },
        };

        let out = self.env.step(&self.state, &self.obs, action)?;
        let terminal = out.reward.c == 1;
        let transition = Transition {
            obs: self.obs,
            action,
            reward: out.reward.total,
            next_obs: out.obs,
            done: terminal,
            role,
            t,
        };

        // Append to the open windows; close any whose owner acts next.
        let next_actor = self.actor_at(t + 1);
        let gamma = self.cfg.gamma;
        let mut learners: Vec<&mut Learner> = vec![&mut self.protagonist];
        if let Perturber::Adversary(a) = &mut self.perturber {
            learners.push(a);
        }
        for l in learners {
            if l.role == role || !l.window.is_empty() {
                l.window.push(transition.clone());
            }
            if out.done || next_actor == l.role {
                l.close_window(gamma)?;
            }
        }

        if let Some(v) = variance {
            self.episode_variance_sum += v;
            self.episode_decisions += 1;
        }
        if terminal {
            self.episode_catastrophes += 1;
        }

        let mut loss_p = None;
        let mut loss_a = None;
        if t % self.cfg.train_freq == 0 {
            loss_p = self.protagonist.update(&self.cfg)?;
            if let Perturber::Adversary(a) = &mut self.perturber {
                loss_a = a.update(&self.cfg)?;
            }
        }
        if t % self.cfg.target_update_freq == 0 {
            sync_target(&self.protagonist.online, &mut self.protagonist.target)?;
            if let Perturber::Adversary(a) = &mut self.perturber {
                sync_target(&a.online, &mut a.target)?;
            }
        }

        self.metrics.push(MetricsRow {
            t,
            episode: self.episode,
            acting_role: role,
            eps,
            reward_total: out.reward.total,
            reward_progress_total: out.reward.progress_total,
            reward_progress_pure: out.reward.progress_pure,
            catastrophes_this_episode: self.episode_catastrophes,
            loss_p,
            loss_a,
            mean_variance_selected_actions: (self.episode_decisions > 0)
                .then(|| self.episode_variance_sum / self.episode_decisions as f64),
        });

        if out.done {
            self.episode += 1;
            self.episode_catastrophes = 0;
            self.episode_variance_sum = 0.0;
            self.episode_decisions = 0;
            let p = &mut self.protagonist;
            p.head = p.rng_head.random_range(0..p.online.k());
            if let Perturber::Adversary(a) = &mut self.perturber {
                a.head = a.rng_head.random_range(0..a.online.k());
            }
            let (s, o) = self.env.reset(&mut self.rng_env);
            self.state = s;
            self.obs = o;
        } else {
            self.state = out.state;
            self.obs = out.obs;
        }
        self.t += 1;
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let adversary = match self.perturber {
            Perturber::Adversary(a) => Some((a.online, a.target)),
            _ => None,
        };
        TrainOutcome {
            protagonist: self.protagonist.online,
            protagonist_target: self.protagonist.target,
            adversary,
            metrics: self.metrics,
        }
    }
}

/// Runs a full training job.
pub fn train(cfg: TrainConfig, env: Speedway) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, env)?;
    trainer.run()?;
    Ok(trainer.finish())
}
