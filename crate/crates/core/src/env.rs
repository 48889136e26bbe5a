//! A deterministic kinematic car on a looped speedway.
//!
//! The car is tracked in road coordinates: arc length `s_pos` along the
//! centerline, signed lateral offset `p` (positive to the left), heading
//! error `alpha` relative to the road direction (positive to the left) and
//! speed `v`. Nine discrete actions combine a steering choice with a
//! throttle choice. Leaving the road past the wall margin damages the car;
//! crawling below the stuck speed for too long marks it stuck. Either flag is
//! a catastrophe and ends the episode.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 9;
pub const FRAME_DIM: usize = 9;
pub const STACK: usize = 4;
pub const OBS_DIM: usize = FRAME_DIM * STACK;

/// Index of "do nothing".
pub const NOOP: usize = 4;
/// Index of "move ahead and accelerate".
pub const AHEAD_ACCELERATE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Steer {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Throttle {
    Accelerate,
    Coast,
    Decelerate,
}

/// Decodes an action index on the 3x3 grid: rows are accelerate / coast /
/// decelerate, columns are left / straight / right.
pub fn decode_action(action: usize) -> Result<(Steer, Throttle)> {
    if action >= NUM_ACTIONS {
        return Err(Error::Usage(format!("action {action} outside 0..{NUM_ACTIONS}")));
    }
    let steer = [Steer::Left, Steer::Straight, Steer::Right][action % 3];
    let throttle = [Throttle::Accelerate, Throttle::Coast, Throttle::Decelerate][action / 3];
    Ok((steer, throttle))
}

pub fn encode_action(steer: Steer, throttle: Throttle) -> usize {
    let col = match steer {
        Steer::Left => 0,
        Steer::Straight => 1,
        Steer::Right => 2,
    };
    let row = match throttle {
        Throttle::Accelerate => 0,
        Throttle::Coast => 1,
        Throttle::Decelerate => 2,
    };
    row * 3 + col
}

/// One piece of the centerline. Positive arc angles turn left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    Straight { length: f64 },
    Arc { radius: f64, degrees: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, degrees } => radius * degrees.abs().to_radians(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, degrees } => degrees.signum() / radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub segments: Vec<Segment>,
    /// Road width `w` in meters.
    pub width: f64,
    /// Distance past the road edge at which the wall is hit.
    pub wall_margin: f64,
    pub beta: f64,
    pub r_cat: f64,
    pub dt: f64,
    /// Speed change per accelerate/decelerate step (m/s).
    pub accel: f64,
    /// Heading change per steering step (rad).
    pub steer: f64,
    pub v_max: f64,
    /// Heading error is clamped to `[-max_heading_err, max_heading_err]`.
    pub max_heading_err: f64,
    pub stuck_speed_threshold: f64,
    pub stuck_patience: u32,
    /// Steps at the start of an episode during which stuck detection is off.
    pub stuck_warmup: u32,
    pub max_episode_steps: u32,
    /// Start position is drawn uniformly from `[0, start_jitter)`.
    pub start_jitter: f64,
    /// Distances ahead (m) at which curvature is reported.
    pub lookahead: [f64; 3],
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            segments: vec![
                Segment::Straight { length: 150.0 },
                Segment::Arc {
                    radius: 60.0,
                    degrees: 180.0,
                },
                Segment::Straight { length: 150.0 },
                Segment::Arc {
                    radius: 60.0,
                    degrees: 180.0,
                },
            ],
            width: 10.0,
            wall_margin: 0.5,
            beta: 0.025,
            r_cat: -2.5,
            dt: 0.1,
            accel: 1.0,
            steer: 0.05,
            v_max: 28.0,
            max_heading_err: PI / 3.0,
            stuck_speed_threshold: 1.4,
            stuck_patience: 20,
            stuck_warmup: 10,
            max_episode_steps: 500,
            start_jitter: 5.0,
            lookahead: [10.0, 30.0, 60.0],
        }
    }
}

impl TrackConfig {
    /// A single full circle of the given radius.
    pub fn circle(radius: f64) -> Self {
        Self {
            segments: vec![Segment::Arc {
                radius,
                degrees: 360.0,
            }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                errs.push(format!("track.{name} must be a finite value > 0, got {v}"));
            }
        };
        positive("width", self.width);
        positive("dt", self.dt);
        positive("beta", self.beta);
        positive("accel", self.accel);
        positive("steer", self.steer);
        positive("v_max", self.v_max);
        positive("max_heading_err", self.max_heading_err);
        if !(self.wall_margin >= 0.0) {
            errs.push(format!("track.wall_margin must be >= 0, got {}", self.wall_margin));
        }
        if !(self.r_cat < 0.0) || !self.r_cat.is_finite() {
            errs.push(format!("track.r_cat must be a finite value < 0, got {}", self.r_cat));
        }
        if !(self.stuck_speed_threshold >= 0.0) {
            errs.push(format!(
                "track.stuck_speed_threshold must be >= 0, got {}",
                self.stuck_speed_threshold
            ));
        }
        if self.stuck_patience == 0 {
            errs.push("track.stuck_patience must be >= 1".into());
        }
        if self.max_episode_steps == 0 {
            errs.push("track.max_episode_steps must be >= 1".into());
        }
        if !(self.start_jitter >= 0.0) {
            errs.push(format!("track.start_jitter must be >= 0, got {}", self.start_jitter));
        }
        if self.lookahead.iter().any(|d| !(*d >= 0.0)) {
            errs.push(format!("track.lookahead distances must be >= 0, got {:?}", self.lookahead));
        }
        if self.segments.is_empty() {
            errs.push("track.segments must not be empty".into());
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let ok = match *seg {
                Segment::Straight { length } => length > 0.0 && length.is_finite(),
                Segment::Arc { radius, degrees } => {
                    radius > 0.0 && radius.is_finite() && degrees != 0.0 && degrees.is_finite()
                }
            };
            if !ok {
                errs.push(format!("track.segments[{i}] has a non-positive size: {seg:?}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Simulator ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub s_pos: f64,
    pub p: f64,
    pub heading_err: f64,
    pub v: f64,
    pub stuck_counter: u32,
    pub stuck: bool,
    pub damaged: bool,
    pub step_count: u32,
    pub done: bool,
}

/// The most recent four feature frames, oldest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    data: [f64; OBS_DIM],
}

impl Observation {
    /// Episode-start stack: the first frame repeated.
    pub fn initial(frame: &[f64; FRAME_DIM]) -> Self {
        let mut data = [0.0; OBS_DIM];
        for chunk in data.chunks_mut(FRAME_DIM) {
            chunk.copy_from_slice(frame);
        }
        Self { data }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let data: [f64; OBS_DIM] = values.try_into().map_err(|_| {
            Error::Shape(format!("observation needs {OBS_DIM} values, got {}", values.len()))
        })?;
        Ok(Self { data })
    }

    /// Drops the oldest frame and appends `frame`.
    pub fn pushed(&self, frame: &[f64; FRAME_DIM]) -> Self {
        let mut data = [0.0; OBS_DIM];
        data[..OBS_DIM - FRAME_DIM].copy_from_slice(&self.data[FRAME_DIM..]);
        data[OBS_DIM - FRAME_DIM..].copy_from_slice(frame);
        Self { data }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * FRAME_DIM..(i + 1) * FRAME_DIM]
    }

    pub fn latest(&self) -> &[f64] {
        self.frame(STACK - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub total: f64,
    pub progress_total: f64,
    pub progress_pure: f64,
    pub catastrophe: f64,
    pub c: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub stuck: bool,
    pub damaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: TrackState,
    pub obs: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
}

/// Validated track configuration with precomputed geometry.
#[derive(Debug, Clone)]
pub struct Speedway {
    cfg: TrackConfig,
    starts: Vec<f64>,
    length: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

impl Speedway {
    pub fn new(cfg: TrackConfig) -> Result<Self> {
        cfg.validate()?;
        let mut starts = Vec::with_capacity(cfg.segments.len());
        let mut acc = 0.0;
        for seg in &cfg.segments {
            starts.push(acc);
            acc += seg.length();
        }
        Ok(Self {
            cfg,
            starts,
            length: acc,
        })
    }

    pub fn config(&self) -> &TrackConfig {
        &self.cfg
    }

    pub fn track_length(&self) -> f64 {
        self.length
    }

    /// Lateral offset beyond which the car hits the wall.
    pub fn wall_offset(&self) -> f64 {
        self.cfg.width / 2.0 + self.cfg.wall_margin
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.length);
        let idx = match self.starts.binary_search_by(|x| x.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        self.cfg.segments[idx].curvature()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (TrackState, Observation) {
        let s_pos = if self.cfg.start_jitter > 0.0 {
            rng.random_range(0.0..self.cfg.start_jitter)
        } else {
            0.0
        };
        let state = TrackState {
            s_pos,
            p: 0.0,
            heading_err: 0.0,
            v: 0.0,
            stuck_counter: 0,
            stuck: false,
            damaged: false,
            step_count: 0,
            done: false,
        };
        let obs = Observation::initial(&self.frame(&state));
        (state, obs)
    }

    pub fn step(&self, state: &TrackState, obs: &Observation, action: usize) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        let (steer, throttle) = decode_action(action)?;
        let cfg = &self.cfg;
        let mut next = state.clone();

        let dv = match throttle {
            Throttle::Accelerate => cfg.accel,
            Throttle::Coast => 0.0,
            Throttle::Decelerate => -cfg.accel,
        };
        next.v = (state.v + dv).clamp(0.0, cfg.v_max);
        let dh = match steer {
            Steer::Left => cfg.steer,
            Steer::Straight => 0.0,
            Steer::Right => -cfg.steer,
        };
        let alpha = (state.heading_err + dh).clamp(-cfg.max_heading_err, cfg.max_heading_err);
        let ds = next.v * alpha.cos() * cfg.dt;
        next.p = state.p + next.v * alpha.sin() * cfg.dt;
        let turned = alpha - self.curvature_at(state.s_pos) * ds;
        next.heading_err = wrap_angle(turned).clamp(-cfg.max_heading_err, cfg.max_heading_err);
        next.s_pos = (state.s_pos + ds).rem_euclid(self.length);
        next.step_count = state.step_count + 1;
        next.stuck_counter = if next.step_count > cfg.stuck_warmup && next.v < cfg.stuck_speed_threshold {
            state.stuck_counter + 1
        } else {
            0
        };

        let flags = self.detect_flags(&next);
        next.stuck = flags.stuck;
        next.damaged = flags.damaged;
        let reward = self.reward(&next);
        next.done = reward.c == 1 || next.step_count >= cfg.max_episode_steps;
        let obs = self.observe(&next, obs);
        Ok(StepOutcome {
            done: next.done,
            state: next,
            obs,
            reward,
        })
    }

    pub fn detect_flags(&self, state: &TrackState) -> Flags {
        Flags {
            stuck: state.stuck_counter >= self.cfg.stuck_patience,
            damaged: state.p.abs() > self.wall_offset(),
        }
    }

    /// Reward with its progress and catastrophe components. Uses the
    /// distance to the centerline `|p|` in the lane penalty.
    pub fn reward(&self, state: &TrackState) -> RewardBreakdown {
        let cfg = &self.cfg;
        let st = u8::from(state.stuck);
        let da = u8::from(state.damaged);
        let alive = f64::from((1 - st) * (1 - da));
        let c = (st + da).div_ceil(2);
        let (sin_a, cos_a) = state.heading_err.sin_cos();
        let lane = 2.0 * state.p.abs() / cfg.width;
        let progress_total = cfg.beta * state.v * (cos_a - sin_a.abs() - lane) * alive;
        let progress_pure = cfg.beta * state.v * (cos_a - sin_a.abs()) * alive;
        let catastrophe = cfg.r_cat * f64::from(c);
        RewardBreakdown {
            total: progress_total + catastrophe,
            progress_total,
            progress_pure,
            catastrophe,
            c,
        }
    }

    /// Feature frame: speed, heading, lane position, wall distances and
    /// curvature at the lookahead points.
    pub fn frame(&self, state: &TrackState) -> [f64; FRAME_DIM] {
        let cfg = &self.cfg;
        let (sin_a, cos_a) = state.heading_err.sin_cos();
        let span = self.wall_offset();
        let left = (span - state.p) / (2.0 * span);
        let right = (span + state.p) / (2.0 * span);
        [
            state.v / cfg.v_max,
            sin_a,
            cos_a,
            2.0 * state.p / cfg.width,
            left,
            right,
            self.curvature_at(state.s_pos + cfg.lookahead[0]),
            self.curvature_at(state.s_pos + cfg.lookahead[1]),
            self.curvature_at(state.s_pos + cfg.lookahead[2]),
        ]
    }

    pub fn observe(&self, state: &TrackState, history: &Observation) -> Observation {
        history.pushed(&self.frame(state))
    }
}
