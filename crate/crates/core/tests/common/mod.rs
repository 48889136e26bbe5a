//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use rand::Rng;
use rararl::ensemble::AgentRole;
use rararl::env::{Speedway, NUM_ACTIONS};
use rararl::nn::{adam_step, clip_global_norm, AdamState, DenseNet};
use rararl::rng;
use rararl::train::TrainConfig;

/// Column mean by explicit double loop.
pub fn brute_mean(m: &[Vec<f64>]) -> Vec<f64> {
    let k = m.len();
    let a = m[0].len();
    let mut out = vec![0.0; a];
    for j in 0..a {
        let mut s = 0.0;
        for row in m {
            s += row[j];
        }
        out[j] = s / k as f64;
    }
    out
}

/// Population variance per column, `E[x^2] - E[x]^2` computed around the mean.
pub fn brute_var(m: &[Vec<f64>]) -> Vec<f64> {
    let k = m.len() as f64;
    let mean = brute_mean(m);
    (0..m[0].len())
        .map(|j| m.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / k)
        .collect()
}

/// One recorded step of a window: (environment reward, actor, terminal).
pub type Step = (f64, AgentRole, bool);

/// `sum_i gamma^i * sign(owner) * r_i`, plus `gamma^len * boot` unless the
/// last step is terminal.
pub fn nstep_oracle(steps: &[Step], owner: AgentRole, gamma: f64, boot: f64) -> f64 {
    let sign = if owner == AgentRole::Protagonist { 1.0 } else { -1.0 };
    let mut total = 0.0;
    for (i, (r, _, _)) in steps.iter().enumerate() {
        total += gamma.powi(i as i32) * sign * r;
    }
    if !steps.last().unwrap().2 {
        total += gamma.powi(steps.len() as i32) * boot;
    }
    total
}

struct Sample {
    obs: Vec<f64>,
    action: usize,
    reward: f64,
    next_obs: Vec<f64>,
    terminal: bool,
}

/// Textbook DQN on a single MLP: epsilon-greedy acting, a FIFO replay ring,
/// uniform minibatches, squared TD loss on `r + gamma * max Q_target(s')`,
/// global-norm clipping and Adam. Draws from the same named RNG streams as
/// the trainer so parameter traces can be compared bit for bit.
pub struct ReferenceDqn {
    pub net: DenseNet,
    target: DenseNet,
    opt: AdamState,
    replay: Vec<Sample>,
    next_slot: usize,
    cfg: TrainConfig,
    env: Speedway,
    rng_env: rand_chacha::ChaCha8Rng,
    rng_act: rand_chacha::ChaCha8Rng,
    rng_replay: rand_chacha::ChaCha8Rng,
    state: rararl::env::TrackState,
    obs: rararl::env::Observation,
    pub t: u64,
}

impl ReferenceDqn {
    pub fn new(cfg: TrainConfig, env: Speedway) -> Self {
        let mut dims = vec![rararl::env::OBS_DIM];
        dims.extend(&cfg.trunk_hidden);
        dims.push(NUM_ACTIONS);
        let net = DenseNet::new(&dims, &mut rng::stream(cfg.seed, rng::INIT_PROTAGONIST)).unwrap();
        let mut rng_env = rng::stream(cfg.seed, rng::ENV);
        let (state, obs) = env.reset(&mut rng_env);
        Self {
            target: net.clone(),
            opt: AdamState::new(&net),
            net,
            replay: Vec::new(),
            next_slot: 0,
            rng_act: rng::stream(cfg.seed, rng::ACTION_PROTAGONIST),
            rng_replay: rng::stream(cfg.seed, rng::REPLAY_PROTAGONIST),
            rng_env,
            cfg,
            env,
            state,
            obs,
            t: 0,
        }
    }

    fn greedy(q: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in q.iter().enumerate() {
            if *v > q[best] {
                best = i;
            }
        }
        best
    }

    pub fn step(&mut self) {
        let eps = self.cfg.epsilon.value(self.t);
        let q = self.net.predict(self.obs.as_slice()).unwrap();
        let action = if self.rng_act.random::<f64>() < eps {
            self.rng_act.random_range(0..NUM_ACTIONS)
        } else {
            Self::greedy(&q)
        };
        let out = self.env.step(&self.state, &self.obs, action).unwrap();
        let sample = Sample {
            obs: self.obs.as_slice().to_vec(),
            action,
            reward: out.reward.total,
            next_obs: out.obs.as_slice().to_vec(),
            terminal: out.reward.c == 1,
        };
        if self.replay.len() < self.cfg.buffer_capacity {
            self.replay.push(sample);
        } else {
            self.replay[self.next_slot] = sample;
        }
        self.next_slot = (self.next_slot + 1) % self.cfg.buffer_capacity;

        if self.t % self.cfg.train_freq == 0 && self.replay.len() >= self.cfg.batch_size {
            self.update();
        }
        if self.t % self.cfg.target_update_freq == 0 {
            self.target = self.net.clone();
        }
        if out.done {
            let (s, o) = self.env.reset(&mut self.rng_env);
            self.state = s;
            self.obs = o;
        } else {
            self.state = out.state;
            self.obs = out.obs;
        }
        self.t += 1;
    }

    fn update(&mut self) {
        let b = self.cfg.batch_size;
        let n = b as f64;
        let slots: Vec<usize> = (0..b).map(|_| self.rng_replay.random_range(0..self.replay.len())).collect();
        let mut total: Option<rararl::nn::GradientSet> = None;
        for slot in slots {
            let s = &self.replay[slot];
            let y = if s.terminal {
                s.reward
            } else {
                let next = self.target.predict(&s.next_obs).unwrap();
                s.reward + self.cfg.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let (q, cache) = self.net.forward(&s.obs).unwrap();
            let mut g = vec![0.0; NUM_ACTIONS];
            g[s.action] = 2.0 * (q[s.action] - y) / n;
            let grads = self.net.backward(&cache, &g).unwrap();
            total = Some(match total {
                None => {
                    let mut z = rararl::nn::GradientSet::zeros_like(&self.net);
                    z.add_assign(&grads);
                    z
                }
                Some(mut acc) => {
                    acc.add_assign(&grads);
                    acc
                }
            });
        }
        let mut grads = total.unwrap();
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut [&mut grads], c);
        }
        adam_step(&mut self.net, &mut self.opt, &grads, self.cfg.learning_rate).unwrap();
    }
}
