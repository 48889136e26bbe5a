//! Property checks behind the acceptance criteria. The topic test files
//! assert on them and the `acceptance` runner prints them.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rararl::credit::credit_decompose;
use rararl::ensemble::{
    mean_q, modified_q, variance_q, AgentRole, Architecture, BootstrapMask, EnsembleQNetwork, RiskConfig,
};
use rararl::env::{Observation, Speedway, TrackConfig, TrackState, NUM_ACTIONS, OBS_DIM};
use rararl::io::checkpoint::{from_json, to_json, Checkpoint};
use rararl::nn::DenseNet;
use rararl::train::nstep::{build_nstep_target, Transition};
use rararl::train::{ScheduleXi, TrainConfig, Trainer, Variant};

use super::{brute_mean, brute_var, nstep_oracle, ReferenceDqn};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// Per-element forward pass with ReLU on every hidden layer.
pub fn oracle_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
    let dims = net.layer_dims();
    let mut a = x.to_vec();
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = net.biases()[l][o];
            for i in 0..n_in {
                s += net.weights()[l][o * n_in + i] * a[i];
            }
            z[o] = if l + 2 < dims.len() && s < 0.0 { 0.0 } else { s };
        }
        a = z;
    }
    a
}

/// Central differences of `output . g` on [`oracle_forward`], flattened
/// layer by layer (weights, then biases).
pub fn oracle_fd(net: &DenseNet, x: &[f64], g: &[f64], h: f64) -> Vec<f64> {
    let dims = net.layer_dims().to_vec();
    let f = |w: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        let n = DenseNet::from_params(dims.clone(), w.clone(), b.clone()).unwrap();
        oracle_forward(&n, x).iter().zip(g).map(|(o, g)| o * g).sum()
    };
    let mut w = net.weights().to_vec();
    let mut b = net.biases().to_vec();
    let mut out = Vec::new();
    for l in 0..w.len() {
        for i in 0..w[l].len() {
            let orig = w[l][i];
            w[l][i] = orig + h;
            let plus = f(&w, &b);
            w[l][i] = orig - h;
            let minus = f(&w, &b);
            w[l][i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
        for i in 0..b[l].len() {
            let orig = b[l][i];
            b[l][i] = orig + h;
            let plus = f(&w, &b);
            b[l][i] = orig - h;
            let minus = f(&w, &b);
            b[l][i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Backward against central differences on 24 seeded random nets.
pub fn gradients() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    let nets = 24;
    for seed in 0..nets {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=12)];
        for _ in 0..depth {
            dims.push(rng.random_range(3..=24));
        }
        dims.push(rng.random_range(1..=9));
        let net = DenseNet::new(&dims, &mut rng).unwrap();
        max_params = max_params.max(net.num_params());
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &g).unwrap().flatten();
        let numeric = oracle_fd(&net, &x, &g, FD_STEP);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Check::new(
        worst <= GRAD_TOL && max_params <= 10_000 && secs < 30.0,
        format!("{nets} nets (<= {max_params} params), max rel err {worst:.2e} (tol {GRAD_TOL:e}), {secs:.1}s"),
    )
}

pub const ORACLE_TOL: f64 = 1e-12;

/// Mean and variance against loops on 200 random 10x9 matrices, plus the
/// protagonist/adversary symmetry of the risk-modified values.
pub fn ensemble_math() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut sym_elems = 0usize;
    let mut sym_exact = 0usize;
    let mut sym_excess: f64 = 0.0;
    for _ in 0..200 {
        let m: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..9).map(|_| rng.random_range(-50.0..50.0)).collect())
            .collect();
        let (mean, var) = (mean_q(&m), variance_q(&m));
        for (a, b) in mean.iter().zip(brute_mean(&m)).chain(var.iter().zip(brute_var(&m))) {
            worst = worst.max((a - b).abs());
        }
        let cfg = RiskConfig::new(0.1, 0.1);
        let p = modified_q(AgentRole::Protagonist, &mean, &var, &cfg);
        let a = modified_q(AgentRole::Adversary, &mean, &var, &cfg);
        for j in 0..9 {
            let two_q = 2.0 * mean[j];
            let sum = p[j] + a[j];
            sym_elems += 1;
            if sum == two_q {
                sym_exact += 1;
            }
            // one rounding each for q - d, q + d and their sum
            let bound = f64::EPSILON / 2.0 * (p[j].abs() + a[j].abs() + sum.abs());
            sym_excess = sym_excess.max((sum - two_q).abs() / bound);
        }
    }
    let ex = RiskConfig::new(0.1, 0.1);
    let (ep, ea) = (
        modified_q(AgentRole::Protagonist, &[2.0], &[1.0], &ex)[0],
        modified_q(AgentRole::Adversary, &[2.0], &[1.0], &ex)[0],
    );
    let example = ep == 1.9 && ep + ea == 4.0;
    Check::new(
        worst <= ORACLE_TOL && sym_excess <= 1.0 && example,
        format!(
            "max |impl - loop| {worst:.1e} (tol {ORACLE_TOL:e}); q=2,var=1,lambda=0.1: P=1.9, P+A=4 exact: {example}; \
             random: P + A == 2q bitwise on {sym_exact}/{sym_elems}, others within {sym_excess:.2} x the f64 rounding bound"
        ),
    )
}

pub fn state(p: f64, heading_err: f64, v: f64, stuck: bool, damaged: bool) -> TrackState {
    TrackState {
        s_pos: 0.0,
        p,
        heading_err,
        v,
        stuck_counter: 0,
        stuck,
        damaged,
        step_count: 11,
        done: false,
    }
}

/// Reward examples exactly, and the total = progress + catastrophe identity
/// against a direct evaluation of the formula on 1e5 random states.
pub fn reward() -> Check {
    let env = Speedway::new(TrackConfig::default()).unwrap();
    let cfg = env.config().clone();
    let mut notes = Vec::new();
    let r = env.reward(&state(0.0, 0.0, 4.0, false, false));
    let ex1 = r.total == 0.1 && r.progress_pure == 0.1;
    let ex2 = env.reward(&state(0.0, 0.0, 4.0, true, false)).total == -2.5;
    let ex3 = env.reward(&state(0.0, 0.0, 4.0, true, true)).total == -2.5;
    if !(ex1 && ex2 && ex3) {
        notes.push(format!("examples {ex1}/{ex2}/{ex3}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut identity_breaks = 0;
    for _ in 0..100_000 {
        let st = rng.random_bool(0.1);
        let da = rng.random_bool(0.1);
        let s = state(
            rng.random_range(-cfg.width..cfg.width),
            rng.random_range(-cfg.max_heading_err..=cfg.max_heading_err),
            rng.random_range(0.0..=cfg.v_max),
            st,
            da,
        );
        let b = env.reward(&s);
        if b.total != b.progress_total + b.catastrophe {
            identity_breaks += 1;
        }
        let alive = if st || da { 0.0 } else { 1.0 };
        let c = if st || da { 1.0 } else { 0.0 };
        let lane = 2.0 * s.p.abs() / cfg.width;
        let progress = cfg.beta * s.v * (s.heading_err.cos() - s.heading_err.sin().abs() - lane) * alive;
        let pure = cfg.beta * s.v * (s.heading_err.cos() - s.heading_err.sin().abs()) * alive;
        worst = worst
            .max((b.total - (progress + cfg.r_cat * c)).abs())
            .max((b.progress_total - progress).abs())
            .max((b.progress_pure - pure).abs())
            .max(((b.progress_pure - b.progress_total) - cfg.beta * s.v * lane * alive).abs());
    }
    Check::new(
        ex1 && ex2 && ex3 && identity_breaks == 0 && worst <= ORACLE_TOL,
        format!(
            "3 examples exact: {}; identity breaks {identity_breaks}/100000; max |impl - formula| {worst:.1e} (tol {ORACLE_TOL:e}){}",
            ex1 && ex2 && ex3,
            notes.iter().map(|n| format!("; {n}")).collect::<String>()
        ),
    )
}

fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
    let v: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Observation::from_slice(&v).unwrap()
}

/// Bootstrap value recomputed from raw parameters: mean over the active
/// heads (all if none) of each head's max.
pub fn oracle_bootstrap(net: &EnsembleQNetwork, obs: &[f64], mask: &BootstrapMask) -> f64 {
    let feature: Vec<f64> = oracle_forward(net.trunk(), obs).iter().map(|v| v.max(0.0)).collect();
    let mut heads: Vec<usize> = (0..net.k()).filter(|&i| mask.counts[i] > 0).collect();
    if heads.is_empty() {
        heads = (0..net.k()).collect();
    }
    let maxes: Vec<f64> = heads
        .iter()
        .map(|&i| oracle_forward(&net.heads()[i], &feature).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    maxes.iter().sum::<f64>() / maxes.len() as f64
}

/// Random cross-agent window owned by `owner`; the last step is terminal
/// when `terminal` is set.
pub fn random_window(rng: &mut ChaCha8Rng, owner: AgentRole, terminal: bool) -> Vec<Transition> {
    let len = rng.random_range(1..=12);
    let t0 = rng.random_range(0..100_000u64);
    let mut obs = random_obs(rng);
    (0..len)
        .map(|i| {
            let next = random_obs(rng);
            let tr = Transition {
                obs,
                action: rng.random_range(0..NUM_ACTIONS),
                reward: rng.random_range(-3.0..1.5),
                next_obs: next,
                done: terminal && i + 1 == len,
                role: if i == 0 { owner } else { owner.other() },
                t: t0 + i as u64,
            };
            obs = next;
            tr
        })
        .collect()
}

/// `build_nstep_target` against the explicit sum on 1000 random windows.
pub fn nstep_targets() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = Architecture {
        input_dim: OBS_DIM,
        trunk_hidden: vec![16],
        head_hidden: vec![],
        heads: 5,
        num_actions: NUM_ACTIONS,
    };
    let net = EnsembleQNetwork::new(&arch, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 4];
    for i in 0..1000 {
        let owner = if i % 2 == 0 { AgentRole::Protagonist } else { AgentRole::Adversary };
        let terminal = (i / 2) % 2 == 0;
        counts[i % 4] += 1;
        let window = random_window(&mut rng, owner, terminal);
        let mask = BootstrapMask {
            counts: (0..arch.heads).map(|_| rng.random_range(0..3)).collect(),
        };
        let gamma = rng.random_range(0.5..=1.0);
        let (_, y) = build_nstep_target(&window, owner, gamma, &net, &mask).unwrap();
        let last = window.last().unwrap();
        let boot = oracle_bootstrap(&net, last.next_obs.as_slice(), &mask);
        let steps: Vec<_> = window.iter().map(|t| (t.reward, t.role, t.done)).collect();
        worst = worst.max((y - nstep_oracle(&steps, owner, gamma, boot)).abs());
    }
    Check::new(
        worst <= ORACLE_TOL,
        format!(
            "1000 windows (P/A x terminal/open: {counts:?}), max |impl - oracle| {worst:.1e} (tol {ORACLE_TOL:e})"
        ),
    )
}

pub fn reduction_config() -> TrainConfig {
    TrainConfig {
        variant: Variant::Dqn,
        total_steps: 500,
        target_update_freq: 100,
        epsilon: rararl::train::EpsilonSchedule {
            start: 1.0,
            end: 0.02,
            t0: 0,
            t1: 300,
        },
        seed: 17,
        ..TrainConfig::default()
    }
}

pub fn param_bits(nets: &[&DenseNet]) -> Vec<u64> {
    nets.iter()
        .flat_map(|n| {
            n.weights()
                .iter()
                .zip(n.biases())
                .flat_map(|(w, b)| w.iter().chain(b.iter()).map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Trainer with `variant = dqn` against the standalone loop, compared after
/// every step.
pub fn dqn_reduction() -> Check {
    let cfg = reduction_config();
    let env = Speedway::new(TrackConfig::default()).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), env.clone()).unwrap();
    let mut reference = ReferenceDqn::new(cfg, env);
    let mut updates = 0;
    let mut prev = param_bits(&[&reference.net]);
    for t in 0..500 {
        trainer.advance(1).unwrap();
        reference.step();
        let p = &trainer.protagonist().online;
        let ours = param_bits(&[p.trunk(), &p.heads()[0]]);
        let theirs = param_bits(&[&reference.net]);
        if ours != theirs {
            return Check::new(false, format!("parameters diverge after step {t}"));
        }
        if theirs != prev {
            updates += 1;
        }
        prev = theirs;
    }
    Check::new(updates > 100, format!("500 steps bitwise identical, {updates} parameter updates"))
}

pub const CREDIT_TOL: f64 = 1e-9;

/// Telescoping of the two credit totals on 100 random trajectories.
pub fn credit_telescoping() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut split_err: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(2..=300);
        let traj: Vec<(f64, AgentRole)> = (0..len)
            .map(|_| {
                let role = if rng.random_bool(0.3) { AgentRole::Adversary } else { AgentRole::Protagonist };
                (rng.random_range(-20.0..20.0), role)
            })
            .collect();
        let trace = credit_decompose(&traj, |v, _| Ok(*v)).unwrap();
        let signed = |(v, r): &(f64, AgentRole)| if *r == AgentRole::Protagonist { *v } else { -*v };
        let delta = signed(&traj[len - 1]) - signed(&traj[0]);
        worst = worst.max((trace.td_p + trace.td_a - delta).abs());
        let (mut p, mut a) = (0.0, 0.0);
        for i in 0..len - 1 {
            let td = signed(&traj[i + 1]) - signed(&traj[i]);
            match traj[i].1 {
                AgentRole::Protagonist => p += td,
                AgentRole::Adversary => a += td,
            }
        }
        split_err = split_err.max((trace.td_p - p).abs()).max((trace.td_a - a).abs());
    }
    Check::new(
        worst <= CREDIT_TOL && split_err <= CREDIT_TOL,
        format!("100 trajectories, max |TD_P + TD_A - dV| {worst:.1e}, max split err {split_err:.1e} (tol {CREDIT_TOL:e})"),
    )
}

pub fn persistence_config(seed: u64) -> TrainConfig {
    TrainConfig {
        variant: Variant::Bsdqnadvriskaverse,
        total_steps: 3_000,
        target_update_freq: 500,
        epsilon: rararl::train::EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            t0: 0,
            t1: 2_000,
        },
        schedule: ScheduleXi { xi: 1_000, m: 10, n: 1 },
        seed,
        ..TrainConfig::default()
    }
}

/// Metrics CSV and checkpoint JSON bytes of one run.
pub fn run_artifacts(cfg: TrainConfig) -> (Vec<u8>, String, Checkpoint) {
    let env = Speedway::new(TrackConfig::default()).unwrap();
    let mut trainer = Trainer::new(cfg, env).unwrap();
    trainer.run().unwrap();
    let mut csv = Vec::new();
    trainer.metrics().write_to(&mut csv).unwrap();
    let ckpt = Checkpoint::from_trainer(&trainer, "digest".into());
    (csv, to_json(&ckpt), ckpt)
}

/// Same seed twice gives identical bytes; JSON round trip is bitwise.
pub fn persistence() -> Check {
    let (csv_a, json_a, ckpt) = run_artifacts(persistence_config(21));
    let (csv_b, json_b, _) = run_artifacts(persistence_config(21));
    let back = from_json(&json_a, std::path::Path::new("<memory>")).unwrap();
    let same_metrics = csv_a == csv_b;
    let same_ckpt = json_a == json_b;
    let lossless = back.same_contents(&ckpt) && to_json(&back) == json_a;
    Check::new(
        same_metrics && same_ckpt && lossless && ckpt.adversary.is_some(),
        format!(
            "metrics bytes equal: {same_metrics} ({} B); checkpoint bytes equal: {same_ckpt} ({} B); round trip bitwise: {lossless}",
            csv_a.len(),
            json_a.len()
        ),
    )
}
