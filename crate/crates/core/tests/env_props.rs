mod common;

use common::criteria::{self, state};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rararl::env::{Speedway, TrackConfig, NOOP};

fn env() -> Speedway {
    Speedway::new(TrackConfig::default()).unwrap()
}

#[test]
fn reward_examples_and_decomposition() {
    let c = criteria::reward();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn resets_start_on_the_centerline_at_rest() {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (s, obs) = env.reset(&mut rng);
        assert_eq!((s.p, s.v), (0.0, 0.0));
        for i in 1..4 {
            assert_eq!(obs.frame(i), obs.frame(0));
        }
    }
    let a = env.reset(&mut ChaCha8Rng::seed_from_u64(9));
    let b = env.reset(&mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn doing_nothing_at_rest_only_advances_counters() {
    let env = env();
    let (s, obs) = env.reset(&mut ChaCha8Rng::seed_from_u64(1));
    let out = env.step(&s, &obs, NOOP).unwrap();
    assert_eq!((out.state.s_pos, out.state.p, out.state.heading_err, out.state.v), (s.s_pos, s.p, s.heading_err, s.v));
    assert_eq!(out.state.step_count, 1);
}

#[test]
fn standing_still_gets_stuck_after_patience() {
    let env = env();
    let cfg = env.config().clone();
    let (mut s, mut obs) = env.reset(&mut ChaCha8Rng::seed_from_u64(2));
    let mut steps = 0;
    loop {
        let out = env.step(&s, &obs, NOOP).unwrap();
        steps += 1;
        if out.done {
            assert!(out.state.stuck && !out.state.damaged);
            assert_eq!(out.reward.total, cfg.r_cat);
            break;
        }
        s = out.state;
        obs = out.obs;
    }
    assert_eq!(steps, cfg.stuck_warmup + cfg.stuck_patience);
}

#[test]
fn wall_contact_just_past_the_margin() {
    let env = env();
    let edge = env.wall_offset();
    assert!(!env.detect_flags(&state(edge, 0.0, 5.0, false, false)).damaged);
    assert!(env.detect_flags(&state(edge + 0.01, 0.0, 5.0, false, false)).damaged);
    assert!(env.detect_flags(&state(-edge - 0.01, 0.0, 5.0, false, false)).damaged);
}

proptest! {
    #[test]
    fn stepping_is_deterministic_and_bounded(seed in any::<u64>(), actions in prop::collection::vec(0usize..9, 1..200)) {
        let env = env();
        let cfg = env.config().clone();
        let run = || {
            let (mut s, mut obs) = env.reset(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut out = Vec::new();
            for &a in &actions {
                let o = env.step(&s, &obs, a).unwrap();
                out.push(o.clone());
                if o.done {
                    break;
                }
                s = o.state;
                obs = o.obs;
            }
            out
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        for o in &a {
            let r = o.reward;
            prop_assert_eq!(r.total, r.progress_total + r.catastrophe);
            prop_assert!(r.progress_pure >= r.progress_total);
            if r.c == 0 {
                prop_assert!(r.total.abs() <= 2.0 * cfg.beta * cfg.v_max);
            } else {
                prop_assert_eq!(r.total, cfg.r_cat);
            }
        }
    }
}
