mod common;

use common::criteria;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rararl::ensemble::{
    argmax, modified_q, sample_mask, select_action, sync_target, td_update, variance_q, AgentRole, Architecture,
    BootstrapMask, EnsembleQNetwork, MaskScheme, RiskConfig, TdSample,
};

#[test]
fn mean_and_variance_match_loops_and_roles_are_symmetric() {
    let c = criteria::ensemble_math();
    assert!(c.pass, "{}", c.detail);
}

fn arch(k: usize) -> Architecture {
    Architecture {
        input_dim: 6,
        trunk_hidden: vec![12],
        head_hidden: vec![],
        heads: k,
        num_actions: 9,
    }
}

fn matrix(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 9), k)
}

proptest! {
    #[test]
    fn variance_is_nonnegative_and_zero_only_for_agreeing_heads(m in matrix(10)) {
        let var = variance_q(&m);
        for (j, v) in var.iter().enumerate() {
            prop_assert!(*v >= 0.0);
            let agree = m.iter().all(|r| r[j] == m[0][j]);
            prop_assert_eq!(*v == 0.0, agree);
        }
        let same: Vec<Vec<f64>> = vec![m[0].clone(); 10];
        prop_assert!(variance_q(&same).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn risk_terms_bracket_the_plain_value(
        q in prop::collection::vec(-100.0f64..100.0, 9),
        var in prop::collection::vec(0.0f64..50.0, 9),
        lp in 0.0f64..2.0,
        la in 0.0f64..2.0,
    ) {
        let cfg = RiskConfig::new(lp, la);
        let p = modified_q(AgentRole::Protagonist, &q, &var, &cfg);
        let a = modified_q(AgentRole::Adversary, &q, &var, &cfg);
        for j in 0..9 {
            prop_assert!(p[j] <= q[j] && q[j] <= a[j]);
        }
    }

    #[test]
    fn argmax_survives_positive_rescaling(v in prop::collection::vec(-100.0f64..100.0, 9), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        // rounding may merge two nearly equal maxima into a tie
        let best = v[argmax(&v)];
        prop_assume!(v.iter().filter(|x| (**x - best).abs() <= best.abs() * 1e-12).count() == 1);
        prop_assert_eq!(argmax(&scaled), argmax(&v));
    }

    #[test]
    fn single_head_greedy_is_plain_argmax(seed in any::<u64>(), lp in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = EnsembleQNetwork::new(&arch(1), &mut rng).unwrap();
        let obs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = net.q_all_heads(&obs).unwrap();
        for role in [AgentRole::Protagonist, AgentRole::Adversary] {
            let a = select_action(&net, &obs, role, 0, &RiskConfig::new(lp, lp), 0.0, &mut rng).unwrap();
            prop_assert_eq!(a, argmax(&q[0]));
        }
    }

    #[test]
    fn all_zero_masks_never_change_parameters(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = EnsembleQNetwork::new(&arch(k), &mut rng).unwrap();
        let before = net.clone();
        let obs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<TdSample> = obs
            .iter()
            .map(|o| TdSample { obs: o, action: rng.random_range(0..9), target: rng.random_range(-5.0..5.0) })
            .collect();
        let masks = vec![BootstrapMask::zeros(k); batch.len()];
        let loss = td_update(&mut net, &batch, &masks, 1e-2, Some(10.0)).unwrap();
        prop_assert_eq!(loss, 0.0);
        prop_assert!(net.params_equal(&before));
    }
}

#[test]
fn epsilon_one_is_uniform_over_actions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = EnsembleQNetwork::new(&arch(3), &mut rng).unwrap();
    let obs = [0.1; 6];
    let mut counts = [0usize; 9];
    let n = 10_000;
    for _ in 0..n {
        counts[select_action(&net, &obs, AgentRole::Protagonist, 1, &RiskConfig::default(), 1.0, &mut rng).unwrap()] += 1;
    }
    let expected = n as f64 / 9.0;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // 8 degrees of freedom, p = 0.001
    assert!(chi2 < 26.12, "{chi2} {counts:?}");
}

#[test]
fn identical_heads_ignore_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let one = EnsembleQNetwork::new(&arch(1), &mut rng).unwrap();
    let heads = vec![one.heads()[0].clone(); 4];
    let net = EnsembleQNetwork::from_parts(one.trunk().clone(), heads);
    for _ in 0..20 {
        let obs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plain = argmax(&one.q_all_heads(&obs).unwrap()[0]);
        for head in 0..4 {
            let a = select_action(&net, &obs, AgentRole::Adversary, head, &RiskConfig::new(5.0, 5.0), 0.0, &mut rng);
            assert_eq!(a.unwrap(), plain);
        }
    }
}

#[test]
fn sync_makes_target_agree_bitwise_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = EnsembleQNetwork::new(&arch(4), &mut rng).unwrap();
    let mut target = EnsembleQNetwork::new(&arch(4), &mut rng).unwrap();
    sync_target(&net, &mut target).unwrap();
    let once = target.clone();
    sync_target(&net, &mut target).unwrap();
    assert!(target.params_equal(&once));
    for _ in 0..10 {
        let obs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bits = |n: &EnsembleQNetwork| -> Vec<u64> {
            n.q_all_heads(&obs).unwrap().concat().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&net), bits(&target));
    }
}

#[test]
fn subset_masks_pick_distinct_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let m = sample_mask(10, 0.03, MaskScheme::Subset { heads_per_update: 5 }, &mut rng).unwrap();
        assert_eq!(m.active_heads().len(), 5);
    }
    let all = sample_mask(10, 0.0, MaskScheme::Subset { heads_per_update: 10 }, &mut rng).unwrap();
    assert_eq!(all, BootstrapMask::ones(10));
}
