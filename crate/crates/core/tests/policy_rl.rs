mod common;

use std::collections::BTreeSet;

use common::toy_instance;
use kgsel::instance::{label_at, DiscriminativeInstance, Label};
use kgsel::optim::{Optimizer, OptimizerKind};
use kgsel::policy::{PolicyConfig, SequencePolicy};
use kgsel::rl::{
    accuracy_reward, clipped_surrogate, composite_reward, format_reward, group_advantages, grpo_train, kl_divergence,
    mean_step_kl, sample_group, GrpoConfig,
};
use proptest::prelude::*;

const N_E: usize = 20;
const N_R: usize = 2;

fn small_cfg(k: usize) -> PolicyConfig {
    PolicyConfig { k, layers: 3, width: 16, embed_dim: 8, use_kge_score: true }
}

fn policy(k: usize, seed: u64) -> SequencePolicy {
    SequencePolicy::new(small_cfg(k), N_E, N_R, seed).unwrap()
}

fn instances(k: usize) -> Vec<DiscriminativeInstance> {
    (0..8u32)
        .map(|i| {
            let pos: Vec<usize> = (0..k).filter(|j| (i as usize + j) % 3 == 0).collect();
            toy_instance(1 + i, k, &pos)
        })
        .collect()
}

#[test]
fn zero_policy_is_uniform() {
    let p = SequencePolicy::zeros(small_cfg(3), N_E, N_R).unwrap();
    let inst = toy_instance(1, 3, &[0]);
    let tokens = p.target_tokens(&inst).unwrap();
    let out = p.forward_teacher(&inst, &tokens).unwrap();
    for lp in &out.logprobs {
        assert!((lp + 6f64.ln()).abs() < 1e-12, "{lp}");
    }
}

#[test]
fn sequence_logprob_is_the_token_sum() {
    let p = policy(4, 3);
    let inst = toy_instance(2, 4, &[1, 3]);
    let tokens = p.target_tokens(&inst).unwrap();
    let out = p.forward_teacher(&inst, &tokens).unwrap();
    let total = p.sequence_logprob(&inst, &tokens).unwrap();
    assert!((total - out.logprobs.iter().sum::<f64>()).abs() < 1e-12);
    assert!(total <= 0.0);
    let product: f64 = out.logprobs.iter().map(|l| l.exp()).product();
    assert!((total.exp() - product).abs() < 1e-12);
}

#[test]
fn step_distributions_sum_to_one() {
    let p = policy(5, 8);
    let inst = toy_instance(3, 5, &[2]);
    let trace = p.trace(&inst, &p.target_tokens(&inst).unwrap()).unwrap();
    for st in &trace.steps {
        assert_eq!(st.log_probs.len(), p.vocab().size());
        let s: f64 = st.log_probs.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn saturated_policy_greedy_is_certain() {
    let mut p = policy(4, 11);
    p.params.iter_mut().for_each(|x| *x *= 1e3);
    let inst = toy_instance(1, 4, &[0]);
    let out = p.greedy(&inst, p.default_max_len()).unwrap();
    let lp: f64 = out.logprobs.iter().sum();
    assert!(lp > -1e-6, "{lp}");
}

#[test]
fn zero_learning_rate_leaves_params() {
    let mut p = policy(4, 2);
    let before = p.params.clone();
    let set = instances(4);
    let batch: Vec<&DiscriminativeInstance> = set.iter().collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, p.num_params());
    p.sft_step(&mut opt, &batch, true).unwrap();
    assert_eq!(p.params, before);
}

#[test]
fn small_sgd_step_lowers_sft_loss() {
    let mut p = policy(4, 6);
    let set = instances(4);
    let batch: Vec<&DiscriminativeInstance> = set.iter().collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3, p.num_params());
    let before = p.sft_step(&mut opt, &batch, true).unwrap();
    let (after, _) = p.sft_loss_grad(&batch, true).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn sampling_is_seeded() {
    let p = policy(4, 1);
    let inst = toy_instance(4, 4, &[1]);
    let a = p.sample(&inst, 1.0, 42, 9).unwrap();
    let b = p.sample(&inst, 1.0, 42, 9).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.logprobs, b.logprobs);
    assert_eq!(sample_group(&p, &inst, 8, 1.0, 5).unwrap(), sample_group(&p, &inst, 8, 1.0, 5).unwrap());
}

#[test]
fn first_token_frequencies_match_the_distribution() {
    let mut p = policy(3, 21);
    p.params.iter_mut().for_each(|x| *x *= 3.0);
    let inst = toy_instance(5, 3, &[0, 2]);
    let trace = p.trace(&inst, &[p.vocab().answer()]).unwrap();
    let probs: Vec<f64> = trace.steps[0].log_probs.iter().map(|l| l.exp()).collect();
    let n = 10_000;
    let mut counts = vec![0usize; probs.len()];
    for s in 0..n {
        counts[p.sample(&inst, 1.0, s, 1).unwrap().tokens[0]] += 1;
    }
    for (c, pr) in counts.iter().zip(&probs) {
        let mean = n as f64 * pr;
        let sd = (n as f64 * pr * (1.0 - pr)).sqrt();
        assert!((*c as f64 - mean).abs() <= 3.0 * sd + 1e-9, "{counts:?} vs {probs:?}");
    }
}

#[test]
fn hidden_states_have_model_width_and_see_option_order() {
    let p = policy(4, 13);
    let inst = toy_instance(1, 4, &[0]);
    for layer in 1..=3 {
        assert_eq!(p.hidden_state(&inst, layer).unwrap().len(), 16);
    }
    assert!(p.hidden_state(&inst, 0).is_err());
    assert!(p.hidden_state(&inst, 4).is_err());
    let mut swapped = inst.clone();
    swapped.options.swap(0, 2);
    for (j, o) in swapped.options.iter_mut().enumerate() {
        o.label = label_at(j);
    }
    assert_ne!(p.hidden_state(&inst, 2).unwrap(), p.hidden_state(&swapped, 2).unwrap());
}

#[test]
fn zero_iterations_leave_policy() {
    let mut p = policy(4, 9);
    let before = p.params.clone();
    let cfg = GrpoConfig { iterations: 0, ..Default::default() };
    let log = grpo_train(&mut p, &instances(4), None, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(p.params, before);
}

#[test]
fn strong_kl_keeps_policy_near_reference() {
    let set = instances(4);
    let reference = policy(4, 17);
    let run = |beta: f64| {
        let mut p = reference.clone();
        let cfg = GrpoConfig { iterations: 40, kl_beta: beta, lr: 0.01, batch_size: 4, seed: 3, ..Default::default() };
        grpo_train(&mut p, &set, Some(&reference), &cfg).unwrap();
        mean_step_kl(&p, &reference, &set).unwrap()
    };
    let tight = run(1e3);
    let free = run(0.0);
    assert!(tight < free, "beta=1e3 kl {tight}, beta=0 kl {free}");
}

fn mask_set(mask: u32) -> BTreeSet<Label> {
    (0..4).filter(|i| mask & (1 << i) != 0).map(label_at).collect()
}

#[test]
fn dice_matches_bitmask_oracle() {
    let pairs: Vec<(u32, u32)> = (1..16u32).flat_map(|a| (1..16u32).map(move |b| (a, b))).step_by(4).take(50).collect();
    assert_eq!(pairs.len(), 50);
    let inst = toy_instance(1, 4, &[0]);
    for (a, b) in pairs {
        let expected = 2.0 * (a & b).count_ones() as f64 / (a.count_ones() + b.count_ones()) as f64;
        assert_eq!(accuracy_reward(&mask_set(a), &mask_set(b)), expected);
        let mut x = inst.clone();
        x.e_pos = mask_set(b);
        let text = kgsel::instance::format_answer(&mask_set(a));
        let r = composite_reward(&text, &x, 0.1);
        assert!((r.total - (0.1 + 0.9 * expected)).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn reward_bounds(a in 0u32..16, b in 1u32..16, alpha in 0.0f64..1.0, junk in "\\PC{0,8}") {
        let labels: Vec<Label> = (0..4).map(label_at).collect();
        let (sa, sb) = (mask_set(a), mask_set(b));
        let acc = accuracy_reward(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(acc == 1.0, sa == sb);
        prop_assert_eq!(acc == 0.0, (a & b) == 0);
        let mut inst = toy_instance(1, 4, &[0]);
        inst.e_pos = sb;
        let r = composite_reward(&junk, &inst, alpha);
        prop_assert!(r.r_fmt == 0.0 || r.r_fmt == 1.0);
        prop_assert_eq!(r.r_fmt, format_reward(&junk, &labels));
        prop_assert!(r.r_fmt == 1.0 || r.r_acc == 0.0);
        prop_assert!(r.total >= 0.0 && r.total <= 1.0);
    }

    #[test]
    fn relabeling_preserves_accuracy(a in 1u32..16, b in 1u32..16, perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let relabel = |m: u32| -> BTreeSet<Label> {
            (0..4).filter(|i| m & (1 << i) != 0).map(|i| label_at(perm[i])).collect()
        };
        prop_assert_eq!(accuracy_reward(&mask_set(a), &mask_set(b)), accuracy_reward(&relabel(a), &relabel(b)));
    }

    #[test]
    fn advantages_are_centered_and_invariant(rewards in prop::collection::vec(0.0f64..1.0, 2..16), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let a = group_advantages(&rewards, 1e-8);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        for (x, y) in a.iter().zip(group_advantages(&moved, 1e-8)) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn clipped_surrogate_is_a_lower_bound(w in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(w, adv, eps);
        prop_assert!(s <= w * adv + 1e-15);
        prop_assert!(s <= w.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-15);
        if adv > 0.0 {
            prop_assert!(s <= (1.0 + eps) * adv + 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-5.0f64..5.0, 2..8), q_seed in prop::collection::vec(-5.0f64..5.0, 8)) {
        let lp = kgsel::math::log_softmax(&p);
        let lq = kgsel::math::log_softmax(&q_seed[..p.len()]);
        prop_assert!(kl_divergence(&lp, &lq) >= -1e-12);
        prop_assert!(kl_divergence(&lp, &lp).abs() < 1e-12);
    }
}
