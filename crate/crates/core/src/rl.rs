//! Composite rewards and group-relative policy optimization.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{parse_answer, DiscriminativeInstance, Label};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::SequencePolicy;
use crate::{math, par, seed};

/// 1 when the text carries a well-formed answer line.
pub fn format_reward(text: &str, valid_labels: &[Label]) -> f64 {
    if parse_answer(text, valid_labels).is_some() {
        1.0
    } else {
        0.0
    }
}

/// Dice overlap `2|Â ∩ P| / (|Â| + |P|)` between predicted and true sets.
pub fn accuracy_reward(answer: &BTreeSet<Label>, e_pos: &BTreeSet<Label>) -> f64 {
    let denom = answer.len() + e_pos.len();
    if denom == 0 {
        return 0.0;
    }
    2.0 * answer.intersection(e_pos).count() as f64 / denom as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_acc: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn composite_reward(text: &str, inst: &DiscriminativeInstance, alpha: f64) -> RewardBreakdown {
    let parsed = parse_answer(text, &inst.labels());
    let r_fmt = if parsed.is_some() { 1.0 } else { 0.0 };
    let r_acc = parsed.map_or(0.0, |a| accuracy_reward(&a, &inst.e_pos));
    RewardBreakdown {
        r_fmt,
        r_acc,
        alpha,
        total: alpha * r_fmt + (1.0 - alpha) * r_acc,
    }
}

/// `(R_i - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `min(w A, clip(w, 1 - ε, 1 + ε) A)`
pub fn clipped_surrogate(w: f64, advantage: f64, eps: f64) -> f64 {
    (w * advantage).min(w.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Exact `KL(p ‖ q)` between two distributions given as log-probabilities.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub std_floor: f64,
    pub temperature: f64,
    pub iterations: usize,
    /// Gradient steps per sampling round.
    pub inner_updates: usize,
    /// Instances per sampling round.
    pub batch_size: usize,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 0.001,
            std_floor: 1e-8,
            temperature: 1.0,
            iterations: 200,
            inner_updates: 1,
            batch_size: 16,
            alpha: 0.1,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            deterministic: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.group_size < 2 {
            errs.push("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0) {
            errs.push("clip_eps must be positive");
        }
        if !(self.kl_beta >= 0.0) {
            errs.push("kl_beta must be non-negative");
        }
        if !(self.std_floor > 0.0) {
            errs.push("std_floor must be positive");
        }
        if !(self.temperature > 0.0) {
            errs.push("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push("alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }
}

/// Loss, gradient and diagnostics for one group.
#[derive(Clone, Debug)]
pub struct GroupLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Per-sample surrogate contributions `min(w A, clip(w) A)`.
    pub surrogate: Vec<f64>,
    /// Per-sample KL to the reference, summed over positions.
    pub kl: Vec<f64>,
}

/// Negative clipped surrogate plus `β · KL(π_θ ‖ π_ref)`, averaged over the
/// group, with its gradient with respect to `policy.params`.
pub fn grpo_loss(
    policy: &SequencePolicy,
    old: &SequencePolicy,
    reference: &SequencePolicy,
    inst: &DiscriminativeInstance,
    samples: &[Vec<usize>],
    cfg: &GrpoConfig,
) -> Result<GroupLoss> {
    let g = samples.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group needs at least 2 samples, got {g}")));
    }
    let vocab = policy.vocab();
    let rewards: Vec<RewardBreakdown> =
        samples.iter().map(|s| composite_reward(&vocab.render(s), inst, cfg.alpha)).collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = group_advantages(&totals, cfg.std_floor);
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    let mut ratios = Vec::with_capacity(g);
    let mut surrogate = Vec::with_capacity(g);
    let mut kls = Vec::with_capacity(g);
    let inv_g = 1.0 / g as f64;
    let context = policy.encode_instance(inst)?;
    let ref_context = reference.encode_instance(inst)?;
    for (s, &adv) in samples.iter().zip(&advantages) {
        let trace = policy.trace_context(context.clone(), s)?;
        let ref_trace = reference.trace_context(ref_context.clone(), s)?;
        let w = (trace.sequence_logprob() - old.sequence_logprob(inst, s)?).exp();
        let clipped = w.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let surr = clipped_surrogate(w, adv, cfg.clip_eps);
        // The unclipped branch carries the gradient when it is the minimum.
        let active = w * adv <= clipped * adv;
        let mut kl_sum = 0.0;
        let dlogits: Vec<Vec<f64>> = trace
            .steps
            .iter()
            .zip(&ref_trace.steps)
            .zip(s)
            .map(|((st, rs), &tok)| {
                let kl = kl_divergence(&st.log_probs, &rs.log_probs);
                kl_sum += kl;
                let mut d: Vec<f64> = st
                    .log_probs
                    .iter()
                    .zip(&rs.log_probs)
                    .map(|(lp, lq)| cfg.kl_beta * inv_g * lp.exp() * (lp - lq - kl))
                    .collect();
                if active && adv != 0.0 {
                    let c = -inv_g * adv * w;
                    for (v, lp) in d.iter_mut().zip(&st.log_probs) {
                        *v -= c * lp.exp();
                    }
                    d[tok] += c;
                }
                d
            })
            .collect();
        policy.backward(&trace, &dlogits, &mut grad);
        loss += inv_g * (-surr + cfg.kl_beta * kl_sum);
        ratios.push(w);
        surrogate.push(surr);
        kls.push(kl_sum);
    }
    if !loss.is_finite() || !math::all_finite(&grad) {
        return Err(Error::NonFinite("GRPO loss".into()));
    }
    Ok(GroupLoss {
        loss,
        grad,
        rewards,
        advantages,
        ratios,
        surrogate,
        kl: kls,
    })
}

/// One row of the GRPO training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_r_fmt: f64,
    pub mean_r_acc: f64,
    pub kl: f64,
    pub loss: f64,
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[IterationLog]) -> Result<()> {
    let mut s = String::from("iter,mean_reward,mean_r_fmt,mean_r_acc,kl,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.mean_reward, r.mean_r_fmt, r.mean_r_acc, r.kl, r.loss);
    }
    crate::graph::write_file(path.as_ref(), &s)
}

/// Samples a group of `g` responses from `policy` with per-sample seeds.
pub fn sample_group(
    policy: &SequencePolicy,
    inst: &DiscriminativeInstance,
    g: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let max_len = policy.default_max_len();
    (0..g)
        .map(|i| Ok(policy.sample(inst, temperature, seed::derive(seed, i as u64), max_len)?.tokens))
        .collect()
}

/// Trains on `instances` (normally the error set) and returns the per-round
/// log. `reference` defaults to a snapshot of the incoming policy.
pub fn grpo_train(
    policy: &mut SequencePolicy,
    instances: &[DiscriminativeInstance],
    reference: Option<&SequencePolicy>,
    cfg: &GrpoConfig,
) -> Result<Vec<IterationLog>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if instances.is_empty() {
        return Err(Error::Empty("GRPO instances"));
    }
    let reference = reference.cloned().unwrap_or_else(|| policy.clone());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, policy.num_params());
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.iterations);
    let len = policy.num_params();
    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(instances.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let old = policy.clone();
        let round_seed = seed::derive(cfg.seed, iter as u64 + 1);
        let groups = par::try_map(&batch, |&i| {
            sample_group(&old, &instances[i], cfg.group_size, cfg.temperature, seed::derive(round_seed, i as u64))
        })?;
        let scale = 1.0 / batch.len() as f64;
        let mut first = None;
        for _ in 0..cfg.inner_updates.max(1) {
            let current = &*policy;
            let parts = par::try_map(&(0..batch.len()).collect::<Vec<_>>(), |&b| {
                grpo_loss(current, &old, &reference, &instances[batch[b]], &groups[b], cfg)
            })?;
            // Slot `len` carries the loss, `len + 1` the KL through the sum.
            let mut total = par::sum_vectors(parts.len(), len + 2, cfg.deterministic, |b| {
                let p = &parts[b];
                let mut v: Vec<f64> = p.grad.iter().map(|x| x * scale).collect();
                v.push(p.loss * scale);
                v.push(math::mean(&p.kl) * scale);
                v
            });
            let kl = total.pop().expect("kl slot");
            let loss = total.pop().expect("loss slot");
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: iter });
            }
            if first.is_none() {
                let all: Vec<&RewardBreakdown> = parts.iter().flat_map(|p| &p.rewards).collect();
                let m = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / all.len() as f64;
                first = Some(IterationLog {
                    iter,
                    mean_reward: m(|r| r.total),
                    mean_r_fmt: m(|r| r.r_fmt),
                    mean_r_acc: m(|r| r.r_acc),
                    kl,
                    loss,
                });
            }
            opt.step(&mut policy.params, &total);
        }
        let row = first.expect("at least one inner update");
        log::debug!(
            "grpo iter {}: reward {:.4} fmt {:.4} acc {:.4} kl {:.5} loss {:.5}",
            row.iter,
            row.mean_reward,
            row.mean_r_fmt,
            row.mean_r_acc,
            row.kl,
            row.loss
        );
        log.push(row);
    }
    Ok(log)
}

/// Mean greedy-decode rewards over a set of instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mean_total: f64,
    pub mean_r_fmt: f64,
    pub mean_r_acc: f64,
    /// Fraction of instances answered exactly.
    pub exact: f64,
    pub n: usize,
}

pub fn evaluate_greedy(policy: &SequencePolicy, instances: &[DiscriminativeInstance], alpha: f64) -> Result<RewardSummary> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation instances"));
    }
    let rewards = par::try_map(instances, |inst| Ok::<_, Error>(composite_reward(&policy.answer_text(inst)?, inst, alpha)))?;
    let n = rewards.len() as f64;
    Ok(RewardSummary {
        mean_total: rewards.iter().map(|r| r.total).sum::<f64>() / n,
        mean_r_fmt: rewards.iter().map(|r| r.r_fmt).sum::<f64>() / n,
        mean_r_acc: rewards.iter().map(|r| r.r_acc).sum::<f64>() / n,
        exact: rewards.iter().filter(|r| r.r_acc == 1.0).count() as f64 / n,
        n: rewards.len(),
    })
}

/// Mean per-step KL between two policies along their greedy decodes of
/// `policy`.
pub fn mean_step_kl(policy: &SequencePolicy, reference: &SequencePolicy, instances: &[DiscriminativeInstance]) -> Result<f64> {
    let per = par::try_map(instances, |inst| {
        let toks = policy.greedy(inst, policy.default_max_len())?.tokens;
        let a = policy.trace(inst, &toks)?;
        let b = reference.trace(inst, &toks)?;
        let kls: Vec<f64> = a.steps.iter().zip(&b.steps).map(|(x, y)| kl_divergence(&x.log_probs, &y.log_probs)).collect();
        Ok::<_, Error>((kls.iter().sum::<f64>(), kls.len()))
    })?;
    let (s, n) = per.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}
