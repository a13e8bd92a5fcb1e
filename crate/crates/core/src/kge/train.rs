use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{KgeKind, KgeModel};
use crate::error::{Error, Result};
use crate::graph::{EntityId, GtScope, KnowledgeGraph, Triple};
use crate::math::{sigmoid, softplus};
use crate::optim::{Optimizer, OptimizerKind};
use crate::{par, seed};

/// How negatives are drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// `n` uniformly corrupted tails per positive, skipping known training tails.
    Sampled(usize),
    /// Score every entity per (h, r) query with per-entity binary targets
    /// (bilinear models only).
    AllEntities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgeTrainConfig {
    pub entity_dim: usize,
    /// Ignored for kinds whose relation width is tied to the entity width.
    pub relation_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub negatives: NegativeMode,
    /// Margin for the ranking loss of TransE and RotatE.
    pub margin: f64,
    /// L2 weight on the embedding rows touched by a batch.
    pub regularization: f64,
    /// Target smoothing for the all-entities objective.
    pub label_smoothing: f64,
    pub seed: u64,
    /// Fixed-order gradient reduction; when false the reduction order follows
    /// rayon's work splitting.
    pub deterministic: bool,
}

impl Default for KgeTrainConfig {
    fn default() -> Self {
        KgeTrainConfig {
            entity_dim: 64,
            relation_dim: 64,
            epochs: 200,
            batch_size: 128,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            negatives: NegativeMode::Sampled(16),
            margin: 4.0,
            regularization: 0.0,
            label_smoothing: 0.1,
            seed: 1,
            deterministic: true,
        }
    }
}

/// Trains a model on the graph's training split.
///
/// Returns the model and the per-epoch mean training loss. Zero epochs return
/// the initialized model with an empty history.
pub fn train_kge(graph: &KnowledgeGraph, kind: KgeKind, cfg: &KgeTrainConfig) -> Result<(KgeModel, Vec<f64>)> {
    if graph.train().is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if cfg.negatives == NegativeMode::AllEntities && !kind.is_bilinear() {
        return Err(Error::InvalidArgument(format!(
            "{kind} is trained with sampled negatives and a margin loss"
        )));
    }
    let mut model = KgeModel::new(
        kind,
        graph.num_entities(),
        graph.num_relations(),
        cfg.entity_dim,
        cfg.relation_dim,
        seed::derive(cfg.seed, 0),
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    // The all-entities objective iterates over distinct (h, r) queries.
    let units: Vec<Unit> = match cfg.negatives {
        NegativeMode::Sampled(_) => graph.train().iter().map(|t| Unit::Triple(*t)).collect(),
        NegativeMode::AllEntities => graph
            .queries(GtScope::TrainOnly)
            .into_iter()
            .map(|(h, r)| Unit::Query(h, r))
            .collect(),
    };

    let mut rng = seed::rng(seed::derive(cfg.seed, 1));
    let mut order: Vec<usize> = (0..units.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = seed::derive(cfg.seed, ((epoch as u64) << 32) | b as u64);
            let (loss, grad) = batch_gradient(&model, graph, &units, batch, cfg, batch_seed);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            opt.step(&mut model.params, &grad);
            match kind {
                KgeKind::TransE => model.normalize_entities(),
                KgeKind::RotatE => model.wrap_phases(),
                _ => {}
            }
        }
        let mean = epoch_loss / units.len() as f64;
        if !mean.is_finite() || !crate::math::all_finite(&model.params) {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("{kind} epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok((model, history))
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Triple(Triple),
    Query(EntityId, crate::graph::RelationId),
}

fn shuffle(order: &mut [usize], rng: &mut seed::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Mean loss and gradient over one mini-batch. Examples are split into a
/// fixed number of chunks so the reduction order does not depend on the
/// worker count.
fn batch_gradient(
    model: &KgeModel,
    graph: &KnowledgeGraph,
    units: &[Unit],
    batch: &[usize],
    cfg: &KgeTrainConfig,
    batch_seed: u64,
) -> (f64, Vec<f64>) {
    let len = model.params.len();
    let chunks = (32_000_000 / len.max(1)).clamp(1, 8).min(batch.len());
    let per = batch.len().div_ceil(chunks);
    let chunks = batch.len().div_ceil(per);
    let scale = 1.0 / batch.len() as f64;
    let mut grad = par::sum_vectors(chunks, len + 1, cfg.deterministic, |c| {
        let mut g = vec![0.0; len + 1];
        let mut loss = 0.0;
        let start = c * per;
        let end = ((c + 1) * per).min(batch.len());
        for (offset, &u) in batch[start..end].iter().enumerate() {
            let mut rng = seed::rng2(batch_seed, (start + offset) as u64);
            loss += match units[u] {
                Unit::Triple(t) => triple_loss(model, graph, t, cfg, scale, &mut rng, &mut g[..len]),
                Unit::Query(h, r) => query_loss(model, graph, h, r, cfg, scale, &mut g[..len]),
            };
        }
        // The last slot carries the summed loss through the reduction.
        g[len] = loss;
        g
    });
    let loss = grad.pop().unwrap() * scale;
    (loss, grad)
}

fn sample_negative(graph: &KnowledgeGraph, t: Triple, rng: &mut seed::Rng) -> EntityId {
    let n = graph.num_entities() as u32;
    let known = graph.ground_truth_tails(t.h, t.r, GtScope::TrainOnly);
    for _ in 0..32 {
        let c = EntityId(rng.random_range(0..n));
        if known.binary_search(&c).is_err() {
            return c;
        }
    }
    EntityId(rng.random_range(0..n))
}

fn add_l2(model: &KgeModel, t: Triple, weight: f64, grad: &mut [f64]) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let de = model.entity_dim();
    let dr = model.relation_dim();
    let ro = model.num_entities() * de;
    let mut reg = 0.0;
    for e in [t.h, t.t] {
        for (k, x) in model.entity(e).iter().enumerate() {
            grad[e.idx() * de + k] += 2.0 * weight * x;
            reg += weight * x * x;
        }
    }
    for (k, x) in model.relation(t.r).iter().enumerate() {
        grad[ro + t.r.idx() * dr + k] += 2.0 * weight * x;
        reg += weight * x * x;
    }
    reg
}

fn triple_loss(
    model: &KgeModel,
    graph: &KnowledgeGraph,
    t: Triple,
    cfg: &KgeTrainConfig,
    scale: f64,
    rng: &mut seed::Rng,
    grad: &mut [f64],
) -> f64 {
    let n_neg = match cfg.negatives {
        NegativeMode::Sampled(n) => n.max(1),
        NegativeMode::AllEntities => unreachable!(),
    };
    let mut loss = add_l2(model, t, cfg.regularization * scale, grad) / scale;
    let pos = model.score(t.h, t.r, t.t);
    let margin_based = matches!(model.kind(), KgeKind::TransE | KgeKind::RotatE);
    let neg_w = 1.0 / n_neg as f64;
    if !margin_based {
        // -log σ(s)
        loss += softplus(-pos);
        model.accumulate_score_grad(t.h, t.r, t.t, -(1.0 - sigmoid(pos)) * scale, grad);
    }
    for _ in 0..n_neg {
        let c = sample_negative(graph, t, rng);
        let neg = model.score(t.h, t.r, c);
        if margin_based {
            let v = cfg.margin - pos + neg;
            if v > 0.0 {
                loss += neg_w * v;
                model.accumulate_score_grad(t.h, t.r, t.t, -neg_w * scale, grad);
                model.accumulate_score_grad(t.h, t.r, c, neg_w * scale, grad);
            }
        } else {
            // -log(1 - σ(s)) averaged over negatives
            loss += neg_w * softplus(neg);
            model.accumulate_score_grad(t.h, t.r, c, neg_w * sigmoid(neg) * scale, grad);
        }
    }
    loss
}

fn query_loss(
    model: &KgeModel,
    graph: &KnowledgeGraph,
    h: EntityId,
    r: crate::graph::RelationId,
    cfg: &KgeTrainConfig,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let n = model.num_entities();
    let de = model.entity_dim();
    let tails = graph.ground_truth_tails(h, r, GtScope::TrainOnly);
    let q = model.query_vector(h, r);
    let ls = cfg.label_smoothing;
    let mut target = vec![ls / n as f64; n];
    for t in tails {
        target[t.idx()] = 1.0 - ls + ls / n as f64;
    }
    let mut dq = vec![0.0; de];
    let mut loss = 0.0;
    let w = scale / n as f64;
    for e in 0..n {
        let ev = model.entity(EntityId(e as u32));
        let s = crate::math::dot(&q, ev);
        let y = target[e];
        loss += y * softplus(-s) + (1.0 - y) * softplus(s);
        let g = (sigmoid(s) - y) * w;
        crate::math::axpy(g, ev, &mut dq);
        crate::math::axpy(g, &q, &mut grad[e * de..(e + 1) * de]);
    }
    model.accumulate_query_grad(h, r, &dq, grad);
    if cfg.regularization > 0.0 {
        let t = Triple { h, r, t: h };
        loss += add_l2(model, t, cfg.regularization * scale, grad) / scale;
    }
    loss / n as f64
}
