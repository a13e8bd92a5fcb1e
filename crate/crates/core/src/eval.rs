//! Ranking metrics, retrieve-then-rerank link prediction, triple
//! classification, layer sweeps and inductive strata.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, GtScope, InductiveSplit, KnowledgeGraph, LabeledTriple, RelationId, Stratum, Triple};
use crate::instance::render_statement;
use crate::kge::{rank_scores, KgeModel};
use crate::probe::{extract_representations, fit_probe, probe_score, ProbeClassifier, ProbeConfig, RepresentationProvider};
use crate::par;

/// `1 + #{e ∉ F ∪ {t}: s(e) > s(t)} + #{e ∉ F ∪ {t}: s(e) = s(t)}`: the true
/// entity is placed last among entities with an equal score.
pub fn filtered_rank(scores: &[f64], t_true: EntityId, filter: &[EntityId]) -> Result<usize> {
    let st = *scores
        .get(t_true.idx())
        .ok_or_else(|| Error::InvalidArgument(format!("true entity {} has no score", t_true.0)))?;
    if st.is_nan() {
        return Err(Error::NonFinite(format!("score of entity {}", t_true.0)));
    }
    if filter.contains(&t_true) {
        return Err(Error::InvalidArgument(format!("true entity {} is in the filter set", t_true.0)));
    }
    let mut skip = vec![false; scores.len()];
    for e in filter {
        if let Some(s) = skip.get_mut(e.idx()) {
            *s = true;
        }
    }
    skip[t_true.idx()] = true;
    let ahead = scores.iter().zip(&skip).filter(|(s, k)| !**k && **s >= st).count();
    Ok(1 + ahead)
}

/// Known tails of `(h, r)` over all splits other than `t` itself.
pub fn filter_set(graph: &KnowledgeGraph, t: &Triple) -> Vec<EntityId> {
    graph
        .ground_truth_tails(t.h, t.r, GtScope::All)
        .iter()
        .copied()
        .filter(|e| *e != t.t)
        .collect()
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    #[serde(rename = "S")]
    pub s: Option<Box<MetricsReport>>,
    #[serde(rename = "U")]
    pub u: Option<Box<MetricsReport>>,
    #[serde(rename = "A")]
    pub a: Option<Box<MetricsReport>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub dataset: String,
    pub n: Option<usize>,
    pub l: Option<usize>,
    pub mrr: Option<f64>,
    pub hits1: Option<f64>,
    pub hits3: Option<f64>,
    pub hits10: Option<f64>,
    pub accuracy: Option<f64>,
    pub strata: Option<Strata>,
    pub fallback_fraction: Option<f64>,
    pub threshold: Option<f64>,
    /// Number of evaluated queries or triples.
    pub count: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_ranks(task: &str, results: &[RankingResult]) -> Result<Self> {
        let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
        Ok(MetricsReport {
            task: task.into(),
            mrr: Some(mrr(&ranks)?),
            hits1: Some(hits_at_k(&ranks, 1)?),
            hits3: Some(hits_at_k(&ranks, 3)?),
            hits10: Some(hits_at_k(&ranks, 10)?),
            fallback_fraction: Some(results.iter().filter(|r| r.fallback).count() as f64 / ranks.len() as f64),
            count: ranks.len(),
            ..Default::default()
        })
    }

    pub fn from_accuracy(task: &str, correct: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Empty("classification set"));
        }
        Ok(MetricsReport {
            task: task.into(),
            accuracy: Some(correct as f64 / count as f64),
            count,
            ..Default::default()
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::graph::write_file(path.as_ref(), &(self.to_json() + "\n"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub triple: Triple,
    pub rank: usize,
    /// The true tail was outside the retrieved set and the rank comes from
    /// the retriever.
    pub fallback: bool,
}

/// Retrieves the top `n` non-filtered entities by retriever score. If the
/// true tail is among them, ranks it within that list by `rerank`
/// (pessimistic ties); otherwise falls back to its filtered retriever rank.
pub fn rerank_rank(
    triple: Triple,
    retriever_scores: &[f64],
    filter: &[EntityId],
    n: usize,
    rerank: impl Fn(EntityId) -> Result<f64>,
) -> Result<RankingResult> {
    let mut top = rank_scores(retriever_scores, filter);
    top.truncate(n.max(1));
    if !top.iter().any(|s| s.entity == triple.t) {
        return Ok(RankingResult {
            triple,
            rank: filtered_rank(retriever_scores, triple.t, filter)?,
            fallback: true,
        });
    }
    let scored = top.iter().map(|s| Ok((s.entity, rerank(s.entity)?))).collect::<Result<Vec<_>>>()?;
    let st = scored.iter().find(|(e, _)| *e == triple.t).expect("true tail retrieved").1;
    let ahead = scored.iter().filter(|(e, s)| *e != triple.t && *s >= st).count();
    Ok(RankingResult {
        triple,
        rank: 1 + ahead,
        fallback: false,
    })
}

/// Retrieve-then-rerank over `triples` (tail queries). The probe scores the
/// layer-`l` state of each retrieved `(h, r, e)`.
#[allow(clippy::too_many_arguments)]
pub fn link_predict<P: RepresentationProvider + ?Sized>(
    kge: &KgeModel,
    probe: &ProbeClassifier,
    provider: &P,
    graph: &KnowledgeGraph,
    triples: &[Triple],
    n: usize,
    l: usize,
    template: &str,
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let results = par::try_map(triples, |t| {
        let filter = filter_set(graph, t);
        let scores = kge.score_all_tails(t.h, t.r);
        rerank_rank(*t, &scores, &filter, n, |e| {
            let cand = Triple { h: t.h, r: t.r, t: e };
            let prompt = render_statement(graph, &cand, template)?;
            probe_score(probe, &provider.representation(&cand, &prompt, l)?)
        })
    })?;
    let mut report = MetricsReport::from_ranks("link_prediction", &results)?;
    report.n = Some(n);
    report.l = Some(l);
    Ok((report, results))
}

/// Filtered ranks of the retriever alone.
pub fn kge_link_predict(kge: &KgeModel, graph: &KnowledgeGraph, triples: &[Triple]) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let results = par::try_map(triples, |t| {
        let filter = filter_set(graph, t);
        Ok::<_, Error>(RankingResult {
            triple: *t,
            rank: filtered_rank(&kge.score_all_tails(t.h, t.r), t.t, &filter)?,
            fallback: false,
        })
    })?;
    Ok((MetricsReport::from_ranks("kge_link_prediction", &results)?, results))
}

/// Accuracy of `classify` over a labeled set.
pub fn triple_classify<P: RepresentationProvider + ?Sized>(
    probe: &ProbeClassifier,
    provider: &P,
    graph: &KnowledgeGraph,
    labeled: &[LabeledTriple],
    l: usize,
    threshold: f64,
    template: &str,
) -> Result<MetricsReport> {
    let m = extract_representations(provider, graph, labeled, l, template)?;
    let preds = par::try_map(&m.columns, |z| Ok::<_, Error>(u8::from(probe_score(probe, z)? >= threshold)))?;
    let correct = preds.iter().zip(&m.labels).filter(|(p, y)| p == y).count();
    let mut r = MetricsReport::from_accuracy("triple_classification", correct, labeled.len())?;
    r.l = Some(l);
    r.threshold = Some(threshold);
    Ok(r)
}

/// Threshold on an arbitrary score scale maximizing the accuracy of
/// `score >= threshold`; returns (threshold, accuracy). Candidates are the
/// midpoints between distinct scores and the two outer bounds; the lowest
/// best candidate wins.
pub fn fit_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    // Sweep: threshold just above pairs[i-1] classifies pairs[..i] as 0.
    let positives = pairs.iter().filter(|p| p.1 == 1).count();
    let mut correct = positives; // threshold below everything
    let mut best = (pairs[0].0 - 1.0, correct);
    let mut i = 0;
    while i < n {
        let s = pairs[i].0;
        while i < n && pairs[i].0 == s {
            if pairs[i].1 == 1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        if correct > best.1 {
            let th = if i < n { 0.5 * (s + pairs[i].0) } else { s + 1.0 };
            best = (th, correct);
        }
    }
    (best.0, best.1 as f64 / n as f64)
}

/// Per-relation KGE score thresholds with a global fallback for relations
/// absent from the tuning set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgeThresholds {
    pub global: f64,
    pub per_relation: HashMap<u32, f64>,
}

impl KgeThresholds {
    pub fn fit(kge: &KgeModel, tuning: &[LabeledTriple]) -> Self {
        let score = |lt: &LabeledTriple| kge.score(lt.triple.h, lt.triple.r, lt.triple.t);
        let all: Vec<f64> = tuning.iter().map(score).collect();
        let labels: Vec<u8> = tuning.iter().map(|lt| lt.label).collect();
        let global = fit_threshold(&all, &labels).0;
        let mut by_rel: HashMap<u32, (Vec<f64>, Vec<u8>)> = HashMap::new();
        for (lt, s) in tuning.iter().zip(&all) {
            let e = by_rel.entry(lt.triple.r.0).or_default();
            e.0.push(*s);
            e.1.push(lt.label);
        }
        let per_relation = by_rel
            .into_iter()
            .filter(|(_, (_, y))| y.contains(&0) && y.contains(&1))
            .map(|(r, (s, y))| (r, fit_threshold(&s, &y).0))
            .collect();
        KgeThresholds { global, per_relation }
    }

    pub fn threshold(&self, r: RelationId) -> f64 {
        self.per_relation.get(&r.0).copied().unwrap_or(self.global)
    }
}

/// Triple classification with KGE scores: thresholds tuned on `tuning`,
/// accuracy measured on `test`.
pub fn kge_triple_classify(kge: &KgeModel, tuning: &[LabeledTriple], test: &[LabeledTriple]) -> Result<(MetricsReport, KgeThresholds)> {
    let th = KgeThresholds::fit(kge, tuning);
    let correct = test
        .iter()
        .filter(|lt| u8::from(kge.score(lt.triple.h, lt.triple.r, lt.triple.t) >= th.threshold(lt.triple.r)) == lt.label)
        .count();
    Ok((MetricsReport::from_accuracy("kge_triple_classification", correct, test.len())?, th))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub threshold: f64,
}

/// Trains an independent probe per layer on `train` and reports its
/// accuracy on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep<P: RepresentationProvider + ?Sized>(
    provider: &P,
    graph: &KnowledgeGraph,
    train: &[LabeledTriple],
    valid: &[LabeledTriple],
    eval: &[LabeledTriple],
    layers: &[usize],
    cfg: &ProbeConfig,
    template: &str,
) -> Result<Vec<LayerResult>> {
    layers
        .iter()
        .map(|&l| {
            let tr = extract_representations(provider, graph, train, l, template)?;
            let va = extract_representations(provider, graph, valid, l, template)?;
            let (probe, rep) = fit_probe(&tr, &va, cfg)?;
            let acc = triple_classify(&probe, provider, graph, eval, l, probe.threshold, template)?
                .accuracy
                .expect("classification accuracy");
            Ok(LayerResult {
                layer: l,
                accuracy: acc,
                val_accuracy: rep.val_accuracy,
                threshold: probe.threshold,
            })
        })
        .collect()
}

pub fn write_layer_csv(path: impl AsRef<Path>, rows: &[LayerResult]) -> Result<()> {
    let mut s = String::from("layer,accuracy,val_accuracy,threshold\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.layer, r.accuracy, r.val_accuracy, r.threshold);
    }
    crate::graph::write_file(path.as_ref(), &s)
}

/// Applies `metric` to the seen, unseen and full strata of `items`; each
/// item is assigned by the entities of its own triple. Empty strata are
/// reported as absent.
pub fn inductive_report<T: Clone>(
    split: &InductiveSplit,
    items: &[T],
    triple_of: impl Fn(&T) -> Triple,
    metric: impl Fn(&[T]) -> Result<MetricsReport>,
) -> Result<MetricsReport> {
    let (mut s, mut u) = (Vec::new(), Vec::new());
    for it in items {
        match split.stratum(&triple_of(it)) {
            Stratum::S => s.push(it.clone()),
            Stratum::U => u.push(it.clone()),
        }
    }
    let run = |v: &[T]| -> Result<Option<Box<MetricsReport>>> {
        if v.is_empty() {
            Ok(None)
        } else {
            Ok(Some(Box::new(metric(v)?)))
        }
    };
    let strata = Strata {
        s: run(&s)?,
        u: run(&u)?,
        a: run(items)?,
    };
    let mut report = strata.a.as_deref().cloned().unwrap_or_default();
    report.task = format!("inductive_{}", report.task);
    report.strata = Some(strata);
    Ok(report)
}
