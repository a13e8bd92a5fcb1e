mod common;

use kgsel::error::Result;
use kgsel::eval::{
    filtered_rank, inductive_report, kge_link_predict, layer_sweep, link_predict, triple_classify, MetricsReport,
};
use kgsel::graph::{balanced_set, make_inductive_split, EntityId, KnowledgeGraph, LabeledTriple, Split, Triple};
use kgsel::instance::STATEMENT_TEMPLATE;
use kgsel::kge::{KgeKind, KgeModel};
use kgsel::probe::{ConstantProvider, ProbeClassifier, ProbeConfig, RepresentationProvider, SyntheticLayeredProvider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sort-based oracle: order all unfiltered entities by descending score,
/// placing the true entity after every entity with an equal score.
fn rank_oracle(scores: &[f64], t: usize, filter: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).filter(|e| !filter.contains(e)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == t).cmp(&(b == t))));
    order.iter().position(|&e| e == t).unwrap() + 1
}

#[test]
fn filtered_rank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let t = rng.random_range(0..n);
        let filter: Vec<usize> = (0..n).filter(|&e| e != t && rng.random_bool(0.3)).collect();
        let ids: Vec<EntityId> = filter.iter().map(|&e| EntityId(e as u32)).collect();
        assert_eq!(filtered_rank(&scores, EntityId(t as u32), &ids).unwrap(), rank_oracle(&scores, t, &filter));
    }
}

/// One-dimensional state whose value is a fixed pseudo-random function of
/// the triple.
struct HashedProvider;

fn hashed(t: &Triple) -> f64 {
    let x = (t.h.0 as u64 * 7919 + t.r.0 as u64 * 104_729 + t.t.0 as u64 * 1_299_709) % 10_007;
    (x as f64 / 10_007.0 - 0.5) * 8.0
}

impl RepresentationProvider for HashedProvider {
    fn id(&self) -> String {
        "hashed".into()
    }
    fn num_layers(&self) -> usize {
        2
    }
    fn width(&self) -> usize {
        1
    }
    fn representation(&self, t: &Triple, _: &str, _: usize) -> Result<Vec<f64>> {
        Ok(vec![hashed(t)])
    }
}

/// Returns the retriever score itself as the state.
struct KgeScoreProvider<'a>(&'a KgeModel);

impl RepresentationProvider for KgeScoreProvider<'_> {
    fn id(&self) -> String {
        "kge-score".into()
    }
    fn num_layers(&self) -> usize {
        1
    }
    fn width(&self) -> usize {
        1
    }
    fn representation(&self, t: &Triple, _: &str, _: usize) -> Result<Vec<f64>> {
        Ok(vec![self.0.score(t.h, t.r, t.t)])
    }
}

/// +5 for known triples, -5 otherwise.
struct TruthProvider<'a>(&'a KnowledgeGraph);

impl RepresentationProvider for TruthProvider<'_> {
    fn id(&self) -> String {
        "truth".into()
    }
    fn num_layers(&self) -> usize {
        1
    }
    fn width(&self) -> usize {
        1
    }
    fn representation(&self, t: &Triple, _: &str, _: usize) -> Result<Vec<f64>> {
        Ok(vec![if self.0.is_known(t) { 5.0 } else { -5.0 }])
    }
}

/// Probe whose score is `σ(z)` for a one-dimensional state.
fn identity_probe() -> ProbeClassifier {
    let mut p = ProbeClassifier::zeros(1, 1);
    p.w1 = vec![1.0];
    p.w2 = vec![1.0];
    p.slope = 1.0;
    p
}

fn fixture() -> (KnowledgeGraph, KgeModel, Vec<Triple>) {
    let g = common::random_graph(50, 3, [300, 0, 200], 4);
    let m = KgeModel::new(KgeKind::DistMult, 50, 3, 8, 8, 2).unwrap();
    let test = g.split(Split::Test).to_vec();
    assert!(test.len() > 150);
    (g, m, test)
}

struct Expected {
    rank: usize,
    fallback: bool,
}

fn rerank_oracle(g: &KnowledgeGraph, m: &KgeModel, q: &Triple, n: usize, rerank: impl Fn(&Triple) -> f64) -> Expected {
    let filter: Vec<usize> = (0..50).filter(|&e| e != q.t.idx() && g.is_known(&Triple { t: EntityId(e as u32), ..*q })).collect();
    let scores: Vec<f64> = (0..50).map(|e| m.score(q.h, q.r, EntityId(e as u32))).collect();
    let mut cands: Vec<usize> = (0..50).filter(|e| !filter.contains(e)).collect();
    cands.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cands.truncate(n);
    if !cands.contains(&q.t.idx()) {
        return Expected { rank: rank_oracle(&scores, q.t.idx(), &filter), fallback: true };
    }
    let st = rerank(q);
    let ahead = cands
        .iter()
        .filter(|&&e| e != q.t.idx() && rerank(&Triple { t: EntityId(e as u32), ..*q }) >= st)
        .count();
    Expected { rank: ahead + 1, fallback: false }
}

#[test]
fn link_prediction_matches_rerank_oracle() {
    let (g, m, test) = fixture();
    let n = 8;
    let (report, results) = link_predict(&m, &identity_probe(), &HashedProvider, &g, &test, n, 1, STATEMENT_TEMPLATE).unwrap();
    let mut fallbacks = 0;
    for (q, r) in test.iter().zip(&results) {
        let e = rerank_oracle(&g, &m, q, n, hashed);
        assert_eq!((r.rank, r.fallback), (e.rank, e.fallback), "{q:?}");
        fallbacks += usize::from(e.fallback);
    }
    assert!(fallbacks > 0 && fallbacks < test.len());
    assert_eq!(report.fallback_fraction, Some(fallbacks as f64 / test.len() as f64));
    assert_eq!(report.n, Some(n));
    assert_eq!(report.count, test.len());
}

#[test]
fn full_retrieval_never_falls_back() {
    let (g, m, test) = fixture();
    let (report, results) = link_predict(&m, &identity_probe(), &HashedProvider, &g, &test, 50, 1, STATEMENT_TEMPLATE).unwrap();
    assert!(results.iter().all(|r| !r.fallback));
    assert_eq!(report.fallback_fraction, Some(0.0));
}

#[test]
fn retriever_score_probe_reproduces_kge_ranks() {
    let (g, m, test) = fixture();
    let (_, kge) = kge_link_predict(&m, &g, &test).unwrap();
    let provider = KgeScoreProvider(&m);
    for n in [1, 5, 50] {
        let (_, rr) = link_predict(&m, &identity_probe(), &provider, &g, &test, n, 1, STATEMENT_TEMPLATE).unwrap();
        for (a, b) in rr.iter().zip(&kge) {
            assert_eq!(a.rank, b.rank);
        }
    }
}

#[test]
fn constant_probe_ranks_last_among_retrieved() {
    let (g, m, test) = fixture();
    let provider = ConstantProvider { value: vec![0.3], layers: 1 };
    let (_, results) = link_predict(&m, &identity_probe(), &provider, &g, &test, 6, 1, STATEMENT_TEMPLATE).unwrap();
    for r in results.iter().filter(|r| !r.fallback) {
        assert_eq!(r.rank, 6);
    }
}

#[test]
fn truth_probe_ranks_retrieved_tails_first() {
    let (g, m, test) = fixture();
    let (report, results) = link_predict(&m, &identity_probe(), &TruthProvider(&g), &g, &test, 10, 1, STATEMENT_TEMPLATE).unwrap();
    for r in &results {
        if !r.fallback {
            assert_eq!(r.rank, 1);
        }
    }
    let (_, all) = link_predict(&m, &identity_probe(), &TruthProvider(&g), &g, &test, 50, 1, STATEMENT_TEMPLATE).unwrap();
    assert!(all.iter().all(|r| r.rank == 1));
    assert!(report.mrr.unwrap() > 0.0);
}

#[test]
fn link_prediction_is_deterministic_across_schedules() {
    let (g, m, test) = fixture();
    let run = || link_predict(&m, &identity_probe(), &HashedProvider, &g, &test, 8, 1, STATEMENT_TEMPLATE).unwrap().1;
    let a = run();
    kgsel::par::set_sequential(true);
    let b = run();
    kgsel::par::set_sequential(false);
    assert_eq!(a, b);
    assert_eq!(a, run());
}

#[test]
fn triple_classification_examples() {
    let g = common::random_graph(50, 3, [300, 0, 100], 5);
    let labeled = balanced_set(&g, g.split(Split::Test), 1).unwrap();
    let probe = identity_probe();
    let perfect = triple_classify(&probe, &TruthProvider(&g), &g, &labeled, 1, 0.5, STATEMENT_TEMPLATE).unwrap();
    assert_eq!(perfect.accuracy, Some(1.0));
    assert_eq!(perfect.count, labeled.len());
    let constant = ConstantProvider { value: vec![1.0], layers: 1 };
    let always_yes = triple_classify(&probe, &constant, &g, &labeled, 1, 0.5, STATEMENT_TEMPLATE).unwrap();
    assert_eq!(always_yes.accuracy, Some(0.5));
    let always_no = triple_classify(&probe, &constant, &g, &labeled, 1, 0.99, STATEMENT_TEMPLATE).unwrap();
    assert_eq!(always_no.accuracy, Some(0.5));
    assert!(triple_classify(&probe, &constant, &g, &labeled, 2, 0.5, STATEMENT_TEMPLATE).is_err());
}

fn sweep_sets(g: &KnowledgeGraph, seed: u64) -> [Vec<LabeledTriple>; 3] {
    let train = g.split(Split::Train);
    let cut = train.len() * 3 / 4;
    [
        balanced_set(g, &train[..cut], seed).unwrap(),
        balanced_set(g, &train[cut..], seed + 1).unwrap(),
        balanced_set(g, g.split(Split::Test), seed + 2).unwrap(),
    ]
}

#[test]
fn layer_sweep_peaks_at_the_signal_layer() {
    let g = common::random_graph(80, 4, [500, 0, 150], 6);
    let cfg = ProbeConfig { hidden: 8, epochs: 15, ..Default::default() };
    let layers: Vec<usize> = (1..=5).collect();
    let mut hits = 0;
    for seed in 0..20 {
        let [train, valid, eval] = sweep_sets(&g, 100 * seed);
        let all: Vec<LabeledTriple> = train.iter().chain(&valid).chain(&eval).copied().collect();
        let signal = 1 + (seed as usize % 5);
        let provider = SyntheticLayeredProvider::new(5, 8, signal, &all, seed);
        let rows = layer_sweep(&provider, &g, &train, &valid, &eval, &layers, &ProbeConfig { seed, ..cfg.clone() }, STATEMENT_TEMPLATE)
            .unwrap();
        let best = rows.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy)).unwrap();
        hits += usize::from(best.layer == signal);
    }
    assert!(hits >= 19, "signal layer won {hits}/20 sweeps");
}

#[test]
fn inductive_strata_partition_the_items() {
    let g = common::random_graph(60, 3, [400, 0, 200], 7);
    let split = make_inductive_split(&g, 0.3, 2).unwrap();
    let labeled = balanced_set(&g, g.split(Split::Test), 3).unwrap();
    let probe = identity_probe();
    let provider = TruthProvider(&g);
    let report = inductive_report(
        &split,
        &labeled,
        |lt| lt.triple,
        |items| triple_classify(&probe, &provider, &g, items, 1, 0.5, STATEMENT_TEMPLATE),
    )
    .unwrap();
    let strata = report.strata.as_ref().unwrap();
    let count = |r: &Option<Box<MetricsReport>>| r.as_ref().map_or(0, |r| r.count);
    assert_eq!(count(&strata.s) + count(&strata.u), count(&strata.a));
    assert_eq!(count(&strata.a), labeled.len());
    assert!(count(&strata.s) > 0 && count(&strata.u) > 0);
    let correct = |r: &Option<Box<MetricsReport>>| r.as_ref().map_or(0.0, |r| r.accuracy.unwrap() * r.count as f64);
    assert!((correct(&strata.s) + correct(&strata.u) - correct(&strata.a)).abs() < 1e-9);
    assert_eq!(report.task, "inductive_triple_classification");
}
