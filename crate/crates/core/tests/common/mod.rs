#![allow(dead_code)]

use std::path::PathBuf;

use kgsel::graph::{load_graph, DatasetPaths, GraphBuilder, KnowledgeGraph, Split};

pub fn umls_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/umls")
}

pub fn umls() -> KnowledgeGraph {
    load_graph(&DatasetPaths::in_dir(umls_dir())).expect("bundled UMLS loads").0
}

/// Random graph over `n` entities and `m` relations with `per_split` triples
/// per split; keys are `e{i}` / `r{j}`.
pub fn random_graph(n: usize, m: usize, per_split: [usize; 3], seed: u64) -> KnowledgeGraph {
    use rand::Rng;
    let mut rng = kgsel::seed::rng(seed);
    let mut b = GraphBuilder::new();
    for i in 0..n {
        b.entity_text(&format!("e{i}"), &format!("entity {i}"));
        b.add(Split::Train, &format!("e{i}"), "r0", &format!("e{}", (i + 1) % n));
    }
    for j in 0..m {
        b.relation_text(&format!("r{j}"), &format!("relation {j}"));
    }
    for (split, count) in [Split::Train, Split::Valid, Split::Test].into_iter().zip(per_split) {
        for _ in 0..count {
            let h = rng.random_range(0..n);
            let t = rng.random_range(0..n);
            let r = rng.random_range(0..m);
            b.add(split, &format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
        }
    }
    b.build().expect("random graph builds").0
}

use std::collections::BTreeSet;

use kgsel::graph::{EntityId, RelationId};
use kgsel::instance::{label_at, AnswerMode, CandidateOption, DiscriminativeInstance, Tier};

/// Hand-built instance over entities `first..first + k` with the given
/// positive positions and arbitrary KGE scores.
pub fn toy_instance(first: u32, k: usize, positives: &[usize]) -> DiscriminativeInstance {
    let options: Vec<CandidateOption> = (0..k)
        .map(|j| CandidateOption {
            label: label_at(j),
            entity: EntityId(first + j as u32),
            is_positive: positives.contains(&j),
            kge_score: (j as f64 * 1.7).sin() * 3.0,
        })
        .collect();
    let e_pos: BTreeSet<char> = positives.iter().map(|&j| label_at(j)).collect();
    DiscriminativeInstance {
        h: EntityId(0),
        r: RelationId(first % 2),
        options,
        e_pos,
        tier: Tier::Random,
        mode: AnswerMode::Variable,
        seed: 0,
        prompt: String::new(),
        target: String::new(),
    }
}
