//! Rule-defined synthetic knowledge graph used as an offline fixture.
//!
//! Entities are the integers `0..n`. Relations follow fixed rules so that
//! held-out triples are predictable from training triples:
//!
//! | relation       | rule                                   | tails per head |
//! |----------------|----------------------------------------|----------------|
//! | `plus_one`     | t = h + 1 (mod n)                      | 1              |
//! | `plus_five`    | t = h + 5 (mod n)                      | 1              |
//! | `neighbor`     | t = h ± 1 (mod n)                      | 2              |
//! | `same_residue` | t ≡ h (mod 8), t ≠ h                   | n/8 − 1        |
//! | `parent_of`    | t ∈ {2h + 1, 2h + 2} (binary heap)     | 0–2            |
//! | `sibling_of`   | t shares h's heap parent, t ≠ h        | 0–1            |

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::graph::{GraphBuilder, KnowledgeGraph, Split};
use crate::seed;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 64,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

const RELATIONS: [(&str, &str); 6] = [
    ("plus_one", "is followed by"),
    ("plus_five", "plus five equals"),
    ("neighbor", "is adjacent to"),
    ("same_residue", "has the same residue mod 8 as"),
    ("parent_of", "is the heap parent of"),
    ("sibling_of", "is the heap sibling of"),
];

fn rule_tails(rel: &str, h: usize, n: usize) -> Vec<usize> {
    match rel {
        "plus_one" => vec![(h + 1) % n],
        "plus_five" => vec![(h + 5) % n],
        "neighbor" => vec![(h + n - 1) % n, (h + 1) % n],
        "same_residue" => (0..n).filter(|&t| t != h && t % 8 == h % 8).collect(),
        "parent_of" => [2 * h + 1, 2 * h + 2].into_iter().filter(|&t| t < n).collect(),
        "sibling_of" => {
            if h == 0 {
                return vec![];
            }
            let sib = if h % 2 == 1 { h + 1 } else { h - 1 };
            if sib < n {
                vec![sib]
            } else {
                vec![]
            }
        }
        _ => unreachable!(),
    }
}

fn key(e: usize) -> String {
    format!("n{e:02}")
}

/// Generates the fixture and a seeded random split of its triples.
pub fn synthetic_graph(cfg: &SyntheticConfig) -> Result<KnowledgeGraph> {
    let n = cfg.entities;
    let mut triples = Vec::new();
    for (rel, _) in RELATIONS {
        for h in 0..n {
            for t in rule_tails(rel, h, n) {
                triples.push((h, rel, t));
            }
        }
    }
    let mut rng = seed::rng(cfg.seed);
    triples.shuffle(&mut rng);
    let n_valid = (triples.len() as f64 * cfg.valid_fraction).round() as usize;
    let n_test = (triples.len() as f64 * cfg.test_fraction).round() as usize;
    let mut b = GraphBuilder::new();
    // Register entities in numeric order so ids equal the integers.
    for e in 0..n {
        b.entity_text(&key(e), &format!("number {e}"));
        let parent = if e == 0 { "none".to_string() } else { ((e - 1) / 2).to_string() };
        b.entity_desc(
            &key(e),
            &format!("the integer {e}; residue {} modulo 8; heap parent {parent}", e % 8),
        );
    }
    for (rel, text) in RELATIONS {
        b.relation_text(rel, text);
    }
    for (i, (h, rel, t)) in triples.iter().enumerate() {
        let split = if i < n_test {
            Split::Test
        } else if i < n_test + n_valid {
            Split::Valid
        } else {
            Split::Train
        };
        b.add(split, &key(*h), rel, &key(*t));
    }
    Ok(b.build()?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EntityId, GtScope};

    #[test]
    fn fixture_shape() {
        let g = synthetic_graph(&SyntheticConfig::default()).unwrap();
        assert_eq!(g.num_entities(), 64);
        assert_eq!(g.num_relations(), 6);
        let total = g.train().len() + g.valid().len() + g.test().len();
        // 64 + 64 + 128 + 64*7 + 63 + 62
        assert_eq!(total, 829);
        assert_eq!(g.entity_name(EntityId(12)), "number 12");
    }

    #[test]
    fn same_residue_is_one_to_many() {
        let g = synthetic_graph(&SyntheticConfig::default()).unwrap();
        let r = g.relations().get("same_residue").unwrap();
        let tails = g.ground_truth_tails(EntityId(3), crate::RelationId(r), GtScope::All);
        assert_eq!(tails.len(), 7);
        assert!(tails.iter().all(|t| t.0 % 8 == 3));
    }
}
