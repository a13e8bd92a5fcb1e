//! Knowledge-graph embedding models: TransE, DistMult, ComplEx, RotatE and
//! TuckER. Higher scores mean more plausible triples.
//!
//! Complex-valued models (ComplEx, RotatE) store entity vectors with real and
//! imaginary parts interleaved: component `i` is `(v[2i], v[2i + 1])`.

mod checkpoint;
mod train;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, RelationId};
use crate::math::dot;
use crate::seed;

pub use checkpoint::{load_kge, save_kge};
pub use train::{train_kge, KgeTrainConfig, NegativeMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KgeKind {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
    TuckER,
}

impl KgeKind {
    pub const ALL: [KgeKind; 5] = [
        KgeKind::TransE,
        KgeKind::DistMult,
        KgeKind::ComplEx,
        KgeKind::RotatE,
        KgeKind::TuckER,
    ];

    /// Models whose score is `<q(h, r), e_t>` for a query vector `q`.
    pub fn is_bilinear(self) -> bool {
        matches!(self, KgeKind::DistMult | KgeKind::ComplEx | KgeKind::TuckER)
    }

    /// Relation width implied by the entity width (TuckER is free).
    pub fn relation_dim(self, entity_dim: usize, requested: usize) -> usize {
        match self {
            KgeKind::RotatE => entity_dim / 2,
            KgeKind::TuckER => requested,
            _ => entity_dim,
        }
    }
}

impl fmt::Display for KgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KgeKind::TransE => "TransE",
            KgeKind::DistMult => "DistMult",
            KgeKind::ComplEx => "ComplEx",
            KgeKind::RotatE => "RotatE",
            KgeKind::TuckER => "TuckER",
        };
        f.write_str(s)
    }
}

impl FromStr for KgeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(KgeKind::TransE),
            "distmult" => Ok(KgeKind::DistMult),
            "complex" => Ok(KgeKind::ComplEx),
            "rotate" => Ok(KgeKind::RotatE),
            "tucker" => Ok(KgeKind::TuckER),
            _ => Err(Error::InvalidArgument(format!("unknown KGE kind `{s}`"))),
        }
    }
}

/// Embedding model with all parameters in one flat buffer laid out as
/// `[entity | relation | core]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KgeModel {
    kind: KgeKind,
    num_entities: usize,
    num_relations: usize,
    entity_dim: usize,
    relation_dim: usize,
    pub(crate) params: Vec<f64>,
}

/// One entry of a tail ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub entity: EntityId,
    pub score: f64,
}

impl KgeModel {
    /// Randomly initialized model.
    pub fn new(
        kind: KgeKind,
        num_entities: usize,
        num_relations: usize,
        entity_dim: usize,
        relation_dim: usize,
        seed_value: u64,
    ) -> Result<Self> {
        let relation_dim = kind.relation_dim(entity_dim, relation_dim);
        Self::validate_dims(kind, entity_dim, relation_dim)?;
        let mut m = Self::zeros(kind, num_entities, num_relations, entity_dim, relation_dim);
        let mut rng = seed::rng(seed_value);
        let de = entity_dim as f64;
        match kind {
            KgeKind::TransE => {
                let b = 6.0 / de.sqrt();
                for p in m.params.iter_mut() {
                    *p = rng.random_range(-b..b);
                }
                m.normalize_entities();
            }
            KgeKind::RotatE => {
                let b = 1.0 / de.sqrt();
                let (ent, rel) = m.params.split_at_mut(num_entities * entity_dim);
                for p in ent.iter_mut() {
                    *p = rng.random_range(-b..b);
                }
                for p in rel.iter_mut() {
                    *p = rng.random_range(-PI..PI);
                }
            }
            KgeKind::DistMult | KgeKind::ComplEx => {
                let normal = Normal::new(0.0, 1.0 / de.sqrt()).unwrap();
                for p in m.params.iter_mut() {
                    *p = normal.sample(&mut rng);
                }
            }
            KgeKind::TuckER => {
                let ne = num_entities * entity_dim + num_relations * relation_dim;
                let emb = Normal::new(0.0, 1.0 / de.sqrt()).unwrap();
                // Keeps q(h, r) on the same scale as an entity row.
                let core = Normal::new(0.0, 1.0 / (relation_dim as f64).sqrt()).unwrap();
                for (i, p) in m.params.iter_mut().enumerate() {
                    *p = if i < ne {
                        emb.sample(&mut rng)
                    } else {
                        core.sample(&mut rng)
                    };
                }
            }
        }
        Ok(m)
    }

    fn validate_dims(kind: KgeKind, entity_dim: usize, relation_dim: usize) -> Result<()> {
        if entity_dim == 0 || relation_dim == 0 {
            return Err(Error::InvalidArgument("embedding dimensions must be positive".into()));
        }
        if matches!(kind, KgeKind::ComplEx | KgeKind::RotatE) && entity_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{kind} needs an even entity dimension, got {entity_dim}"
            )));
        }
        Ok(())
    }

    /// All-zero model of the given shape.
    pub fn zeros(
        kind: KgeKind,
        num_entities: usize,
        num_relations: usize,
        entity_dim: usize,
        relation_dim: usize,
    ) -> Self {
        let core = if kind == KgeKind::TuckER {
            entity_dim * relation_dim * entity_dim
        } else {
            0
        };
        KgeModel {
            kind,
            num_entities,
            num_relations,
            entity_dim,
            relation_dim,
            params: vec![0.0; num_entities * entity_dim + num_relations * relation_dim + core],
        }
    }

    pub fn kind(&self) -> KgeKind {
        self.kind
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_dim(&self) -> usize {
        self.entity_dim
    }

    pub fn relation_dim(&self) -> usize {
        self.relation_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn rel_offset(&self) -> usize {
        self.num_entities * self.entity_dim
    }

    fn core_offset(&self) -> usize {
        self.rel_offset() + self.num_relations * self.relation_dim
    }

    pub fn entity(&self, e: EntityId) -> &[f64] {
        let d = self.entity_dim;
        &self.params[e.idx() * d..(e.idx() + 1) * d]
    }

    pub fn entity_mut(&mut self, e: EntityId) -> &mut [f64] {
        let d = self.entity_dim;
        &mut self.params[e.idx() * d..(e.idx() + 1) * d]
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        let d = self.relation_dim;
        let o = self.rel_offset();
        &self.params[o + r.idx() * d..o + (r.idx() + 1) * d]
    }

    pub fn relation_mut(&mut self, r: RelationId) -> &mut [f64] {
        let d = self.relation_dim;
        let o = self.rel_offset();
        &mut self.params[o + r.idx() * d..o + (r.idx() + 1) * d]
    }

    /// TuckER core `W[i][j][k]` flattened as `(i * d_r + j) * d_e + k`; empty otherwise.
    pub fn core(&self) -> &[f64] {
        &self.params[self.core_offset()..]
    }

    pub fn core_mut(&mut self) -> &mut [f64] {
        let o = self.core_offset();
        &mut self.params[o..]
    }

    pub(crate) fn normalize_entities(&mut self) {
        let d = self.entity_dim;
        for row in self.params[..self.num_entities * d].chunks_mut(d) {
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    pub(crate) fn wrap_phases(&mut self) {
        let o = self.rel_offset();
        let n = self.num_relations * self.relation_dim;
        for p in &mut self.params[o..o + n] {
            if !(-PI..=PI).contains(p) {
                *p = (*p + PI).rem_euclid(2.0 * PI) - PI;
            }
        }
    }

    /// Query vector `q(h, r)` of a bilinear model, so that `score = <q, e_t>`.
    pub fn query_vector(&self, h: EntityId, r: RelationId) -> Vec<f64> {
        let hv = self.entity(h);
        let rv = self.relation(r);
        match self.kind {
            KgeKind::DistMult => hv.iter().zip(rv).map(|(a, b)| a * b).collect(),
            KgeKind::ComplEx => {
                let mut q = vec![0.0; self.entity_dim];
                for i in 0..self.entity_dim / 2 {
                    let (hr, hi) = (hv[2 * i], hv[2 * i + 1]);
                    let (rr, ri) = (rv[2 * i], rv[2 * i + 1]);
                    q[2 * i] = hr * rr - hi * ri;
                    q[2 * i + 1] = hr * ri + hi * rr;
                }
                q
            }
            KgeKind::TuckER => {
                let (de, dr) = (self.entity_dim, self.relation_dim);
                let core = self.core();
                let mut q = vec![0.0; de];
                for i in 0..de {
                    if hv[i] == 0.0 {
                        continue;
                    }
                    for j in 0..dr {
                        let c = hv[i] * rv[j];
                        let row = &core[(i * dr + j) * de..(i * dr + j + 1) * de];
                        crate::math::axpy(c, row, &mut q);
                    }
                }
                q
            }
            KgeKind::TransE | KgeKind::RotatE => {
                panic!("query_vector is only defined for bilinear models")
            }
        }
    }

    /// Translational score for one tail given the head and relation rows.
    fn translational(&self, hv: &[f64], rv: &[f64], tv: &[f64]) -> f64 {
        match self.kind {
            KgeKind::TransE => -hv
                .iter()
                .zip(rv)
                .zip(tv)
                .map(|((h, r), t)| (h + r - t).abs())
                .sum::<f64>(),
            KgeKind::RotatE => {
                let mut s = 0.0;
                for i in 0..self.entity_dim / 2 {
                    let (c, sn) = (rv[i].cos(), rv[i].sin());
                    let (hr, hi) = (hv[2 * i], hv[2 * i + 1]);
                    let ur = hr * c - hi * sn - tv[2 * i];
                    let ui = hr * sn + hi * c - tv[2 * i + 1];
                    s += (ur * ur + ui * ui).sqrt();
                }
                -s
            }
            _ => unreachable!(),
        }
    }

    /// Plausibility score of `(h, r, t)`.
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        if self.kind.is_bilinear() {
            dot(&self.query_vector(h, r), self.entity(t))
        } else {
            self.translational(self.entity(h), self.relation(r), self.entity(t))
        }
    }

    /// Scores of every entity as the tail of `(h, r, ?)`, indexed by entity id.
    /// Bitwise equal to calling [`score`](Self::score) per entity.
    pub fn score_all_tails(&self, h: EntityId, r: RelationId) -> Vec<f64> {
        if self.kind.is_bilinear() {
            let q = self.query_vector(h, r);
            (0..self.num_entities)
                .map(|e| dot(&q, self.entity(EntityId(e as u32))))
                .collect()
        } else {
            let hv = self.entity(h);
            let rv = self.relation(r);
            (0..self.num_entities)
                .map(|e| self.translational(hv, rv, self.entity(EntityId(e as u32))))
                .collect()
        }
    }

    /// Adds `coeff * ∂score(h, r, t)/∂θ` into `grad` (same layout as the parameters).
    pub fn accumulate_score_grad(&self, h: EntityId, r: RelationId, t: EntityId, coeff: f64, grad: &mut [f64]) {
        let de = self.entity_dim;
        let dr = self.relation_dim;
        let ro = self.rel_offset();
        let (hi, ri, ti) = (h.idx() * de, ro + r.idx() * dr, t.idx() * de);
        let hv = self.entity(h);
        let rv = self.relation(r);
        let tv = self.entity(t);
        match self.kind {
            KgeKind::TransE => {
                for k in 0..de {
                    let d = hv[k] + rv[k] - tv[k];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[hi + k] -= coeff * s;
                    grad[ri + k] -= coeff * s;
                    grad[ti + k] += coeff * s;
                }
            }
            KgeKind::RotatE => {
                for i in 0..de / 2 {
                    let (c, sn) = (rv[i].cos(), rv[i].sin());
                    let (hr, him) = (hv[2 * i], hv[2 * i + 1]);
                    let ur = hr * c - him * sn - tv[2 * i];
                    let ui = hr * sn + him * c - tv[2 * i + 1];
                    let m = (ur * ur + ui * ui).sqrt();
                    if m < 1e-12 {
                        continue;
                    }
                    // score = -m
                    let (gr, gi) = (-coeff * ur / m, -coeff * ui / m);
                    grad[hi + 2 * i] += gr * c + gi * sn;
                    grad[hi + 2 * i + 1] += -gr * sn + gi * c;
                    grad[ti + 2 * i] -= gr;
                    grad[ti + 2 * i + 1] -= gi;
                    grad[ri + i] += gr * (-hr * sn - him * c) + gi * (hr * c - him * sn);
                }
            }
            _ => {
                let q = self.query_vector(h, r);
                for k in 0..de {
                    grad[ti + k] += coeff * q[k];
                }
                let dq: Vec<f64> = tv.iter().map(|x| coeff * x).collect();
                self.accumulate_query_grad(h, r, &dq, grad);
            }
        }
    }

    /// Back-propagates `dq = ∂L/∂q(h, r)` into `grad` for a bilinear model.
    pub fn accumulate_query_grad(&self, h: EntityId, r: RelationId, dq: &[f64], grad: &mut [f64]) {
        let de = self.entity_dim;
        let dr = self.relation_dim;
        let ro = self.rel_offset();
        let (hi, ri) = (h.idx() * de, ro + r.idx() * dr);
        let hv = self.entity(h);
        let rv = self.relation(r);
        match self.kind {
            KgeKind::DistMult => {
                for k in 0..de {
                    grad[hi + k] += rv[k] * dq[k];
                    grad[ri + k] += hv[k] * dq[k];
                }
            }
            KgeKind::ComplEx => {
                for i in 0..de / 2 {
                    let (hr, him) = (hv[2 * i], hv[2 * i + 1]);
                    let (rr, rim) = (rv[2 * i], rv[2 * i + 1]);
                    let (qr, qi) = (dq[2 * i], dq[2 * i + 1]);
                    grad[hi + 2 * i] += rr * qr + rim * qi;
                    grad[hi + 2 * i + 1] += -rim * qr + rr * qi;
                    grad[ri + 2 * i] += hr * qr + him * qi;
                    grad[ri + 2 * i + 1] += -him * qr + hr * qi;
                }
            }
            KgeKind::TuckER => {
                let co = self.core_offset();
                // m[i][j] = Σ_k W_ijk dq_k
                for i in 0..de {
                    for j in 0..dr {
                        let base = (i * dr + j) * de;
                        let m = dot(&self.params[co + base..co + base + de], dq);
                        grad[hi + i] += rv[j] * m;
                        grad[ri + j] += hv[i] * m;
                        let c = hv[i] * rv[j];
                        if c != 0.0 {
                            crate::math::axpy(c, dq, &mut grad[co + base..co + base + de]);
                        }
                    }
                }
            }
            _ => panic!("query gradient is only defined for bilinear models"),
        }
    }

    /// Entities outside `filter`, by descending score; ties by ascending id.
    pub fn rank_all_tails(&self, h: EntityId, r: RelationId, filter: &[EntityId]) -> Vec<Scored> {
        let scores = self.score_all_tails(h, r);
        rank_scores(&scores, filter)
    }

    /// The first `min(n, available)` entries of [`rank_all_tails`](Self::rank_all_tails).
    pub fn retrieve_topn(&self, h: EntityId, r: RelationId, n: usize, filter: &[EntityId]) -> Vec<Scored> {
        let mut ranked = self.rank_all_tails(h, r, filter);
        ranked.truncate(n.max(1));
        ranked
    }
}

/// Sorts entity scores descending with ascending-id tie-breaks, skipping `filter`.
pub fn rank_scores(scores: &[f64], filter: &[EntityId]) -> Vec<Scored> {
    let mut mask = vec![false; scores.len()];
    for e in filter {
        if e.idx() < mask.len() {
            mask[e.idx()] = true;
        }
    }
    let mut out: Vec<Scored> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !mask[*i])
        .map(|(i, s)| Scored {
            entity: EntityId(i as u32),
            score: *s,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn transe_exact_translation_scores_zero() {
        let mut m = KgeModel::zeros(KgeKind::TransE, 2, 1, 2, 2);
        m.entity_mut(e(0)).copy_from_slice(&[1.0, 0.0]);
        m.entity_mut(e(1)).copy_from_slice(&[1.0, 1.0]);
        m.relation_mut(RelationId(0)).copy_from_slice(&[0.0, 1.0]);
        assert_eq!(m.score(e(0), RelationId(0), e(1)), 0.0);
        assert!(m.score(e(1), RelationId(0), e(0)) < 0.0);
    }

    #[test]
    fn distmult_is_symmetric() {
        let m = KgeModel::new(KgeKind::DistMult, 5, 2, 8, 8, 3).unwrap();
        for h in 0..5 {
            for t in 0..5 {
                let a = m.score(e(h), RelationId(1), e(t));
                let b = m.score(e(t), RelationId(1), e(h));
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_complex_dimension_rejected() {
        assert!(KgeModel::new(KgeKind::ComplEx, 3, 1, 5, 5, 0).is_err());
        assert!(KgeModel::new(KgeKind::RotatE, 3, 1, 7, 7, 0).is_err());
    }

    #[test]
    fn rotate_phases_start_in_range() {
        let m = KgeModel::new(KgeKind::RotatE, 4, 3, 6, 0, 1).unwrap();
        assert_eq!(m.relation_dim(), 3);
        for r in 0..3 {
            assert!(m.relation(RelationId(r)).iter().all(|p| (-PI..=PI).contains(p)));
        }
    }

    #[test]
    fn score_all_tails_matches_score_bitwise() {
        for kind in KgeKind::ALL {
            let m = KgeModel::new(kind, 7, 2, 6, 4, 11).unwrap();
            let all = m.score_all_tails(e(3), RelationId(1));
            for t in 0..7 {
                assert_eq!(all[t].to_bits(), m.score(e(3), RelationId(1), e(t as u32)).to_bits());
            }
        }
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        for kind in KgeKind::ALL {
            let m = KgeModel::new(kind, 4, 2, 6, 4, 5).unwrap();
            let (h, r, t) = (e(1), RelationId(1), e(2));
            let mut g = vec![0.0; m.params.len()];
            m.accumulate_score_grad(h, r, t, 1.0, &mut g);
            let step = 1e-6;
            for i in 0..m.params.len() {
                let mut p = m.clone();
                p.params[i] += step;
                let up = p.score(h, r, t);
                p.params[i] -= 2.0 * step;
                let down = p.score(h, r, t);
                let fd = (up - down) / (2.0 * step);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn filtered_ranking_lengths() {
        let m = KgeModel::new(KgeKind::DistMult, 6, 1, 4, 4, 2).unwrap();
        let r = RelationId(0);
        let keep_only = vec![e(0), e(1), e(2), e(4), e(5)];
        let ranked = m.rank_all_tails(e(0), r, &keep_only);
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].entity, e(3));
        assert_eq!(m.rank_all_tails(e(0), r, &[e(1)]).len(), 5);
        assert_eq!(m.retrieve_topn(e(0), r, 100, &[]).len(), 6);
        let a = m.retrieve_topn(e(0), r, 3, &[]);
        let b = m.retrieve_topn(e(0), r, 4, &[]);
        assert_eq!(&b[..3], &a[..]);
    }
}
