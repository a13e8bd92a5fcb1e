//! k-NN (KSG) mutual information over probe-derived projections.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::probe::{ProbeClassifier, RepresentationMatrix};
use crate::{par, seed};

/// Rows `v_i` of `PReLU(W1 Z + b1)`, one per probe hidden unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub rows: Vec<Vec<f64>>,
}

pub fn task_projections(probe: &ProbeClassifier, z: &RepresentationMatrix) -> Result<ProjectionMatrix> {
    let mut rows = vec![Vec::with_capacity(z.len()); probe.hidden];
    for col in &z.columns {
        let v = probe.project(col)?;
        for (row, x) in rows.iter_mut().zip(v) {
            row.push(x);
        }
    }
    Ok(ProjectionMatrix { rows })
}

/// Adds seeded uniform noise of width `1e-10 × range` to break exact ties.
fn jitter(v: &[f64], seed: u64) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut rng = seed::rng(seed);
    v.iter().map(|x| x + 1e-10 * range * rng.random_range(-0.5..0.5)).collect()
}

/// Distance from `sorted[pos]` to its k-th nearest neighbour within `sorted`.
fn kth_neighbor_distance(sorted: &[f64], pos: usize, k: usize) -> f64 {
    let x = sorted[pos];
    let (mut lo, mut hi) = (pos, pos);
    let mut dist = 0.0;
    for _ in 0..k {
        let left = (lo > 0).then(|| x - sorted[lo - 1]);
        let right = (hi + 1 < sorted.len()).then(|| sorted[hi + 1] - x);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => {
                lo -= 1;
                dist = l;
            }
            (Some(l), None) => {
                lo -= 1;
                dist = l;
            }
            (_, Some(r)) => {
                hi += 1;
                dist = r;
            }
            (None, None) => unreachable!("class has more than k members"),
        }
    }
    dist
}

/// Mixed continuous/discrete KSG estimate of `I(v; y)` in nats.
///
/// For each sample, `d` is the distance to its k-th nearest neighbour of the
/// same label and `m` the number of other samples (any label) within `d`;
/// the estimate is `ψ(N) − ⟨ψ(N_y)⟩ + ψ(k) − ⟨ψ(m)⟩`.
pub fn ksg_mi(v: &[f64], y: &[u8], k: usize, seed: u64) -> Result<f64> {
    let n = v.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if k == 0 || n <= k + 1 {
        return Err(Error::TooFewSamples { n, k });
    }
    let n1 = y.iter().filter(|&&l| l == 1).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass);
    }
    if n0 <= k || n1 <= k {
        return Err(Error::TooFewSamples { n: n0.min(n1), k });
    }
    let v = jitter(v, seed);
    let mut all = v.clone();
    all.sort_by(f64::total_cmp);
    let class_sorted: [Vec<f64>; 2] = [0u8, 1].map(|c| {
        let mut s: Vec<f64> = v.iter().zip(y).filter(|(_, l)| **l == c).map(|(x, _)| *x).collect();
        s.sort_by(f64::total_cmp);
        s
    });
    let mut sum_m = 0.0;
    let mut sum_ny = 0.0;
    for (x, &l) in v.iter().zip(y) {
        let cs = &class_sorted[l as usize];
        let pos = cs.partition_point(|a| a < x);
        let d = kth_neighbor_distance(cs, pos, k);
        // Compare differences, not `x ± d`, so the k-th neighbour itself
        // always falls inside the window.
        let lo = all.partition_point(|a| x - a > d);
        let hi = all.partition_point(|a| a - x <= d);
        let m = hi - lo - 1;
        sum_m += digamma(m as f64);
        sum_ny += digamma(cs.len() as f64);
    }
    let nf = n as f64;
    Ok(digamma(nf) - sum_ny / nf + digamma(k as f64) - sum_m / nf)
}

/// Continuous KSG estimator (first variant, max-norm) for two scalar
/// variables, by brute-force neighbour search.
pub fn ksg_mi_continuous(x: &[f64], y: &[f64], k: usize) -> Result<f64> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if k == 0 || n <= k + 1 {
        return Err(Error::TooFewSamples { n, k });
    }
    let terms = par::map_range(n, |i| {
        let mut dist: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (x[j] - x[i]).abs().max((y[j] - y[i]).abs()))
            .collect();
        let (_, eps, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = *eps;
        let nx = (0..n).filter(|&j| j != i && (x[j] - x[i]).abs() < eps).count();
        let ny = (0..n).filter(|&j| j != i && (y[j] - y[i]).abs() < eps).count();
        digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0)
    });
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok(digamma(k as f64) + digamma(n as f64) - mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmiReport {
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d_v: usize,
    /// Raw per-dimension estimates in nats.
    pub per_dim_mi: Vec<f64>,
    /// Mean of the per-dimension estimates clamped at 0.
    pub i_task: f64,
}

impl SmiReport {
    fn from_estimates(per_dim_mi: Vec<f64>, k: usize, n: usize) -> Self {
        let i_task = per_dim_mi.iter().map(|m| m.max(0.0)).sum::<f64>() / per_dim_mi.len().max(1) as f64;
        SmiReport {
            k,
            n,
            d_v: per_dim_mi.len(),
            per_dim_mi,
            i_task,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: Option<&Path>) -> Result<()> {
        crate::graph::write_file(json_path.as_ref(), &(self.to_json() + "\n"))?;
        if let Some(p) = csv_path {
            let mut s = String::from("dimension,mi\n");
            for (i, m) in self.per_dim_mi.iter().enumerate() {
                let _ = writeln!(s, "{i},{m}");
            }
            crate::graph::write_file(p, &s)?;
        }
        Ok(())
    }
}

fn smi_over_rows(rows: &[Vec<f64>], labels: &[u8], k: usize, seed: u64) -> Result<SmiReport> {
    let est = par::map_range(rows.len(), |i| ksg_mi(&rows[i], labels, k, seed::derive(seed, i as u64)));
    let est = est.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(SmiReport::from_estimates(est, k, labels.len()))
}

/// Mean KSG information between each probe projection and the labels.
pub fn task_smi(probe: &ProbeClassifier, z: &RepresentationMatrix, k: usize, seed: u64) -> Result<SmiReport> {
    let v = task_projections(probe, z)?;
    smi_over_rows(&v.rows, &z.labels, k, seed)
}

/// Same estimator along `directions` uniformly random unit vectors.
pub fn random_projection_smi(z: &RepresentationMatrix, directions: usize, k: usize, seed: u64) -> Result<SmiReport> {
    let mut rng = seed::rng(seed);
    let rows: Vec<Vec<f64>> = (0..directions)
        .map(|_| {
            let mut u: Vec<f64> = (0..z.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|x| *x /= norm);
            z.columns.iter().map(|c| crate::math::dot(&u, c)).collect()
        })
        .collect();
    smi_over_rows(&rows, &z.labels, k, seed::derive(seed, 1))
}

/// `i_task` under `shuffles` random permutations of the labels.
pub fn permutation_null(probe: &ProbeClassifier, z: &RepresentationMatrix, shuffles: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    let v = task_projections(probe, z)?;
    (0..shuffles)
        .map(|s| {
            let mut labels = z.labels.clone();
            labels.shuffle(&mut seed::rng2(seed, s as u64));
            Ok(smi_over_rows(&v.rows, &labels, k, seed::derive(seed, s as u64))?.i_task)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kth_neighbor_on_a_line() {
        let s = [0.0, 1.0, 3.0, 6.0];
        assert_eq!(kth_neighbor_distance(&s, 0, 1), 1.0);
        assert_eq!(kth_neighbor_distance(&s, 1, 2), 2.0);
        assert_eq!(kth_neighbor_distance(&s, 3, 3), 6.0);
    }

    #[test]
    fn disjoint_supports_give_log_two() {
        let mut rng = seed::rng(4);
        let n = 2000;
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let v: Vec<f64> = y.iter().map(|&l| rng.random_range(0.0..1.0) + 2.0 * l as f64).collect();
        let mi = ksg_mi(&v, &y, 3, 1).unwrap();
        assert!((mi - 2f64.ln()).abs() < 0.05, "{mi}");
    }

    #[test]
    fn preconditions() {
        assert!(matches!(ksg_mi(&[0.0, 1.0, 2.0, 3.0, 4.0], &[1; 5], 3, 0), Err(Error::SingleClass)));
        assert!(matches!(ksg_mi(&[0.0, 1.0, 2.0], &[0, 1, 0], 3, 0), Err(Error::TooFewSamples { .. })));
    }
}
