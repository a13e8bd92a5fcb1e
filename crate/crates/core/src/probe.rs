//! Hidden-state representations and the two-layer PReLU plausibility probe.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, LabeledTriple, Triple};
use crate::instance::render_statement;
use crate::kge::KgeModel;
use crate::optim::Optimizer;
use crate::policy::SequencePolicy;
use crate::{math, par, seed};

/// `N` samples of width `d` taken at one layer. Stored sample-major: each
/// entry of `columns` is one column of the `d × N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMatrix {
    pub d: usize,
    pub layer: usize,
    pub provider: String,
    pub keys: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl RepresentationMatrix {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Row `i` of the `d × N` matrix.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> RepresentationMatrix {
        RepresentationMatrix {
            d: self.d,
            layer: self.layer,
            provider: self.provider.clone(),
            keys: if self.keys.is_empty() { vec![] } else { idx.iter().map(|&i| self.keys[i].clone()).collect() },
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> RepresentationMatrix {
        RepresentationMatrix {
            labels,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("representation width must be positive".into()));
        }
        if self.labels.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                got: self.labels.len(),
            });
        }
        for c in &self.columns {
            if c.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: c.len(),
                });
            }
            if !math::all_finite(c) {
                return Err(Error::NonFinite("representation entry".into()));
            }
        }
        Ok(())
    }
}

/// Writes `N d l` followed by one line of `d` floats per sample, and the
/// labels one per line.
pub fn save_representations(m: &RepresentationMatrix, matrix_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let mut s = format!("{} {} {}\n", m.len(), m.d, m.layer);
    for c in &m.columns {
        let vals: Vec<String> = c.iter().map(|x| format!("{x}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    crate::graph::write_file(matrix_path.as_ref(), &s)?;
    let mut l = String::new();
    for y in &m.labels {
        let _ = writeln!(l, "{y}");
    }
    crate::graph::write_file(labels_path.as_ref(), &l)
}

pub fn load_representations(matrix_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RepresentationMatrix> {
    let mp = matrix_path.as_ref();
    let lp = labels_path.as_ref();
    let content = std::fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
    let perr = |path: &Path, line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| perr(mp, 1, "missing `N d l` header".into()))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| perr(mp, 1, format!("bad header value `{v}`"))))
        .collect::<Result<_>>()?;
    let [n, d, layer] = h[..] else {
        return Err(perr(mp, 1, "header must be `N d l`".into()));
    };
    let mut columns = Vec::with_capacity(n);
    for row in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| perr(mp, row + 2, format!("file ends before row {row} of {n}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| perr(mp, row + 2, format!("bad float `{v}`"))))
            .collect::<Result<_>>()?;
        if vals.len() != d {
            return Err(perr(mp, row + 2, format!("row {row} is short: {} values, expected {d}", vals.len())));
        }
        if !math::all_finite(&vals) {
            return Err(Error::NonFinite(format!("{}:{}", mp.display(), row + 2)));
        }
        columns.push(vals);
    }
    let lab = std::fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
    let labels: Vec<u8> = lab
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(perr(lp, i + 1, format!("label must be 0 or 1, got `{other}`"))),
        })
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let m = RepresentationMatrix {
        d,
        layer,
        provider: "file".into(),
        keys: vec![],
        columns,
        labels,
    };
    m.validate()?;
    Ok(m)
}

/// Source of per-layer hidden states for triples.
pub trait RepresentationProvider: Sync {
    fn id(&self) -> String;
    fn num_layers(&self) -> usize;
    fn width(&self) -> usize;
    /// State at `layer` (1-based) for the triple and its rendered prompt.
    fn representation(&self, triple: &Triple, prompt: &str, layer: usize) -> Result<Vec<f64>>;
}

/// Hidden states of a trained policy; the KGE score feeds the option
/// encoder when given.
pub struct PolicyProvider<'a> {
    pub policy: &'a SequencePolicy,
    pub kge: Option<&'a KgeModel>,
}

impl RepresentationProvider for PolicyProvider<'_> {
    fn id(&self) -> String {
        "policy".into()
    }
    fn num_layers(&self) -> usize {
        self.policy.config().layers
    }
    fn width(&self) -> usize {
        self.policy.config().width
    }
    fn representation(&self, t: &Triple, _prompt: &str, layer: usize) -> Result<Vec<f64>> {
        let score = self.kge.map_or(0.0, |k| k.score(t.h, t.r, t.t));
        self.policy.triple_state(t.h, t.r, t.t, score, layer)
    }
}

/// Returns the same vector for every triple.
pub struct ConstantProvider {
    pub value: Vec<f64>,
    pub layers: usize,
}

impl RepresentationProvider for ConstantProvider {
    fn id(&self) -> String {
        "constant".into()
    }
    fn num_layers(&self) -> usize {
        self.layers
    }
    fn width(&self) -> usize {
        self.value.len()
    }
    fn representation(&self, _: &Triple, _: &str, layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.layers {
            return Err(Error::LayerOutOfRange { layer, max: self.layers });
        }
        Ok(self.value.clone())
    }
}

/// Gaussian noise at every layer, plus a label-dependent mean shift along
/// a fixed direction at `signal_layer` only.
pub struct SyntheticLayeredProvider {
    pub layers: usize,
    pub width: usize,
    pub signal_layer: usize,
    pub signal: f64,
    pub labels: std::collections::HashMap<Triple, u8>,
    pub seed: u64,
}

impl SyntheticLayeredProvider {
    pub fn new(layers: usize, width: usize, signal_layer: usize, labeled: &[LabeledTriple], seed: u64) -> Self {
        SyntheticLayeredProvider {
            layers,
            width,
            signal_layer,
            signal: 1.5,
            labels: labeled.iter().map(|l| (l.triple, l.label)).collect(),
            seed,
        }
    }
}

impl RepresentationProvider for SyntheticLayeredProvider {
    fn id(&self) -> String {
        format!("synthetic-layered(signal at {})", self.signal_layer)
    }
    fn num_layers(&self) -> usize {
        self.layers
    }
    fn width(&self) -> usize {
        self.width
    }
    fn representation(&self, t: &Triple, _: &str, layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.layers {
            return Err(Error::LayerOutOfRange { layer, max: self.layers });
        }
        let key = ((t.h.0 as u64) << 42) ^ ((t.r.0 as u64) << 21) ^ t.t.0 as u64;
        let mut rng = seed::rng2(seed::derive(self.seed, key), layer as u64);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut z: Vec<f64> = (0..self.width).map(|_| normal.sample(&mut rng)).collect();
        if layer == self.signal_layer {
            let y = *self.labels.get(t).ok_or_else(|| Error::Provider {
                key: t.to_string(),
                msg: "triple has no label".into(),
            })?;
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let norm = (self.width as f64).sqrt();
            for v in z.iter_mut() {
                *v += sign * self.signal / norm;
            }
        }
        Ok(z)
    }
}

/// Raw key of a triple, tab separated.
pub fn triple_key(graph: &KnowledgeGraph, t: &Triple) -> String {
    format!("{}\t{}\t{}", graph.entities().key(t.h.0), graph.relations().key(t.r.0), graph.entities().key(t.t.0))
}

/// Renders each triple with `template` and collects its layer-`layer`
/// state, preserving input order.
pub fn extract_representations<P: RepresentationProvider + ?Sized>(
    provider: &P,
    graph: &KnowledgeGraph,
    labeled: &[LabeledTriple],
    layer: usize,
    template: &str,
) -> Result<RepresentationMatrix> {
    if layer == 0 || layer > provider.num_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            max: provider.num_layers(),
        });
    }
    let columns = par::try_map(labeled, |lt| {
        let wrap = |e: Error| Error::Provider {
            key: triple_key(graph, &lt.triple),
            msg: e.to_string(),
        };
        let prompt = render_statement(graph, &lt.triple, template).map_err(wrap)?;
        provider.representation(&lt.triple, &prompt, layer).map_err(wrap)
    })?;
    let m = RepresentationMatrix {
        d: provider.width(),
        layer,
        provider: provider.id(),
        keys: labeled.iter().map(|lt| triple_key(graph, &lt.triple)).collect(),
        columns,
        labels: labeled.iter().map(|lt| lt.label).collect(),
    };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Probe

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    pub d: usize,
    pub hidden: usize,
    /// `hidden × d`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub slope: f64,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub threshold: f64,
}

pub fn prelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

impl ProbeClassifier {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        ProbeClassifier {
            d,
            hidden,
            w1: vec![0.0; hidden * d],
            b1: vec![0.0; hidden],
            slope: 0.25,
            w2: vec![0.0; hidden],
            b2: 0.0,
            threshold: 0.5,
        }
    }

    pub fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(d, hidden);
        let mut rng = seed::rng(seed);
        let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive std");
        p.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("positive std");
        p.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        p
    }

    /// `PReLU(W1 z + b1)`
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: z.len(),
            });
        }
        let mut u = vec![0.0; self.hidden];
        math::affine(&self.w1, &self.b1, z, &mut u);
        Ok(u.into_iter().map(|x| prelu(x, self.slope)).collect())
    }

    pub fn logit(&self, z: &[f64]) -> Result<f64> {
        Ok(math::dot(&self.w2, &self.project(z)?) + self.b2)
    }

    /// Parameters in the order `[W1 | b1 | slope | w2 | b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.push(self.slope);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let (hd, h) = (self.hidden * self.d, self.hidden);
        self.w1.copy_from_slice(&v[..hd]);
        self.b1.copy_from_slice(&v[hd..hd + h]);
        self.slope = v[hd + h];
        self.w2.copy_from_slice(&v[hd + h + 1..hd + 2 * h + 1]);
        self.b2 = v[hd + 2 * h + 1];
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.d + 2 * self.hidden + 2
    }

    /// Mean binary cross-entropy over `(z, y)` pairs and its gradient in the
    /// order `[W1 | b1 | slope | w2 | b2]`.
    pub fn bce_grad(&self, zs: &[&[f64]], ys: &[u8]) -> (f64, Vec<f64>) {
        let (d, h) = (self.d, self.hidden);
        let hd = h * d;
        let n = zs.len().max(1) as f64;
        let mut g = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        let mut u = vec![0.0; h];
        for (z, &y) in zs.iter().zip(ys) {
            math::affine(&self.w1, &self.b1, z, &mut u);
            let a: Vec<f64> = u.iter().map(|&x| prelu(x, self.slope)).collect();
            let s = math::dot(&self.w2, &a) + self.b2;
            let y = y as f64;
            loss += math::softplus(s) - y * s;
            let ds = (math::sigmoid(s) - y) / n;
            for j in 0..h {
                g[hd + h + 1 + j] += ds * a[j];
                let da = ds * self.w2[j];
                let du = if u[j] >= 0.0 {
                    da
                } else {
                    g[hd + h] += da * u[j];
                    da * self.slope
                };
                g[hd + j] += du;
                math::axpy(du, z, &mut g[j * d..(j + 1) * d]);
            }
            g[hd + 2 * h + 1] += ds;
        }
        (loss / n, g)
    }
}

/// `σ(w2 · PReLU(W1 z + b1) + b2)`
pub fn probe_score(probe: &ProbeClassifier, z: &[f64]) -> Result<f64> {
    Ok(math::sigmoid(probe.logit(z)?))
}

pub fn classify(probe: &ProbeClassifier, z: &[f64], threshold: f64) -> Result<u8> {
    Ok(u8::from(probe_score(probe, z)? >= threshold))
}

/// Threshold maximizing accuracy of `score >= threshold` on the given
/// pairs. Candidates are 0.5 and midpoints between consecutive distinct
/// scores; ties go to the candidate closest to 0.5.
pub fn tune_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let acc = |th: f64| {
        let right = scores.iter().zip(labels).filter(|(s, y)| u8::from(**s >= th) == **y).count();
        right as f64 / scores.len().max(1) as f64
    };
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cands = vec![0.5];
    cands.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let (Some(lo), Some(hi)) = (sorted.first(), sorted.last()) {
        cands.push(*lo);
        cands.push(hi + 1e-12);
    }
    let mut best: (f64, f64) = (0.5, acc(0.5));
    for th in cands {
        let a = acc(th);
        if a > best.1 || (a == best.1 && (th - 0.5).abs() < (best.0 - 0.5).abs()) {
            best = (th, a);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction held out for model selection and threshold tuning when no
    /// explicit validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            epochs: 100,
            lr: 0.01,
            batch_size: 64,
            val_fraction: 0.2,
            seed: 1,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub threshold: f64,
    /// Validation accuracy at 0.5 after each epoch.
    pub val_history: Vec<f64>,
}

fn accuracy_at(probe: &ProbeClassifier, m: &RepresentationMatrix, th: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let right = m
        .columns
        .iter()
        .zip(&m.labels)
        .filter(|(z, y)| probe_score(probe, z).map(|s| u8::from(s >= th)).ok() == Some(**y))
        .count();
    right as f64 / m.len() as f64
}

fn check_two_classes(labels: &[u8]) -> Result<()> {
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Splits off a validation part of `m` with [`ProbeConfig::val_fraction`]
/// and trains on the rest.
pub fn train_probe(m: &RepresentationMatrix, cfg: &ProbeConfig) -> Result<(ProbeClassifier, ProbeReport)> {
    check_two_classes(&m.labels)?;
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.shuffle(&mut seed::rng2(cfg.seed, 0xd1));
    let n_val = ((m.len() as f64) * cfg.val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val.min(m.len().saturating_sub(2)));
    fit_probe(&m.subset(train), &m.subset(val), cfg)
}

/// Trains with mini-batch Adam on `train`, keeps the epoch with the best
/// validation accuracy and tunes the decision threshold on `valid`. With
/// an empty `valid`, `train` is used for both.
pub fn fit_probe(
    train: &RepresentationMatrix,
    valid: &RepresentationMatrix,
    cfg: &ProbeConfig,
) -> Result<(ProbeClassifier, ProbeReport)> {
    check_two_classes(&train.labels)?;
    train.validate()?;
    let valid = if valid.is_empty() { train } else { valid };
    let mut probe = ProbeClassifier::new(train.d, cfg.hidden, seed::derive(cfg.seed, 1));
    let mut flat = probe.to_flat();
    let mut opt = Optimizer::adam(cfg.lr, flat.len());
    let mut rng = seed::rng2(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (accuracy_at(&probe, valid, 0.5), probe.clone(), 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let slope_at = train.d * cfg.hidden + cfg.hidden;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let chunks: Vec<&[usize]> = batch.chunks(32).collect();
            let len = flat.len();
            let p = &probe;
            let total = batch.len() as f64;
            let g = par::sum_vectors(chunks.len(), len, cfg.deterministic, |c| {
                let zs: Vec<&[f64]> = chunks[c].iter().map(|&i| train.columns[i].as_slice()).collect();
                let ys: Vec<u8> = chunks[c].iter().map(|&i| train.labels[i]).collect();
                let (_, mut g) = p.bce_grad(&zs, &ys);
                let w = zs.len() as f64 / total;
                g.iter_mut().for_each(|x| *x *= w);
                g
            });
            opt.step(&mut flat, &g);
            flat[slope_at] = flat[slope_at].max(1e-4);
            probe.set_flat(&flat);
        }
        if !math::all_finite(&flat) {
            return Err(Error::Diverged { epoch });
        }
        let acc = accuracy_at(&probe, valid, 0.5);
        history.push(acc);
        if acc > best.0 {
            best = (acc, probe.clone(), epoch);
        }
    }
    let (_, mut probe, best_epoch) = best;
    let scores: Vec<f64> = valid.columns.iter().map(|z| probe_score(&probe, z)).collect::<Result<_>>()?;
    let (threshold, val_accuracy) = tune_threshold(&scores, &valid.labels);
    probe.threshold = threshold;
    let report = ProbeReport {
        train_accuracy: accuracy_at(&probe, train, threshold),
        val_accuracy,
        best_epoch,
        threshold,
        val_history: history,
    };
    Ok((probe, report))
}

const MAGIC: &str = "kgsel-probe 1";

pub fn save_probe(p: &ProbeClassifier, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "d {} hidden {}", p.d, p.hidden);
    let _ = writeln!(s, "threshold {}", p.threshold);
    let _ = writeln!(s, "slope {}", p.slope);
    let _ = writeln!(s, "b2 {}", p.b2);
    let block = |s: &mut String, name: &str, v: &[f64], width: usize| {
        let _ = writeln!(s, "{name}");
        for row in v.chunks(width.max(1)) {
            let vals: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
    };
    block(&mut s, "w1", &p.w1, p.d);
    block(&mut s, "b1", &p.b1, p.hidden);
    block(&mut s, "w2", &p.w2, p.hidden);
    crate::graph::write_file(path.as_ref(), &s)
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<ProbeClassifier> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut lines = content.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing header"));
    }
    let dims: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let (d, hidden) = match dims[..] {
        ["d", d, "hidden", h] => (
            d.parse::<usize>().map_err(|_| bad("bad d"))?,
            h.parse::<usize>().map_err(|_| bad("bad hidden"))?,
        ),
        _ => return Err(bad("expected `d <d> hidden <d_v>`")),
    };
    let mut scalar = |name: &str| -> Result<f64> {
        let line = lines.next().unwrap_or("");
        line.strip_prefix(name)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(&format!("expected `{name} <value>`")))
    };
    let mut p = ProbeClassifier::zeros(d, hidden);
    p.threshold = scalar("threshold")?;
    p.slope = scalar("slope")?;
    p.b2 = scalar("b2")?;
    let mut read = |name: &str, n: usize| -> Result<Vec<f64>> {
        if lines.next() != Some(name) {
            return Err(bad(&format!("missing block `{name}`")));
        }
        let mut v = Vec::with_capacity(n);
        while v.len() < n {
            let line = lines.next().ok_or_else(|| bad(&format!("block `{name}` truncated")))?;
            for x in line.split_whitespace() {
                v.push(x.parse::<f64>().map_err(|_| bad(&format!("bad float `{x}`")))?);
            }
        }
        if v.len() != n {
            return Err(bad(&format!("block `{name}` has {} values, expected {n}", v.len())));
        }
        Ok(v)
    };
    p.w1 = read("w1", hidden * d)?;
    p.b1 = read("b1", hidden)?;
    p.w2 = read("w2", hidden)?;
    if !math::all_finite(&p.to_flat()) {
        return Err(Error::NonFinite(format!("{}: probe parameters", path.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, d: usize, seed: u64) -> RepresentationMatrix {
        let mut rng = seed::rng(seed);
        let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let columns: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = columns.iter().map(|z| u8::from(math::dot(z, &dir) > 0.0)).collect();
        RepresentationMatrix {
            d,
            layer: 1,
            provider: "test".into(),
            keys: vec![],
            columns,
            labels,
        }
    }

    #[test]
    fn zero_probe_scores_bias() {
        let mut p = ProbeClassifier::zeros(3, 4);
        p.b2 = 0.7;
        assert!((probe_score(&p, &[1.0, -2.0, 3.0]).unwrap() - math::sigmoid(0.7)).abs() < 1e-15);
        assert!(probe_score(&p, &[1.0]).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let m = separable(12, 5, 3);
        let mut p = ProbeClassifier::new(5, 4, 9);
        p.b1 = vec![0.1, -0.2, 0.3, -0.05];
        let zs: Vec<&[f64]> = m.columns.iter().map(|c| c.as_slice()).collect();
        let (_, g) = p.bce_grad(&zs, &m.labels);
        let flat = p.to_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut q = p.clone();
            let mut f = flat.clone();
            f[i] += h;
            q.set_flat(&f);
            let up = q.bce_grad(&zs, &m.labels).0;
            f[i] -= 2.0 * h;
            q.set_flat(&f);
            let down = q.bce_grad(&zs, &m.labels).0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn learns_separable_data() {
        let m = separable(1000, 6, 1);
        let cfg = ProbeConfig {
            epochs: 60,
            ..Default::default()
        };
        let (_, rep) = train_probe(&m, &cfg).unwrap();
        assert!(rep.val_accuracy >= 0.97, "{rep:?}");
    }

    #[test]
    fn single_class_is_rejected() {
        let mut m = separable(20, 3, 1);
        m.labels = vec![1; 20];
        assert!(matches!(train_probe(&m, &ProbeConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn files_round_trip() {
        let m = separable(7, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("z.txt"), dir.path().join("y.txt"));
        save_representations(&m, &a, &b).unwrap();
        let back = load_representations(&a, &b).unwrap();
        assert_eq!(back.columns, m.columns);
        assert_eq!(back.labels, m.labels);
        let p = ProbeClassifier::new(3, 5, 1);
        let c = dir.path().join("p.ckpt");
        save_probe(&p, &c).unwrap();
        assert_eq!(load_probe(&c).unwrap(), p);
    }
}
