//! A small autoregressive selection policy over answer-line tokens.
//!
//! Each candidate option is encoded from its entity, the query relation and
//! head, the option slot and (optionally) its standardized KGE score. The
//! options are pooled into a context vector through slot-specific maps, and
//! each decoding step feeds the context plus embeddings of the previous and
//! already-emitted tokens through a tanh MLP with residual layers. Label
//! logits get an extra bilinear term between the option encoding and the
//! final hidden state, so label choice can look at its own option directly.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, RelationId};
use crate::instance::{label_at, DiscriminativeInstance, Label};
use crate::math;
use crate::optim::{Optimizer, OptimizerKind};
use crate::{par, seed};

/// Token ids: labels `0..k`, then comma, answer marker and end of sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub k: usize,
}

impl TokenVocab {
    pub fn size(self) -> usize {
        self.k + 3
    }
    pub fn comma(self) -> usize {
        self.k
    }
    pub fn answer(self) -> usize {
        self.k + 1
    }
    pub fn eos(self) -> usize {
        self.k + 2
    }
    /// Row of the previous-token table used before the first token.
    pub fn bos(self) -> usize {
        self.k + 3
    }

    pub fn label(self, label: Label) -> Option<usize> {
        crate::instance::label_index(label, self.k)
    }

    /// `[ANSWER, l1, COMMA, l2, ..., EOS]` for labels in ascending order.
    pub fn encode_answer<'a>(self, labels: impl IntoIterator<Item = &'a Label>) -> Result<Vec<usize>> {
        let mut out = vec![self.answer()];
        for (i, l) in labels.into_iter().enumerate() {
            if i > 0 {
                out.push(self.comma());
            }
            out.push(self.label(*l).ok_or_else(|| Error::UnknownToken(l.to_string()))?);
        }
        out.push(self.eos());
        Ok(out)
    }

    pub fn render(self, tokens: &[usize]) -> String {
        let mut s = String::new();
        for &t in tokens {
            if t < self.k {
                s.push(label_at(t));
            } else if t == self.comma() {
                s.push_str(", ");
            } else if t == self.answer() {
                s.push_str("Answer: ");
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Option slots; instances may use fewer.
    pub k: usize,
    pub layers: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub use_kge_score: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 4,
            layers: 4,
            width: 64,
            embed_dim: 32,
            use_kge_score: true,
        }
    }
}

impl PolicyConfig {
    /// The interior layer used for probing by default.
    pub fn default_probe_layer(&self) -> usize {
        self.layers.div_ceil(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    entity: Range<usize>,
    relation: Range<usize>,
    opt_w: Range<usize>,
    opt_b: Range<usize>,
    slot: Range<usize>,
    pool: Range<usize>,
    ctx_b: Range<usize>,
    prev_tok: Range<usize>,
    sel_tok: Range<usize>,
    layers: Vec<(Range<usize>, Range<usize>)>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    pointer: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig, n_e: usize, n_r: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, e, k, v) = (cfg.width, cfg.embed_dim, cfg.k, cfg.k + 3);
        let f = 3 * e + 1;
        let entity = take(n_e * e);
        let relation = take(n_r * e);
        let opt_w = take(d * f);
        let opt_b = take(d);
        let slot = take(k * d);
        let pool = take(k * d * d);
        let ctx_b = take(d);
        let prev_tok = take((v + 1) * d);
        let sel_tok = take(v * d);
        let layers = (0..cfg.layers).map(|_| (take(d * d), take(d))).collect();
        let out_w = take(v * d);
        let out_b = take(v);
        let pointer = take(d * d);
        Layout {
            entity,
            relation,
            opt_w,
            opt_b,
            slot,
            pool,
            ctx_b,
            prev_tok,
            sel_tok,
            layers,
            out_w,
            out_b,
            pointer,
            total: at,
        }
    }

    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let mut v = vec![
            ("entity".to_string(), self.entity.clone()),
            ("relation".into(), self.relation.clone()),
            ("option_weight".into(), self.opt_w.clone()),
            ("option_bias".into(), self.opt_b.clone()),
            ("slot".into(), self.slot.clone()),
            ("pool".into(), self.pool.clone()),
            ("context_bias".into(), self.ctx_b.clone()),
            ("previous_token".into(), self.prev_tok.clone()),
            ("selected_token".into(), self.sel_tok.clone()),
        ];
        for (i, (w, b)) in self.layers.iter().enumerate() {
            v.push((format!("layer{}_weight", i + 1), w.clone()));
            v.push((format!("layer{}_bias", i + 1), b.clone()));
        }
        v.push(("output_weight".into(), self.out_w.clone()));
        v.push(("output_bias".into(), self.out_b.clone()));
        v.push(("pointer".into(), self.pointer.clone()));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePolicy {
    cfg: PolicyConfig,
    num_entities: usize,
    num_relations: usize,
    layout: Layout,
    pub params: Vec<f64>,
    score_shift: f64,
    score_scale: f64,
}

/// Per-instance encoder state shared by all decoding positions.
#[derive(Clone, Debug)]
pub struct Context {
    h: EntityId,
    r: RelationId,
    entities: Vec<EntityId>,
    feats: Vec<Vec<f64>>,
    opts: Vec<Vec<f64>>,
    ctx: Vec<f64>,
}

/// Activations of one decoding position.
#[derive(Clone, Debug)]
pub struct Step {
    pub prev: usize,
    x: Vec<f64>,
    /// Layer outputs `h_1..h_L`.
    pub hidden: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
}

/// Teacher-forced pass over a token sequence, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    pub tokens: Vec<usize>,
    pub context: Context,
    pub steps: Vec<Step>,
}

impl Trace {
    /// Log-probability of each emitted token.
    pub fn token_logprobs(&self) -> Vec<f64> {
        self.steps.iter().zip(&self.tokens).map(|(s, &t)| s.log_probs[t]).collect()
    }

    pub fn sequence_logprob(&self) -> f64 {
        self.token_logprobs().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    /// `hidden[l][t]` is the output of layer `l + 1` at position `t`.
    pub hidden: Vec<Vec<Vec<f64>>>,
}

impl PolicyOutput {
    fn from_trace(trace: Trace) -> Self {
        let logprobs = trace.token_logprobs();
        let layers = trace.steps.first().map_or(0, |s| s.hidden.len());
        let hidden = (0..layers)
            .map(|l| trace.steps.iter().map(|s| s.hidden[l].clone()).collect())
            .collect();
        PolicyOutput {
            tokens: trace.tokens,
            logprobs,
            hidden,
        }
    }
}

impl SequencePolicy {
    pub fn new(cfg: PolicyConfig, num_entities: usize, num_relations: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg, num_entities, num_relations)?;
        let mut rng = seed::rng(seed);
        let (d, e, k) = (p.cfg.width, p.cfg.embed_dim, p.cfg.k);
        let mut fill = |params: &mut [f64], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            for x in params {
                *x = n.sample(&mut rng);
            }
        };
        let l = p.layout.clone();
        fill(&mut p.params[l.entity], 0.3);
        fill(&mut p.params[l.relation], 0.3);
        fill(&mut p.params[l.opt_w], 1.0 / ((3 * e + 1) as f64).sqrt());
        fill(&mut p.params[l.slot], 0.3);
        fill(&mut p.params[l.pool], 1.0 / ((k * d) as f64).sqrt());
        fill(&mut p.params[l.prev_tok], 0.3);
        fill(&mut p.params[l.sel_tok], 0.3);
        for (w, _) in &l.layers {
            fill(&mut p.params[w.clone()], 1.0 / (d as f64).sqrt());
        }
        fill(&mut p.params[l.out_w], 1.0 / (d as f64).sqrt());
        fill(&mut p.params[l.pointer], 0.5 / (d as f64).sqrt());
        Ok(p)
    }

    pub fn zeros(cfg: PolicyConfig, num_entities: usize, num_relations: usize) -> Result<Self> {
        if cfg.layers < 2 {
            return Err(Error::InvalidArgument(format!("policy needs at least 2 layers, got {}", cfg.layers)));
        }
        if cfg.width == 0 || cfg.embed_dim == 0 || !(1..=26).contains(&cfg.k) {
            return Err(Error::InvalidArgument("policy width, embedding size and K must be positive (K <= 26)".into()));
        }
        let layout = Layout::new(&cfg, num_entities, num_relations);
        Ok(SequencePolicy {
            params: vec![0.0; layout.total],
            cfg,
            num_entities,
            num_relations,
            layout,
            score_shift: 0.0,
            score_scale: 1.0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> TokenVocab {
        TokenVocab { k: self.cfg.k }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn score_normalization(&self) -> (f64, f64) {
        (self.score_shift, self.score_scale)
    }

    pub fn set_score_normalization(&mut self, shift: f64, scale: f64) {
        self.score_shift = shift;
        self.score_scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    }

    /// Standardizes the KGE score feature with the mean and standard
    /// deviation of all option scores in `instances`.
    pub fn fit_score_normalization(&mut self, instances: &[DiscriminativeInstance]) {
        let scores: Vec<f64> = instances.iter().flat_map(|i| i.options.iter().map(|o| o.kge_score)).collect();
        if scores.is_empty() {
            return;
        }
        let m = math::mean(&scores);
        let var = scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / scores.len() as f64;
        self.set_score_normalization(m, var.sqrt());
    }

    /// Encodes the query and options. `options` holds (entity, kge score)
    /// per occupied slot.
    pub fn encode(&self, h: EntityId, r: RelationId, options: &[(EntityId, f64)]) -> Result<Context> {
        let (d, e) = (self.cfg.width, self.cfg.embed_dim);
        if options.len() > self.cfg.k {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.k,
                got: options.len(),
            });
        }
        if h.idx() >= self.num_entities || r.idx() >= self.num_relations {
            return Err(Error::InvalidArgument(format!("query ({}, {}) outside the policy vocabulary", h.0, r.0)));
        }
        let p = &self.params;
        let l = &self.layout;
        let ent = |x: EntityId| &p[l.entity.start + x.idx() * e..l.entity.start + (x.idx() + 1) * e];
        let rel = &p[l.relation.start + r.idx() * e..l.relation.start + (r.idx() + 1) * e];
        let mut feats = Vec::with_capacity(options.len());
        let mut opts = Vec::with_capacity(options.len());
        let mut ctx = p[l.ctx_b.clone()].to_vec();
        for (j, &(c, score)) in options.iter().enumerate() {
            if c.idx() >= self.num_entities {
                return Err(Error::InvalidArgument(format!("entity {} outside the policy vocabulary", c.0)));
            }
            let mut f = Vec::with_capacity(3 * e + 1);
            f.extend_from_slice(ent(c));
            f.extend_from_slice(rel);
            f.extend_from_slice(ent(h));
            f.push(if self.cfg.use_kge_score {
                (score - self.score_shift) / self.score_scale
            } else {
                0.0
            });
            let mut o = vec![0.0; d];
            math::affine(&p[l.opt_w.clone()], &p[l.opt_b.clone()], &f, &mut o);
            math::axpy(1.0, &p[l.slot.start + j * d..l.slot.start + (j + 1) * d], &mut o);
            o.iter_mut().for_each(|v| *v = v.tanh());
            let m = &p[l.pool.start + j * d * d..l.pool.start + (j + 1) * d * d];
            let mut mo = vec![0.0; d];
            math::matvec(m, &o, &mut mo);
            math::axpy(1.0, &mo, &mut ctx);
            feats.push(f);
            opts.push(o);
        }
        Ok(Context {
            h,
            r,
            entities: options.iter().map(|o| o.0).collect(),
            feats,
            opts,
            ctx,
        })
    }

    pub fn encode_instance(&self, inst: &DiscriminativeInstance) -> Result<Context> {
        let opts: Vec<(EntityId, f64)> = inst.options.iter().map(|o| (o.entity, o.kge_score)).collect();
        self.encode(inst.h, inst.r, &opts)
    }

    /// One decoding position given the previous token and the sum of the
    /// selected-token embeddings so far.
    fn step(&self, c: &Context, prev: usize, sel_sum: &[f64]) -> Step {
        let d = self.cfg.width;
        let p = &self.params;
        let l = &self.layout;
        let mut x = c.ctx.clone();
        math::axpy(1.0, &p[l.prev_tok.start + prev * d..l.prev_tok.start + (prev + 1) * d], &mut x);
        math::axpy(1.0, sel_sum, &mut x);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.layers);
        for (i, (w, b)) in l.layers.iter().enumerate() {
            let input = if i == 0 { &x } else { &hidden[i - 1] };
            let mut z = vec![0.0; d];
            math::affine(&p[w.clone()], &p[b.clone()], input, &mut z);
            if i == 0 {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                for (zi, hi) in z.iter_mut().zip(input) {
                    *zi = hi + zi.tanh();
                }
            }
            hidden.push(z);
        }
        let top = hidden.last().expect("at least two layers");
        let v = self.vocab().size();
        let mut logits = vec![0.0; v];
        math::affine(&p[l.out_w.clone()], &p[l.out_b.clone()], top, &mut logits);
        let mut uh = vec![0.0; d];
        math::matvec(&p[l.pointer.clone()], top, &mut uh);
        for (j, o) in c.opts.iter().enumerate() {
            logits[j] += math::dot(o, &uh);
        }
        Step {
            prev,
            x,
            hidden,
            log_probs: math::log_softmax(&logits),
        }
    }

    fn sel_row(&self, t: usize) -> &[f64] {
        let d = self.cfg.width;
        let s = self.layout.sel_tok.start + t * d;
        &self.params[s..s + d]
    }

    /// Teacher-forced pass that keeps every activation.
    pub fn trace(&self, inst: &DiscriminativeInstance, tokens: &[usize]) -> Result<Trace> {
        let context = self.encode_instance(inst)?;
        self.trace_context(context, tokens)
    }

    pub fn trace_context(&self, context: Context, tokens: &[usize]) -> Result<Trace> {
        let v = self.vocab();
        if let Some(t) = tokens.iter().find(|&&t| t >= v.size()) {
            return Err(Error::UnknownToken(t.to_string()));
        }
        let mut sel = vec![0.0; self.cfg.width];
        let mut prev = v.bos();
        let mut steps = Vec::with_capacity(tokens.len());
        for &t in tokens {
            steps.push(self.step(&context, prev, &sel));
            math::axpy(1.0, self.sel_row(t), &mut sel);
            prev = t;
        }
        Ok(Trace {
            tokens: tokens.to_vec(),
            context,
            steps,
        })
    }

    pub fn forward_teacher(&self, inst: &DiscriminativeInstance, tokens: &[usize]) -> Result<PolicyOutput> {
        Ok(PolicyOutput::from_trace(self.trace(inst, tokens)?))
    }

    pub fn sequence_logprob(&self, inst: &DiscriminativeInstance, tokens: &[usize]) -> Result<f64> {
        Ok(self.trace(inst, tokens)?.sequence_logprob())
    }

    fn decode(&self, inst: &DiscriminativeInstance, max_len: usize, mut pick: impl FnMut(&[f64]) -> usize) -> Result<PolicyOutput> {
        let v = self.vocab();
        let context = self.encode_instance(inst)?;
        let mut sel = vec![0.0; self.cfg.width];
        let mut prev = v.bos();
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        while tokens.len() < max_len {
            let step = self.step(&context, prev, &sel);
            let t = pick(&step.log_probs);
            steps.push(step);
            tokens.push(t);
            if t == v.eos() {
                break;
            }
            math::axpy(1.0, self.sel_row(t), &mut sel);
            prev = t;
        }
        Ok(PolicyOutput::from_trace(Trace { tokens, context, steps }))
    }

    /// Longest well-formed answer: marker, K labels, K-1 commas, end.
    pub fn default_max_len(&self) -> usize {
        2 * self.cfg.k + 1
    }

    pub fn greedy(&self, inst: &DiscriminativeInstance, max_len: usize) -> Result<PolicyOutput> {
        self.decode(inst, max_len, math::argmax)
    }

    /// Ancestral sampling from `softmax(logits / temperature)`. The returned
    /// log-probabilities are those of the untempered policy.
    pub fn sample(&self, inst: &DiscriminativeInstance, temperature: f64, seed: u64, max_len: usize) -> Result<PolicyOutput> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        let mut rng = seed::rng(seed);
        self.decode(inst, max_len, |lp| {
            let scaled: Vec<f64> = lp.iter().map(|x| x / temperature).collect();
            let probs = math::softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // Rounding left `acc` just below 1: take the last positive entry.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        })
    }

    /// Answer text of the greedy decode.
    pub fn answer_text(&self, inst: &DiscriminativeInstance) -> Result<String> {
        let out = self.greedy(inst, self.default_max_len())?;
        Ok(self.vocab().render(&out.tokens))
    }

    /// Layer-`layer` state at the position that follows the answer marker,
    /// i.e. where the first label is chosen.
    pub fn hidden_state(&self, inst: &DiscriminativeInstance, layer: usize) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        let context = self.encode_instance(inst)?;
        Ok(self.prompt_state(&context, layer))
    }

    /// Same as [`hidden_state`](Self::hidden_state) for a lone triple: the
    /// tail fills the first option slot and the others stay empty.
    pub fn triple_state(&self, h: EntityId, r: RelationId, t: EntityId, kge_score: f64, layer: usize) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        let context = self.encode(h, r, &[(t, kge_score)])?;
        Ok(self.prompt_state(&context, layer))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.cfg.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.cfg.layers,
            });
        }
        Ok(())
    }

    fn prompt_state(&self, context: &Context, layer: usize) -> Vec<f64> {
        let v = self.vocab();
        let sel = self.sel_row(v.answer()).to_vec();
        let step = self.step(context, v.answer(), &sel);
        step.hidden[layer - 1].clone()
    }

    /// Accumulates `∂/∂θ Σ_t dlogits[t] · logits_t` into `grad`.
    pub fn backward(&self, trace: &Trace, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let (d, e) = (self.cfg.width, self.cfg.embed_dim);
        let p = &self.params;
        let l = &self.layout;
        let c = &trace.context;
        let k_used = c.opts.len();
        let mut dctx = vec![0.0; d];
        let mut dopts = vec![vec![0.0; d]; k_used];
        let mut dsel_later = vec![0.0; d];
        // Walk positions backwards so the selected-token gradient can be
        // accumulated as a suffix sum: x_t depends on tokens before t.
        for (t, (step, dl)) in trace.steps.iter().zip(dlogits).enumerate().rev() {
            if t + 1 < trace.steps.len() {
                let tok = trace.tokens[t];
                let s = l.sel_tok.start + tok * d;
                math::axpy(1.0, &dsel_later, &mut grad[s..s + d]);
            }
            let top = step.hidden.last().expect("layers");
            math::outer_add(&mut grad[l.out_w.clone()], dl, top);
            math::axpy(1.0, dl, &mut grad[l.out_b.clone()]);
            let mut dh = vec![0.0; d];
            math::matvec_t_add(&p[l.out_w.clone()], dl, &mut dh);
            let mut uh = vec![0.0; d];
            math::matvec(&p[l.pointer.clone()], top, &mut uh);
            let mut ut_o = vec![0.0; d];
            for (j, o) in c.opts.iter().enumerate() {
                let g = dl[j];
                if g == 0.0 {
                    continue;
                }
                math::outer_add(&mut grad[l.pointer.clone()], &o.iter().map(|v| v * g).collect::<Vec<_>>(), top);
                math::axpy(g, o, &mut ut_o);
                math::axpy(g, &uh, &mut dopts[j]);
            }
            math::matvec_t_add(&p[l.pointer.clone()], &ut_o, &mut dh);
            for i in (0..l.layers.len()).rev() {
                let (w, b) = &l.layers[i];
                let input = if i == 0 { &step.x } else { &step.hidden[i - 1] };
                let mut dz = vec![0.0; d];
                for q in 0..d {
                    let a = if i == 0 { step.hidden[0][q] } else { step.hidden[i][q] - input[q] };
                    dz[q] = dh[q] * (1.0 - a * a);
                }
                math::outer_add(&mut grad[w.clone()], &dz, input);
                math::axpy(1.0, &dz, &mut grad[b.clone()]);
                let mut din = vec![0.0; d];
                math::matvec_t_add(&p[w.clone()], &dz, &mut din);
                if i > 0 {
                    // Residual path.
                    math::axpy(1.0, &dh, &mut din);
                }
                dh = din;
            }
            // dh is now ∂/∂x_t.
            math::axpy(1.0, &dh, &mut dctx);
            let s = l.prev_tok.start + step.prev * d;
            math::axpy(1.0, &dh, &mut grad[s..s + d]);
            math::axpy(1.0, &dh, &mut dsel_later);
        }
        math::axpy(1.0, &dctx, &mut grad[l.ctx_b.clone()]);
        for j in 0..k_used {
            let o = &c.opts[j];
            let m = l.pool.start + j * d * d;
            math::outer_add(&mut grad[m..m + d * d], &dctx, o);
            math::matvec_t_add(&p[m..m + d * d], &dctx, &mut dopts[j]);
            let du: Vec<f64> = dopts[j].iter().zip(o).map(|(g, v)| g * (1.0 - v * v)).collect();
            math::outer_add(&mut grad[l.opt_w.clone()], &du, &c.feats[j]);
            math::axpy(1.0, &du, &mut grad[l.opt_b.clone()]);
            let s = l.slot.start + j * d;
            math::axpy(1.0, &du, &mut grad[s..s + d]);
            let mut df = vec![0.0; 3 * e + 1];
            math::matvec_t_add(&p[l.opt_w.clone()], &du, &mut df);
            let ce = l.entity.start + c.entities[j].idx() * e;
            math::axpy(1.0, &df[..e], &mut grad[ce..ce + e]);
            let re = l.relation.start + c.r.idx() * e;
            math::axpy(1.0, &df[e..2 * e], &mut grad[re..re + e]);
            let he = l.entity.start + c.h.idx() * e;
            math::axpy(1.0, &df[2 * e..3 * e], &mut grad[he..he + e]);
        }
    }

    /// Gradient of the summed token negative log-likelihood of one sequence;
    /// returns that sum.
    pub fn nll_grad(&self, inst: &DiscriminativeInstance, tokens: &[usize], scale: f64, grad: &mut [f64]) -> Result<f64> {
        let trace = self.trace(inst, tokens)?;
        let mut nll = 0.0;
        let dlogits: Vec<Vec<f64>> = trace
            .steps
            .iter()
            .zip(tokens)
            .map(|(s, &t)| {
                nll -= s.log_probs[t];
                let mut g: Vec<f64> = s.log_probs.iter().map(|lp| lp.exp() * scale).collect();
                g[t] -= scale;
                g
            })
            .collect();
        self.backward(&trace, &dlogits, grad);
        Ok(nll)
    }

    /// Target token sequence of an instance's answer set.
    pub fn target_tokens(&self, inst: &DiscriminativeInstance) -> Result<Vec<usize>> {
        self.vocab().encode_answer(&inst.e_pos)
    }

    /// Mean token-level negative log-likelihood over `batch` and its gradient.
    pub fn sft_loss_grad(&self, batch: &[&DiscriminativeInstance], deterministic: bool) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("SFT batch"));
        }
        let targets = batch.iter().map(|i| self.target_tokens(i)).collect::<Result<Vec<_>>>()?;
        let total: usize = targets.iter().map(Vec::len).sum();
        let scale = 1.0 / total as f64;
        let len = self.params.len();
        let failed = std::sync::OnceLock::new();
        let mut grad = par::sum_vectors(batch.len(), len + 1, deterministic, |i| {
            let mut g = vec![0.0; len + 1];
            match self.nll_grad(batch[i], &targets[i], scale, &mut g[..len]) {
                Ok(nll) => g[len] = nll * scale,
                Err(e) => {
                    let _ = failed.set(e);
                }
            }
            g
        });
        if let Some(e) = failed.into_inner() {
            return Err(e);
        }
        let loss = grad.pop().expect("loss slot");
        Ok((loss, grad))
    }

    /// One optimizer step on the mean token NLL; returns the pre-step loss.
    pub fn sft_step(&mut self, opt: &mut Optimizer, batch: &[&DiscriminativeInstance], deterministic: bool) -> Result<f64> {
        let (loss, grad) = self.sft_loss_grad(batch, deterministic)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("SFT loss".into()));
        }
        opt.step(&mut self.params, &grad);
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.003,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            deterministic: true,
        }
    }
}

/// Shuffled mini-batch SFT; returns the mean loss of each epoch.
pub fn train_sft(policy: &mut SequencePolicy, instances: &[DiscriminativeInstance], cfg: &SftConfig) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    if instances.is_empty() {
        return Err(Error::Empty("SFT instances"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, policy.num_params());
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&DiscriminativeInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let loss = policy.sft_step(&mut opt, &batch, cfg.deterministic)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("sft epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &str = "kgsel-policy 1";

pub fn save_policy(policy: &SequencePolicy, path: impl AsRef<Path>) -> Result<()> {
    let c = &policy.cfg;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "layers {} width {} vocab {} embed {}", c.layers, c.width, c.k + 3, c.embed_dim);
    let _ = writeln!(s, "options {} entities {} relations {}", c.k, policy.num_entities, policy.num_relations);
    let _ = writeln!(s, "score {} {} {}", c.use_kge_score, policy.score_shift, policy.score_scale);
    for (name, range) in policy.layout.blocks() {
        let _ = writeln!(s, "{name} {}", range.len());
        let vals: Vec<String> = policy.params[range].iter().map(|x| format!("{x}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    crate::graph::write_file(path.as_ref(), &s)
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<SequencePolicy> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut lines = content.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let mut header = |keys: &[&str]| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad("truncated header".into()))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != keys.len() * 2 && !(keys == ["score"] && parts.len() == 4) {
            return Err(bad(format!("malformed header line `{line}`")));
        }
        if keys == ["score"] {
            return Ok(parts[1..].iter().map(|s| s.to_string()).collect());
        }
        let mut out = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if parts[2 * i] != *k {
                return Err(bad(format!("expected `{k}` in `{line}`")));
            }
            out.push(parts[2 * i + 1].to_string());
        }
        Ok(out)
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad integer `{s}`")));
    let a = header(&["layers", "width", "vocab", "embed"])?;
    let b = header(&["options", "entities", "relations"])?;
    let sc = header(&["score"])?;
    let cfg = PolicyConfig {
        k: num(&b[0])?,
        layers: num(&a[0])?,
        width: num(&a[1])?,
        embed_dim: num(&a[3])?,
        use_kge_score: sc[0] == "true",
    };
    if num(&a[2])? != cfg.k + 3 {
        return Err(bad("vocabulary size disagrees with option count".into()));
    }
    let mut policy = SequencePolicy::zeros(cfg, num(&b[1])?, num(&b[2])?)?;
    let f = |s: &str| s.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad float `{s}`")));
    policy.set_score_normalization(f(&sc[1])?, f(&sc[2])?);
    for (name, range) in policy.layout.blocks() {
        let head = lines.next().ok_or_else(|| bad(format!("missing block `{name}`")))?;
        if head != format!("{name} {}", range.len()) {
            return Err(bad(format!("expected block `{name} {}`, found `{head}`", range.len())));
        }
        let body = lines.next().unwrap_or("");
        let vals = body.split_whitespace().map(f).collect::<Result<Vec<f64>>>()?;
        if vals.len() != range.len() {
            return Err(bad(format!("block `{name}` has {} values, expected {}", vals.len(), range.len())));
        }
        policy.params[range].copy_from_slice(&vals);
    }
    if !math::all_finite(&policy.params) {
        return Err(Error::NonFinite(format!("{}: policy parameters", path.display())));
    }
    Ok(policy)
}
