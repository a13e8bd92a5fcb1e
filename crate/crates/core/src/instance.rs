//! K-way candidate-selection instances, prompt templates and the answer
//! grammar.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, GtScope, KnowledgeGraph, RelationId, Split, Triple};
use crate::kge::KgeModel;
use crate::{par, seed};

pub type Label = char;

/// Label of the option in position `i` (`A`, `B`, ...).
pub fn label_at(i: usize) -> Label {
    assert!(i < 26, "at most 26 options are supported");
    (b'A' + i as u8) as char
}

/// Position of a label, if it is one of the first `k`.
pub fn label_index(label: Label, k: usize) -> Option<usize> {
    let i = (label as u32).checked_sub('A' as u32)? as usize;
    (i < k).then_some(i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Tier {
    /// Lowest-scoring negatives.
    Easy = 1,
    /// Uniform over all non-answers.
    Random = 2,
    /// Highest-scoring negatives.
    Hard = 3,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Random, Tier::Hard];
}

impl TryFrom<u8> for Tier {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Tier::Easy),
            2 => Ok(Tier::Random),
            3 => Ok(Tier::Hard),
            _ => Err(format!("tier must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Tier> for u8 {
    fn from(t: Tier) -> u8 {
        t as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Single,
    Variable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub q_lo: f64,
    pub q_hi: f64,
    /// Non-answers scored per query; `None` scores all of them.
    pub pool: Option<usize>,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig {
            q_lo: 0.25,
            q_hi: 0.75,
            pool: None,
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.q_lo && self.q_lo < self.q_hi && self.q_hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tier quantiles must satisfy 0 < q_lo < q_hi < 1, got {} and {}",
                self.q_lo, self.q_hi
            )));
        }
        Ok(())
    }
}

/// Non-answer entities of a query split by plausibility.
#[derive(Clone, Debug, PartialEq)]
pub struct TierPools {
    /// Lowest-scoring fraction `q_lo`, ascending by score.
    pub easy: Vec<EntityId>,
    /// Every scored non-answer, by ascending id.
    pub random: Vec<EntityId>,
    /// Highest-scoring fraction `1 - q_hi`, ascending by score.
    pub hard: Vec<EntityId>,
}

impl TierPools {
    pub fn get(&self, tier: Tier) -> &[EntityId] {
        match tier {
            Tier::Easy => &self.easy,
            Tier::Random => &self.random,
            Tier::Hard => &self.hard,
        }
    }
}

fn quantile_count(frac: f64, n: usize) -> usize {
    (((frac * n as f64) + 1e-9).floor() as usize).clamp(1, n)
}

/// Scores every entity outside the full ground truth of `(h, r)` and splits
/// them into tiers by score quantile. `seed` only matters when a finite
/// scoring pool is configured.
pub fn stratify_negatives(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    h: EntityId,
    r: RelationId,
    cfg: &TierConfig,
    seed: u64,
) -> Result<TierPools> {
    cfg.validate()?;
    let gt = graph.ground_truth_tails(h, r, GtScope::All);
    let mut candidates: Vec<EntityId> = graph.entity_ids().filter(|e| gt.binary_search(e).is_err()).collect();
    if let Some(pool) = cfg.pool {
        if pool < candidates.len() {
            let mut rng = seed::rng(seed);
            let mut picked: Vec<EntityId> = index::sample(&mut rng, candidates.len(), pool)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            candidates = picked;
        }
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientNegatives {
            h: h.0,
            r: r.0,
            need: 1,
            have: 0,
        });
    }
    let scores = kge.score_all_tails(h, r);
    let mut by_score = candidates.clone();
    by_score.sort_by(|a, b| scores[a.idx()].total_cmp(&scores[b.idx()]).then(a.cmp(b)));
    let n = by_score.len();
    let easy = by_score[..quantile_count(cfg.q_lo, n)].to_vec();
    let hard = by_score[n - quantile_count(1.0 - cfg.q_hi, n)..].to_vec();
    Ok(TierPools {
        easy,
        random: candidates,
        hard,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateOption {
    pub label: Label,
    pub entity: EntityId,
    pub is_positive: bool,
    pub kge_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminativeInstance {
    pub h: EntityId,
    pub r: RelationId,
    pub options: Vec<CandidateOption>,
    pub e_pos: BTreeSet<Label>,
    pub tier: Tier,
    pub mode: AnswerMode,
    pub seed: u64,
    pub prompt: String,
    pub target: String,
}

impl DiscriminativeInstance {
    pub fn k(&self) -> usize {
        self.options.len()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.options.iter().map(|o| o.label).collect()
    }

    /// Positions of the positive options, ascending.
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.options[i].is_positive).collect()
    }

    /// Checks the structural invariants against `graph`.
    pub fn check(&self, graph: &KnowledgeGraph) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (i, o) in self.options.iter().enumerate() {
            if o.label != label_at(i) {
                return bad(format!("option {i} has label {}", o.label));
            }
        }
        let pos: BTreeSet<Label> = self.options.iter().filter(|o| o.is_positive).map(|o| o.label).collect();
        if pos != self.e_pos || pos.is_empty() {
            return bad("positive options disagree with the answer set".into());
        }
        if self.mode == AnswerMode::Single && pos.len() != 1 {
            return bad("single-answer instance with several positives".into());
        }
        let gt = graph.ground_truth_tails(self.h, self.r, GtScope::All);
        for o in self.options.iter().filter(|o| !o.is_positive) {
            if gt.binary_search(&o.entity).is_ok() {
                return bad(format!("negative {} is a known answer", o.entity.0));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub k: usize,
    /// Instance `i` of a dataset uses `tiers[i % tiers.len()]`.
    pub tiers: Vec<Tier>,
    pub mode: AnswerMode,
    pub tier_config: TierConfig,
    pub per_query: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            k: 4,
            tiers: Tier::ALL.to_vec(),
            mode: AnswerMode::Variable,
            tier_config: TierConfig::default(),
            per_query: 1,
        }
    }
}

/// Builds one instance whose positives come from the training ground truth.
#[allow(clippy::too_many_arguments)]
pub fn build_instance(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    h: EntityId,
    r: RelationId,
    k: usize,
    tier: Tier,
    mode: AnswerMode,
    tier_config: &TierConfig,
    seed: u64,
) -> Result<DiscriminativeInstance> {
    let gt = graph.ground_truth_tails(h, r, GtScope::TrainOnly);
    build_instance_from(graph, kge, h, r, gt, k, tier, mode, tier_config, seed)
}

/// Builds one instance with positives drawn from `answers`. Negatives always
/// avoid the ground truth over all splits.
#[allow(clippy::too_many_arguments)]
pub fn build_instance_from(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    h: EntityId,
    r: RelationId,
    answers: &[EntityId],
    k: usize,
    tier: Tier,
    mode: AnswerMode,
    tier_config: &TierConfig,
    seed: u64,
) -> Result<DiscriminativeInstance> {
    if !(2..=26).contains(&k) {
        return Err(Error::InvalidArgument(format!("K must be in 2..=26, got {k}")));
    }
    if answers.is_empty() {
        return Err(Error::EmptyGroundTruth { h: h.0, r: r.0 });
    }
    let mut rng = seed::rng(seed);
    let p = match mode {
        AnswerMode::Single => 1,
        AnswerMode::Variable => rng.random_range(1..=(k - 1).min(answers.len())),
    };
    let pools = stratify_negatives(graph, kge, h, r, tier_config, seed::derive(seed, 1))?;
    let pool = pools.get(tier);
    if pool.len() < k - p {
        return Err(Error::InsufficientNegatives {
            h: h.0,
            r: r.0,
            need: k - p,
            have: pool.len(),
        });
    }
    let mut chosen: Vec<(EntityId, bool)> = index::sample(&mut rng, answers.len(), p)
        .into_iter()
        .map(|i| (answers[i], true))
        .collect();
    chosen.extend(index::sample(&mut rng, pool.len(), k - p).into_iter().map(|i| (pool[i], false)));
    chosen.shuffle(&mut rng);
    let options: Vec<CandidateOption> = chosen
        .into_iter()
        .enumerate()
        .map(|(i, (entity, is_positive))| CandidateOption {
            label: label_at(i),
            entity,
            is_positive,
            kge_score: kge.score(h, r, entity),
        })
        .collect();
    let e_pos = options.iter().filter(|o| o.is_positive).map(|o| o.label).collect();
    let mut inst = DiscriminativeInstance {
        h,
        r,
        options,
        e_pos,
        tier,
        mode,
        seed,
        prompt: String::new(),
        target: String::new(),
    };
    inst.prompt = render_prompt(&inst, graph, TRAINING_TEMPLATE)?;
    inst.target = render_cot_target(&inst, graph);
    Ok(inst)
}

/// One instance per training query (times `per_query`), built in parallel
/// with per-instance seeds derived from `seed`.
pub fn build_training_set(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    cfg: &InstanceConfig,
    seed: u64,
) -> Result<Vec<DiscriminativeInstance>> {
    let queries: Vec<(EntityId, RelationId, Vec<EntityId>)> = graph
        .queries(GtScope::TrainOnly)
        .into_iter()
        .map(|(h, r)| (h, r, graph.ground_truth_tails(h, r, GtScope::TrainOnly).to_vec()))
        .collect();
    build_set(graph, kge, &queries, cfg, seed)
}

/// Instances for the queries of a held-out split. Positives are the tails
/// that appear in `split` but not in training.
pub fn build_heldout_set(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    split: Split,
    cfg: &InstanceConfig,
    seed: u64,
) -> Result<Vec<DiscriminativeInstance>> {
    let mut by_query: std::collections::BTreeMap<(EntityId, RelationId), Vec<EntityId>> = Default::default();
    for t in graph.split(split) {
        let train = graph.ground_truth_tails(t.h, t.r, GtScope::TrainOnly);
        if train.binary_search(&t.t).is_err() {
            by_query.entry((t.h, t.r)).or_default().push(t.t);
        }
    }
    let queries: Vec<_> = by_query
        .into_iter()
        .map(|((h, r), mut tails)| {
            tails.sort_unstable();
            (h, r, tails)
        })
        .collect();
    build_set(graph, kge, &queries, cfg, seed)
}

fn build_set(
    graph: &KnowledgeGraph,
    kge: &KgeModel,
    queries: &[(EntityId, RelationId, Vec<EntityId>)],
    cfg: &InstanceConfig,
    seed: u64,
) -> Result<Vec<DiscriminativeInstance>> {
    if cfg.tiers.is_empty() {
        return Err(Error::InvalidArgument("at least one tier is required".into()));
    }
    let jobs: Vec<usize> = (0..queries.len() * cfg.per_query).collect();
    par::try_map(&jobs, |&i| {
        let (h, r, answers) = &queries[i / cfg.per_query];
        let tier = cfg.tiers[i % cfg.tiers.len()];
        build_instance_from(
            graph,
            kge,
            *h,
            *r,
            answers,
            cfg.k,
            tier,
            cfg.mode,
            &cfg.tier_config,
            seed::derive(seed, i as u64),
        )
    })
}

// ---------------------------------------------------------------------------
// Templates

pub const TRAINING_TEMPLATE: &str = "\
Query: ({head}, {relation}, ?)
Choose every candidate that is a correct tail for the query. Any number of candidates may be correct.
Candidates:
{options}
Reply with a final line `Answer: <labels>`.";

pub const COT_TEMPLATE: &str = "\
Query: ({head}, {relation}, ?)
About {head}: {head_description}
Candidates:
{options_described}
Check each candidate against the query, then reply with a final line `Answer: <labels>`.";

pub const STATEMENT_TEMPLATE: &str = "{head} {relation} {tail}. Is this statement correct?";

/// Substitutes `{name}` placeholders; `{{` and `}}` are literal braces.
pub fn fill_template(template: &str, vars: &HashMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for c in chars.by_ref() {
                    if c == '}' {
                        closed = true;
                        break;
                    }
                    name.push(c);
                }
                match vars.get(name.as_str()) {
                    Some(v) if closed => out.push_str(v),
                    _ => return Err(Error::UnresolvedPlaceholder(name)),
                }
            }
            _ => out.push(c),
        }
    }
    Ok(out)
}

/// Renders an instance prompt. Available placeholders: `head`, `relation`,
/// `head_description`, `k`, `options` (`A. name` lines) and
/// `options_described` (`A. name: description` lines).
pub fn render_prompt(inst: &DiscriminativeInstance, graph: &KnowledgeGraph, template: &str) -> Result<String> {
    let mut options = String::new();
    let mut described = String::new();
    for (i, o) in inst.options.iter().enumerate() {
        if i > 0 {
            options.push('\n');
            described.push('\n');
        }
        let name = graph.entity_name(o.entity);
        let _ = write!(options, "{}. {}", o.label, name);
        let _ = write!(described, "{}. {}: {}", o.label, name, graph.entity_description(o.entity));
    }
    let vars = HashMap::from([
        ("head", graph.entity_name(inst.h).to_string()),
        ("relation", graph.relation_name(inst.r).to_string()),
        ("head_description", graph.entity_description(inst.h).to_string()),
        ("k", inst.k().to_string()),
        ("options", options),
        ("options_described", described),
    ]);
    fill_template(template, &vars)
}

/// Renders the statement prompt for a single triple.
pub fn render_statement(graph: &KnowledgeGraph, t: &Triple, template: &str) -> Result<String> {
    let vars = HashMap::from([
        ("head", graph.entity_name(t.h).to_string()),
        ("relation", graph.relation_name(t.r).to_string()),
        ("tail", graph.entity_name(t.t).to_string()),
        ("head_description", graph.entity_description(t.h).to_string()),
        ("tail_description", graph.entity_description(t.t).to_string()),
    ]);
    fill_template(template, &vars)
}

pub fn format_answer(labels: &BTreeSet<Label>) -> String {
    let parts: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    format!("Answer: {}", parts.join(", "))
}

/// One verification sentence per candidate followed by the answer line.
pub fn render_cot_target(inst: &DiscriminativeInstance, graph: &KnowledgeGraph) -> String {
    let head = graph.entity_name(inst.h);
    let rel = graph.relation_name(inst.r);
    let mut s = String::new();
    for o in &inst.options {
        let verdict = if o.is_positive { "fits" } else { "does not fit" };
        let _ = writeln!(s, "{} ({}) {verdict} the query ({head}, {rel}, ?).", o.label, graph.entity_name(o.entity));
    }
    s.push_str(&format_answer(&inst.e_pos));
    s
}

/// Reads the answer set from the last line that starts with `Answer:`.
/// That line must be `Answer: L(, L)*` with distinct labels from
/// `valid_labels`; anything else yields `None`.
pub fn parse_answer(text: &str, valid_labels: &[Label]) -> Option<BTreeSet<Label>> {
    let line = text.lines().rev().map(str::trim_end).find(|l| l.starts_with("Answer:"))?;
    let body = line.strip_prefix("Answer: ")?;
    let mut out = BTreeSet::new();
    for part in body.split(", ") {
        let mut cs = part.chars();
        let (Some(c), None) = (cs.next(), cs.next()) else {
            return None;
        };
        if !valid_labels.contains(&c) || !out.insert(c) {
            return None;
        }
    }
    Some(out)
}

/// Anything that produces an answer text for an instance.
pub trait AnswerPolicy: Sync {
    fn answer(&self, inst: &DiscriminativeInstance) -> String;
}

impl<F: Fn(&DiscriminativeInstance) -> String + Sync> AnswerPolicy for F {
    fn answer(&self, inst: &DiscriminativeInstance) -> String {
        self(inst)
    }
}

/// Instances whose decoded answer fails to parse or differs from the answer set.
pub fn build_error_set<P: AnswerPolicy + ?Sized>(
    policy: &P,
    instances: &[DiscriminativeInstance],
) -> Vec<DiscriminativeInstance> {
    let wrong = par::map(instances, |inst| parse_answer(&policy.answer(inst), &inst.labels()).as_ref() != Some(&inst.e_pos));
    instances
        .iter()
        .zip(wrong)
        .filter(|(_, w)| *w)
        .map(|(i, _)| i.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL storage

#[derive(Serialize, Deserialize)]
struct OptionRecord {
    label: Label,
    entity: String,
    positive: bool,
    kge_score: f64,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    h: String,
    r: String,
    options: Vec<OptionRecord>,
    e_pos: Vec<Label>,
    tier: Tier,
    mode: AnswerMode,
    seed: u64,
}

/// Writes one JSON record per line with raw entity and relation keys.
pub fn save_instances(path: impl AsRef<Path>, graph: &KnowledgeGraph, instances: &[DiscriminativeInstance]) -> Result<()> {
    let mut s = String::new();
    for inst in instances {
        let rec = InstanceRecord {
            h: graph.entities().key(inst.h.0).to_string(),
            r: graph.relations().key(inst.r.0).to_string(),
            options: inst
                .options
                .iter()
                .map(|o| OptionRecord {
                    label: o.label,
                    entity: graph.entities().key(o.entity.0).to_string(),
                    positive: o.is_positive,
                    kge_score: o.kge_score,
                })
                .collect(),
            e_pos: inst.e_pos.iter().copied().collect(),
            tier: inst.tier,
            mode: inst.mode,
            seed: inst.seed,
        };
        s.push_str(&serde_json::to_string(&rec).expect("instance record serializes"));
        s.push('\n');
    }
    crate::graph::write_file(path.as_ref(), &s)
}

/// Reads instances written by [`save_instances`] and re-renders prompts
/// with `template`.
pub fn load_instances(path: impl AsRef<Path>, graph: &KnowledgeGraph, template: &str) -> Result<Vec<DiscriminativeInstance>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let ent = |k: &str| {
            graph
                .entities()
                .get(k)
                .map(EntityId)
                .ok_or_else(|| parse_err(i + 1, format!("unknown entity `{k}`")))
        };
        let h = ent(&rec.h)?;
        let r = graph
            .relations()
            .get(&rec.r)
            .map(RelationId)
            .ok_or_else(|| parse_err(i + 1, format!("unknown relation `{}`", rec.r)))?;
        let options = rec
            .options
            .iter()
            .map(|o| {
                Ok(CandidateOption {
                    label: o.label,
                    entity: ent(&o.entity)?,
                    is_positive: o.positive,
                    kge_score: o.kge_score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut inst = DiscriminativeInstance {
            h,
            r,
            options,
            e_pos: rec.e_pos.into_iter().collect(),
            tier: rec.tier,
            mode: rec.mode,
            seed: rec.seed,
            prompt: String::new(),
            target: String::new(),
        };
        inst.check(graph).map_err(|e| parse_err(i + 1, e.to_string()))?;
        inst.prompt = render_prompt(&inst, graph, template)?;
        inst.target = render_cot_target(&inst, graph);
        out.push(inst);
    }
    Ok(out)
}
