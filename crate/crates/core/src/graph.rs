//! Knowledge-graph data model, TSV ingestion, filtered corruption and
//! entity-disjoint (inductive) splits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub h: EntityId,
    pub r: RelationId,
    pub t: EntityId,
}

impl Triple {
    pub fn new(h: u32, r: u32, t: u32) -> Self {
        Triple {
            h: EntityId(h),
            r: RelationId(r),
            t: EntityId(t),
        }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.h == e || self.t == e
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.h.0, self.r.0, self.t.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Which splits a ground-truth lookup ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtScope {
    /// train ∪ valid ∪ test; used for filtered evaluation and negatives.
    All,
    /// train only; used for instance positives so that held-out answers never leak.
    TrainOnly,
}

/// Bijective map between raw dataset keys and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn get_or_insert(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: u32) -> &str {
        &self.keys[id as usize]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

/// Summary counts written as `stats.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Diagnostics gathered while loading.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Intra-split duplicate lines dropped, per split (train, valid, test).
    pub duplicates_removed: [usize; 3],
}

type GtIndex = HashMap<(EntityId, RelationId), Vec<EntityId>>;

/// An immutable knowledge graph with text maps and ground-truth indices.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    entity_text: Vec<String>,
    relation_text: Vec<String>,
    entity_desc: Vec<Option<String>>,
    gt_all: GtIndex,
    gt_train: GtIndex,
    known: HashSet<Triple>,
}

/// Incremental construction from raw keys; used by the loader, the synthetic
/// fixture generator and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Vocab,
    relations: Vocab,
    splits: [Vec<Triple>; 3],
    seen: [HashSet<Triple>; 3],
    duplicates: [usize; 3],
    entity_text: HashMap<u32, String>,
    relation_text: HashMap<u32, String>,
    entity_desc: HashMap<u32, String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a triple; intra-split duplicates are dropped and counted.
    pub fn add(&mut self, split: Split, h: &str, r: &str, t: &str) -> Triple {
        let h = self.entities.get_or_insert(h);
        let r = self.relations.get_or_insert(r);
        let t = self.entities.get_or_insert(t);
        let triple = Triple::new(h, r, t);
        let s = split_index(split);
        if self.seen[s].insert(triple) {
            self.splits[s].push(triple);
        } else {
            self.duplicates[s] += 1;
        }
        triple
    }

    pub fn entity_text(&mut self, key: &str, text: &str) {
        let id = self.entities.get_or_insert(key);
        self.entity_text.insert(id, text.to_string());
    }

    pub fn relation_text(&mut self, key: &str, text: &str) {
        let id = self.relations.get_or_insert(key);
        self.relation_text.insert(id, text.to_string());
    }

    pub fn entity_desc(&mut self, key: &str, desc: &str) {
        let id = self.entities.get_or_insert(key);
        self.entity_desc.insert(id, desc.to_string());
    }

    pub fn build(self) -> Result<(KnowledgeGraph, LoadReport)> {
        let mut entity_text = Vec::with_capacity(self.entities.len());
        for id in 0..self.entities.len() as u32 {
            match self.entity_text.get(&id) {
                Some(t) => entity_text.push(t.clone()),
                None => {
                    return Err(Error::UnknownKey {
                        kind: "entity text for",
                        key: self.entities.key(id).to_string(),
                    })
                }
            }
        }
        let mut relation_text = Vec::with_capacity(self.relations.len());
        for id in 0..self.relations.len() as u32 {
            match self.relation_text.get(&id) {
                Some(t) => relation_text.push(t.clone()),
                None => {
                    return Err(Error::UnknownKey {
                        kind: "relation text for",
                        key: self.relations.key(id).to_string(),
                    })
                }
            }
        }
        let entity_desc = (0..self.entities.len() as u32)
            .map(|id| self.entity_desc.get(&id).cloned())
            .collect();
        let [train, valid, test] = self.splits;
        let graph = KnowledgeGraph::assemble(
            self.entities,
            self.relations,
            train,
            valid,
            test,
            entity_text,
            relation_text,
            entity_desc,
        );
        Ok((
            graph,
            LoadReport {
                duplicates_removed: self.duplicates,
            },
        ))
    }
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

fn build_gt<'a>(triples: impl Iterator<Item = &'a Triple>) -> GtIndex {
    let mut gt: GtIndex = HashMap::new();
    for tr in triples {
        gt.entry((tr.h, tr.r)).or_default().push(tr.t);
    }
    for tails in gt.values_mut() {
        tails.sort_unstable();
        tails.dedup();
    }
    gt
}

/// Paths of the files making up one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: std::path::PathBuf,
    pub valid: std::path::PathBuf,
    pub test: std::path::PathBuf,
    pub text: std::path::PathBuf,
    pub desc: Option<std::path::PathBuf>,
}

impl DatasetPaths {
    /// Conventional layout: `train.txt`, `valid.txt`, `test.txt`, `text.txt`
    /// and optionally `desc.txt` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let desc = dir.join("desc.txt");
        DatasetPaths {
            train: dir.join("train.txt"),
            valid: dir.join("valid.txt"),
            test: dir.join("test.txt"),
            text: dir.join("text.txt"),
            desc: desc.exists().then_some(desc),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_tsv(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let content = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != fields {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {fields} tab-separated fields, found {}", parts.len()),
            });
        }
        rows.push((i + 1, parts.into_iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

/// Loads a graph from triple TSVs (`head<TAB>relation<TAB>tail`) and text
/// maps (`key<TAB>text`). Ids follow the order in which keys appear in the
/// text map, so a saved graph reloads with identical ids.
pub fn load_graph(paths: &DatasetPaths) -> Result<(KnowledgeGraph, LoadReport)> {
    let mut rows = Vec::new();
    for (split, path) in [
        (Split::Train, &paths.train),
        (Split::Valid, &paths.valid),
        (Split::Test, &paths.test),
    ] {
        rows.extend(parse_tsv(path, 3)?.into_iter().map(|(_, row)| (split, row)));
    }
    let entity_keys: HashSet<&str> = rows.iter().flat_map(|(_, r)| [r[0].as_str(), r[2].as_str()]).collect();
    let relation_keys: HashSet<&str> = rows.iter().map(|(_, r)| r[1].as_str()).collect();
    let mut b = GraphBuilder::new();
    for (_, row) in parse_tsv(&paths.text, 2)? {
        if entity_keys.contains(row[0].as_str()) {
            b.entity_text(&row[0], &row[1]);
        }
        if relation_keys.contains(row[0].as_str()) {
            b.relation_text(&row[0], &row[1]);
        }
    }
    for (split, row) in &rows {
        b.add(*split, &row[0], &row[1], &row[2]);
    }
    if let Some(desc_path) = &paths.desc {
        for (_, row) in parse_tsv(desc_path, 2)? {
            if b.entities.get(&row[0]).is_some() {
                b.entity_desc(&row[0], &row[1]);
            }
        }
    }
    let (g, report) = b.build()?;
    let dups: usize = report.duplicates_removed.iter().sum();
    if dups > 0 {
        log::warn!("removed {dups} duplicate triples within splits");
    }
    Ok((g, report))
}

impl KnowledgeGraph {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        entity_text: Vec<String>,
        relation_text: Vec<String>,
        entity_desc: Vec<Option<String>>,
    ) -> Self {
        let gt_all = build_gt(train.iter().chain(&valid).chain(&test));
        let gt_train = build_gt(train.iter());
        let known = train.iter().chain(&valid).chain(&test).copied().collect();
        KnowledgeGraph {
            entities,
            relations,
            train,
            valid,
            test,
            entity_text,
            relation_text,
            entity_desc,
            gt_all,
            gt_train,
            known,
        }
    }

    /// Same entities, relations and text, with replaced splits.
    pub fn with_splits(&self, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Self {
        KnowledgeGraph::assemble(
            self.entities.clone(),
            self.relations.clone(),
            train,
            valid,
            test,
            self.entity_text.clone(),
            self.relation_text.clone(),
            self.entity_desc.clone(),
        )
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    /// Short name ℓ(e).
    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_text[e.idx()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_text[r.idx()]
    }

    /// Long description d(e), falling back to the short name.
    pub fn entity_description(&self, e: EntityId) -> &str {
        self.entity_desc[e.idx()]
            .as_deref()
            .unwrap_or_else(|| self.entity_name(e))
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }

    /// E_gt(h, r) as a sorted slice; empty when the query has no answers.
    pub fn ground_truth_tails(&self, h: EntityId, r: RelationId, scope: GtScope) -> &[EntityId] {
        let index = match scope {
            GtScope::All => &self.gt_all,
            GtScope::TrainOnly => &self.gt_train,
        };
        index.get(&(h, r)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Distinct (h, r) queries with at least one tail in `scope`, sorted.
    pub fn queries(&self, scope: GtScope) -> Vec<(EntityId, RelationId)> {
        let index = match scope {
            GtScope::All => &self.gt_all,
            GtScope::TrainOnly => &self.gt_train,
        };
        let mut q: Vec<_> = index.keys().copied().collect();
        q.sort_unstable();
        q
    }

    /// Whether the triple appears in any split.
    pub fn is_known(&self, t: &Triple) -> bool {
        self.known.contains(t)
    }

    /// Replaces the tail with an entity drawn uniformly from E \ (E_gt(h, r) ∪ {t}),
    /// where E_gt ranges over all splits.
    pub fn corrupt_tail(&self, triple: &Triple, seed: u64) -> Result<Triple> {
        let gt = self.ground_truth_tails(triple.h, triple.r, GtScope::All);
        let mut excluded: Vec<EntityId> = gt.to_vec();
        if excluded.binary_search(&triple.t).is_err() {
            let pos = excluded.partition_point(|e| *e < triple.t);
            excluded.insert(pos, triple.t);
        }
        let n = self.num_entities();
        let eligible = n - excluded.len();
        if eligible == 0 {
            return Err(Error::NoEligibleCorruption {
                h: triple.h.0,
                r: triple.r.0,
            });
        }
        let mut rng = seed::rng(seed);
        let mut k = rng.random_range(0..eligible) as u32;
        // Walk past excluded ids (sorted) to find the k-th eligible id.
        for e in &excluded {
            if e.0 <= k {
                k += 1;
            } else {
                break;
            }
        }
        Ok(Triple {
            h: triple.h,
            r: triple.r,
            t: EntityId(k),
        })
    }

    /// Positives from `split` (label 1) interleaved with one filtered tail
    /// corruption each (label 0).
    pub fn balanced_classification_set(&self, split: Split, seed: u64) -> Result<Vec<LabeledTriple>> {
        balanced_set(self, self.split(split), seed)
    }

    /// Writes the graph in the ingestion format (triples + text + desc).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let mut out = String::new();
            for t in self.split(split) {
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.entities.key(t.h.0),
                    self.relations.key(t.r.0),
                    self.entities.key(t.t.0)
                ));
            }
            write_file(&dir.join(format!("{}.txt", split.name())), &out)?;
        }
        let mut text = String::new();
        for (i, k) in self.entities.keys().iter().enumerate() {
            text.push_str(&format!("{}\t{}\n", k, self.entity_text[i]));
        }
        for (i, k) in self.relations.keys().iter().enumerate() {
            text.push_str(&format!("{}\t{}\n", k, self.relation_text[i]));
        }
        write_file(&dir.join("text.txt"), &text)?;
        if self.entity_desc.iter().any(Option::is_some) {
            let mut desc = String::new();
            for (i, k) in self.entities.keys().iter().enumerate() {
                if let Some(d) = &self.entity_desc[i] {
                    desc.push_str(&format!("{k}\t{d}\n"));
                }
            }
            write_file(&dir.join("desc.txt"), &desc)?;
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A triple with a binary validity label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub label: u8,
}

/// Balanced positive/negative set over arbitrary positives.
pub fn balanced_set(graph: &KnowledgeGraph, positives: &[Triple], seed: u64) -> Result<Vec<LabeledTriple>> {
    let mut out = Vec::with_capacity(positives.len() * 2);
    for (i, t) in positives.iter().enumerate() {
        out.push(LabeledTriple { triple: *t, label: 1 });
        let neg = graph.corrupt_tail(t, seed::derive(seed, i as u64))?;
        out.push(LabeledTriple { triple: neg, label: 0 });
    }
    Ok(out)
}

/// Entity-disjoint split: a fraction ρ of entities is held out of training.
#[derive(Clone, Debug)]
pub struct InductiveSplit {
    pub rho: f64,
    pub inductive_entities: HashSet<EntityId>,
    pub reduced_train: Vec<Triple>,
    /// Test triples whose entities all remain in training.
    pub seen: Vec<Triple>,
    /// Test triples touching at least one inductive entity.
    pub unseen: Vec<Triple>,
    /// All test triples.
    pub all: Vec<Triple>,
}

/// Stratum of a triple under an inductive split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    S,
    U,
}

impl InductiveSplit {
    pub fn stratum(&self, t: &Triple) -> Stratum {
        if self.inductive_entities.contains(&t.h) || self.inductive_entities.contains(&t.t) {
            Stratum::U
        } else {
            Stratum::S
        }
    }
}

/// Samples ⌊ρ·|E|⌋ entities uniformly without replacement as inductive and
/// removes every training triple that touches one of them.
pub fn make_inductive_split(graph: &KnowledgeGraph, rho: f64, seed: u64) -> Result<InductiveSplit> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("inductive rate must be in [0, 1), got {rho}")));
    }
    let n = graph.num_entities();
    let count = (rho * n as f64).floor() as usize;
    let mut rng = seed::rng(seed);
    let inductive: HashSet<EntityId> = index::sample(&mut rng, n, count)
        .into_iter()
        .map(|i| EntityId(i as u32))
        .collect();
    let touches = |t: &Triple| inductive.contains(&t.h) || inductive.contains(&t.t);
    let reduced_train = graph.train().iter().filter(|t| !touches(t)).copied().collect();
    let (unseen, seen): (Vec<Triple>, Vec<Triple>) = graph.test().iter().partition(|t| touches(t));
    Ok(InductiveSplit {
        rho,
        inductive_entities: inductive,
        reduced_train,
        seen,
        unseen,
        all: graph.test().to_vec(),
    })
}
