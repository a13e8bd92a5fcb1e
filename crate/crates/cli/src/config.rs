//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgsel::graph::DatasetPaths;
use kgsel::instance::{AnswerMode, InstanceConfig, Tier, TierConfig, STATEMENT_TEMPLATE};
use kgsel::kge::{KgeKind, KgeTrainConfig, NegativeMode};
use kgsel::optim::OptimizerKind;
use kgsel::policy::{PolicyConfig, SftConfig};
use kgsel::probe::ProbeConfig;
use kgsel::rl::GrpoConfig;
use kgsel::seed;
use kgsel::synth::SyntheticConfig;
use serde::{Deserialize, Serialize};

/// Prefix of environment overrides: `KGSEL_<SECTION>__<KEY>=<toml value>`.
pub const ENV_PREFIX: &str = "KGSEL_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub kge: KgeSection,
    pub instances: InstanceSection,
    pub policy: PolicySection,
    pub sft: SftSection,
    pub grpo: GrpoSection,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub smi: SmiSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out: PathBuf,
    pub deterministic: bool,
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset directory with train/valid/test/text (and optional desc) files.
    pub dir: Option<PathBuf>,
    pub name: String,
    pub synthetic_entities: usize,
    pub synthetic_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgeSection {
    pub kind: KgeKind,
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Sampled negatives per positive; 0 scores every entity (bilinear kinds).
    pub negatives: usize,
    pub margin: f64,
    pub regularization: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSection {
    pub k: usize,
    pub tiers: Vec<Tier>,
    pub mode: AnswerMode,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Non-answers scored per query; 0 scores all of them.
    pub pool: usize,
    pub per_query: usize,
    pub heldout_per_query: usize,
    pub seed: u64,
    pub heldout_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub layers: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub use_kge_score: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub std_floor: f64,
    pub temperature: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Policy layer to probe; 0 picks the middle layer.
    pub layer: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Retrieved candidates per query for reranking.
    pub n: usize,
    pub template: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmiSection {
    pub k: usize,
    pub shuffles: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub k_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub rho_values: Vec<f64>,
    /// Layers for layer-sweep; empty means all.
    pub layers: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out: PathBuf::from("runs/default"), deterministic: true, jobs: 0 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            dir: None,
            name: "synthetic".into(),
            synthetic_entities: 64,
            synthetic_seed: 7,
        }
    }
}

impl Default for KgeSection {
    fn default() -> Self {
        KgeSection {
            kind: KgeKind::DistMult,
            entity_dim: 32,
            relation_dim: 32,
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            negatives: 0,
            margin: 4.0,
            regularization: 0.0,
            label_smoothing: 0.1,
            seed: 1,
        }
    }
}

impl Default for InstanceSection {
    fn default() -> Self {
        InstanceSection {
            k: 4,
            tiers: Tier::ALL.to_vec(),
            mode: AnswerMode::Variable,
            q_lo: 0.25,
            q_hi: 0.75,
            pool: 0,
            per_query: 8,
            heldout_per_query: 1,
            seed: 3,
            heldout_seed: 99,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { layers: 4, width: 64, embed_dim: 32, use_kge_score: true, seed: 5 }
    }
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection { epochs: 2, batch_size: 32, lr: 0.003, seed: 1 }
    }
}

impl Default for GrpoSection {
    fn default() -> Self {
        GrpoSection {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 1.0,
            lr: 3e-4,
            std_floor: 1e-8,
            temperature: 1.0,
            iterations: 300,
            batch_size: 16,
            alpha: 0.1,
            seed: 1,
        }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { layer: 0, hidden: 32, epochs: 100, lr: 0.01, batch_size: 64, seed: 1 }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n: 15, template: STATEMENT_TEMPLATE.into(), seed: 1 }
    }
}

impl Default for SmiSection {
    fn default() -> Self {
        SmiSection { k: 3, shuffles: 100, seed: 0 }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k_values: vec![3, 4, 5, 6],
            n_values: vec![5, 10, 15, 20, 30],
            rho_values: vec![0.1, 0.2, 0.4],
            layers: vec![],
        }
    }
}

/// Documented defaults, printed by `kgsel config reference`.
pub const REFERENCE: &str = r#"# kgsel run configuration. Every key is optional; the values below are the
# defaults. Any key can be overridden from the environment as
# KGSEL_<SECTION>__<KEY>=<value>, e.g. KGSEL_GRPO__KL_BETA=0.5.

[run]
out = "runs/default"        # all artifacts and the manifest go here
deterministic = true        # fixed-order reductions; identical reruns
jobs = 0                    # worker threads, 0 = all cores

[data]
source = "synthetic"        # "synthetic" (bundled generator) or "dir"
# dir = "data/umls"         # train.txt valid.txt test.txt text.txt [desc.txt]
name = "synthetic"          # dataset name recorded in metrics
synthetic_entities = 64
synthetic_seed = 7

[kge]
kind = "DistMult"           # TransE | DistMult | ComplEx | RotatE | TuckER
entity_dim = 32
relation_dim = 32           # used by TuckER only
epochs = 200
batch_size = 64
lr = 0.01
optimizer = "adam"          # sgd | adagrad | adam
negatives = 0               # sampled negatives per positive, 0 = score all entities
margin = 4.0                # ranking margin (TransE, RotatE)
regularization = 0.0
label_smoothing = 0.1
seed = 1

[instances]
k = 4                       # options per instance
tiers = [1, 2, 3]           # 1 easy, 2 random, 3 hard
mode = "variable"           # "single" or "variable" number of positives
q_lo = 0.25                 # easy tier: scores below this quantile
q_hi = 0.75                 # hard tier: scores above this quantile
pool = 0                    # non-answers scored per query, 0 = all
per_query = 8               # training instances per (h, r) query
heldout_per_query = 1       # evaluation instances per query, freshly seeded
seed = 3
heldout_seed = 99

[policy]
layers = 4
width = 64
embed_dim = 32
use_kge_score = true        # feed the retriever score to the option encoder
seed = 5

[sft]
epochs = 2
batch_size = 32
lr = 0.003
seed = 1

[grpo]
group_size = 8
clip_eps = 0.2
kl_beta = 1.0
lr = 0.0003
std_floor = 1e-8
temperature = 1.0
iterations = 300
batch_size = 16
alpha = 0.1                 # weight of the format reward
seed = 1

[probe]
layer = 0                   # 0 = middle layer of the policy
hidden = 32
epochs = 100
lr = 0.01
batch_size = 64
seed = 1

[eval]
n = 15                      # candidates retrieved for reranking
template = "{head} {relation} {tail}. Is this statement correct?"
seed = 1

[smi]
k = 3                       # KSG neighbours
shuffles = 100              # label permutations for the null distribution
seed = 0

[sweep]
k_values = [3, 4, 5, 6]
n_values = [5, 10, 15, 20, 30]
rho_values = [0.1, 0.2, 0.4]
layers = []                 # layer-sweep layers, empty = all
"#;

impl RunConfig {
    /// Reads `path` (or the defaults) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let vars: Vec<(String, String)> = std::env::vars().collect();
        Self::from_toml_with_env(&text, &vars)
    }

    pub fn from_toml_with_env(text: &str, vars: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("parsing config")?;
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let Some((section, key)) = rest.split_once("__") else { continue };
            let (section, key) = (section.to_ascii_lowercase(), key.to_ascii_lowercase());
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.clone()));
            let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
            let Some(sec) = entry.as_table_mut() else { bail!("`{section}` is not a section") };
            sec.insert(key, parsed);
        }
        let cfg: RunConfig = table.try_into().context("config does not match the schema")?;
        Ok(cfg)
    }

    /// Every violated constraint, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        match self.data.source {
            DataSource::Dir => match &self.data.dir {
                None => need(false, "data.dir is required when data.source = \"dir\""),
                Some(d) => {
                    let p = DatasetPaths::in_dir(d);
                    for f in [&p.train, &p.valid, &p.test, &p.text] {
                        need(f.exists(), &format!("data file {} does not exist", f.display()));
                    }
                }
            },
            DataSource::Synthetic => need(self.data.synthetic_entities >= 8, "data.synthetic_entities must be at least 8"),
        }
        need(self.kge.entity_dim > 0, "kge.entity_dim must be positive");
        need(self.kge.epochs > 0, "kge.epochs must be positive");
        need(self.kge.lr > 0.0, "kge.lr must be positive");
        need(self.kge.batch_size > 0, "kge.batch_size must be positive");
        need(
            self.kge.negatives > 0 || self.kge.kind.is_bilinear(),
            "kge.negatives = 0 (score all entities) needs a bilinear kind (DistMult, ComplEx, TuckER)",
        );
        need((2..=26).contains(&self.instances.k), "instances.k must be in 2..=26");
        need(!self.instances.tiers.is_empty(), "instances.tiers must not be empty");
        need(
            0.0 < self.instances.q_lo && self.instances.q_lo < self.instances.q_hi && self.instances.q_hi < 1.0,
            "instances.q_lo < instances.q_hi must both lie in (0, 1)",
        );
        need(self.instances.per_query > 0, "instances.per_query must be positive");
        need(self.instances.heldout_per_query > 0, "instances.heldout_per_query must be positive");
        need(self.policy.layers >= 2, "policy.layers must be at least 2");
        need(self.policy.width > 0 && self.policy.embed_dim > 0, "policy.width and policy.embed_dim must be positive");
        need(self.sft.lr > 0.0 && self.sft.batch_size > 0, "sft.lr and sft.batch_size must be positive");
        need(self.grpo.group_size >= 2, "grpo.group_size must be at least 2");
        need(self.grpo.clip_eps > 0.0, "grpo.clip_eps must be positive");
        need(self.grpo.kl_beta >= 0.0, "grpo.kl_beta must be non-negative");
        need(self.grpo.std_floor > 0.0, "grpo.std_floor must be positive");
        need(self.grpo.temperature > 0.0, "grpo.temperature must be positive");
        need((0.0..=1.0).contains(&self.grpo.alpha), "grpo.alpha must lie in [0, 1]");
        need(self.probe.layer <= self.policy.layers, "probe.layer must not exceed policy.layers");
        need(self.probe.hidden > 0 && self.probe.epochs > 0, "probe.hidden and probe.epochs must be positive");
        need(self.eval.n > 0, "eval.n must be positive");
        need(self.smi.k > 0, "smi.k must be positive");
        need(self.sweep.k_values.iter().all(|k| (2..=26).contains(k)), "sweep.k_values must lie in 2..=26");
        need(self.sweep.n_values.iter().all(|&n| n > 0), "sweep.n_values must be positive");
        need(self.sweep.rho_values.iter().all(|r| (0.0..1.0).contains(r)), "sweep.rho_values must lie in [0, 1)");
        need(
            self.sweep.layers.iter().all(|&l| (1..=self.policy.layers).contains(&l)),
            "sweep.layers must lie in 1..=policy.layers",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  - {}", errs.join("\n  - "))
        }
    }

    /// Replaces every stage seed with a stream derived from `base`.
    pub fn reseed(&mut self, base: u64) {
        let s = |i: u64| seed::derive(base, i);
        self.kge.seed = s(1);
        self.instances.seed = s(2);
        self.instances.heldout_seed = s(3);
        self.policy.seed = s(4);
        self.sft.seed = s(5);
        self.grpo.seed = s(6);
        self.probe.seed = s(7);
        self.eval.seed = s(8);
        self.smi.seed = s(9);
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig { entities: self.data.synthetic_entities, seed: self.data.synthetic_seed, ..Default::default() }
    }

    pub fn kge_train(&self) -> KgeTrainConfig {
        let k = &self.kge;
        KgeTrainConfig {
            entity_dim: k.entity_dim,
            relation_dim: k.relation_dim,
            epochs: k.epochs,
            batch_size: k.batch_size,
            lr: k.lr,
            optimizer: k.optimizer,
            negatives: if k.negatives == 0 { NegativeMode::AllEntities } else { NegativeMode::Sampled(k.negatives) },
            margin: k.margin,
            regularization: k.regularization,
            label_smoothing: k.label_smoothing,
            seed: k.seed,
            deterministic: self.run.deterministic,
        }
    }

    pub fn instance_config(&self, k: usize, tiers: &[Tier], per_query: usize) -> InstanceConfig {
        InstanceConfig {
            k,
            tiers: tiers.to_vec(),
            mode: self.instances.mode,
            tier_config: TierConfig {
                q_lo: self.instances.q_lo,
                q_hi: self.instances.q_hi,
                pool: (self.instances.pool > 0).then_some(self.instances.pool),
            },
            per_query,
        }
    }

    pub fn policy_config(&self, k: usize) -> PolicyConfig {
        PolicyConfig {
            k,
            layers: self.policy.layers,
            width: self.policy.width,
            embed_dim: self.policy.embed_dim,
            use_kge_score: self.policy.use_kge_score,
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft.epochs,
            batch_size: self.sft.batch_size,
            lr: self.sft.lr,
            optimizer: OptimizerKind::Adam,
            seed: self.sft.seed,
            deterministic: self.run.deterministic,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let g = &self.grpo;
        GrpoConfig {
            group_size: g.group_size,
            clip_eps: g.clip_eps,
            kl_beta: g.kl_beta,
            lr: g.lr,
            std_floor: g.std_floor,
            temperature: g.temperature,
            iterations: g.iterations,
            inner_updates: 1,
            batch_size: g.batch_size,
            alpha: g.alpha,
            optimizer: OptimizerKind::Adam,
            seed: g.seed,
            deterministic: self.run.deterministic,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe.hidden,
            epochs: self.probe.epochs,
            lr: self.probe.lr,
            batch_size: self.probe.batch_size,
            val_fraction: 0.2,
            seed: self.probe.seed,
            deterministic: self.run.deterministic,
        }
    }

    pub fn probe_layer(&self) -> usize {
        if self.probe.layer == 0 {
            self.policy_config(self.instances.k).default_probe_layer()
        } else {
            self.probe.layer
        }
    }
}
