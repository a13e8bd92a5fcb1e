//! Pipeline stages. Each reads its upstream artifacts from the run
//! directory, writes its own, and records checksums in the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use kgsel::eval::{
    inductive_report, kge_link_predict, kge_triple_classify, layer_sweep, link_predict, triple_classify, KgeThresholds,
    LayerResult, MetricsReport,
};
use kgsel::graph::{balanced_set, load_graph, make_inductive_split, DatasetPaths, KnowledgeGraph, LabeledTriple, Split};
use kgsel::instance::{
    build_error_set, build_training_set, load_instances, save_instances, DiscriminativeInstance, Tier, TRAINING_TEMPLATE,
};
use kgsel::kge::{load_kge, save_kge, train_kge, KgeModel};
use kgsel::policy::{load_policy, save_policy, train_sft, SequencePolicy};
use kgsel::probe::{
    extract_representations, fit_probe, load_probe, load_representations, save_probe, save_representations, PolicyProvider,
    ProbeClassifier, RepresentationMatrix,
};
use kgsel::rl::{evaluate_greedy, grpo_train, RewardSummary};
use kgsel::smi::{permutation_null, task_smi, SmiReport};
use kgsel::synth::synthetic_graph;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::manifest::{config_hash, sha256_file, write_atomic, RunManifest, StageRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    K,
    N,
    Tier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainKge,
    BuildInstances,
    Sft,
    Grpo,
    ExtractReps,
    TrainProbe,
    EvalLp,
    EvalTc,
    Smi,
    LayerSweep,
    Inductive,
    Sweep(SweepKind),
}

/// Stages run by `kgsel run`, in dependency order.
pub const PIPELINE: [Stage; 12] = [
    Stage::Ingest,
    Stage::TrainKge,
    Stage::BuildInstances,
    Stage::Sft,
    Stage::Grpo,
    Stage::ExtractReps,
    Stage::TrainProbe,
    Stage::EvalLp,
    Stage::EvalTc,
    Stage::Smi,
    Stage::LayerSweep,
    Stage::Inductive,
];

const GRAPH_FILES: [&str; 4] = ["graph/train.txt", "graph/valid.txt", "graph/test.txt", "graph/text.txt"];
const GRAPH_DESC: &str = "graph/desc.txt";
const KGE: &str = "kge/model.ckpt";
const TRAIN_INSTANCES: &str = "instances/train.jsonl";
const HELDOUT_INSTANCES: &str = "instances/heldout.jsonl";
const ERROR_INSTANCES: &str = "instances/error.jsonl";
const SFT_POLICY: &str = "policy/sft.ckpt";
const GRPO_POLICY: &str = "policy/grpo.ckpt";
const PROBE: &str = "probe/probe.ckpt";
const REP_SETS: [&str; 3] = ["train", "valid", "test"];

fn rep_paths(set: &str) -> (String, String) {
    (format!("reps/{set}_z.txt"), format!("reps/{set}_y.txt"))
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainKge => "train-kge",
            Stage::BuildInstances => "build-instances",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::ExtractReps => "extract-reps",
            Stage::TrainProbe => "train-probe",
            Stage::EvalLp => "eval-lp",
            Stage::EvalTc => "eval-tc",
            Stage::Smi => "smi",
            Stage::LayerSweep => "layer-sweep",
            Stage::Inductive => "inductive",
            Stage::Sweep(SweepKind::K) => "sweep-k",
            Stage::Sweep(SweepKind::N) => "sweep-n",
            Stage::Sweep(SweepKind::Tier) => "sweep-tier",
        }
    }

    /// Command line that produces this stage's artifacts.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Sweep(SweepKind::K) => "sweep k",
            Stage::Sweep(SweepKind::N) => "sweep n",
            Stage::Sweep(SweepKind::Tier) => "sweep tier",
            s => s.name(),
        }
    }

    /// Upstream artifacts, each with the stage that produces it.
    fn requires(self) -> Vec<(String, Stage)> {
        let graph = || GRAPH_FILES.iter().map(|f| (f.to_string(), Stage::Ingest)).collect::<Vec<_>>();
        let kge = || (KGE.to_string(), Stage::TrainKge);
        let reps = |sets: &[&str]| -> Vec<(String, Stage)> {
            sets.iter()
                .flat_map(|s| {
                    let (z, y) = rep_paths(s);
                    [(z, Stage::ExtractReps), (y, Stage::ExtractReps)]
                })
                .collect()
        };
        let mut v = match self {
            Stage::Ingest => vec![],
            Stage::TrainKge | Stage::Inductive => graph(),
            Stage::BuildInstances => [graph(), vec![kge()]].concat(),
            Stage::Sft => [
                graph(),
                vec![(TRAIN_INSTANCES.into(), Stage::BuildInstances), (HELDOUT_INSTANCES.into(), Stage::BuildInstances)],
            ]
            .concat(),
            Stage::Grpo => [
                graph(),
                vec![
                    (TRAIN_INSTANCES.into(), Stage::BuildInstances),
                    (HELDOUT_INSTANCES.into(), Stage::BuildInstances),
                    (ERROR_INSTANCES.into(), Stage::Sft),
                    (SFT_POLICY.into(), Stage::Sft),
                ],
            ]
            .concat(),
            Stage::ExtractReps => [graph(), vec![kge(), (GRPO_POLICY.into(), Stage::Grpo)]].concat(),
            Stage::TrainProbe => reps(&["train", "valid"]),
            Stage::EvalLp | Stage::EvalTc | Stage::Sweep(SweepKind::N) => {
                [graph(), vec![kge(), (GRPO_POLICY.into(), Stage::Grpo), (PROBE.into(), Stage::TrainProbe)]].concat()
            }
            Stage::Smi => [reps(&["test"]), vec![(PROBE.into(), Stage::TrainProbe)]].concat(),
            Stage::LayerSweep => [graph(), vec![kge(), (GRPO_POLICY.into(), Stage::Grpo)]].concat(),
            Stage::Sweep(SweepKind::K) => [graph(), vec![kge()]].concat(),
            Stage::Sweep(SweepKind::Tier) => [graph(), vec![kge(), (GRPO_POLICY.into(), Stage::Grpo)]].concat(),
        };
        if !matches!(self, Stage::Ingest | Stage::TrainProbe | Stage::Smi) {
            v.push((GRAPH_DESC.into(), Stage::Ingest));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Files written by one stage.
#[derive(Default)]
struct Written {
    files: Vec<String>,
    metrics: Vec<String>,
}

impl Written {
    fn file(&mut self, rel: &str) {
        self.files.push(rel.to_string());
    }

    fn metric(&mut self, rel: &str) {
        self.files.push(rel.to_string());
        self.metrics.push(rel.to_string());
    }
}

pub struct Runner {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    manifest: RunManifest,
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset: String,
    entities: usize,
    relations: usize,
    train: usize,
    valid: usize,
    test: usize,
    duplicates_removed: [usize; 3],
}

#[derive(Serialize)]
struct InstanceSummary {
    train: usize,
    heldout: usize,
    k: usize,
    mean_positives: f64,
}

#[derive(Serialize)]
struct SftSummary {
    epochs: usize,
    final_loss: Option<f64>,
    heldout: RewardSummary,
    train: RewardSummary,
    error_set: usize,
}

#[derive(Serialize)]
struct GrpoSummary {
    iterations: usize,
    heldout_before: RewardSummary,
    heldout: RewardSummary,
    train: RewardSummary,
    error_set_before: usize,
    /// Instances of the pre-GRPO error set still answered wrongly.
    error_set_after: usize,
    /// Training instances answered wrongly after GRPO.
    train_errors_after: usize,
}

#[derive(Serialize)]
struct ProbeSummary {
    layer: usize,
    train_size: usize,
    valid_size: usize,
    train_accuracy: f64,
    val_accuracy: f64,
    best_epoch: usize,
    threshold: f64,
}

#[derive(Serialize)]
struct SmiSummary {
    report: SmiReport,
    shuffles: usize,
    null_mean: Option<f64>,
    null_p95: Option<f64>,
}

#[derive(Serialize)]
struct InductiveRow {
    rho: f64,
    inductive_entities: usize,
    reduced_train: usize,
    report: MetricsReport,
}

/// 95th percentile by the nearest-rank rule.
pub fn percentile95(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

impl Runner {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        let out = cfg.run.out.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut manifest = RunManifest::load(&out)?;
        manifest.config = Some(cfg.clone());
        Ok(Runner { cfg, out, force, manifest })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&self, w: &mut Written, rel: &str, text: &str, metric: bool) -> Result<()> {
        write_atomic(&self.path(rel), text.as_bytes())?;
        if metric {
            w.metric(rel);
        } else {
            w.file(rel);
        }
        Ok(())
    }

    fn ensure_dir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))
    }

    /// Runs `stage` unless the manifest shows it current.
    pub fn run(&mut self, stage: Stage) -> Result<Outcome> {
        let mut inputs = std::collections::BTreeMap::new();
        for (rel, producer) in stage.requires() {
            let p = self.path(&rel);
            if p.exists() {
                inputs.insert(rel, sha256_file(&p)?);
            } else if rel != GRAPH_DESC {
                bail!(
                    "`{}` needs {} which does not exist; run `kgsel {}` first",
                    stage.command(),
                    p.display(),
                    producer.command()
                );
            }
        }
        let hash = config_hash(&self.cfg);
        if !self.force && self.manifest.is_current(&self.out, stage.name(), &hash) {
            let rec = &self.manifest.stages[stage.name()];
            if rec.inputs == inputs {
                log::info!("{}: up to date", stage.name());
                return Ok(Outcome::UpToDate);
            }
        }
        let start = Instant::now();
        let mut w = Written::default();
        match stage {
            Stage::Ingest => self.ingest(&mut w)?,
            Stage::TrainKge => self.train_kge(&mut w)?,
            Stage::BuildInstances => self.build_instances(&mut w)?,
            Stage::Sft => self.sft(&mut w)?,
            Stage::Grpo => self.grpo(&mut w)?,
            Stage::ExtractReps => self.extract_reps(&mut w)?,
            Stage::TrainProbe => self.train_probe(&mut w)?,
            Stage::EvalLp => self.eval_lp(&mut w)?,
            Stage::EvalTc => self.eval_tc(&mut w)?,
            Stage::Smi => self.smi(&mut w)?,
            Stage::LayerSweep => self.layer_sweep(&mut w)?,
            Stage::Inductive => self.inductive(&mut w)?,
            Stage::Sweep(kind) => self.sweep(kind, &mut w)?,
        }
        let seconds = start.elapsed().as_secs_f64();
        let mut outputs = std::collections::BTreeMap::new();
        for rel in &w.files {
            outputs.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord { config_hash: hash, inputs, outputs, metrics: w.metrics, seconds },
        );
        self.manifest.save(&self.out)?;
        log::info!("{}: done in {seconds:.1}s", stage.name());
        Ok(Outcome::Ran)
    }

    pub fn run_pipeline(&mut self) -> Result<Vec<(Stage, Outcome)>> {
        PIPELINE.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    // -----------------------------------------------------------------------
    // Loading helpers

    fn graph(&self) -> Result<KnowledgeGraph> {
        Ok(load_graph(&DatasetPaths::in_dir(self.path("graph")))?.0)
    }

    fn kge(&self, g: &KnowledgeGraph) -> Result<KgeModel> {
        Ok(load_kge(self.path(KGE), Some(g))?)
    }

    fn instances(&self, rel: &str, g: &KnowledgeGraph) -> Result<Vec<DiscriminativeInstance>> {
        Ok(load_instances(self.path(rel), g, TRAINING_TEMPLATE)?)
    }

    fn policy(&self, rel: &str) -> Result<SequencePolicy> {
        Ok(load_policy(self.path(rel))?)
    }

    fn probe(&self) -> Result<ProbeClassifier> {
        Ok(load_probe(self.path(PROBE))?)
    }

    fn reps(&self, set: &str) -> Result<RepresentationMatrix> {
        let (z, y) = rep_paths(set);
        Ok(load_representations(self.path(&z), self.path(&y))?)
    }

    fn tag(&self, mut r: MetricsReport, seed: u64) -> MetricsReport {
        r.dataset = self.cfg.data.name.clone();
        r.seed = seed;
        r
    }

    /// Balanced labeled sets over the train, valid and test positives.
    fn labeled_sets(&self, g: &KnowledgeGraph) -> Result<[Vec<LabeledTriple>; 3]> {
        let s = self.cfg.eval.seed;
        Ok([
            balanced_set(g, g.split(Split::Train), kgsel::seed::derive(s, 0))?,
            balanced_set(g, g.split(Split::Valid), kgsel::seed::derive(s, 1))?,
            balanced_set(g, g.split(Split::Test), kgsel::seed::derive(s, 2))?,
        ])
    }

    fn error_set(policy: &SequencePolicy, set: &[DiscriminativeInstance]) -> Vec<DiscriminativeInstance> {
        build_error_set(&|i: &DiscriminativeInstance| policy.answer_text(i).unwrap_or_default(), set)
    }

    // -----------------------------------------------------------------------
    // Stages

    fn ingest(&self, w: &mut Written) -> Result<()> {
        let (g, report) = match self.cfg.data.source {
            DataSource::Synthetic => (synthetic_graph(&self.cfg.synthetic())?, Default::default()),
            DataSource::Dir => {
                let dir = self.cfg.data.dir.as_ref().context("data.dir is not set")?;
                load_graph(&DatasetPaths::in_dir(dir))?
            }
        };
        g.save(self.path("graph"))?;
        for f in GRAPH_FILES {
            w.file(f);
        }
        if self.path(GRAPH_DESC).exists() {
            w.file(GRAPH_DESC);
        }
        let st = g.stats();
        let summary = DatasetSummary {
            dataset: self.cfg.data.name.clone(),
            entities: st.entities,
            relations: st.relations,
            train: st.train,
            valid: st.valid,
            test: st.test,
            duplicates_removed: report.duplicates_removed,
        };
        self.write(w, "metrics/dataset.json", &json(&summary), true)
    }

    fn train_kge(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let (model, losses) = train_kge(&g, self.cfg.kge.kind, &self.cfg.kge_train())?;
        self.ensure_dir("kge")?;
        save_kge(&model, self.path(KGE))?;
        w.file(KGE);
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{l}", i + 1);
        }
        self.write(w, "kge/loss.csv", &csv, false)?;
        let (lp, _) = kge_link_predict(&model, &g, g.split(Split::Test))?;
        self.write(w, "metrics/kge_link_prediction.json", &json(&self.tag(lp, self.cfg.kge.seed)), true)?;
        let [train, valid, test] = self.labeled_sets(&g)?;
        let tuning = if valid.is_empty() { &train } else { &valid };
        let (tc, thresholds) = kge_triple_classify(&model, tuning, &test)?;
        self.write(w, "metrics/kge_triple_classification.json", &json(&self.tag(tc, self.cfg.kge.seed)), true)?;
        self.write(w, "kge/thresholds.json", &json::<KgeThresholds>(&thresholds), false)
    }

    fn build_instances(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let ic = &self.cfg.instances;
        let train = build_training_set(&g, &kge, &self.cfg.instance_config(ic.k, &ic.tiers, ic.per_query), ic.seed)?;
        let held =
            build_training_set(&g, &kge, &self.cfg.instance_config(ic.k, &ic.tiers, ic.heldout_per_query), ic.heldout_seed)?;
        self.ensure_dir("instances")?;
        save_instances(self.path(TRAIN_INSTANCES), &g, &train)?;
        w.file(TRAIN_INSTANCES);
        save_instances(self.path(HELDOUT_INSTANCES), &g, &held)?;
        w.file(HELDOUT_INSTANCES);
        let positives: usize = train.iter().map(|i| i.e_pos.len()).sum();
        let summary = InstanceSummary {
            train: train.len(),
            heldout: held.len(),
            k: ic.k,
            mean_positives: positives as f64 / train.len().max(1) as f64,
        };
        self.write(w, "metrics/instances.json", &json(&summary), true)
    }

    fn fresh_policy(&self, g: &KnowledgeGraph, k: usize, train: &[DiscriminativeInstance]) -> Result<SequencePolicy> {
        let mut p = SequencePolicy::new(self.cfg.policy_config(k), g.num_entities(), g.num_relations(), self.cfg.policy.seed)?;
        p.fit_score_normalization(train);
        Ok(p)
    }

    fn sft(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let train = self.instances(TRAIN_INSTANCES, &g)?;
        let held = self.instances(HELDOUT_INSTANCES, &g)?;
        let mut policy = self.fresh_policy(&g, self.cfg.instances.k, &train)?;
        let losses = train_sft(&mut policy, &train, &self.cfg.sft_config())?;
        self.ensure_dir("policy")?;
        save_policy(&policy, self.path(SFT_POLICY))?;
        w.file(SFT_POLICY);
        let errors = Self::error_set(&policy, &train);
        save_instances(self.path(ERROR_INSTANCES), &g, &errors)?;
        w.file(ERROR_INSTANCES);
        let alpha = self.cfg.grpo.alpha;
        let summary = SftSummary {
            epochs: self.cfg.sft.epochs,
            final_loss: losses.last().copied(),
            heldout: evaluate_greedy(&policy, &held, alpha)?,
            train: evaluate_greedy(&policy, &train, alpha)?,
            error_set: errors.len(),
        };
        self.write(w, "metrics/sft.json", &json(&summary), true)
    }

    fn grpo(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let train = self.instances(TRAIN_INSTANCES, &g)?;
        let held = self.instances(HELDOUT_INSTANCES, &g)?;
        let errors = self.instances(ERROR_INSTANCES, &g)?;
        let sft = self.policy(SFT_POLICY)?;
        let alpha = self.cfg.grpo.alpha;
        let heldout_before = evaluate_greedy(&sft, &held, alpha)?;
        let mut policy = sft.clone();
        let mut csv = String::from("iter,mean_reward,mean_r_fmt,mean_r_acc,kl,loss\n");
        if errors.is_empty() {
            log::warn!("the SFT error set is empty; GRPO leaves the policy unchanged");
        } else {
            for r in grpo_train(&mut policy, &errors, Some(&sft), &self.cfg.grpo_config())? {
                let _ = writeln!(csv, "{},{},{},{},{},{}", r.iter, r.mean_reward, r.mean_r_fmt, r.mean_r_acc, r.kl, r.loss);
            }
        }
        save_policy(&policy, self.path(GRPO_POLICY))?;
        w.file(GRPO_POLICY);
        self.write(w, "policy/grpo_log.csv", &csv, false)?;
        let summary = GrpoSummary {
            iterations: if errors.is_empty() { 0 } else { self.cfg.grpo.iterations },
            heldout_before,
            heldout: evaluate_greedy(&policy, &held, alpha)?,
            train: evaluate_greedy(&policy, &train, alpha)?,
            error_set_before: errors.len(),
            error_set_after: Self::error_set(&policy, &errors).len(),
            train_errors_after: Self::error_set(&policy, &train).len(),
        };
        self.write(w, "metrics/grpo.json", &json(&summary), true)
    }

    fn extract_reps(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let policy = self.policy(GRPO_POLICY)?;
        let provider = PolicyProvider { policy: &policy, kge: Some(&kge) };
        let layer = self.cfg.probe_layer();
        self.ensure_dir("reps")?;
        for (set, labeled) in REP_SETS.iter().zip(self.labeled_sets(&g)?) {
            let m = extract_representations(&provider, &g, &labeled, layer, &self.cfg.eval.template)?;
            let (z, y) = rep_paths(set);
            save_representations(&m, self.path(&z), self.path(&y))?;
            w.file(&z);
            w.file(&y);
        }
        Ok(())
    }

    fn train_probe(&self, w: &mut Written) -> Result<()> {
        let train = self.reps("train")?;
        let valid = self.reps("valid")?;
        let (probe, rep) = fit_probe(&train, &valid, &self.cfg.probe_config())?;
        self.ensure_dir("probe")?;
        save_probe(&probe, self.path(PROBE))?;
        w.file(PROBE);
        let summary = ProbeSummary {
            layer: train.layer,
            train_size: train.len(),
            valid_size: valid.len(),
            train_accuracy: rep.train_accuracy,
            val_accuracy: rep.val_accuracy,
            best_epoch: rep.best_epoch,
            threshold: rep.threshold,
        };
        self.write(w, "metrics/probe.json", &json(&summary), true)
    }

    fn eval_lp(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let policy = self.policy(GRPO_POLICY)?;
        let probe = self.probe()?;
        let provider = PolicyProvider { policy: &policy, kge: Some(&kge) };
        let (r, _) = link_predict(
            &kge,
            &probe,
            &provider,
            &g,
            g.split(Split::Test),
            self.cfg.eval.n,
            self.cfg.probe_layer(),
            &self.cfg.eval.template,
        )?;
        self.write(w, "metrics/link_prediction.json", &json(&self.tag(r, self.cfg.eval.seed)), true)
    }

    fn eval_tc(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let policy = self.policy(GRPO_POLICY)?;
        let probe = self.probe()?;
        let provider = PolicyProvider { policy: &policy, kge: Some(&kge) };
        let [_, _, test] = self.labeled_sets(&g)?;
        let r = triple_classify(&probe, &provider, &g, &test, self.cfg.probe_layer(), probe.threshold, &self.cfg.eval.template)?;
        self.write(w, "metrics/triple_classification.json", &json(&self.tag(r, self.cfg.eval.seed)), true)
    }

    fn smi(&self, w: &mut Written) -> Result<()> {
        let z = self.reps("test")?;
        let probe = self.probe()?;
        let s = &self.cfg.smi;
        let report = task_smi(&probe, &z, s.k, s.seed)?;
        let null = permutation_null(&probe, &z, s.shuffles, s.k, kgsel::seed::derive(s.seed, 1))?;
        let mut csv = String::from("dimension,mi\n");
        for (i, m) in report.per_dim_mi.iter().enumerate() {
            let _ = writeln!(csv, "{i},{m}");
        }
        let summary = SmiSummary {
            null_mean: (!null.is_empty()).then(|| null.iter().sum::<f64>() / null.len() as f64),
            null_p95: percentile95(&null),
            shuffles: s.shuffles,
            report,
        };
        self.write(w, "metrics/smi.json", &json(&summary), true)?;
        self.write(w, "metrics/smi.csv", &csv, true)
    }

    fn layer_sweep(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let policy = self.policy(GRPO_POLICY)?;
        let provider = PolicyProvider { policy: &policy, kge: Some(&kge) };
        let [train, valid, test] = self.labeled_sets(&g)?;
        let layers: Vec<usize> =
            if self.cfg.sweep.layers.is_empty() { (1..=self.cfg.policy.layers).collect() } else { self.cfg.sweep.layers.clone() };
        let rows = layer_sweep(&provider, &g, &train, &valid, &test, &layers, &self.cfg.probe_config(), &self.cfg.eval.template)?;
        let mut csv = String::from("layer,accuracy,val_accuracy,threshold\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.layer, r.accuracy, r.val_accuracy, r.threshold);
        }
        self.write(w, "metrics/layer_sweep.csv", &csv, true)?;
        self.write(w, "metrics/layer_sweep.json", &json::<Vec<LayerResult>>(&rows), true)
    }

    fn inductive(&self, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let [_, valid, test] = self.labeled_sets(&g)?;
        let mut rows = Vec::new();
        for (i, &rho) in self.cfg.sweep.rho_values.iter().enumerate() {
            let split = make_inductive_split(&g, rho, kgsel::seed::derive(self.cfg.eval.seed, 100 + i as u64))?;
            let reduced = g.with_splits(split.reduced_train.clone(), g.split(Split::Valid).to_vec(), split.all.clone());
            let (kge, _) = train_kge(&reduced, self.cfg.kge.kind, &self.cfg.kge_train())?;
            let thresholds = KgeThresholds::fit(&kge, &valid);
            let report = inductive_report(
                &split,
                &test,
                |lt| lt.triple,
                |items| {
                    let correct = items
                        .iter()
                        .filter(|lt| {
                            let t = lt.triple;
                            u8::from(kge.score(t.h, t.r, t.t) >= thresholds.threshold(t.r)) == lt.label
                        })
                        .count();
                    Ok(MetricsReport::from_accuracy("triple_classification", correct, items.len())?)
                },
            )?;
            rows.push(InductiveRow {
                rho,
                inductive_entities: split.inductive_entities.len(),
                reduced_train: split.reduced_train.len(),
                report: self.tag(report, self.cfg.eval.seed),
            });
        }
        self.write(w, "metrics/inductive.json", &json(&rows), true)
    }

    fn sweep(&self, kind: SweepKind, w: &mut Written) -> Result<()> {
        let g = self.graph()?;
        let kge = self.kge(&g)?;
        let ic = &self.cfg.instances;
        let alpha = self.cfg.grpo.alpha;
        match kind {
            SweepKind::K => {
                let mut csv = String::from("k,train,heldout,mean_reward,exact\n");
                for &k in &self.cfg.sweep.k_values {
                    let train = build_training_set(&g, &kge, &self.cfg.instance_config(k, &ic.tiers, ic.per_query), ic.seed)?;
                    let held = build_training_set(
                        &g,
                        &kge,
                        &self.cfg.instance_config(k, &ic.tiers, ic.heldout_per_query),
                        ic.heldout_seed,
                    )?;
                    let mut policy = self.fresh_policy(&g, k, &train)?;
                    train_sft(&mut policy, &train, &self.cfg.sft_config())?;
                    let r = evaluate_greedy(&policy, &held, alpha)?;
                    let _ = writeln!(csv, "{k},{},{},{},{}", train.len(), held.len(), r.mean_total, r.exact);
                }
                self.write(w, "metrics/sweep_k.csv", &csv, true)
            }
            SweepKind::N => {
                let policy = self.policy(GRPO_POLICY)?;
                let probe = self.probe()?;
                let provider = PolicyProvider { policy: &policy, kge: Some(&kge) };
                let mut csv = String::from("n,mrr,hits1,hits3,hits10,fallback_fraction\n");
                for &n in &self.cfg.sweep.n_values {
                    let (r, _) = link_predict(
                        &kge,
                        &probe,
                        &provider,
                        &g,
                        g.split(Split::Test),
                        n,
                        self.cfg.probe_layer(),
                        &self.cfg.eval.template,
                    )?;
                    let f = |x: Option<f64>| x.unwrap_or(f64::NAN);
                    let _ = writeln!(
                        csv,
                        "{n},{},{},{},{},{}",
                        f(r.mrr),
                        f(r.hits1),
                        f(r.hits3),
                        f(r.hits10),
                        f(r.fallback_fraction)
                    );
                }
                self.write(w, "metrics/sweep_n.csv", &csv, true)
            }
            SweepKind::Tier => {
                let policy = self.policy(GRPO_POLICY)?;
                let mut csv = String::from("tier,heldout,mean_reward,exact\n");
                for tier in Tier::ALL {
                    let held =
                        build_training_set(&g, &kge, &self.cfg.instance_config(ic.k, &[tier], ic.heldout_per_query), ic.heldout_seed)?;
                    let r = evaluate_greedy(&policy, &held, alpha)?;
                    let _ = writeln!(csv, "{},{},{},{}", tier as u8, held.len(), r.mean_total, r.exact);
                }
                self.write(w, "metrics/sweep_tier.csv", &csv, true)
            }
        }
    }
}

/// Paths of every metrics file recorded in the manifest under `out`.
pub fn metric_files(out: &Path) -> Result<Vec<PathBuf>> {
    let m = RunManifest::load(out)?;
    let mut v: Vec<PathBuf> = m.stages.values().flat_map(|s| s.metrics.iter().map(|p| out.join(p))).collect();
    v.sort();
    Ok(v)
}
