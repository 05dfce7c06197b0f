//! End-to-end pipeline and run-directory orchestration.
//!
//! A run directory holds `config.toml` (the effective configuration),
//! `manifest.toml` (every artifact and the command that produced it), one
//! `metrics_<command>.csv` per command, checkpoints and reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    bundle_from_checkpoint, bundle_to_checkpoint, models_from_checkpoint, models_to_checkpoint, policy_checkpoint,
    policy_from_checkpoint, Checkpoint, Entry,
};
use crate::config::RunConfig;
use crate::dataset::{collect_epsilon_greedy, collect_vine, split_and_freeze, TransitionDataset};
use crate::envsim::GridSide;
use crate::epimodel::EpiModels;
use crate::error::{Error, Result};
use crate::eval::{
    default_sweep_values, embedding_separation_score, evaluate, export_embeddings, silhouette_score, sweep_parameter,
    sweep_svg, write_report_csv, write_sweep_csv, EvalReport, MetricKind,
};
use crate::policy::GaussianPolicy;
use crate::rng;
use crate::training::{
    train_baseline, train_epi, train_task, BaselineKind, EpiArtifacts, Metrics, PolicyBundle, ProbeActions, Setting,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EpiVariant {
    Full,
    NoVine,
    NoSeparation,
    NoVineNoSeparation,
    /// The full probing policy and embedding, with the task episode
    /// continuing from the post-probe state.
    NoReset,
}

impl EpiVariant {
    pub fn name(self) -> &'static str {
        match self {
            EpiVariant::Full => "epi",
            EpiVariant::NoVine => "epi_no_vine",
            EpiVariant::NoSeparation => "epi_no_separation",
            EpiVariant::NoVineNoSeparation => "epi_no_vine_no_separation",
            EpiVariant::NoReset => "epi_no_reset",
        }
    }

    /// `(use_vine, use_separation)` of the probing stage.
    fn probe_flags(self, cfg: &TrainConfig) -> (bool, bool) {
        match self {
            EpiVariant::Full | EpiVariant::NoReset => (cfg.use_vine, cfg.use_separation),
            EpiVariant::NoVine => (false, cfg.use_separation),
            EpiVariant::NoSeparation => (cfg.use_vine, false),
            EpiVariant::NoVineNoSeparation => (false, false),
        }
    }

    fn reset_after_probe(self, cfg: &TrainConfig) -> bool {
        match self {
            EpiVariant::NoReset => false,
            _ => cfg.reset_after_probe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline(BaselineKind),
    Epi(EpiVariant),
}

impl Method {
    /// Row order of the comparison table.
    pub const TABLE1: [Method; 13] = [
        Method::Baseline(BaselineKind::Simple),
        Method::Baseline(BaselineKind::Invariant),
        Method::Baseline(BaselineKind::RandomInteraction),
        Method::Baseline(BaselineKind::History),
        Method::Baseline(BaselineKind::Recurrent),
        Method::Baseline(BaselineKind::SystemId),
        Method::Baseline(BaselineKind::DirectReward),
        Method::Epi(EpiVariant::Full),
        Method::Epi(EpiVariant::NoVine),
        Method::Epi(EpiVariant::NoSeparation),
        Method::Epi(EpiVariant::NoVineNoSeparation),
        Method::Baseline(BaselineKind::Oracle),
        Method::Epi(EpiVariant::NoReset),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline(k) => k.name(),
            Method::Epi(v) => v.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::TABLE1
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Evaluation seeds derived from the master seed.
pub fn eval_seeds(cfg: &RunConfig) -> Vec<u64> {
    let base = rng::derive(cfg.training.seed, rng::tag("eval_seeds"));
    (0..cfg.eval.seeds as u64).map(|i| rng::derive(base, i)).collect()
}

/// The seed policy is the simple baseline: trained on the center cell only.
pub fn pretrain_seed(cfg: &RunConfig, setting: &Setting, metrics: &mut Metrics) -> Result<GaussianPolicy> {
    match train_baseline(BaselineKind::Simple, &cfg.training, setting, metrics)? {
        PolicyBundle::Plain(p) => Ok(p),
        _ => unreachable!("the simple baseline is a plain policy"),
    }
}

pub fn collect_dataset(cfg: &RunConfig, setting: &Setting, seed_policy: &GaussianPolicy) -> Result<TransitionDataset> {
    let d = &cfg.dataset;
    let s = rng::derive(cfg.training.seed, rng::tag("dataset"));
    let mut tr = collect_epsilon_greedy(
        seed_policy,
        &setting.grid,
        d.transitions,
        d.epsilon,
        setting.dt,
        setting.episode_limit,
        rng::derive(s, 0),
    )?;
    if d.vine_anchors > 0 {
        tr.extend(collect_vine(
            seed_policy,
            &setting.grid,
            d.vine_anchors,
            setting.dt,
            setting.episode_limit,
            rng::derive(s, 1),
        )?);
    }
    split_and_freeze(&setting.grid, tr, d.val_fraction, rng::derive(s, 2))
}

pub fn epi_stage(
    cfg: &RunConfig,
    setting: &Setting,
    dataset: &TransitionDataset,
    seed_policy: Option<&GaussianPolicy>,
    metrics: &mut Metrics,
) -> Result<EpiArtifacts> {
    let init = if cfg.training.epi_warm_start {
        Some(seed_policy.ok_or_else(|| Error::invalid("warm start requested without a seed policy"))?)
    } else {
        None
    };
    train_epi(&cfg.training, &cfg.epimodel, dataset, setting, init, metrics)
}

pub struct MethodResult {
    pub method: Method,
    pub bundle: PolicyBundle,
    pub report: EvalReport,
}

pub struct PipelineOutput {
    pub seed_policy: Option<GaussianPolicy>,
    pub dataset: Option<TransitionDataset>,
    /// Probing stages keyed by `(use_vine, use_separation)`.
    pub epi: BTreeMap<(bool, bool), EpiArtifacts>,
    pub results: Vec<MethodResult>,
    pub metrics: Metrics,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl PipelineOutput {
    pub fn result(&self, m: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == m)
    }

    pub fn full_epi(&self, cfg: &TrainConfig) -> Option<&EpiArtifacts> {
        self.epi.get(&(cfg.use_vine, cfg.use_separation))
    }
}

/// Trains every method in `methods` under one master seed and evaluates it
/// on the held-out grid.
pub fn run_methods(cfg: &RunConfig, methods: &[Method], seeds: &[u64]) -> Result<PipelineOutput> {
    cfg.validate()?;
    let setting = cfg.env.setting()?;
    let mut metrics = Metrics::default();
    let mut timings = Vec::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = std::time::Instant::now();
    };
    let any_epi = methods.iter().any(|m| matches!(m, Method::Epi(_)));
    let needs_seed = any_epi || methods.contains(&Method::Baseline(BaselineKind::Simple));
    let seed_policy = if needs_seed {
        let mut m = Metrics::default();
        let p = pretrain_seed(cfg, &setting, &mut m)?;
        metrics.extend(m.prefixed("seed_policy"));
        lap("seed_policy", &mut timings);
        Some(p)
    } else {
        None
    };
    let dataset = if any_epi {
        let ds = collect_dataset(cfg, &setting, seed_policy.as_ref().expect("trained above"))?;
        lap("dataset", &mut timings);
        Some(ds)
    } else {
        None
    };
    let mut epi: BTreeMap<(bool, bool), EpiArtifacts> = BTreeMap::new();
    let mut results = Vec::new();
    for &method in methods {
        log::info!("training {}", method.name());
        let mut m = Metrics::default();
        let bundle = match method {
            Method::Baseline(BaselineKind::Simple) => PolicyBundle::Plain(seed_policy.clone().expect("trained above")),
            Method::Baseline(kind) => train_baseline(kind, &cfg.training, &setting, &mut m)?,
            Method::Epi(v) => {
                let (use_vine, use_separation) = v.probe_flags(&cfg.training);
                if !epi.contains_key(&(use_vine, use_separation)) {
                    let mut c = cfg.clone();
                    c.training.use_vine = use_vine;
                    c.training.use_separation = use_separation;
                    let mut pm = Metrics::default();
                    let art = epi_stage(&c, &setting, dataset.as_ref().expect("collected above"), seed_policy.as_ref(), &mut pm)?;
                    metrics.extend(pm.prefixed(&format!("{}_probe", v.name())));
                    epi.insert((use_vine, use_separation), art);
                    lap(&format!("{}_probe", v.name()), &mut timings);
                }
                let art = &epi[&(use_vine, use_separation)];
                let mut c = cfg.training.clone();
                c.use_vine = use_vine;
                c.use_separation = use_separation;
                c.reset_after_probe = v.reset_after_probe(&cfg.training);
                let task = train_task(&c, &art.policy, &art.models, &setting, &mut m)?;
                PolicyBundle::Epi {
                    probe: art.policy.clone(),
                    models: art.models.clone(),
                    task,
                    reset_after_probe: c.reset_after_probe,
                }
            }
        };
        let report = evaluate(
            method.name(),
            &bundle,
            &setting,
            GridSide::Test,
            cfg.eval.episodes_per_env,
            seeds,
        )?;
        log::info!("{}: {} {:.4} ± {:.4}", method.name(), report.metric.name(), report.mean, report.std);
        metrics.extend(m.prefixed(method.name()));
        metrics.push("eval", 0, &format!("{}.mean", method.name()), report.mean);
        metrics.push("eval", 0, &format!("{}.std", method.name()), report.std);
        results.push(MethodResult { method, bundle, report });
        lap(method.name(), &mut timings);
    }
    Ok(PipelineOutput {
        seed_policy,
        dataset,
        epi,
        results,
        metrics,
        timings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    PretrainSeed,
    CollectDataset,
    TrainEpi,
    TrainTask,
    TrainBaseline(BaselineKind),
    Evaluate { methods: Vec<String> },
    Sweep { methods: Vec<String>, param: Option<String>, values: Vec<f64>, points: usize },
    ExportEmbeddings,
    ReproduceTable1,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PretrainSeed => "pretrain-seed",
            Command::CollectDataset => "collect-dataset",
            Command::TrainEpi => "train-epi",
            Command::TrainTask => "train-task",
            Command::TrainBaseline(_) => "train-baseline",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::ExportEmbeddings => "export-embeddings",
            Command::ReproduceTable1 => "reproduce-table1",
        }
    }
}

pub const SEED_POLICY: &str = "seed_policy.ckpt";
pub const DATASET: &str = "dataset.bin";
pub const EPI_PROBE: &str = "epi_probe.ckpt";
pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.toml";

pub fn bundle_file(method: &str) -> String {
    format!("{method}.ckpt")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: String,
    pub seed: u64,
    /// Artifact file name → command that produced it.
    pub artifacts: BTreeMap<String, String>,
}

/// A run directory being written by one command.
pub struct RunDir {
    pub root: PathBuf,
    command: String,
    manifest: Manifest,
}

impl RunDir {
    pub fn open(root: &Path, cfg: &RunConfig, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let manifest = match std::fs::read_to_string(root.join(MANIFEST)) {
            Ok(text) => toml::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?,
            Err(_) => Manifest::default(),
        };
        let mut d = Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            manifest,
        };
        d.manifest.family = cfg.env.family.name().to_string();
        d.manifest.seed = cfg.training.seed;
        std::fs::write(root.join(CONFIG), cfg.to_toml())?;
        d.record(CONFIG);
        Ok(d)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an upstream artifact, or `MissingArtifact` naming it.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn record(&mut self, name: &str) {
        self.manifest.artifacts.insert(name.to_string(), self.command.clone());
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(name), bytes)?;
        self.record(name);
        Ok(())
    }

    pub fn writer(&mut self, name: &str) -> Result<BufWriter<File>> {
        let f = File::create(self.path(name))?;
        self.record(name);
        Ok(BufWriter::new(f))
    }

    pub fn save_checkpoint(&mut self, name: &str, c: &Checkpoint) -> Result<()> {
        c.save(&self.path(name))?;
        self.record(name);
        Ok(())
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.require(name)?)
    }

    pub fn finish(mut self, metrics: &Metrics) -> Result<()> {
        let name = format!("metrics_{}.csv", self.command);
        let mut w = self.writer(&name)?;
        metrics.write_csv(&mut w)?;
        drop(w);
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }
}

fn epi_probe_checkpoint(art: &EpiArtifacts) -> Checkpoint {
    let mut c = policy_checkpoint("epi_probe", &art.policy);
    models_to_checkpoint(&mut c, &art.models);
    c.push("rewards", Entry::Meta(art.rewards.clone()));
    c
}

fn load_epi_probe(dir: &RunDir) -> Result<(GaussianPolicy, EpiModels)> {
    let c = dir.load_checkpoint(EPI_PROBE)?;
    Ok((policy_from_checkpoint(&c)?, models_from_checkpoint(&c)?))
}

fn load_bundle(dir: &RunDir, method: &str) -> Result<PolicyBundle> {
    bundle_from_checkpoint(&dir.load_checkpoint(&bundle_file(method))?)
}

fn embedding_metrics(metrics: &mut Metrics, stage: &str, dump: &crate::eval::EmbeddingDump) -> Result<()> {
    metrics.push(stage, 0, "separation_score", embedding_separation_score(dump)?);
    metrics.push(stage, 0, "silhouette", silhouette_score(&dump.embeddings(), &dump.labels())?);
    Ok(())
}

/// Runs one command against `cfg.out`.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let setting = cfg.env.setting()?;
    let mut dir = RunDir::open(&cfg.out, cfg, cmd.name())?;
    let mut metrics = Metrics::default();
    match cmd {
        Command::PretrainSeed => {
            let p = pretrain_seed(cfg, &setting, &mut metrics)?;
            dir.save_checkpoint(SEED_POLICY, &policy_checkpoint("seed_policy", &p))?;
        }
        Command::CollectDataset => {
            let p = policy_from_checkpoint(&dir.load_checkpoint(SEED_POLICY)?)?;
            let ds = collect_dataset(cfg, &setting, &p)?;
            metrics.push("dataset", 0, "transitions", ds.len() as f64);
            metrics.push("dataset", 0, "validation", ds.val_indices().len() as f64);
            dir.write(DATASET, ds.to_bytes())?;
        }
        Command::TrainEpi => {
            let ds = TransitionDataset::load(&dir.require(DATASET)?)?;
            let seed_policy = if cfg.training.epi_warm_start {
                Some(policy_from_checkpoint(&dir.load_checkpoint(SEED_POLICY)?)?)
            } else {
                None
            };
            let art = epi_stage(cfg, &setting, &ds, seed_policy.as_ref(), &mut metrics)?;
            dir.save_checkpoint(EPI_PROBE, &epi_probe_checkpoint(&art))?;
        }
        Command::TrainTask => {
            let (probe, models) = load_epi_probe(&dir)?;
            let task = train_task(&cfg.training, &probe, &models, &setting, &mut metrics)?;
            let bundle = PolicyBundle::Epi {
                probe,
                models,
                task,
                reset_after_probe: cfg.training.reset_after_probe,
            };
            let name = if cfg.training.reset_after_probe { "epi" } else { "epi_no_reset" };
            dir.save_checkpoint(&bundle_file(name), &bundle_to_checkpoint(&bundle))?;
        }
        Command::TrainBaseline(kind) => {
            let bundle = match (kind, dir.load_checkpoint(SEED_POLICY)) {
                (BaselineKind::Simple, Ok(c)) => PolicyBundle::Plain(policy_from_checkpoint(&c)?),
                _ => train_baseline(*kind, &cfg.training, &setting, &mut metrics)?,
            };
            dir.save_checkpoint(&bundle_file(kind.name()), &bundle_to_checkpoint(&bundle))?;
        }
        Command::Evaluate { methods } => {
            let methods = if methods.is_empty() { vec!["epi".to_string()] } else { methods.clone() };
            let seeds = eval_seeds(cfg);
            let mut reports = Vec::new();
            for m in &methods {
                let b = load_bundle(&dir, m)?;
                let r = evaluate(m, &b, &setting, GridSide::Test, cfg.eval.episodes_per_env, &seeds)?;
                metrics.push("eval", 0, &format!("{m}.mean"), r.mean);
                metrics.push("eval", 0, &format!("{m}.std"), r.std);
                reports.push(r);
            }
            write_report_csv(dir.writer("eval.csv")?, &reports)?;
        }
        Command::Sweep {
            methods,
            param,
            values,
            points,
        } => {
            let methods = if methods.is_empty() {
                vec!["epi".to_string(), "invariant".to_string()]
            } else {
                methods.clone()
            };
            let param = param.clone().unwrap_or_else(|| setting.family().param_names()[0].to_string());
            let values = if values.is_empty() {
                default_sweep_values(&setting, &param, (*points).max(2))?
            } else {
                values.clone()
            };
            let seed = eval_seeds(cfg)[0];
            let mut series = Vec::new();
            for m in &methods {
                let b = load_bundle(&dir, m)?;
                series.push((m.clone(), sweep_parameter(&b, &setting, &param, &values, cfg.eval.episodes_per_env, seed)?));
            }
            write_sweep_csv(dir.writer(&format!("sweep_{param}.csv"))?, &series)?;
            let range = setting.grid.ranges()[setting.grid.param_index(&param)?];
            let svg = sweep_svg(&param, MetricKind::for_family(setting.family()), range, &series);
            dir.write(&format!("sweep_{param}.svg"), svg)?;
        }
        Command::ExportEmbeddings => {
            let (probe, models) = load_epi_probe(&dir)?;
            let dump = export_embeddings(
                &probe,
                &models,
                &setting,
                cfg.eval.embedding_rollouts_per_env,
                rng::derive(cfg.training.seed, rng::tag("export")),
                ProbeActions::Deterministic,
            )?;
            embedding_metrics(&mut metrics, "embeddings", &dump)?;
            dump.write_csv(dir.writer("embeddings.csv")?)?;
        }
        Command::ReproduceTable1 => {
            let out = run_methods(cfg, &Method::TABLE1, &eval_seeds(cfg))?;
            if let Some(p) = &out.seed_policy {
                dir.save_checkpoint(SEED_POLICY, &policy_checkpoint("seed_policy", p))?;
            }
            if let Some(ds) = &out.dataset {
                dir.write(DATASET, ds.to_bytes())?;
            }
            if let Some(art) = out.full_epi(&cfg.training) {
                dir.save_checkpoint(EPI_PROBE, &epi_probe_checkpoint(art))?;
                let dump = export_embeddings(
                    &art.policy,
                    &art.models,
                    &setting,
                    cfg.eval.embedding_rollouts_per_env,
                    rng::derive(cfg.training.seed, rng::tag("export")),
                    ProbeActions::Deterministic,
                )?;
                embedding_metrics(&mut metrics, "embeddings", &dump)?;
                dump.write_csv(dir.writer("embeddings.csv")?)?;
            }
            for r in &out.results {
                dir.save_checkpoint(&bundle_file(r.method.name()), &bundle_to_checkpoint(&r.bundle))?;
            }
            let reports: Vec<EvalReport> = out.results.iter().map(|r| r.report.clone()).collect();
            write_report_csv(dir.writer("table1.csv")?, &reports)?;
            metrics.extend(out.metrics);
        }
    }
    dir.finish(&metrics)
}
