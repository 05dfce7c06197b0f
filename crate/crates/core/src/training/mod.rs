//! Training stages: the alternating probing-policy / prediction-model loop,
//! the embedding-conditioned task policy, and every baseline.

mod protocols;
mod sysid;

use std::borrow::Cow;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use protocols::{
    probe_and_embed, probe_rollout, DirectProbeObs, DirectProbeState, EpiObs, History, HistoryObs, OracleObs, Osi,
    OsiObs, OsiState, ProbeActions, RandomProbeObs,
};
pub use sysid::{osi_windows, train_system_id, SystemIdResult};

use crate::dataset::{pretrain_seed_policy, TransitionDataset};
use crate::envsim::{grid_make, EnvInstance, Family, GridSide, ParamGrid};
use crate::epimodel::{
    train_pred_models, EpiModelConfig, EpiModels, EpiRewarder, EpiTrajectory, PredTrainReport, ProbeSet, EPI_STEPS,
};
use crate::error::{Error, Result};
use crate::policy::{
    collect_trajectories, run_episode, train_policy, ActionMode, EnvSampler, EpisodeOutcome, GaussianPolicy,
    IterationStats, ObsProtocol, PlainObs, PolicyModel, PolicyTrainer, RecurrentPolicy, TrainLoopConfig,
    Trajectory, UpdateConfig,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// GAE parameter; 1 gives plain return-minus-baseline advantages.
    pub lambda: f64,
    pub update: UpdateConfig,
    pub policy_hidden: Vec<usize>,
    pub recurrent_hidden: usize,
    pub init_log_std: f64,
    /// Start the probing policy from the seed policy instead of a fresh
    /// random network.
    pub epi_warm_start: bool,
    pub epi_iterations: usize,
    /// Probing-policy updates between prediction-model retrains.
    pub retrain_period: usize,
    pub epi_batch_timesteps: usize,
    /// Probes per environment used to train the prediction models.
    pub probes_per_env: usize,
    pub task_iterations: usize,
    pub task_batch_timesteps: usize,
    pub use_vine: bool,
    pub use_separation: bool,
    pub reset_after_probe: bool,
    pub osi_rounds: usize,
    pub osi_batch_timesteps: usize,
    pub osi_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            update: UpdateConfig {
                learning_rate: 1e-3,
                ..UpdateConfig::default()
            },
            policy_hidden: vec![32, 32],
            recurrent_hidden: 32,
            init_log_std: -0.5,
            epi_warm_start: true,
            epi_iterations: 100,
            retrain_period: 25,
            epi_batch_timesteps: 2000,
            probes_per_env: 32,
            task_iterations: 150,
            task_batch_timesteps: 5000,
            use_vine: true,
            use_separation: true,
            reset_after_probe: true,
            osi_rounds: 5,
            osi_batch_timesteps: 10_000,
            osi_epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("training.{key}"),
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must lie in [0, 1]");
        }
        if self.retrain_period == 0 {
            return bad("retrain_period", "must be at least 1");
        }
        for (k, v) in [
            ("epi_batch_timesteps", self.epi_batch_timesteps),
            ("task_batch_timesteps", self.task_batch_timesteps),
            ("probes_per_env", self.probes_per_env),
            ("recurrent_hidden", self.recurrent_hidden),
            ("osi_rounds", self.osi_rounds),
            ("osi_batch_timesteps", self.osi_batch_timesteps),
        ] {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if self.policy_hidden.contains(&0) {
            return bad("policy_hidden", "layer sizes must be positive");
        }
        Ok(())
    }

    pub fn task_loop(&self) -> TrainLoopConfig {
        TrainLoopConfig {
            iterations: self.task_iterations,
            batch_timesteps: self.task_batch_timesteps,
            gamma: self.gamma,
            lambda: self.lambda,
            update: self.update,
        }
    }
}

/// The environment family, its parameter grid and the episode settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub grid: ParamGrid,
    pub dt: f64,
    pub episode_limit: usize,
}

impl Setting {
    pub fn new(family: Family, ranges: &[(f64, f64)], dt: f64, episode_limit: usize) -> Result<Self> {
        let grid = grid_make(family, ranges)?;
        EnvInstance::new(grid.params(GridSide::Train, 0)?, dt, episode_limit)?;
        Ok(Self {
            grid,
            dt,
            episode_limit,
        })
    }

    pub fn default_for(family: Family) -> Result<Self> {
        Self::new(
            family,
            &family.default_ranges(),
            crate::envsim::constants::DT,
            family.default_episode_limit(),
        )
    }

    pub fn family(&self) -> Family {
        self.grid.family()
    }

    pub fn sampler(&self, side: GridSide) -> Result<EnvSampler> {
        EnvSampler::grid(&self.grid, side, self.dt, self.episode_limit)
    }

    pub fn cell_sampler(&self, side: GridSide, cell: usize) -> Result<EnvSampler> {
        EnvSampler::single(cell, self.grid.params(side, cell)?, self.dt, self.episode_limit)
    }

    fn probe_limit(&self) -> usize {
        EPI_STEPS.min(self.episode_limit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: String,
    pub iteration: usize,
    pub key: String,
    pub value: f64,
}

/// Long-format metrics: one `(stage, iteration, key, value)` row per scalar.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn push(&mut self, stage: &str, iteration: usize, key: &str, value: f64) {
        self.rows.push(MetricRow {
            stage: stage.to_string(),
            iteration,
            key: key.to_string(),
            value,
        });
    }

    pub fn push_iteration(&mut self, stage: &str, stats: &IterationStats) {
        for (k, v) in stats.scalars() {
            self.push(stage, stats.iteration, k, v);
        }
    }

    pub fn extend(&mut self, other: Metrics) {
        self.rows.extend(other.rows);
    }

    /// Rows with every stage renamed to `prefix/stage`.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for r in &mut self.rows {
            r.stage = format!("{prefix}/{}", r.stage);
        }
        self
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "stage,iteration,key,value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.stage, r.iteration, r.key, r.value)?;
        }
        Ok(())
    }

    pub fn values(&self, stage: &str, key: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage && r.key == key)
            .map(|r| r.value)
            .collect()
    }
}

fn new_policy(cfg: &TrainConfig, obs_dim: usize, act_dim: usize, seed: u64) -> Result<GaussianPolicy> {
    GaussianPolicy::new(obs_dim, &cfg.policy_hidden, act_dim, cfg.init_log_std, seed)
}

/// `per_env` probes of every training cell.
pub fn probe_pool(
    policy: &GaussianPolicy,
    setting: &Setting,
    per_env: usize,
    seed: u64,
    actions: ProbeActions,
) -> Result<ProbeSet> {
    let family = setting.family();
    let n = setting.grid.num_cells();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|e| (0..per_env).map(move |k| (e, k))).collect();
    let taus = jobs
        .par_iter()
        .map(|&(e, k)| {
            let mut env = EnvInstance::new(setting.grid.params(GridSide::Train, e)?, setting.dt, setting.episode_limit)?;
            let ep = rng::derive(seed, (e * per_env + k) as u64);
            env.reset(crate::policy::probe_reset_seed(ep));
            let tr = probe_rollout(Some(policy), &mut env, e, ep, actions)?;
            EpiTrajectory::from_trajectory(&tr, family.obs_dim(), family.act_dim())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::with_capacity(per_env); n];
    for t in taus {
        out[t.env_id].push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpiArtifacts {
    pub policy: GaussianPolicy,
    pub models: EpiModels,
    /// Mean probing reward of each policy update.
    pub rewards: Vec<f64>,
    pub retrains: Vec<PredTrainReport>,
}

fn retrain(
    policy: &GaussianPolicy,
    ds: &TransitionDataset,
    setting: &Setting,
    cfg: &TrainConfig,
    mcfg: &EpiModelConfig,
    seed: u64,
    index: usize,
    metrics: &mut Metrics,
) -> Result<(EpiModels, PredTrainReport)> {
    let s = rng::derive(seed, rng::tag("retrain") ^ index as u64);
    let probes = probe_pool(policy, setting, cfg.probes_per_env, s, ProbeActions::Stochastic)?;
    let (models, rep) = train_pred_models(ds, &probes, mcfg, cfg.use_separation, s)?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    metrics.push("pred_models", index, "train_pred", last(&rep.epoch_pred));
    metrics.push("pred_models", index, "train_epi_pred", last(&rep.epoch_epi_pred));
    metrics.push("pred_models", index, "separation", last(&rep.epoch_separation));
    metrics.push("pred_models", index, "val_pred", rep.val_pred);
    metrics.push("pred_models", index, "val_epi_pred", rep.val_epi_pred);
    log::info!(
        "prediction models #{index}: val L_pred {:.4}, val L_epi_pred {:.4}",
        rep.val_pred,
        rep.val_epi_pred
    );
    Ok((models, rep))
}

/// Alternates between fitting fresh prediction models to probes from the
/// current probing policy and updating the policy on the probing reward.
/// A last fit after the final update matches the models to the returned
/// policy. `init` is the starting probing policy; `None` draws a fresh one.
pub fn train_epi(
    cfg: &TrainConfig,
    mcfg: &EpiModelConfig,
    dataset: &TransitionDataset,
    setting: &Setting,
    init: Option<&GaussianPolicy>,
    metrics: &mut Metrics,
) -> Result<EpiArtifacts> {
    cfg.validate()?;
    if dataset.family() != setting.family() {
        return Err(Error::invalid("dataset and setting are for different environment families"));
    }
    let ds: Cow<TransitionDataset> = if cfg.use_vine {
        Cow::Borrowed(dataset)
    } else {
        Cow::Owned(dataset.without_vine()?)
    };
    let family = setting.family();
    let seed = rng::derive(cfg.seed, rng::tag("train_epi"));
    let init = match init {
        Some(p) => p.clone(),
        None => new_policy(cfg, family.obs_dim(), family.act_dim(), rng::derive(seed, rng::tag("epi_policy_init")))?,
    };
    let limit = setting.probe_limit();
    let sampler = EnvSampler::grid(&setting.grid, GridSide::Train, setting.dt, limit)?;
    let mut trainer = PolicyTrainer::new(init, limit, cfg.gamma, cfg.lambda, cfg.update, rng::derive(seed, 1))?;
    let mut retrains = Vec::new();
    let mut rewards = Vec::with_capacity(cfg.epi_iterations);
    let mut models: Option<EpiModels> = None;
    for it in 0..cfg.epi_iterations {
        if it % cfg.retrain_period == 0 {
            let (m, rep) = retrain(&trainer.policy, &ds, setting, cfg, mcfg, seed, retrains.len(), metrics)?;
            models = Some(m);
            retrains.push(rep);
        }
        let m = models.as_ref().expect("fitted on the first iteration");
        let rewarder = EpiRewarder::new(m, &ds, setting.grid.num_cells(), mcfg.flip_reward_sign)?;
        let eps = collect_trajectories(
            &trainer.policy,
            &PlainObs,
            &sampler,
            cfg.epi_batch_timesteps,
            rng::derive(seed, rng::tag("epi_collect") ^ it as u64),
            ActionMode::Stochastic,
        )?;
        let mut trajs: Vec<Trajectory> = eps.into_iter().map(|e| e.trajectory).collect();
        let scores = trajs
            .par_iter()
            .map(|tr| rewarder.reward(&EpiTrajectory::from_trajectory(tr, family.obs_dim(), family.act_dim())?))
            .collect::<Result<Vec<f64>>>()?;
        for (tr, r) in trajs.iter_mut().zip(&scores) {
            tr.rewards.iter_mut().for_each(|v| *v = 0.0);
            *tr.rewards.last_mut().expect("probes take at least one step") = *r;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let mut stats = trainer.update(trajs)?;
        stats.iteration = it;
        metrics.push_iteration("epi", &stats);
        metrics.push("epi", it, "epi_reward", mean);
        if it % 10 == 0 {
            log::info!("probing policy {it}: reward {mean:.4}, kl {:.4}", stats.kl);
        }
        rewards.push(mean);
    }
    let (m, rep) = retrain(&trainer.policy, &ds, setting, cfg, mcfg, seed, retrains.len(), metrics)?;
    retrains.push(rep);
    Ok(EpiArtifacts {
        policy: trainer.policy,
        models: m,
        rewards,
        retrains,
    })
}

/// Trains the task policy on `[s_t ‖ psi(tau)]` with the probing policy and
/// embedding network frozen.
pub fn train_task(
    cfg: &TrainConfig,
    epi_policy: &GaussianPolicy,
    models: &EpiModels,
    setting: &Setting,
    metrics: &mut Metrics,
) -> Result<GaussianPolicy> {
    cfg.validate()?;
    let family = setting.family();
    let seed = rng::derive(cfg.seed, rng::tag("train_task"));
    let protocol = EpiObs {
        policy: epi_policy,
        models,
        reset_after_probe: cfg.reset_after_probe,
    };
    let stage = if cfg.reset_after_probe { "task" } else { "task_no_reset" };
    let init = new_policy(
        cfg,
        family.obs_dim() + models.embedding_dim(),
        family.act_dim(),
        rng::derive(seed, rng::tag("init")),
    )?;
    let sampler = setting.sampler(GridSide::Train)?;
    let (p, _) = train_policy(init, &protocol, &sampler, &cfg.task_loop(), seed, |s| {
        metrics.push_iteration(stage, s)
    })?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Simple,
    Invariant,
    Oracle,
    RandomInteraction,
    History,
    Recurrent,
    SystemId,
    DirectReward,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::Simple,
        BaselineKind::Invariant,
        BaselineKind::Oracle,
        BaselineKind::RandomInteraction,
        BaselineKind::History,
        BaselineKind::Recurrent,
        BaselineKind::SystemId,
        BaselineKind::DirectReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Simple => "simple",
            BaselineKind::Invariant => "invariant",
            BaselineKind::Oracle => "oracle",
            BaselineKind::RandomInteraction => "random_interaction",
            BaselineKind::History => "history",
            BaselineKind::Recurrent => "recurrent",
            BaselineKind::SystemId => "system_id",
            BaselineKind::DirectReward => "direct_reward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

/// A trained method together with everything its observation protocol
/// needs at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyBundle {
    Plain(GaussianPolicy),
    Oracle { policy: GaussianPolicy, obs: OracleObs },
    RandomInteraction(GaussianPolicy),
    History(GaussianPolicy),
    Recurrent(RecurrentPolicy),
    DirectReward { probe: GaussianPolicy, task: GaussianPolicy },
    SystemId { policy: GaussianPolicy, osi: Osi },
    Epi {
        probe: GaussianPolicy,
        models: EpiModels,
        task: GaussianPolicy,
        reset_after_probe: bool,
    },
}

impl PolicyBundle {
    /// Runs one evaluation episode with mean actions.
    pub fn run_episode(&self, sampler: &EnvSampler, episode_seed: u64) -> Result<EpisodeOutcome<()>> {
        fn strip<S>(o: EpisodeOutcome<S>) -> EpisodeOutcome<()> {
            EpisodeOutcome {
                trajectory: o.trajectory,
                episode_return: o.episode_return,
                final_distance: o.final_distance,
                protocol_state: (),
            }
        }
        let det = ActionMode::Deterministic;
        let fam = sampler
            .cells()
            .first()
            .map(|c| c.1.family())
            .ok_or_else(|| Error::invalid("sampler has no cells"))?;
        let family = (fam.obs_dim(), fam.act_dim());
        Ok(match self {
            PolicyBundle::Plain(p) => strip(run_episode(p, &PlainObs, sampler, episode_seed, det)?),
            PolicyBundle::Oracle { policy, obs } => strip(run_episode(policy, obs, sampler, episode_seed, det)?),
            PolicyBundle::RandomInteraction(p) => {
                let proto = RandomProbeObs {
                    obs_dim: family.0,
                    act_dim: family.1,
                };
                strip(run_episode(p, &proto, sampler, episode_seed, det)?)
            }
            PolicyBundle::History(p) => {
                let proto = HistoryObs {
                    obs_dim: family.0,
                    act_dim: family.1,
                };
                strip(run_episode(p, &proto, sampler, episode_seed, det)?)
            }
            PolicyBundle::Recurrent(p) => strip(run_episode(p, &PlainObs, sampler, episode_seed, det)?),
            PolicyBundle::DirectReward { probe, task } => {
                let proto = DirectProbeObs {
                    probe,
                    actions: ProbeActions::Deterministic,
                };
                strip(run_episode(task, &proto, sampler, episode_seed, det)?)
            }
            PolicyBundle::SystemId { policy, osi } => {
                let proto = OsiObs {
                    osi,
                    obs_dim: family.0,
                    act_dim: family.1,
                };
                strip(run_episode(policy, &proto, sampler, episode_seed, det)?)
            }
            PolicyBundle::Epi {
                probe,
                models,
                task,
                reset_after_probe,
            } => {
                let proto = EpiObs {
                    policy: probe,
                    models,
                    reset_after_probe: *reset_after_probe,
                };
                strip(run_episode(task, &proto, sampler, episode_seed, det)?)
            }
        })
    }

    /// Flat copy of every learned parameter, for checksums.
    pub fn parameters(&self) -> Vec<f32> {
        match self {
            PolicyBundle::Plain(p)
            | PolicyBundle::RandomInteraction(p)
            | PolicyBundle::History(p) => p.params(),
            PolicyBundle::Oracle { policy, .. } => policy.params(),
            PolicyBundle::Recurrent(p) => p.params(),
            PolicyBundle::DirectReward { probe, task } => [probe.params(), task.params()].concat(),
            PolicyBundle::SystemId { policy, osi } => [policy.params(), osi.net.params.as_slice().to_vec()].concat(),
            PolicyBundle::Epi {
                probe, models, task, ..
            } => [
                probe.params(),
                models.psi.params.as_slice().to_vec(),
                task.params(),
            ]
            .concat(),
        }
    }
}

fn direct_reward(cfg: &TrainConfig, setting: &Setting, seed: u64, metrics: &mut Metrics) -> Result<PolicyBundle> {
    let family = setting.family();
    let (o, a) = (family.obs_dim(), family.act_dim());
    let probe = new_policy(cfg, o, a, rng::derive(seed, rng::tag("probe_init")))?;
    let task = new_policy(cfg, o + EPI_STEPS * (o + a), a, rng::derive(seed, rng::tag("task_init")))?;
    let mut probe_tr = PolicyTrainer::new(probe, EPI_STEPS, cfg.gamma, cfg.lambda, cfg.update, rng::derive(seed, 1))?;
    let mut task_tr = PolicyTrainer::new(
        task,
        setting.episode_limit,
        cfg.gamma,
        cfg.lambda,
        cfg.update,
        rng::derive(seed, 2),
    )?;
    let sampler = setting.sampler(GridSide::Train)?;
    for it in 0..cfg.task_iterations {
        let proto = DirectProbeObs {
            probe: &probe_tr.policy,
            actions: ProbeActions::Stochastic,
        };
        let eps = collect_trajectories(
            &task_tr.policy,
            &proto,
            &sampler,
            cfg.task_batch_timesteps,
            rng::derive(seed, rng::tag("collect") ^ it as u64),
            ActionMode::Stochastic,
        )?;
        let distances: Vec<f64> = eps.iter().filter_map(|e| e.final_distance).collect();
        if it % 2 == 0 {
            let mut stats = task_tr.update(eps.into_iter().map(|e| e.trajectory).collect())?;
            stats.iteration = it;
            if !distances.is_empty() {
                stats.mean_final_distance = Some(distances.iter().sum::<f64>() / distances.len() as f64);
            }
            metrics.push_iteration("direct_reward_task", &stats);
        } else {
            let probes: Vec<Trajectory> = eps
                .into_iter()
                .map(|e| {
                    let mut tr = e.protocol_state.probe;
                    if let Some(last) = tr.rewards.last_mut() {
                        *last = e.episode_return;
                    }
                    tr
                })
                .filter(|t| !t.is_empty())
                .collect();
            let mut stats = probe_tr.update(probes)?;
            stats.iteration = it;
            metrics.push_iteration("direct_reward_probe", &stats);
        }
    }
    Ok(PolicyBundle::DirectReward {
        probe: probe_tr.policy,
        task: task_tr.policy,
    })
}

/// Trains one baseline. The simple policy is trained on the grid's center
/// cell only, exactly as the seed policy used to collect the dataset.
pub fn train_baseline(
    kind: BaselineKind,
    cfg: &TrainConfig,
    setting: &Setting,
    metrics: &mut Metrics,
) -> Result<PolicyBundle> {
    cfg.validate()?;
    let family = setting.family();
    let (o, a) = (family.obs_dim(), family.act_dim());
    let seed = rng::derive(cfg.seed, rng::tag(kind.name()));
    let init_seed = rng::derive(seed, rng::tag("init"));
    let sampler = setting.sampler(GridSide::Train)?;
    let loop_cfg = cfg.task_loop();
    let stage = kind.name();
    let log = |s: &IterationStats| metrics.push_iteration(stage, s);
    Ok(match kind {
        BaselineKind::Simple => PolicyBundle::Plain(pretrain_seed_policy(
            &setting.grid,
            &cfg.policy_hidden,
            &loop_cfg,
            setting.dt,
            setting.episode_limit,
            seed,
            log,
        )?),
        BaselineKind::Invariant => {
            let (p, _) = train_policy(new_policy(cfg, o, a, init_seed)?, &PlainObs, &sampler, &loop_cfg, seed, log)?;
            PolicyBundle::Plain(p)
        }
        BaselineKind::Oracle => {
            let obs = OracleObs::from_moments(&setting.grid.train_moments());
            let init = new_policy(cfg, o + obs.extra_dim(), a, init_seed)?;
            let (policy, _) = train_policy(init, &obs, &sampler, &loop_cfg, seed, log)?;
            PolicyBundle::Oracle { policy, obs }
        }
        BaselineKind::RandomInteraction => {
            let proto = RandomProbeObs { obs_dim: o, act_dim: a };
            let init = new_policy(cfg, o + proto.extra_dim(), a, init_seed)?;
            let (p, _) = train_policy(init, &proto, &sampler, &loop_cfg, seed, log)?;
            PolicyBundle::RandomInteraction(p)
        }
        BaselineKind::History => {
            let proto = HistoryObs { obs_dim: o, act_dim: a };
            let init = new_policy(cfg, o + proto.extra_dim(), a, init_seed)?;
            let (p, _) = train_policy(init, &proto, &sampler, &loop_cfg, seed, log)?;
            PolicyBundle::History(p)
        }
        BaselineKind::Recurrent => {
            let init = RecurrentPolicy::new(o, cfg.recurrent_hidden, a, cfg.init_log_std, init_seed)?;
            let (p, _) = train_policy(init, &PlainObs, &sampler, &loop_cfg, seed, log)?;
            PolicyBundle::Recurrent(p)
        }
        BaselineKind::SystemId => {
            let r = train_system_id(cfg, setting, metrics)?;
            PolicyBundle::SystemId {
                policy: r.oracle,
                osi: r.osi,
            }
        }
        BaselineKind::DirectReward => direct_reward(cfg, setting, seed, metrics)?,
    })
}
