//! Iterated collect / fit-baseline / update loop.

use super::{
    collect_trajectories, trust_region_update, ActionMode, EnvSampler, ObsProtocol, PolicyModel, RolloutBatch,
    Trajectory, UpdateConfig, ValueBaseline,
};
use crate::error::Result;
use crate::nn::{AdamConfig, AdamState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLoopConfig {
    pub iterations: usize,
    pub batch_timesteps: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub update: UpdateConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationStats {
    pub iteration: usize,
    pub episodes: usize,
    pub steps: usize,
    /// Mean undiscounted reward per episode, as optimized.
    pub mean_return: f64,
    pub mean_final_distance: Option<f64>,
    pub kl: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub reverted: bool,
}

impl IterationStats {
    /// `(key, value)` pairs for the metrics log.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("mean_return", self.mean_return),
            ("kl", self.kl),
            ("entropy", self.entropy),
            ("value_loss", self.value_loss),
            ("episodes", self.episodes as f64),
            ("steps", self.steps as f64),
        ];
        if let Some(d) = self.mean_final_distance {
            v.push(("mean_final_distance", d));
        }
        v
    }
}

/// A policy together with its optimizer and value-baseline state.
#[derive(Debug, Clone)]
pub struct PolicyTrainer<P: PolicyModel> {
    pub policy: P,
    adam: AdamState,
    baseline: ValueBaseline,
    gamma: f64,
    lambda: f64,
    update: UpdateConfig,
    seed: u64,
    updates: u64,
}

impl<P: PolicyModel> PolicyTrainer<P> {
    pub fn new(policy: P, horizon: usize, gamma: f64, lambda: f64, update: UpdateConfig, seed: u64) -> Result<Self> {
        let adam = AdamState::new(policy.params().len(), AdamConfig::with_lr(update.learning_rate));
        let baseline = ValueBaseline::new(policy.obs_dim(), horizon, seed)?;
        Ok(Self {
            policy,
            adam,
            baseline,
            gamma,
            lambda,
            update,
            seed,
            updates: 0,
        })
    }

    /// One policy update from already-collected trajectories whose rewards
    /// are final (the caller may have rewritten them).
    pub fn update(&mut self, trajectories: Vec<Trajectory>) -> Result<IterationStats> {
        let baselines = self.baseline.predict(&trajectories)?;
        let batch = RolloutBatch::new(trajectories, self.gamma, self.lambda, &baselines)?;
        let value_loss = self.baseline.fit(&batch.trajectories, &batch.returns)?;
        let seed = rng::derive(self.seed, self.updates);
        let report = trust_region_update(&mut self.policy, &batch, &mut self.adam, &self.update, seed)?;
        let stats = IterationStats {
            iteration: self.updates as usize,
            episodes: batch.trajectories.len(),
            steps: batch.num_steps(),
            mean_return: batch.trajectories.iter().map(|t| t.total_reward()).sum::<f64>()
                / batch.trajectories.len() as f64,
            mean_final_distance: None,
            kl: report.mean_kl,
            entropy: report.entropy,
            value_loss,
            reverted: report.reverted,
        };
        self.updates += 1;
        Ok(stats)
    }

    pub fn updates_done(&self) -> u64 {
        self.updates
    }
}

/// Trains `policy` on episodes from `sampler` viewed through `protocol`.
/// `on_iteration` sees the statistics of every iteration as it completes.
pub fn train_policy<P: PolicyModel, O: ObsProtocol>(
    policy: P,
    protocol: &O,
    sampler: &EnvSampler,
    config: &TrainLoopConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<(P, Vec<IterationStats>)> {
    let mut trainer = PolicyTrainer::new(policy, sampler.episode_limit(), config.gamma, config.lambda, config.update, seed)?;
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let eps = collect_trajectories(
            &trainer.policy,
            protocol,
            sampler,
            config.batch_timesteps,
            rng::derive(seed, rng::tag("collect") ^ it as u64),
            ActionMode::Stochastic,
        )?;
        let distances: Vec<f64> = eps.iter().filter_map(|e| e.final_distance).collect();
        let trajectories: Vec<Trajectory> = eps.into_iter().map(|e| e.trajectory).collect();
        let mut stats = trainer.update(trajectories)?;
        if !distances.is_empty() {
            stats.mean_final_distance = Some(distances.iter().sum::<f64>() / distances.len() as f64);
        }
        on_iteration(&stats);
        history.push(stats);
    }
    Ok((trainer.policy, history))
}
