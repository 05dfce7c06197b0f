//! Stochastic policies, rollout collection, and the trust-region update.
//!
//! Every policy outputs a diagonal Gaussian over actions whose mean comes from
//! a network and whose log standard deviation is a free parameter vector.
//! Training code only sees the [`PolicyModel`] trait, so the same update and
//! collection machinery drives the feedforward and the recurrent policy.

mod gaussian;
mod recurrent;
mod rollout;
mod trainer;
mod trust_region;
mod value;

use ndarray::{Array2, ArrayView2};

pub use gaussian::GaussianPolicy;
pub use recurrent::RecurrentPolicy;
pub use rollout::{
    collect_trajectories, discounted_returns, probe_reset_seed, run_episode, task_reset_seed, ActionMode, EnvSampler,
    EpisodeOutcome, ObsProtocol, PlainObs, RolloutBatch, Trajectory,
};
pub use trainer::{train_policy, IterationStats, PolicyTrainer, TrainLoopConfig};
pub use trust_region::{mean_kl, trust_region_update, UpdateConfig, UpdateReport};
pub use value::ValueBaseline;

use crate::error::Result;
use crate::rng::Rng;

/// Standard deviations never fall below this value.
pub const STD_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn floored_log_std(raw: f64) -> f64 {
    raw.max(STD_FLOOR.ln())
}

/// Exact log density of a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// A diagonal-Gaussian policy whose mean may depend on a per-episode memory.
pub trait PolicyModel: Clone + Send + Sync {
    /// Per-episode recurrent state; `()` for feedforward policies.
    type Memory: Clone + Send;
    /// Activations retained between [`Self::forward_means`] and
    /// [`Self::backward_means`].
    type Cache;

    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;

    fn initial_memory(&self) -> Self::Memory;

    /// Mean action for one observation, advancing `memory`.
    fn step_mean(&self, obs: &[f64], memory: &mut Self::Memory) -> Result<Vec<f64>>;

    /// Log standard deviations after the floor is applied.
    fn log_std(&self) -> Vec<f64>;

    /// Means for every step of every episode, rows in episode order.
    fn forward_means(&self, episodes: &[&[Vec<f64>]]) -> Result<(Array2<f64>, Self::Cache)>;

    /// Gradient of `sum(means * d_mean) + log_std · d_log_std` with respect to
    /// the flat parameter vector.
    fn backward_means(&self, cache: &Self::Cache, d_mean: ArrayView2<f64>, d_log_std: &[f64]) -> Result<Vec<f64>>;

    fn params(&self) -> Vec<f32>;
    fn set_params(&mut self, params: &[f32]) -> Result<()>;
    fn describe_param(&self, idx: usize) -> String;

    /// Sample an action; returns it with its exact log density.
    fn act(&self, obs: &[f64], memory: &mut Self::Memory, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        use rand_distr::{Distribution, StandardNormal};
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite(format!("policy observation {obs:?}")));
        }
        let mean = self.step_mean(obs, memory)?;
        let log_std = self.log_std();
        let action: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(&m, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let lp = gaussian_log_prob(&action, &mean, &log_std);
        Ok((action, lp))
    }

    /// Mean action with its log density.
    fn act_deterministic(&self, obs: &[f64], memory: &mut Self::Memory) -> Result<(Vec<f64>, f64)> {
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite(format!("policy observation {obs:?}")));
        }
        let mean = self.step_mean(obs, memory)?;
        let lp = gaussian_log_prob(&mean, &mean, &self.log_std());
        Ok((mean, lp))
    }
}
