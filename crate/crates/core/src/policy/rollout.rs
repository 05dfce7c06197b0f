//! Episode execution and batched, deterministic trajectory collection.

use rand::Rng as _;
use rayon::prelude::*;

use super::PolicyModel;
use crate::envsim::{EnvInstance, EnvParams, GridSide, ParamGrid};
use crate::error::{Error, Result};
use crate::rng;

/// One episode as seen by the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Policy inputs, one per step (including any protocol augmentation).
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Raw environment observations: `raw_obs[t]` precedes `actions[t]`,
    /// and the last entry is the observation after the final step.
    pub raw_obs: Vec<Vec<f64>>,
    pub env_id: usize,
    /// The episode ended by failure rather than by the step limit.
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.rewards.len();
        if self.obs.len() != n || self.actions.len() != n || self.log_probs.len() != n || self.raw_obs.len() != n + 1 {
            return Err(Error::invalid("trajectory sequences have unequal lengths"));
        }
        if let Some(t) = self.log_probs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log-probability at step {t}")));
        }
        Ok(())
    }
}

/// `R_t = r_t + gamma * R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("discounted_returns: empty reward list"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1]")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Trajectories with per-step returns and normalized advantages.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

impl RolloutBatch {
    /// Generalized advantage estimates from per-step value predictions
    /// (`lambda = 1` gives `return - value`), then standardized over the
    /// batch. The value after the last step is taken as zero.
    pub fn new(trajectories: Vec<Trajectory>, gamma: f64, lambda: f64, values: &[Vec<f64>]) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::invalid("rollout batch needs at least one trajectory"));
        }
        if values.len() != trajectories.len() {
            return Err(Error::dim("value-prediction trajectories", trajectories.len(), values.len()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("advantage lambda {lambda} outside [0, 1]")));
        }
        let mut returns = Vec::with_capacity(trajectories.len());
        let mut raw = Vec::with_capacity(trajectories.len());
        for (tr, v) in trajectories.iter().zip(values) {
            tr.check()?;
            if v.len() != tr.len() {
                return Err(Error::dim("value-prediction steps", tr.len(), v.len()));
            }
            returns.push(discounted_returns(&tr.rewards, gamma)?);
            let mut adv = vec![0.0; tr.len()];
            let mut acc = 0.0;
            for t in (0..tr.len()).rev() {
                let next = if t + 1 < tr.len() { v[t + 1] } else { 0.0 };
                let delta = tr.rewards[t] + gamma * next - v[t];
                acc = delta + gamma * lambda * acc;
                adv[t] = acc;
            }
            raw.push(adv);
        }
        let n: usize = raw.iter().map(|a| a.len()).sum();
        let mean = raw.iter().flatten().sum::<f64>() / n as f64;
        let var = raw.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let advantages = raw
            .into_iter()
            .map(|a| {
                a.into_iter()
                    .map(|v| if std > 1e-12 { (v - mean) / std } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            trajectories,
            returns,
            advantages,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// Chooses the environment for each episode.
#[derive(Debug, Clone)]
pub struct EnvSampler {
    cells: Vec<(usize, EnvParams)>,
    dt: f64,
    episode_limit: usize,
}

impl EnvSampler {
    /// Uniform over every cell on one side of the grid.
    pub fn grid(grid: &ParamGrid, side: GridSide, dt: f64, episode_limit: usize) -> Result<Self> {
        let cells = (0..grid.num_cells())
            .map(|c| Ok((c, grid.params(side, c)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(cells, dt, episode_limit)
    }

    /// Always the same environment, reported under `env_id`.
    pub fn single(env_id: usize, params: EnvParams, dt: f64, episode_limit: usize) -> Result<Self> {
        Self::from_cells(vec![(env_id, params)], dt, episode_limit)
    }

    pub fn from_cells(cells: Vec<(usize, EnvParams)>, dt: f64, episode_limit: usize) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("environment sampler needs at least one cell"));
        }
        // Validates dt and the limit once up front.
        EnvInstance::new(cells[0].1.clone(), dt, episode_limit)?;
        Ok(Self {
            cells,
            dt,
            episode_limit,
        })
    }

    pub fn cells(&self) -> &[(usize, EnvParams)] {
        &self.cells
    }

    pub fn episode_limit(&self) -> usize {
        self.episode_limit
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Environment for an episode; the cell is a deterministic function of
    /// the episode seed.
    pub fn make(&self, episode_seed: u64) -> Result<(usize, EnvInstance)> {
        let k = if self.cells.len() == 1 {
            0
        } else {
            rng::stream(episode_seed, rng::tag("cell")).random_range(0..self.cells.len())
        };
        let (id, params) = &self.cells[k];
        Ok((*id, EnvInstance::new(params.clone(), self.dt, self.episode_limit)?))
    }
}

/// Reset seed for the task part of an episode. Every protocol that resets
/// before the task uses this, so all methods see the same initial states.
pub fn task_reset_seed(episode_seed: u64) -> u64 {
    rng::derive(episode_seed, rng::tag("task_reset"))
}

/// Reset seed for a probing phase that is followed by a fresh task reset.
pub fn probe_reset_seed(episode_seed: u64) -> u64 {
    rng::derive(episode_seed, rng::tag("probe_reset"))
}

/// How a method turns raw environment observations into policy inputs.
///
/// `begin` receives a freshly constructed environment, must leave it at the
/// initial state of the task episode, and may interact with it first.
pub trait ObsProtocol: Sync {
    type State: Send;

    /// Length of the extra input appended to every observation.
    fn extra_dim(&self) -> usize;

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<Self::State>;

    fn augment(&self, state: &Self::State, obs: &[f64]) -> Vec<f64>;

    /// Called after each action is chosen, before the environment steps.
    fn record(&self, _state: &mut Self::State, _obs: &[f64], _action: &[f64]) {}
}

/// Raw observations, fresh reset.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainObs;

impl ObsProtocol for PlainObs {
    type State = ();

    fn extra_dim(&self) -> usize {
        0
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<()> {
        env.reset(task_reset_seed(episode_seed));
        Ok(())
    }

    fn augment(&self, _state: &(), obs: &[f64]) -> Vec<f64> {
        obs.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
    /// With probability `epsilon` a uniform action in `[-1, 1]^d`, otherwise
    /// a stochastic policy action.
    EpsilonGreedy(f64),
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome<S> {
    pub trajectory: Trajectory,
    /// Undiscounted task reward.
    pub episode_return: f64,
    pub final_distance: Option<f64>,
    pub protocol_state: S,
}

/// Runs one episode; everything random derives from `episode_seed`.
pub fn run_episode<P: PolicyModel, O: ObsProtocol>(
    policy: &P,
    protocol: &O,
    sampler: &EnvSampler,
    episode_seed: u64,
    mode: ActionMode,
) -> Result<EpisodeOutcome<O::State>> {
    let (env_id, mut env) = sampler.make(episode_seed)?;
    let mut state = protocol.begin(&mut env, episode_seed)?;
    let mut raw = env.observe();
    let mut memory = policy.initial_memory();
    let mut r = rng::stream(episode_seed, rng::tag("actions"));
    let mut tr = Trajectory {
        obs: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        log_probs: Vec::new(),
        raw_obs: vec![raw.clone()],
        env_id,
        terminal: false,
    };
    loop {
        let x = protocol.augment(&state, &raw);
        let (action, lp) = match mode {
            ActionMode::Stochastic => policy.act(&x, &mut memory, &mut r)?,
            ActionMode::Deterministic => policy.act_deterministic(&x, &mut memory)?,
            ActionMode::EpsilonGreedy(eps) => {
                let mean = policy.step_mean(&x, &mut memory.clone())?;
                let (a, lp) = policy.act(&x, &mut memory, &mut r)?;
                if r.random::<f64>() < eps {
                    let u: Vec<f64> = (0..a.len()).map(|_| r.random_range(-1.0..=1.0)).collect();
                    let lp = super::gaussian_log_prob(&u, &mean, &policy.log_std());
                    (u, lp)
                } else {
                    (a, lp)
                }
            }
        };
        protocol.record(&mut state, &raw, &action);
        let step = env.step(&action)?;
        tr.obs.push(x);
        tr.actions.push(action);
        tr.rewards.push(step.reward);
        tr.log_probs.push(lp);
        tr.raw_obs.push(step.obs.clone());
        raw = step.obs;
        if step.done {
            tr.terminal = step.fell;
            break;
        }
    }
    Ok(EpisodeOutcome {
        episode_return: tr.total_reward(),
        final_distance: env.final_distance(),
        trajectory: tr,
        protocol_state: state,
    })
}

/// Collects whole episodes until at least `min_timesteps` steps are gathered.
///
/// Episode `k` uses seed `derive(seed, k)`. Episodes run in parallel in
/// rounds whose size depends only on earlier results, and the returned list
/// is the shortest prefix reaching the step target, so the output does not
/// depend on the number of worker threads.
pub fn collect_trajectories<P: PolicyModel, O: ObsProtocol>(
    policy: &P,
    protocol: &O,
    sampler: &EnvSampler,
    min_timesteps: usize,
    seed: u64,
    mode: ActionMode,
) -> Result<Vec<EpisodeOutcome<O::State>>> {
    let target = min_timesteps.max(1);
    let mut out: Vec<EpisodeOutcome<O::State>> = Vec::new();
    let mut steps = 0usize;
    while steps < target {
        let round = if out.is_empty() {
            (target / sampler.episode_limit()).clamp(1, 64)
        } else {
            let avg = steps as f64 / out.len() as f64;
            (((target - steps) as f64 / avg).ceil() as usize).clamp(1, 256)
        };
        let start = out.len() as u64;
        let results: Vec<Result<EpisodeOutcome<O::State>>> = (start..start + round as u64)
            .into_par_iter()
            .map(|k| run_episode(policy, protocol, sampler, rng::derive(seed, k), mode))
            .collect();
        for res in results {
            if steps >= target {
                break;
            }
            let ep = res?;
            steps += ep.trajectory.len();
            out.push(ep);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{grid_make, Family};
    use crate::policy::GaussianPolicy;

    fn puck_sampler() -> EnvSampler {
        let g = grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap();
        EnvSampler::grid(&g, GridSide::Train, 0.05, 100).unwrap()
    }

    #[test]
    fn returns_small_cases() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 1.0).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(discounted_returns(&[1.0, 0.0, 0.0], 0.5).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(discounted_returns(&[], 0.9).is_err());
        assert!(discounted_returns(&[1.0], 1.5).is_err());
    }

    #[test]
    fn returns_match_double_loop() {
        let mut r = rng::stream(3, 0);
        for _ in 0..20 {
            let rewards: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
            let gamma: f64 = r.random_range(0.0..=1.0);
            let got = discounted_returns(&rewards, gamma).unwrap();
            for t in 0..10 {
                let mut s = 0.0;
                for k in 0..10 - t {
                    s += gamma.powi(k as i32) * rewards[t + k];
                }
                assert!((got[t] - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn one_timestep_gives_one_full_episode() {
        let p = GaussianPolicy::new(10, &[8], 2, -0.5, 0).unwrap();
        let eps = collect_trajectories(&p, &PlainObs, &puck_sampler(), 1, 4, ActionMode::Stochastic).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].trajectory.len(), 100);
        eps[0].trajectory.check().unwrap();
    }

    #[test]
    fn collection_is_deterministic_and_covers_grid() {
        let p = GaussianPolicy::new(10, &[8], 2, -0.5, 0).unwrap();
        let s = puck_sampler();
        let a = collect_trajectories(&p, &PlainObs, &s, 10_000, 11, ActionMode::Stochastic).unwrap();
        let b = collect_trajectories(&p, &PlainObs, &s, 10_000, 11, ActionMode::Stochastic).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trajectory, y.trajectory);
        }
        let steps: usize = a.iter().map(|e| e.trajectory.len()).sum();
        assert!(steps >= 10_000);
        let mut seen = [false; 25];
        for e in &a {
            seen[e.trajectory.env_id] = true;
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn collection_ignores_thread_count() {
        let p = GaussianPolicy::new(10, &[8], 2, -0.5, 0).unwrap();
        let s = puck_sampler();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| collect_trajectories(&p, &PlainObs, &s, 1500, 2, ActionMode::Stochastic).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trajectory, y.trajectory);
        }
    }

    #[test]
    fn unit_lambda_gives_return_minus_value() {
        let mut r = rng::stream(8, 0);
        let tr = Trajectory {
            obs: vec![vec![0.0]; 6],
            actions: vec![vec![0.0]; 6],
            rewards: (0..6).map(|_| r.random_range(-1.0..1.0)).collect(),
            log_probs: vec![0.0; 6],
            raw_obs: vec![vec![0.0]; 7],
            env_id: 0,
            terminal: false,
        };
        let values: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut other = tr.clone();
        other.rewards.reverse();
        let b = RolloutBatch::new(vec![tr.clone(), other.clone()], 0.9, 1.0, &[values.clone(), values.clone()]).unwrap();
        let mut raw: Vec<f64> = Vec::new();
        for t in [&tr, &other] {
            let ret = discounted_returns(&t.rewards, 0.9).unwrap();
            raw.extend(ret.iter().zip(&values).map(|(a, b)| a - b));
        }
        let m = raw.iter().sum::<f64>() / 12.0;
        let s = (raw.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0).sqrt();
        for (got, want) in b.advantages.iter().flatten().zip(&raw) {
            assert!((got - (want - m) / s).abs() < 1e-10);
        }
    }

    #[test]
    fn advantages_are_standardized() {
        let p = GaussianPolicy::new(10, &[8], 2, -0.5, 0).unwrap();
        let eps = collect_trajectories(&p, &PlainObs, &puck_sampler(), 300, 1, ActionMode::Stochastic).unwrap();
        let trs: Vec<Trajectory> = eps.into_iter().map(|e| e.trajectory).collect();
        let zeros: Vec<Vec<f64>> = trs.iter().map(|t| vec![0.0; t.len()]).collect();
        let b = RolloutBatch::new(trs, 0.99, 0.95, &zeros).unwrap();
        let all: Vec<f64> = b.advantages.iter().flatten().copied().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn epsilon_one_ignores_policy() {
        let p = GaussianPolicy::new(10, &[8], 2, -30.0, 0).unwrap();
        let ep = run_episode(&p, &PlainObs, &puck_sampler(), 5, ActionMode::EpsilonGreedy(1.0)).unwrap();
        let mean = p.mean.predict(&ep.trajectory.obs[0]).unwrap();
        assert!((ep.trajectory.actions[0][0] - mean[0]).abs() > 1e-3);
        let det = run_episode(&p, &PlainObs, &puck_sampler(), 5, ActionMode::EpsilonGreedy(0.0)).unwrap();
        assert!((det.trajectory.actions[0][0] - mean[0]).abs() < 1e-4);
    }
}
