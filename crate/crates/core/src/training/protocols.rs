//! Observation protocols for the embedding-conditioned task policy and for
//! every baseline.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::envsim::EnvInstance;
use crate::epimodel::{EpiModels, EpiTrajectory, EPI_STEPS};
use crate::error::Result;
use crate::nn::Mlp;
use crate::policy::{probe_reset_seed, task_reset_seed, GaussianPolicy, ObsProtocol, PolicyModel, Trajectory};
use crate::dataset::Moments;
use crate::rng;

/// How probing actions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeActions {
    Stochastic,
    Deterministic,
    /// Uniform in `[-1, 1]^d`; the policy is not consulted.
    Uniform,
}

/// Runs up to [`EPI_STEPS`] steps from the environment's current state.
/// Actions draw on their own stream derived from `episode_seed`.
pub fn probe_rollout<P: PolicyModel>(
    policy: Option<&P>,
    env: &mut EnvInstance,
    env_id: usize,
    episode_seed: u64,
    actions: ProbeActions,
) -> Result<Trajectory> {
    let mut r = rng::stream(episode_seed, rng::tag("probe_actions"));
    let act_dim = env.family().act_dim();
    let mut memory = policy.map(|p| p.initial_memory());
    let mut tr = Trajectory {
        obs: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        log_probs: Vec::new(),
        raw_obs: vec![env.observe()],
        env_id,
        terminal: false,
    };
    for _ in 0..EPI_STEPS {
        let obs = env.observe();
        let (a, lp) = match (actions, policy, memory.as_mut()) {
            (ProbeActions::Stochastic, Some(p), Some(m)) => p.act(&obs, m, &mut r)?,
            (ProbeActions::Deterministic, Some(p), Some(m)) => p.act_deterministic(&obs, m)?,
            _ => ((0..act_dim).map(|_| r.random_range(-1.0..=1.0)).collect(), 0.0),
        };
        let step = env.step(&a)?;
        tr.obs.push(obs);
        tr.actions.push(a);
        tr.rewards.push(0.0);
        tr.log_probs.push(lp);
        tr.raw_obs.push(step.obs);
        if step.done {
            tr.terminal = step.fell;
            break;
        }
    }
    Ok(tr)
}

/// Resets for probing, probes, and embeds. The environment is left in its
/// post-probe state.
pub fn probe_and_embed(
    policy: &GaussianPolicy,
    models: &EpiModels,
    env: &mut EnvInstance,
    env_id: usize,
    episode_seed: u64,
    actions: ProbeActions,
) -> Result<(Vec<f64>, EpiTrajectory)> {
    env.reset(probe_reset_seed(episode_seed));
    let tr = probe_rollout(Some(policy), env, env_id, episode_seed, actions)?;
    let family = env.family();
    let tau = EpiTrajectory::from_trajectory(&tr, family.obs_dim(), family.act_dim())?;
    Ok((models.task_embedding(&tau)?, tau))
}

/// Start the task episode from where the probe left off, with a fresh step
/// budget.
fn continue_after_probe(env: &mut EnvInstance) -> Result<()> {
    let mut st = env.get_state();
    st.step = 0;
    env.set_state(&st)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// `[s_t ‖ psi(tau)]` where `tau` is a deterministic probe taken at the start
/// of the episode.
#[derive(Debug, Clone, Copy)]
pub struct EpiObs<'a> {
    pub policy: &'a GaussianPolicy,
    pub models: &'a EpiModels,
    pub reset_after_probe: bool,
}

impl ObsProtocol for EpiObs<'_> {
    type State = Vec<f64>;

    fn extra_dim(&self) -> usize {
        self.models.embedding_dim()
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<Vec<f64>> {
        let (e, _) = probe_and_embed(self.policy, self.models, env, 0, episode_seed, ProbeActions::Deterministic)?;
        if self.reset_after_probe {
            env.reset(task_reset_seed(episode_seed));
        } else {
            continue_after_probe(env)?;
        }
        Ok(e)
    }

    fn augment(&self, e: &Vec<f64>, obs: &[f64]) -> Vec<f64> {
        concat(obs, e)
    }
}

/// `[s_t ‖ rho]` with each parameter standardized over the training grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleObs {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl OracleObs {
    pub fn from_moments(moments: &[(f64, f64)]) -> Self {
        Self {
            mean: moments.iter().map(|m| m.0).collect(),
            std: moments.iter().map(|m| m.1.sqrt().max(1e-12)).collect(),
        }
    }

    pub fn standardize(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

impl ObsProtocol for OracleObs {
    type State = Vec<f64>;

    fn extra_dim(&self) -> usize {
        self.mean.len()
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<Vec<f64>> {
        env.reset(task_reset_seed(episode_seed));
        Ok(self.standardize(env.params().as_slice()))
    }

    fn augment(&self, rho: &Vec<f64>, obs: &[f64]) -> Vec<f64> {
        concat(obs, rho)
    }
}

/// `[s_t ‖ 10 raw (s, a) pairs]` from a uniform-random probe, then a fresh
/// reset.
#[derive(Debug, Clone, Copy)]
pub struct RandomProbeObs {
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl ObsProtocol for RandomProbeObs {
    type State = Vec<f64>;

    fn extra_dim(&self) -> usize {
        EPI_STEPS * (self.obs_dim + self.act_dim)
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<Vec<f64>> {
        env.reset(probe_reset_seed(episode_seed));
        let tr = probe_rollout::<GaussianPolicy>(None, env, 0, episode_seed, ProbeActions::Uniform)?;
        let tau = EpiTrajectory::from_trajectory(&tr, self.obs_dim, self.act_dim)?;
        env.reset(task_reset_seed(episode_seed));
        Ok(tau.flat().to_vec())
    }

    fn augment(&self, flat: &Vec<f64>, obs: &[f64]) -> Vec<f64> {
        concat(obs, flat)
    }
}

/// The last [`EPI_STEPS`] `(s, a)` pairs, most recent first, zero-filled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pairs: VecDeque<Vec<f64>>,
    width: usize,
}

impl History {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(EPI_STEPS + 1),
            width: obs_dim + act_dim,
        }
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64]) {
        let mut p = obs.to_vec();
        p.extend(action.iter().map(|v| v.clamp(-1.0, 1.0)));
        self.pairs.push_front(p);
        self.pairs.truncate(EPI_STEPS);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = vec![0.0; EPI_STEPS * self.width];
        for (k, p) in self.pairs.iter().enumerate() {
            v[k * self.width..(k + 1) * self.width].copy_from_slice(p);
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HistoryObs {
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl ObsProtocol for HistoryObs {
    type State = History;

    fn extra_dim(&self) -> usize {
        EPI_STEPS * (self.obs_dim + self.act_dim)
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<History> {
        env.reset(task_reset_seed(episode_seed));
        Ok(History::new(self.obs_dim, self.act_dim))
    }

    fn augment(&self, h: &History, obs: &[f64]) -> Vec<f64> {
        concat(obs, &h.flat())
    }

    fn record(&self, h: &mut History, obs: &[f64], action: &[f64]) {
        h.push(obs, action);
    }
}

/// A probing policy whose raw 10-step trajectory is appended to the task
/// observation.
#[derive(Debug, Clone, Copy)]
pub struct DirectProbeObs<'a> {
    pub probe: &'a GaussianPolicy,
    pub actions: ProbeActions,
}

#[derive(Debug, Clone)]
pub struct DirectProbeState {
    pub flat: Vec<f64>,
    pub probe: Trajectory,
}

impl ObsProtocol for DirectProbeObs<'_> {
    type State = DirectProbeState;

    fn extra_dim(&self) -> usize {
        EPI_STEPS * (self.probe.obs_dim() + self.probe.act_dim())
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<DirectProbeState> {
        env.reset(probe_reset_seed(episode_seed));
        let tr = probe_rollout(Some(self.probe), env, 0, episode_seed, self.actions)?;
        let tau = EpiTrajectory::from_trajectory(&tr, self.probe.obs_dim(), self.probe.act_dim())?;
        env.reset(task_reset_seed(episode_seed));
        Ok(DirectProbeState {
            flat: tau.flat().to_vec(),
            probe: tr,
        })
    }

    fn augment(&self, st: &DirectProbeState, obs: &[f64]) -> Vec<f64> {
        concat(obs, &st.flat)
    }
}

/// Online system identification: a regressor from the recent history to the
/// standardized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Osi {
    pub net: Mlp,
    pub input: Moments,
}

impl Osi {
    pub fn estimate(&self, history: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(&self.input.apply(history))
    }
}

/// `[s_t ‖ rho_hat]`, re-estimated after every step.
#[derive(Debug, Clone, Copy)]
pub struct OsiObs<'a> {
    pub osi: &'a Osi,
    pub obs_dim: usize,
    pub act_dim: usize,
}

#[derive(Debug, Clone)]
pub struct OsiState {
    pub history: History,
    pub estimate: Vec<f64>,
}

impl ObsProtocol for OsiObs<'_> {
    type State = OsiState;

    fn extra_dim(&self) -> usize {
        self.osi.net.output_dim()
    }

    fn begin(&self, env: &mut EnvInstance, episode_seed: u64) -> Result<OsiState> {
        env.reset(task_reset_seed(episode_seed));
        let history = History::new(self.obs_dim, self.act_dim);
        let estimate = self.osi.estimate(&history.flat())?;
        Ok(OsiState { history, estimate })
    }

    fn augment(&self, st: &OsiState, obs: &[f64]) -> Vec<f64> {
        concat(obs, &st.estimate)
    }

    fn record(&self, st: &mut OsiState, obs: &[f64], action: &[f64]) {
        st.history.push(obs, action);
        st.estimate = self
            .osi
            .estimate(&st.history.flat())
            .expect("history width is fixed when the protocol is built");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{grid_make, Family, GridSide};
    use crate::policy::{run_episode, ActionMode, EnvSampler};

    fn sampler() -> EnvSampler {
        let g = grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap();
        EnvSampler::grid(&g, GridSide::Train, 0.05, 100).unwrap()
    }

    #[test]
    fn history_is_zero_filled_and_most_recent_first() {
        let mut h = History::new(2, 1);
        for t in 0..3 {
            h.push(&[t as f64, 10.0 + t as f64], &[0.5]);
        }
        let f = h.flat();
        assert_eq!(f.len(), 30);
        assert_eq!(&f[..3], &[2.0, 12.0, 0.5]);
        assert_eq!(&f[6..9], &[0.0, 10.0, 0.5]);
        assert!(f[9..].iter().all(|v| *v == 0.0));
        for t in 3..15 {
            h.push(&[t as f64, 0.0], &[2.0]);
        }
        let f = h.flat();
        assert_eq!(f[0], 14.0);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[27], 5.0);
    }

    #[test]
    fn history_obs_at_step_three() {
        let s = sampler();
        let p = GaussianPolicy::new(130, &[8], 2, -0.5, 0).unwrap();
        let out = run_episode(&p, &HistoryObs { obs_dim: 10, act_dim: 2 }, &s, 4, ActionMode::Stochastic).unwrap();
        let x = &out.trajectory.obs[3];
        assert_eq!(x.len(), 130);
        assert!(x[10 + 3 * 12..].iter().all(|v| *v == 0.0));
        assert_eq!(&x[10..20], &out.trajectory.raw_obs[2][..]);
        assert!(x[10 + 2 * 12..10 + 3 * 12].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn oracle_and_random_probe_dimensions() {
        let s = sampler();
        let g = grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap();
        let o = OracleObs::from_moments(&g.train_moments());
        assert_eq!(o.extra_dim(), 2);
        let p = GaussianPolicy::new(12, &[8], 2, -0.5, 0).unwrap();
        let out = run_episode(&p, &o, &s, 1, ActionMode::Deterministic).unwrap();
        assert_eq!(out.trajectory.obs[0].len(), 12);
        let rp = RandomProbeObs { obs_dim: 10, act_dim: 2 };
        let p = GaussianPolicy::new(130, &[8], 2, -0.5, 0).unwrap();
        let a = run_episode(&p, &rp, &s, 1, ActionMode::Deterministic).unwrap();
        let b = run_episode(&p, &rp, &s, 1, ActionMode::Deterministic).unwrap();
        assert_eq!(a.protocol_state, b.protocol_state);
        assert!(a.protocol_state.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn probe_reset_keeps_task_start_identical() {
        // Both protocols start the task from the same state.
        let s = sampler();
        let g = grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap();
        let p = GaussianPolicy::new(12, &[8], 2, -0.5, 0).unwrap();
        let o = OracleObs::from_moments(&g.train_moments());
        let rp = RandomProbeObs { obs_dim: 10, act_dim: 2 };
        let q = GaussianPolicy::new(130, &[8], 2, -0.5, 0).unwrap();
        for seed in 0..5 {
            let a = run_episode(&p, &o, &s, seed, ActionMode::Deterministic).unwrap();
            let b = run_episode(&q, &rp, &s, seed, ActionMode::Deterministic).unwrap();
            assert_eq!(a.trajectory.raw_obs[0], b.trajectory.raw_obs[0]);
        }
    }
}
