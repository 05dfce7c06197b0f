//! Oracle policy plus an online system-identification regressor.

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::protocols::{History, OracleObs, Osi, OsiObs};
use super::{Metrics, Setting, TrainConfig};
use crate::dataset::Moments;
use crate::envsim::GridSide;
use crate::epimodel::EPI_STEPS;
use crate::error::{Error, Result};
use crate::nn::{adam_step, mse_loss, Activation, AdamConfig, AdamState, Mlp, NetworkSpec};
use crate::policy::{collect_trajectories, train_policy, ActionMode, GaussianPolicy, ObsProtocol, Trajectory};
use crate::rng;

const OSI_HIDDEN: usize = 64;
const OSI_MINIBATCH: usize = 256;
const OSI_LR: f64 = 1e-3;
const VAL_EPISODES_PER_ENV: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemIdResult {
    pub oracle: GaussianPolicy,
    pub obs: OracleObs,
    pub osi: Osi,
    /// Validation MSE of the standardized parameters after each round.
    pub round_mse: Vec<f64>,
    /// MSE of always predicting the grid mean on the same windows.
    pub constant_mse: f64,
}

impl SystemIdResult {
    pub fn final_ratio(&self) -> f64 {
        self.round_mse.last().copied().unwrap_or(f64::NAN) / self.constant_mse
    }
}

/// History windows after each step of `tr`, exactly as the online protocol
/// sees them.
pub fn osi_windows(tr: &Trajectory, obs_dim: usize, act_dim: usize) -> Vec<Vec<f64>> {
    let mut h = History::new(obs_dim, act_dim);
    (0..tr.len())
        .map(|t| {
            h.push(&tr.raw_obs[t], &tr.actions[t]);
            h.flat()
        })
        .collect()
}

struct Windows {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl Windows {
    fn new() -> Self {
        Self { x: Vec::new(), y: Vec::new() }
    }

    fn add(&mut self, trs: &[Trajectory], setting: &Setting, obs: &OracleObs) {
        let f = setting.family();
        for tr in trs {
            let target = obs.standardize(&setting.grid.cell_values(GridSide::Train, tr.env_id));
            for w in osi_windows(tr, f.obs_dim(), f.act_dim()) {
                self.x.push(w);
                self.y.push(target.clone());
            }
        }
    }
}

fn to_array(rows: &[&Vec<f64>], m: Option<&Moments>) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut a = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        let v = m.map_or_else(|| r.to_vec(), |m| m.apply(r));
        a.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
    }
    a
}

fn fit(osi: &mut Osi, data: &Windows, epochs: usize, adam: &mut AdamState, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, rng::tag("osi_fit"));
    let mut order: Vec<usize> = (0..data.x.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(OSI_MINIBATCH) {
            let xs: Vec<&Vec<f64>> = chunk.iter().map(|&i| &data.x[i]).collect();
            let ys: Vec<&Vec<f64>> = chunk.iter().map(|&i| &data.y[i]).collect();
            let x = to_array(&xs, Some(&osi.input));
            let y = to_array(&ys, None);
            let (pred, cache) = osi.net.forward_batch(x.view())?;
            let (_, d) = mse_loss(pred.view(), y.view())?;
            let (g, _) = osi.net.backward_batch(&cache, d.view())?;
            adam_step(&mut osi.net.params, &g, adam)
                .map_err(|e| Error::Diverged(format!("system-id regressor, epoch {epoch}: {e}")))?;
        }
    }
    Ok(())
}

/// Mean squared error per parameter, and the same for the all-zeros
/// (grid-mean) prediction.
fn evaluate(osi: &Osi, data: &Windows) -> Result<(f64, f64)> {
    let xs: Vec<&Vec<f64>> = data.x.iter().collect();
    let ys: Vec<&Vec<f64>> = data.y.iter().collect();
    let pred = osi.net.predict_batch(to_array(&xs, Some(&osi.input)).view())?;
    let y = to_array(&ys, None);
    let n = y.len() as f64;
    let mse = (&pred - &y).mapv(|v| v * v).sum() / n;
    let constant = y.mapv(|v| v * v).sum() / n;
    Ok((mse, constant))
}

/// Trains the oracle, then alternates between fitting the regressor on all
/// windows gathered so far and gathering more windows with the oracle
/// driven by the regressor's own estimates.
pub fn train_system_id(cfg: &TrainConfig, setting: &Setting, metrics: &mut Metrics) -> Result<SystemIdResult> {
    cfg.validate()?;
    let family = setting.family();
    let (o, a) = (family.obs_dim(), family.act_dim());
    let seed = rng::derive(cfg.seed, rng::tag("system_id"));
    let obs = OracleObs::from_moments(&setting.grid.train_moments());
    let sampler = setting.sampler(GridSide::Train)?;
    let init = GaussianPolicy::new(
        o + obs.extra_dim(),
        &cfg.policy_hidden,
        a,
        cfg.init_log_std,
        rng::derive(seed, rng::tag("init")),
    )?;
    let (oracle, _) = train_policy(init, &obs, &sampler, &cfg.task_loop(), seed, |s| {
        metrics.push_iteration("system_id_oracle", s)
    })?;

    let mut val = Windows::new();
    let val_trs: Vec<Trajectory> = collect_trajectories(
        &oracle,
        &obs,
        &sampler,
        VAL_EPISODES_PER_ENV * setting.grid.num_cells() * setting.episode_limit,
        rng::derive(seed, rng::tag("osi_validation")),
        ActionMode::Deterministic,
    )?
    .into_iter()
    .map(|e| e.trajectory)
    .collect();
    val.add(&val_trs, setting, &obs);

    let mut train = Windows::new();
    let first: Vec<Trajectory> = collect_trajectories(
        &oracle,
        &obs,
        &sampler,
        cfg.osi_batch_timesteps,
        rng::derive(seed, rng::tag("osi_round") ^ 0),
        ActionMode::Stochastic,
    )?
    .into_iter()
    .map(|e| e.trajectory)
    .collect();
    train.add(&first, setting, &obs);

    let input = Moments::of(train.x.iter().map(|v| v.as_slice()), EPI_STEPS * (o + a));
    let spec = NetworkSpec::uniform(&[EPI_STEPS * (o + a), OSI_HIDDEN, OSI_HIDDEN, family.num_params()], Activation::Tanh)?;
    let mut osi = Osi {
        net: Mlp::new(spec, rng::derive(seed, rng::tag("osi_init"))),
        input,
    };
    let mut adam = AdamState::new(osi.net.params.len(), AdamConfig::with_lr(OSI_LR));
    let mut round_mse = Vec::with_capacity(cfg.osi_rounds);
    let mut constant_mse = f64::NAN;
    for round in 0..cfg.osi_rounds {
        if round > 0 {
            let proto = OsiObs {
                osi: &osi,
                obs_dim: o,
                act_dim: a,
            };
            let more: Vec<Trajectory> = collect_trajectories(
                &oracle,
                &proto,
                &sampler,
                cfg.osi_batch_timesteps,
                rng::derive(seed, rng::tag("osi_round") ^ round as u64),
                ActionMode::Stochastic,
            )?
            .into_iter()
            .map(|e| e.trajectory)
            .collect();
            train.add(&more, setting, &obs);
        }
        fit(&mut osi, &train, cfg.osi_epochs, &mut adam, rng::derive(seed, round as u64))?;
        let (mse, constant) = evaluate(&osi, &val)?;
        constant_mse = constant;
        metrics.push("system_id_osi", round, "val_mse", mse);
        metrics.push("system_id_osi", round, "constant_mse", constant);
        metrics.push("system_id_osi", round, "windows", train.x.len() as f64);
        log::info!("system id round {round}: val mse {mse:.4} (constant {constant:.4})");
        round_mse.push(mse);
    }
    Ok(SystemIdResult {
        oracle,
        obs,
        osi,
        round_mse,
        constant_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::Family;

    #[test]
    fn windows_match_online_history() {
        let tr = Trajectory {
            obs: vec![vec![0.0]; 3],
            actions: vec![vec![0.5], vec![2.0], vec![-0.25]],
            rewards: vec![0.0; 3],
            log_probs: vec![0.0; 3],
            raw_obs: vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            env_id: 0,
            terminal: false,
        };
        let w = osi_windows(&tr, 1, 1);
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].len(), EPI_STEPS * 2);
        assert_eq!(&w[2][..6], &[3.0, -0.25, 2.0, 1.0, 1.0, 0.5]);
        assert!(w[2][6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_run_reports_every_round() {
        let setting = Setting::default_for(Family::SlidePuck).unwrap();
        let cfg = TrainConfig {
            task_iterations: 1,
            task_batch_timesteps: 300,
            policy_hidden: vec![8],
            osi_rounds: 3,
            osi_batch_timesteps: 400,
            osi_epochs: 1,
            ..TrainConfig::default()
        };
        let mut m = Metrics::default();
        let r = train_system_id(&cfg, &setting, &mut m).unwrap();
        assert_eq!(r.round_mse.len(), 3);
        assert_eq!(r.osi.net.input_dim(), 120);
        assert_eq!(r.osi.net.output_dim(), 2);
        assert!(r.constant_mse > 0.0);
        assert_eq!(m.values("system_id_osi", "val_mse"), r.round_mse);
    }
}
