//! The embedding network, the two transition prediction models, the
//! separation regularizer and the probing reward.
//!
//! `f` maps a normalized `(s, a)` to the normalized next state. `f_epi` sees
//! the same input plus `psi(tau)`, the embedding of a short probing
//! trajectory from the same environment. The probing reward is how much
//! `f_epi` beats `f` on that environment's validation transitions.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Moments, NormStats, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::{adam_step, mse_loss, Activation, AdamConfig, AdamState, Mlp, NetworkSpec};
use crate::policy::Trajectory;
use crate::rng;

/// Length of a probing trajectory.
pub const EPI_STEPS: usize = 10;

/// Up to [`EPI_STEPS`] raw `(observation, action)` pairs, zero-padded when
/// the probing episode ended early.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiTrajectory {
    flat: Vec<f64>,
    len: usize,
    obs_dim: usize,
    act_dim: usize,
    pub env_id: usize,
}

impl EpiTrajectory {
    pub fn new(obs: &[Vec<f64>], actions: &[Vec<f64>], obs_dim: usize, act_dim: usize, env_id: usize) -> Result<Self> {
        if obs.len() != actions.len() {
            return Err(Error::dim("probe actions vs observations", obs.len(), actions.len()));
        }
        if obs.len() > EPI_STEPS {
            return Err(Error::invalid(format!(
                "probing trajectory has {} steps, at most {EPI_STEPS} allowed",
                obs.len()
            )));
        }
        let w = obs_dim + act_dim;
        let mut flat = vec![0.0; EPI_STEPS * w];
        for (k, (o, a)) in obs.iter().zip(actions).enumerate() {
            if o.len() != obs_dim {
                return Err(Error::dim("probe observation", obs_dim, o.len()));
            }
            if a.len() != act_dim {
                return Err(Error::dim("probe action", act_dim, a.len()));
            }
            flat[k * w..k * w + obs_dim].copy_from_slice(o);
            flat[k * w + obs_dim..(k + 1) * w].copy_from_slice(a);
        }
        Ok(Self {
            flat,
            len: obs.len(),
            obs_dim,
            act_dim,
            env_id,
        })
    }

    /// The first steps of a rollout, with actions clipped as executed.
    pub fn from_trajectory(tr: &Trajectory, obs_dim: usize, act_dim: usize) -> Result<Self> {
        let n = tr.len().min(EPI_STEPS);
        let actions: Vec<Vec<f64>> = tr.actions[..n]
            .iter()
            .map(|a| a.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
            .collect();
        Self::new(&tr.raw_obs[..n], &actions, obs_dim, act_dim, tr.env_id)
    }

    pub fn zeros(obs_dim: usize, act_dim: usize, env_id: usize) -> Self {
        Self {
            flat: vec![0.0; EPI_STEPS * (obs_dim + act_dim)],
            len: 0,
            obs_dim,
            act_dim,
            env_id,
        }
    }

    /// Raw values, `EPI_STEPS * (obs_dim + act_dim)` long.
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Number of real (unpadded) steps.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> [bool; EPI_STEPS] {
        std::array::from_fn(|k| k < self.len)
    }

    pub fn step(&self, k: usize) -> (&[f64], &[f64]) {
        let w = self.obs_dim + self.act_dim;
        (
            &self.flat[k * w..k * w + self.obs_dim],
            &self.flat[k * w + self.obs_dim..(k + 1) * w],
        )
    }

    /// Embedding-network input: normalized steps, padding left at zero.
    pub fn normalized_into(&self, stats: &NormStats, out: &mut [f64]) -> Result<()> {
        let w = self.obs_dim + self.act_dim;
        if stats.s.mean.len() != self.obs_dim || stats.a.mean.len() != self.act_dim {
            return Err(Error::dim("probe vs normalization statistics", stats.s.mean.len() + stats.a.mean.len(), w));
        }
        if out.len() != EPI_STEPS * w {
            return Err(Error::dim("embedding input", EPI_STEPS * w, out.len()));
        }
        out.fill(0.0);
        for k in 0..self.len {
            let (o, a) = self.step(k);
            stats.s.apply_into(o, &mut out[k * w..k * w + self.obs_dim]);
            stats.a.apply_into(a, &mut out[k * w + self.obs_dim..(k + 1) * w]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub d_min: f64,
    pub sigma_max: f64,
    pub lambda_sigma: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            sigma_max: 0.1,
            lambda_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpiModelConfig {
    /// 0 selects the family default.
    pub embedding_dim: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub separation: SeparationConfig,
    /// Weight of the separation loss in the joint objective.
    pub separation_weight: f64,
    /// Number of environments drawn for each separation-loss evaluation;
    /// 0 uses all of them.
    pub separation_envs: usize,
    /// Predict the normalized change of state instead of the next state.
    pub predict_delta: bool,
    /// Use `L_epi_pred - L_pred` as the reward instead of `L_pred - L_epi_pred`.
    pub flip_reward_sign: bool,
}

impl Default for EpiModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 0,
            epochs: 20,
            minibatch: 256,
            learning_rate: 1e-3,
            separation: SeparationConfig::default(),
            separation_weight: 0.1,
            separation_envs: 0,
            predict_delta: true,
            flip_reward_sign: false,
        }
    }
}

pub fn embedding_spec(obs_dim: usize, act_dim: usize, embedding_dim: usize) -> Result<NetworkSpec> {
    NetworkSpec::uniform(&[EPI_STEPS * (obs_dim + act_dim), 32, 32, embedding_dim], Activation::Relu)
}

pub fn pred_spec(obs_dim: usize, act_dim: usize, extra: usize) -> Result<NetworkSpec> {
    NetworkSpec::uniform(&[obs_dim + act_dim + extra, 128, 128, 128, 128, obs_dim], Activation::Relu)
}

/// `f`, `f_epi` and `psi` together with the normalization they were trained
/// under.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiModels {
    pub f: Mlp,
    pub f_epi: Mlp,
    pub psi: Mlp,
    pub stats: NormStats,
    pub predict_delta: bool,
    /// Moments of `psi` over the pool it was fitted on; applied to the
    /// embedding handed to the task policy.
    pub embedding_norm: Moments,
}

impl EpiModels {
    pub fn new(obs_dim: usize, act_dim: usize, embedding_dim: usize, stats: NormStats, seed: u64) -> Result<Self> {
        if stats.s.mean.len() != obs_dim || stats.a.mean.len() != act_dim {
            return Err(Error::dim("normalization statistics", obs_dim + act_dim, stats.s.mean.len() + stats.a.mean.len()));
        }
        Ok(Self {
            f: Mlp::new(pred_spec(obs_dim, act_dim, 0)?, rng::derive(seed, rng::tag("f_init"))),
            f_epi: Mlp::new(pred_spec(obs_dim, act_dim, embedding_dim)?, rng::derive(seed, rng::tag("f_epi_init"))),
            psi: Mlp::new(embedding_spec(obs_dim, act_dim, embedding_dim)?, rng::derive(seed, rng::tag("psi_init"))),
            stats,
            predict_delta: false,
            embedding_norm: Moments {
                mean: vec![0.0; embedding_dim],
                std: vec![1.0; embedding_dim],
            },
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.stats.s.mean.len()
    }

    pub fn act_dim(&self) -> usize {
        self.stats.a.mean.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.psi.output_dim()
    }

    pub fn embed(&self, tau: &EpiTrajectory) -> Result<Vec<f64>> {
        embed(&self.psi, &self.stats, tau)
    }

    /// Standardized embedding, as consumed by the task policy.
    pub fn task_embedding(&self, tau: &EpiTrajectory) -> Result<Vec<f64>> {
        let mut e = self.embed(tau)?;
        for ((v, m), s) in e.iter_mut().zip(&self.embedding_norm.mean).zip(&self.embedding_norm.std) {
            *v = (*v - m) / s;
        }
        Ok(e)
    }

    /// Embedding-network inputs for several probes, one per row.
    pub fn psi_inputs(&self, taus: &[&EpiTrajectory]) -> Result<Array2<f64>> {
        psi_inputs(&self.stats, self.psi.input_dim(), taus)
    }

    pub fn embed_batch(&self, taus: &[&EpiTrajectory]) -> Result<Array2<f64>> {
        self.psi.predict_batch(self.psi_inputs(taus)?.view())
    }
}

fn psi_inputs(stats: &NormStats, width: usize, taus: &[&EpiTrajectory]) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((taus.len(), width));
    for (mut row, tau) in x.rows_mut().into_iter().zip(taus) {
        tau.normalized_into(stats, row.as_slice_mut().expect("standard layout"))?;
    }
    Ok(x)
}

pub fn embed(psi: &Mlp, stats: &NormStats, tau: &EpiTrajectory) -> Result<Vec<f64>> {
    let mut x = vec![0.0; tau.flat.len()];
    tau.normalized_into(stats, &mut x)?;
    psi.predict(&x)
}

/// Normalized model inputs and targets for a set of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub env_ids: Vec<usize>,
}

impl PredBatch {
    pub fn from_dataset(ds: &TransitionDataset, idx: &[usize], predict_delta: bool) -> Self {
        let (x, mut y) = ds.normalized(idx);
        if predict_delta {
            let stats = &ds.stats().s_next;
            for (mut row, &i) in y.rows_mut().into_iter().zip(idx) {
                let base = stats.apply(&ds.transitions()[i].s);
                for (v, b) in row.iter_mut().zip(base) {
                    *v -= b;
                }
            }
        }
        let env_ids = idx.iter().map(|&i| ds.transitions()[i].env_id).collect();
        Self { x, y, env_ids }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn with_embedding(x: ArrayView2<f64>, e: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), x.ncols() + e.ncols()));
    out.slice_mut(s![.., ..x.ncols()]).assign(&x);
    out.slice_mut(s![.., x.ncols()..]).assign(&e);
    out
}

/// Mean squared L2 error of `f` on the batch.
pub fn pred_loss(f: &Mlp, batch: &PredBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("prediction loss over an empty batch"));
    }
    Ok(mse_loss(f.predict_batch(batch.x.view())?.view(), batch.y.view())?.0)
}

fn check_pairing(batch: &PredBatch, taus: &[&EpiTrajectory]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("prediction loss over an empty batch"));
    }
    if taus.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} transitions but {} probing trajectories; every transition needs one",
            batch.len(),
            taus.len()
        )));
    }
    if let Some(i) = (0..taus.len()).find(|&i| taus[i].env_id != batch.env_ids[i]) {
        return Err(Error::invalid(format!(
            "transition {i} is from environment {} but its probe is from {}",
            batch.env_ids[i], taus[i].env_id
        )));
    }
    Ok(())
}

/// Mean squared error of `f_epi` where row `i` is conditioned on
/// `psi(taus[i])`.
pub fn epi_pred_loss(models: &EpiModels, batch: &PredBatch, taus: &[&EpiTrajectory]) -> Result<f64> {
    check_pairing(batch, taus)?;
    let e = models.embed_batch(taus)?;
    let pred = models.f_epi.predict_batch(with_embedding(batch.x.view(), e.view()).view())?;
    Ok(mse_loss(pred.view(), batch.y.view())?.0)
}

/// Loss together with its gradients for `f_epi` and for `psi`.
pub fn epi_pred_loss_grad(
    models: &EpiModels,
    batch: &PredBatch,
    taus: &[&EpiTrajectory],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pairing(batch, taus)?;
    epi_grad_from_inputs(models, batch, models.psi_inputs(taus)?.view())
}

fn epi_grad_from_inputs(
    models: &EpiModels,
    batch: &PredBatch,
    psi_in: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (e, psi_cache) = models.psi.forward_batch(psi_in)?;
    let (pred, cache) = models.f_epi.forward_batch(with_embedding(batch.x.view(), e.view()).view())?;
    let (loss, d_pred) = mse_loss(pred.view(), batch.y.view())?;
    let (g_f, d_in) = models.f_epi.backward_batch(&cache, d_pred.view())?;
    let d_e = d_in.slice(s![.., batch.x.ncols()..]);
    let (g_psi, _) = models.psi.backward_batch(&psi_cache, d_e)?;
    Ok((loss, g_f, g_psi))
}

/// Per-environment mean and diagonal (maximum-likelihood) variance of a set
/// of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Statistics per label, ordered by label.
pub fn embedding_stats(emb: ArrayView2<f64>, labels: &[usize]) -> Result<BTreeMap<usize, EmbeddingStats>> {
    if labels.len() != emb.nrows() {
        return Err(Error::dim("embedding labels", emb.nrows(), labels.len()));
    }
    let d = emb.ncols();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(l, rows)| {
            let n = rows.len() as f64;
            let mut mean = vec![0.0; d];
            for &r in &rows {
                for k in 0..d {
                    mean[k] += emb[[r, k]];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; d];
            for &r in &rows {
                for k in 0..d {
                    var[k] += (emb[[r, k]] - mean[k]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (
                l,
                EmbeddingStats {
                    count: rows.len(),
                    mean,
                    var,
                },
            )
        })
        .collect())
}

/// `sum_{i<j} max(0, d_min - |mu_i - mu_j|)^2 + lambda * sum_i sum_k max(0, var_ik - sigma_max)^2`.
///
/// Groups with a single member contribute their mean but no variance term.
pub fn separation_loss(emb: ArrayView2<f64>, labels: &[usize], cfg: &SeparationConfig) -> Result<f64> {
    Ok(separation_loss_grad(emb, labels, cfg)?.0)
}

/// The loss and its gradient with respect to every embedding row.
pub fn separation_loss_grad(
    emb: ArrayView2<f64>,
    labels: &[usize],
    cfg: &SeparationConfig,
) -> Result<(f64, Array2<f64>)> {
    let stats = embedding_stats(emb, labels)?;
    if stats.len() < 2 {
        return Err(Error::invalid("separation loss needs at least two environments"));
    }
    let d = emb.ncols();
    let groups: Vec<(usize, &EmbeddingStats)> = stats.iter().map(|(l, s)| (*l, s)).collect();
    let mut d_mean: BTreeMap<usize, Vec<f64>> = groups.iter().map(|(l, _)| (*l, vec![0.0; d])).collect();
    let mut d_var: BTreeMap<usize, Vec<f64>> = d_mean.clone();
    let mut loss = 0.0;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (li, si) = groups[i];
            let (lj, sj) = groups[j];
            let diff: Vec<f64> = (0..d).map(|k| si.mean[k] - sj.mean[k]).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gap = cfg.d_min - dist;
            if gap > 0.0 {
                loss += gap * gap;
                if dist > 0.0 {
                    for k in 0..d {
                        let g = -2.0 * gap * diff[k] / dist;
                        d_mean.get_mut(&li).expect("group")[k] += g;
                        d_mean.get_mut(&lj).expect("group")[k] -= g;
                    }
                }
            }
        }
    }
    for (l, st) in &groups {
        if st.count < 2 {
            continue;
        }
        for k in 0..d {
            let excess = st.var[k] - cfg.sigma_max;
            if excess > 0.0 {
                loss += cfg.lambda_sigma * excess * excess;
                d_var.get_mut(l).expect("group")[k] = 2.0 * cfg.lambda_sigma * excess;
            }
        }
    }
    let mut grad = Array2::zeros(emb.dim());
    for (r, &l) in labels.iter().enumerate() {
        let st = &stats[&l];
        let n = st.count as f64;
        for k in 0..d {
            grad[[r, k]] = d_mean[&l][k] / n + d_var[&l][k] * 2.0 * (emb[[r, k]] - st.mean[k]) / n;
        }
    }
    Ok((loss, grad))
}

/// Probing trajectories per training environment, indexed by `env_id`.
pub type ProbeSet = Vec<Vec<EpiTrajectory>>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredTrainReport {
    /// Mean training loss of each epoch.
    pub epoch_pred: Vec<f64>,
    pub epoch_epi_pred: Vec<f64>,
    pub epoch_separation: Vec<f64>,
    pub val_pred: f64,
    pub val_epi_pred: f64,
}

fn diverged(what: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Diverged(format!("{what} at epoch {epoch}: {msg}")),
        other => other,
    }
}

/// Trains fresh `f`, `f_epi` and `psi` on the training split. Each
/// transition is paired with a probe drawn from its environment's entry in
/// `probes`.
pub fn train_pred_models(
    ds: &TransitionDataset,
    probes: &ProbeSet,
    cfg: &EpiModelConfig,
    with_separation: bool,
    seed: u64,
) -> Result<(EpiModels, PredTrainReport)> {
    let family = ds.family();
    let e_dim = if cfg.embedding_dim == 0 {
        family.default_embedding_dim()
    } else {
        cfg.embedding_dim
    };
    if cfg.minibatch == 0 {
        return Err(Error::invalid("prediction-model minibatch must be positive"));
    }
    let needs: std::collections::BTreeSet<usize> = ds.transitions().iter().map(|t| t.env_id).collect();
    if let Some(&e) = needs.iter().find(|&&e| probes.get(e).is_none_or(|p| p.is_empty())) {
        return Err(Error::invalid(format!("no probing trajectory for environment {e}")));
    }
    let mut models = EpiModels::new(family.obs_dim(), family.act_dim(), e_dim, ds.stats().clone(), seed)?;
    models.predict_delta = cfg.predict_delta;
    copy_into_conditioned(&models.f, &mut models.f_epi);

    // Probe inputs are fixed for the whole fit.
    let pool: Vec<&EpiTrajectory> = probes.iter().flatten().collect();
    let pool_in = models.psi_inputs(&pool)?;
    let mut pool_of_env: Vec<Vec<usize>> = vec![Vec::new(); probes.len()];
    for (i, t) in pool.iter().enumerate() {
        if t.env_id >= pool_of_env.len() {
            pool_of_env.resize(t.env_id + 1, Vec::new());
        }
        pool_of_env[t.env_id].push(i);
    }
    let sep_envs: Vec<usize> = (0..pool_of_env.len()).filter(|&e| !pool_of_env[e].is_empty()).collect();
    let with_separation = with_separation && sep_envs.len() >= 2;

    let acfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam_f = AdamState::new(models.f.params.len(), acfg);
    let mut adam_fe = AdamState::new(models.f_epi.params.len(), acfg);
    let mut adam_psi = AdamState::new(models.psi.params.len(), acfg);
    let mut r = rng::stream(seed, rng::tag("pred_fit"));
    let mut order = ds.train_indices().to_vec();
    let mut report = PredTrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut sum_f, mut sum_fe, mut sum_sep, mut rows, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.minibatch) {
            let batch = PredBatch::from_dataset(ds, chunk, cfg.predict_delta);

            let (pred, cache) = models.f.forward_batch(batch.x.view())?;
            let (loss_f, d_pred) = mse_loss(pred.view(), batch.y.view())?;
            let (g_f, _) = models.f.backward_batch(&cache, d_pred.view())?;
            adam_step(&mut models.f.params, &g_f, &mut adam_f).map_err(|e| diverged("f", epoch, e))?;

            let picks: Vec<usize> = batch
                .env_ids
                .iter()
                .map(|&e| {
                    let p = &pool_of_env[e];
                    p[r.random_range(0..p.len())]
                })
                .collect();
            let psi_in = pool_in.select(Axis(0), &picks);
            let (loss_fe, g_fe, mut g_psi) = epi_grad_from_inputs(&models, &batch, psi_in.view())?;

            if with_separation {
                let envs: Vec<usize> = if cfg.separation_envs >= 2 && cfg.separation_envs < sep_envs.len() {
                    rand::seq::index::sample(&mut r, sep_envs.len(), cfg.separation_envs)
                        .into_iter()
                        .map(|k| sep_envs[k])
                        .collect()
                } else {
                    sep_envs.clone()
                };
                let rows_sel: Vec<usize> = envs.iter().flat_map(|&e| pool_of_env[e].iter().copied()).collect();
                let labels: Vec<usize> = rows_sel.iter().map(|&i| pool[i].env_id).collect();
                let x = pool_in.select(Axis(0), &rows_sel);
                let (emb, cache) = models.psi.forward_batch(x.view())?;
                let (sep, d_emb) = separation_loss_grad(emb.view(), &labels, &cfg.separation)?;
                let (g_sep, _) = models.psi.backward_batch(&cache, (d_emb * cfg.separation_weight).view())?;
                for (g, s) in g_psi.iter_mut().zip(g_sep) {
                    *g += s;
                }
                sum_sep += sep;
            }
            adam_step(&mut models.f_epi.params, &g_fe, &mut adam_fe).map_err(|e| diverged("f_epi", epoch, e))?;
            adam_step(&mut models.psi.params, &g_psi, &mut adam_psi).map_err(|e| diverged("psi", epoch, e))?;

            if !(loss_f.is_finite() && loss_fe.is_finite()) {
                return Err(Error::Diverged(format!(
                    "prediction losses became f = {loss_f}, f_epi = {loss_fe} at epoch {epoch}"
                )));
            }
            sum_f += loss_f * chunk.len() as f64;
            sum_fe += loss_fe * chunk.len() as f64;
            rows += chunk.len();
            steps += 1;
        }
        report.epoch_pred.push(sum_f / rows.max(1) as f64);
        report.epoch_epi_pred.push(sum_fe / rows.max(1) as f64);
        report.epoch_separation.push(sum_sep / steps.max(1) as f64);
    }

    let val = ds.val_indices();
    if val.is_empty() {
        report.val_pred = f64::NAN;
        report.val_epi_pred = f64::NAN;
    } else {
        let batch = PredBatch::from_dataset(ds, val, cfg.predict_delta);
        report.val_pred = pred_loss(&models.f, &batch)?;
        let mut vr = rng::stream(seed, rng::tag("pred_val_probes"));
        let taus: Vec<&EpiTrajectory> = batch
            .env_ids
            .iter()
            .map(|&e| {
                let p = &pool_of_env[e];
                pool[p[vr.random_range(0..p.len())]]
            })
            .collect();
        report.val_epi_pred = epi_pred_loss(&models, &batch, &taus)?;
    }
    let emb: Vec<Vec<f64>> = models.psi.predict_batch(pool_in.view())?.outer_iter().map(|r| r.to_vec()).collect();
    models.embedding_norm = Moments::of(emb.iter().map(|r| r.as_slice()), e_dim);
    Ok((models, report))
}

/// Makes `f_epi` compute exactly what `f` computes: shared weights are
/// copied and the embedding columns of the first layer are zeroed.
pub fn copy_into_conditioned(f: &Mlp, f_epi: &mut Mlp) {
    for l in 0..f.params.num_layers() {
        let (rows, cols) = f.params.shape(l);
        let wide = f_epi.params.shape(l).1;
        let src = f.params.weights(l).to_vec();
        let dst = f_epi.params.weights_mut(l);
        for r in 0..rows {
            for c in 0..wide {
                dst[r * wide + c] = if c < cols { src[r * cols + c] } else { 0.0 };
            }
        }
        f_epi.params.bias_mut(l).copy_from_slice(f.params.bias(l));
    }
}

fn signed(l_pred: f64, l_epi_pred: f64, flip_sign: bool) -> f64 {
    if flip_sign {
        l_epi_pred - l_pred
    } else {
        l_pred - l_epi_pred
    }
}

fn conditioned_loss(models: &EpiModels, batch: &PredBatch, embedding: &[f64]) -> Result<f64> {
    let e = Array2::from_shape_fn((batch.len(), embedding.len()), |(_, k)| embedding[k]);
    let pred = models.f_epi.predict_batch(with_embedding(batch.x.view(), e.view()).view())?;
    Ok(mse_loss(pred.view(), batch.y.view())?.0)
}

/// `L_pred - L_epi_pred(psi(tau))` on validation transitions from `tau`'s
/// environment; positive when the probe makes prediction easier.
pub fn epi_reward(tau: &EpiTrajectory, models: &EpiModels, val: &PredBatch, flip_sign: bool) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid(format!(
            "no validation transitions for environment {}",
            tau.env_id
        )));
    }
    if let Some(&e) = val.env_ids.iter().find(|&&e| e != tau.env_id) {
        return Err(Error::invalid(format!(
            "validation slice for environment {} contains a transition from {e}",
            tau.env_id
        )));
    }
    let l_pred = pred_loss(&models.f, val)?;
    let l_epi = conditioned_loss(models, val, &models.embed(tau)?)?;
    Ok(signed(l_pred, l_epi, flip_sign))
}

/// Scores probes against per-environment validation slices, caching the
/// unconditioned loss of each slice.
#[derive(Debug, Clone)]
pub struct EpiRewarder<'a> {
    models: &'a EpiModels,
    slices: Vec<Option<(PredBatch, f64)>>,
    flip_sign: bool,
}

impl<'a> EpiRewarder<'a> {
    pub fn new(models: &'a EpiModels, ds: &TransitionDataset, num_envs: usize, flip_sign: bool) -> Result<Self> {
        let slices = ds
            .by_env(ds.val_indices(), num_envs)
            .into_iter()
            .map(|idx| {
                if idx.is_empty() {
                    return Ok(None);
                }
                let b = PredBatch::from_dataset(ds, &idx, models.predict_delta);
                let l = pred_loss(&models.f, &b)?;
                Ok(Some((b, l)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models,
            slices,
            flip_sign,
        })
    }

    pub fn reward(&self, tau: &EpiTrajectory) -> Result<f64> {
        let Some(Some((batch, l_pred))) = self.slices.get(tau.env_id) else {
            return Err(Error::invalid(format!(
                "no validation transitions for environment {}",
                tau.env_id
            )));
        };
        let l_epi = conditioned_loss(self.models, batch, &self.models.embed(tau)?)?;
        Ok(signed(*l_pred, l_epi, self.flip_sign))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_and_freeze, Transition};
    use crate::envsim::{grid_make, Family, ParamGrid};
    use rand::Rng;

    fn grid() -> ParamGrid {
        grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap()
    }

    /// A synthetic "physics": next state depends on the action and on a
    /// per-environment scale.
    fn synthetic(n: usize, envs: &[usize], seed: u64) -> Vec<Transition> {
        let mut r = rng::stream(seed, 1);
        (0..n)
            .map(|i| {
                let env = envs[i % envs.len()];
                let scale = 0.5 + 0.25 * (env % 5) as f64;
                let s: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                let mut s_next = s.clone();
                s_next[2] += scale * a[0];
                s_next[3] += scale * a[1];
                Transition {
                    s,
                    a,
                    s_next,
                    env_id: env,
                    vine_group: None,
                }
            })
            .collect()
    }

    /// Probes that reveal the scale: obs[2] carries it.
    fn probes(envs: &[usize], per_env: usize, seed: u64) -> ProbeSet {
        let mut r = rng::stream(seed, 2);
        let mut out = vec![Vec::new(); 25];
        for &e in envs {
            let scale = 0.5 + 0.25 * (e % 5) as f64;
            for _ in 0..per_env {
                let obs: Vec<Vec<f64>> = (0..EPI_STEPS)
                    .map(|_| {
                        let mut o = vec![0.0; 10];
                        o[2] = scale + r.random_range(-0.01..0.01);
                        o
                    })
                    .collect();
                let act = vec![vec![0.5, -0.5]; EPI_STEPS];
                out[e].push(EpiTrajectory::new(&obs, &act, 10, 2, e).unwrap());
            }
        }
        out
    }

    fn small_models(seed: u64) -> EpiModels {
        let ds = split_and_freeze(&grid(), synthetic(200, &[0, 1, 2], 0), 0.2, 0).unwrap();
        EpiModels::new(10, 2, 2, ds.stats().clone(), seed).unwrap()
    }

    #[test]
    fn trajectory_padding_and_mask() {
        let obs = vec![vec![1.0; 10]; 3];
        let act = vec![vec![0.5; 2]; 3];
        let t = EpiTrajectory::new(&obs, &act, 10, 2, 4).unwrap();
        assert_eq!(t.flat().len(), 120);
        assert_eq!(t.len(), 3);
        assert_eq!(t.mask().iter().filter(|m| **m).count(), 3);
        assert!(t.flat()[36..].iter().all(|v| *v == 0.0));
        assert!(EpiTrajectory::new(&vec![vec![0.0; 10]; 11], &vec![vec![0.0; 2]; 11], 10, 2, 0).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_zero_for_zero_bias() {
        let m = small_models(0);
        let t = probes(&[1], 1, 0)[1][0].clone();
        assert_eq!(m.embed(&t).unwrap(), m.embed(&t).unwrap());
        let mut psi = m.psi.clone();
        for l in 0..psi.params.num_layers() {
            psi.params.bias_mut(l).fill(0.0);
        }
        // Zero input after normalization needs zero stats.
        let stats = NormStats {
            s: crate::dataset::Moments {
                mean: vec![0.0; 10],
                std: vec![1.0; 10],
            },
            a: crate::dataset::Moments {
                mean: vec![0.0; 2],
                std: vec![1.0; 2],
            },
            s_next: m.stats.s_next.clone(),
        };
        let z = EpiTrajectory::zeros(10, 2, 0);
        assert!(embed(&psi, &stats, &z).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_identities() {
        let m = small_models(1);
        let ds = split_and_freeze(&grid(), synthetic(50, &[0], 3), 0.2, 0).unwrap();
        let mut b = PredBatch::from_dataset(&ds, &ds.train_indices()[..1], false);
        let p = m.f.predict_batch(b.x.view()).unwrap();
        b.y.assign(&p);
        assert_eq!(pred_loss(&m.f, &b).unwrap(), 0.0);
        b.y[[0, 3]] += 1.0;
        assert!((pred_loss(&m.f, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_losses_match_per_sample_oracle() {
        let m = small_models(2);
        let ds = split_and_freeze(&grid(), synthetic(300, &[0, 1, 2], 4), 0.2, 0).unwrap();
        let idx = ds.train_indices();
        let b = PredBatch::from_dataset(&ds, idx, false);
        let pr = probes(&[0, 1, 2], 3, 1);
        let taus: Vec<&EpiTrajectory> = b.env_ids.iter().enumerate().map(|(i, &e)| &pr[e][i % 3]).collect();
        let mut of = 0.0;
        let mut oe = 0.0;
        for i in 0..b.len() {
            let x: Vec<f64> = b.x.row(i).to_vec();
            let y = b.y.row(i);
            let p = m.f.predict(&x).unwrap();
            of += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut xe = x.clone();
            xe.extend(m.embed(taus[i]).unwrap());
            let p = m.f_epi.predict(&xe).unwrap();
            oe += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let n = b.len() as f64;
        assert!((pred_loss(&m.f, &b).unwrap() - of / n).abs() < 1e-10);
        assert!((epi_pred_loss(&m, &b, &taus).unwrap() - oe / n).abs() < 1e-10);
        assert!(epi_pred_loss(&m, &b, &taus[1..]).is_err());
        let mut wrong = taus.clone();
        wrong[0] = &pr[(b.env_ids[0] + 1) % 3][0];
        assert!(epi_pred_loss(&m, &b, &wrong).is_err());
    }

    #[test]
    fn psi_gradient_matches_finite_differences() {
        let m = small_models(5);
        let ds = split_and_freeze(&grid(), synthetic(120, &[0, 1, 2], 6), 0.2, 0).unwrap();
        let b = PredBatch::from_dataset(&ds, &ds.train_indices()[..40], false);
        let pr = probes(&[0, 1, 2], 2, 2);
        let taus: Vec<&EpiTrajectory> = b.env_ids.iter().map(|&e| &pr[e][0]).collect();
        let (_, _, g) = epi_pred_loss_grad(&m, &b, &taus).unwrap();
        let mut r = rng::stream(9, 0);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..60 {
            let k = r.random_range(0..m.psi.params.len());
            let mut mp = m.clone();
            let p0 = m.psi.params.as_slice()[k];
            let h = 1e-3f32;
            mp.psi.params.as_mut_slice()[k] = p0 + h;
            let up = epi_pred_loss(&mp, &b, &taus).unwrap();
            let dp = (p0 + h) as f64 - p0 as f64;
            mp.psi.params.as_mut_slice()[k] = p0 - h;
            let dn = (p0 - h) as f64 - p0 as f64;
            let lo = epi_pred_loss(&mp, &b, &taus).unwrap();
            let fd = (up - lo) / (dp - dn);
            num += (fd - g[k]).powi(2);
            den += g[k].powi(2);
        }
        assert!(den > 0.0);
        assert!((num / den).sqrt() < 1e-4, "rel err {}", (num / den).sqrt());
    }

    /// Straightforward pairwise evaluation over unordered pairs.
    fn brute_separation(groups: &[Vec<Vec<f64>>], cfg: &SeparationConfig) -> f64 {
        let d = groups[0][0].len();
        let means: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| (0..d).map(|k| g.iter().map(|e| e[k]).sum::<f64>() / g.len() as f64).collect())
            .collect();
        let mut loss = 0.0;
        for i in 0..groups.len() {
            for j in 0..groups.len() {
                if i < j {
                    let dist = (0..d).map(|k| (means[i][k] - means[j][k]).powi(2)).sum::<f64>().sqrt();
                    loss += (cfg.d_min - dist).max(0.0).powi(2);
                }
            }
            if groups[i].len() >= 2 {
                for k in 0..d {
                    let var = groups[i].iter().map(|e| (e[k] - means[i][k]).powi(2)).sum::<f64>() / groups[i].len() as f64;
                    loss += cfg.lambda_sigma * (var - cfg.sigma_max).max(0.0).powi(2);
                }
            }
        }
        loss
    }

    fn flatten(groups: &[Vec<Vec<f64>>]) -> (Array2<f64>, Vec<usize>) {
        let rows: Vec<(usize, &Vec<f64>)> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, v)| v.iter().map(move |e| (g, e)))
            .collect();
        let d = rows[0].1.len();
        let x = Array2::from_shape_fn((rows.len(), d), |(r, k)| rows[r].1[k]);
        (x, rows.iter().map(|r| r.0).collect())
    }

    #[test]
    fn separation_small_cases() {
        let cfg = SeparationConfig::default();
        let far = vec![vec![vec![0.0, 0.0], vec![0.1, 0.0]], vec![vec![2.0, 0.0], vec![2.1, 0.0]]];
        let (x, l) = flatten(&far);
        assert_eq!(separation_loss(x.view(), &l, &cfg).unwrap(), 0.0);
        let same = vec![vec![vec![0.0, 0.0], vec![0.1, 0.0]], vec![vec![0.0, 0.0], vec![0.1, 0.0]]];
        let (x, l) = flatten(&same);
        assert!((separation_loss(x.view(), &l, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let one = vec![vec![vec![0.0, 0.0]]];
        let (x, l) = flatten(&one);
        assert!(separation_loss(x.view(), &l, &cfg).is_err());
    }

    fn random_groups(r: &mut crate::rng::Rng, n_groups: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
        (0..n_groups)
            .map(|_| {
                let n = r.random_range(1..6);
                (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
            })
            .collect()
    }

    #[test]
    fn separation_matches_brute_force_and_gradient() {
        let cfg = SeparationConfig {
            d_min: 1.5,
            sigma_max: 0.05,
            lambda_sigma: 2.0,
        };
        let mut r = rng::stream(4, 0);
        for _ in 0..20 {
            let g = random_groups(&mut r, 3, 3);
            let (x, l) = flatten(&g);
            let (loss, grad) = separation_loss_grad(x.view(), &l, &cfg).unwrap();
            assert!((loss - brute_separation(&g, &cfg)).abs() < 1e-10);
            for rr in 0..x.nrows() {
                for k in 0..x.ncols() {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[[rr, k]] += h;
                    let mut xm = x.clone();
                    xm[[rr, k]] -= h;
                    let fd = (separation_loss(xp.view(), &l, &cfg).unwrap() - separation_loss(xm.view(), &l, &cfg).unwrap())
                        / (2.0 * h);
                    assert!((fd - grad[[rr, k]]).abs() < 1e-5, "{fd} vs {}", grad[[rr, k]]);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn separation_is_permutation_and_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
                let cfg = SeparationConfig::default();
                let mut r = rng::stream(seed, 0);
                let mut g = random_groups(&mut r, 4, 2);
                let (x, l) = flatten(&g);
                let base = separation_loss(x.view(), &l, &cfg).unwrap();
                g.reverse();
                let (x, l) = flatten(&g);
                prop_assert!((separation_loss(x.view(), &l, &cfg).unwrap() - base).abs() < 1e-9);
                let xs = x.mapv(|v| v + shift);
                prop_assert!((separation_loss(xs.view(), &l, &cfg).unwrap() - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reward_is_zero_when_embedding_is_ignored() {
        let mut m = small_models(3);
        let obs_act = 12;
        for l in 0..m.f.params.num_layers() {
            let (o, i) = m.f.params.shape(l);
            let fw = m.f.params.weights(l).to_vec();
            let fb = m.f.params.bias(l).to_vec();
            let w = m.f_epi.params.weights_mut(l);
            if l == 0 {
                let ie = i + 2;
                for rr in 0..o {
                    for c in 0..ie {
                        w[rr * ie + c] = if c < obs_act { fw[rr * i + c] } else { 0.0 };
                    }
                }
            } else {
                w.copy_from_slice(&fw);
            }
            m.f_epi.params.bias_mut(l).copy_from_slice(&fb);
        }
        let ds = split_and_freeze(&grid(), synthetic(300, &[0, 1, 2], 8), 0.2, 0).unwrap();
        let val: Vec<usize> = ds.by_env(ds.val_indices(), 25)[1].clone();
        let b = PredBatch::from_dataset(&ds, &val, false);
        let tau = &probes(&[1], 1, 0)[1][0];
        assert_eq!(epi_reward(tau, &m, &b, false).unwrap(), 0.0);
    }

    #[test]
    fn copied_conditioned_model_ignores_the_embedding() {
        let mut m = small_models(5);
        copy_into_conditioned(&m.f, &mut m.f_epi);
        let ds = split_and_freeze(&grid(), synthetic(300, &[0, 1, 2], 8), 0.2, 0).unwrap();
        let by_env = ds.by_env(ds.val_indices(), 25);
        for (env, k) in [(0, 0), (1, 0), (2, 1)] {
            let b = PredBatch::from_dataset(&ds, &by_env[env], true);
            let tau = &probes(&[env], 2, 3)[env][k];
            assert_eq!(epi_reward(tau, &m, &b, false).unwrap(), 0.0);
        }
    }

    #[test]
    fn reward_matches_recomputation_and_flips() {
        let m = small_models(4);
        let ds = split_and_freeze(&grid(), synthetic(300, &[0, 1, 2], 8), 0.2, 0).unwrap();
        let val: Vec<usize> = ds.by_env(ds.val_indices(), 25)[2].clone();
        let b = PredBatch::from_dataset(&ds, &val, false);
        let tau = &probes(&[2], 1, 0)[2][0];
        let taus = vec![tau; b.len()];
        let oracle = pred_loss(&m.f, &b).unwrap() - epi_pred_loss(&m, &b, &taus).unwrap();
        let got = epi_reward(tau, &m, &b, false).unwrap();
        assert!((got - oracle).abs() < 1e-8);
        assert_eq!(epi_reward(tau, &m, &b, true).unwrap(), -got);
        let rw = EpiRewarder::new(&m, &ds, 25, false).unwrap();
        assert!((rw.reward(tau).unwrap() - got).abs() < 1e-12);
        let other = &probes(&[1], 1, 0)[1][0];
        assert!(epi_reward(other, &m, &b, false).is_err());
        assert!(epi_reward(tau, &m, &PredBatch::from_dataset(&ds, &[], false), false).is_err());
    }

    #[test]
    fn swapping_roles_negates_the_reward() {
        // With the embedding held fixed, each model is just a predictor.
        let m = small_models(6);
        let ds = split_and_freeze(&grid(), synthetic(300, &[0, 1, 2], 8), 0.2, 0).unwrap();
        let val: Vec<usize> = ds.by_env(ds.val_indices(), 25)[0].clone();
        let b = PredBatch::from_dataset(&ds, &val, false);
        let e = m.embed(&probes(&[0], 1, 0)[0][0]).unwrap();
        let la = pred_loss(&m.f, &b).unwrap();
        let lb = conditioned_loss(&m, &b, &e).unwrap();
        assert_eq!(signed(la, lb, false), -signed(lb, la, false));
    }

    #[test]
    fn training_is_deterministic_and_informative() {
        let envs: Vec<usize> = (0..5).collect();
        let ds = split_and_freeze(&grid(), synthetic(2000, &envs, 11), 0.2, 0).unwrap();
        let pr = probes(&envs, 4, 3);
        let cfg = EpiModelConfig {
            epochs: 60,
            ..Default::default()
        };
        let (a, ra) = train_pred_models(&ds, &pr, &cfg, true, 7).unwrap();
        let (b, rb) = train_pred_models(&ds, &pr, &cfg, true, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        for w in ra.epoch_pred.windows(2).take(4) {
            assert!(w[1] < w[0]);
        }
        // The probes reveal the per-environment scale.
        assert!(ra.val_epi_pred < 0.7 * ra.val_pred, "{} vs {}", ra.val_epi_pred, ra.val_pred);
    }

    #[test]
    fn single_environment_gains_nothing() {
        let ds = split_and_freeze(&grid(), synthetic(1500, &[3], 12), 0.2, 0).unwrap();
        let pr = probes(&[3], 4, 3);
        let cfg = EpiModelConfig {
            epochs: 60,
            predict_delta: false,
            ..Default::default()
        };
        let (_, rep) = train_pred_models(&ds, &pr, &cfg, true, 1).unwrap();
        assert!((rep.val_epi_pred - rep.val_pred).abs() <= 0.1 * rep.val_pred, "{rep:?}");
    }

    #[test]
    fn missing_probes_are_rejected() {
        let ds = split_and_freeze(&grid(), synthetic(200, &[0, 1], 12), 0.2, 0).unwrap();
        let pr = probes(&[0], 2, 3);
        assert!(train_pred_models(&ds, &pr, &EpiModelConfig::default(), false, 0).is_err());
    }
}
