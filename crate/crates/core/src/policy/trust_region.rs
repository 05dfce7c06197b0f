//! KL-limited clipped-surrogate policy update.
//!
//! Each epoch takes Adam steps on the clipped importance-ratio surrogate over
//! minibatches of whole episodes. After every epoch the mean KL divergence
//! from the pre-update policy is measured on all batch states; if it exceeds
//! the limit, the parameters are pulled back along the straight line towards
//! the old ones until it does not, and the update stops.

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::{gaussian_log_prob, PolicyModel, RolloutBatch};
use crate::error::{Error, Result};
use crate::nn::{adam_step_flat, AdamState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub kl_limit: f64,
    pub max_backtracks: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 10,
            minibatches: 4,
            learning_rate: 3e-4,
            kl_limit: 0.01,
            max_backtracks: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    pub epochs_run: usize,
    pub mean_kl: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub backtracks: usize,
    /// The update was abandoned and the input parameters restored.
    pub reverted: bool,
    pub entropy: f64,
}

/// Mean over batch states of KL(old ‖ new) for diagonal Gaussians.
pub fn mean_kl<P: PolicyModel>(old: &P, new: &P, episodes: &[&[Vec<f64>]]) -> Result<f64> {
    let (m_old, _) = old.forward_means(episodes)?;
    kl_against(&m_old, &old.log_std(), new, episodes)
}

fn kl_against<P: PolicyModel>(m_old: &Array2<f64>, ls_old: &[f64], new: &P, episodes: &[&[Vec<f64>]]) -> Result<f64> {
    let (m_new, _) = new.forward_means(episodes)?;
    let ls_new = new.log_std();
    let rows = m_old.nrows();
    if rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in 0..rows {
        for k in 0..ls_old.len() {
            let var_old = (2.0 * ls_old[k]).exp();
            let var_new = (2.0 * ls_new[k]).exp();
            let d = m_old[[r, k]] - m_new[[r, k]];
            total += ls_new[k] - ls_old[k] + (var_old + d * d) / (2.0 * var_new) - 0.5;
        }
    }
    Ok(total / rows as f64)
}

fn entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|ls| ls + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
        .sum()
}

/// Clipped surrogate (to be maximized) and its gradient for a set of episodes.
fn surrogate<P: PolicyModel>(
    policy: &P,
    batch: &RolloutBatch,
    old_logp: &[Vec<f64>],
    idx: &[usize],
    clip: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let eps: Vec<&[Vec<f64>]> = idx.iter().map(|&i| batch.trajectories[i].obs.as_slice()).collect();
    let (means, cache) = policy.forward_means(&eps)?;
    let ls = policy.log_std();
    let n: usize = eps.iter().map(|e| e.len()).sum();
    let mut d_mean = Array2::zeros(means.raw_dim());
    let mut d_ls = vec![0.0; ls.len()];
    let mut total = 0.0;
    let mut row = 0;
    for &i in idx {
        let tr = &batch.trajectories[i];
        for t in 0..tr.len() {
            let a = &tr.actions[t];
            let mean: Vec<f64> = means.row(row).to_vec();
            let lp = gaussian_log_prob(a, &mean, &ls);
            let ratio = (lp - old_logp[i][t]).exp();
            let adv = batch.advantages[i][t];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            total += unclipped.min(clipped);
            // The gradient flows only where the unclipped term is the minimum.
            if want_grad && unclipped <= clipped {
                let g = ratio * adv / n as f64;
                for k in 0..ls.len() {
                    let sd2 = (2.0 * ls[k]).exp();
                    let z = a[k] - mean[k];
                    d_mean[[row, k]] = g * z / sd2;
                    d_ls[k] += g * (z * z / sd2 - 1.0);
                }
            }
            row += 1;
        }
    }
    let value = total / n as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let g = policy.backward_means(&cache, d_mean.view(), &d_ls)?;
    Ok((value, Some(g)))
}

/// Updates `policy` in place. `adam` persists across calls and must match the
/// parameter count. On any non-finite quantity the input policy is restored
/// and a warning is logged.
pub fn trust_region_update<P: PolicyModel>(
    policy: &mut P,
    batch: &RolloutBatch,
    adam: &mut AdamState,
    config: &UpdateConfig,
    seed: u64,
) -> Result<UpdateReport> {
    if batch.trajectories.is_empty() {
        return Err(Error::invalid("trust-region update on an empty batch"));
    }
    let old_params = policy.params();
    let adam_before = adam.clone();
    match update_inner(policy, batch, adam, config, seed, &old_params) {
        Ok(r) => Ok(r),
        Err(Error::NonFinite(msg)) => {
            log::warn!("policy update abandoned: non-finite {msg}");
            policy.set_params(&old_params)?;
            *adam = adam_before;
            Ok(UpdateReport {
                reverted: true,
                entropy: entropy(&policy.log_std()),
                ..Default::default()
            })
        }
        Err(e) => {
            policy.set_params(&old_params)?;
            Err(e)
        }
    }
}

fn update_inner<P: PolicyModel>(
    policy: &mut P,
    batch: &RolloutBatch,
    adam: &mut AdamState,
    config: &UpdateConfig,
    seed: u64,
    old_params: &[f32],
) -> Result<UpdateReport> {
    let all: Vec<usize> = (0..batch.trajectories.len()).collect();
    let episodes: Vec<&[Vec<f64>]> = batch.trajectories.iter().map(|t| t.obs.as_slice()).collect();
    let (m_old, _) = policy.forward_means(&episodes)?;
    let ls_old = policy.log_std();
    let mut old_logp = Vec::with_capacity(all.len());
    let mut row = 0;
    for tr in &batch.trajectories {
        let mut lps = Vec::with_capacity(tr.len());
        for a in &tr.actions {
            lps.push(gaussian_log_prob(a, &m_old.row(row).to_vec(), &ls_old));
            row += 1;
        }
        old_logp.push(lps);
    }
    let (before, _) = surrogate(policy, batch, &old_logp, &all, config.clip, false)?;
    let mut report = UpdateReport {
        surrogate_before: before,
        ..Default::default()
    };
    let mut order = all.clone();
    let mut r = rng::stream(seed, rng::tag("update_shuffle"));
    let parts = config.minibatches.clamp(1, order.len());
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let size = order.len().div_ceil(parts);
        for chunk in order.chunks(size) {
            let (value, grad) = surrogate(policy, batch, &old_logp, chunk, config.clip, true)?;
            if !value.is_finite() {
                return Err(Error::NonFinite("surrogate objective".into()));
            }
            let neg: Vec<f64> = grad.expect("gradient requested").iter().map(|g| -g).collect();
            let mut p = policy.params();
            adam_step_flat(&mut p, &neg, adam, |i| policy.describe_param(i))?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("policy parameters".into()));
            }
            policy.set_params(&p)?;
        }
        report.epochs_run += 1;
        let kl = kl_against(&m_old, &ls_old, policy, &episodes)?;
        if !kl.is_finite() {
            return Err(Error::NonFinite("KL divergence".into()));
        }
        report.mean_kl = kl;
        if kl > config.kl_limit {
            let current = policy.params();
            let mut accepted = false;
            for k in 1..=config.max_backtracks {
                let frac = 0.5f64.powi(k as i32);
                let mix: Vec<f32> = old_params
                    .iter()
                    .zip(&current)
                    .map(|(&o, &c)| (o as f64 + frac * (c as f64 - o as f64)) as f32)
                    .collect();
                policy.set_params(&mix)?;
                report.backtracks = k;
                let kl = kl_against(&m_old, &ls_old, policy, &episodes)?;
                if kl <= config.kl_limit {
                    report.mean_kl = kl;
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                policy.set_params(old_params)?;
                report.mean_kl = 0.0;
                report.reverted = true;
            }
            break;
        }
    }
    let (after, _) = surrogate(policy, batch, &old_logp, &all, config.clip, false)?;
    report.surrogate_after = after;
    report.entropy = entropy(&policy.log_std());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use crate::policy::{GaussianPolicy, Trajectory};
    use rand_distr::{Distribution, StandardNormal};

    /// One-step episodes from a fixed state; reward 1 when the action's first
    /// coordinate is positive.
    fn bandit_batch(p: &GaussianPolicy, seed: u64, n: usize) -> RolloutBatch {
        let mut r = rng::stream(seed, 0);
        let obs = vec![1.0, 0.5];
        let trs: Vec<Trajectory> = (0..n)
            .map(|_| {
                let (a, lp) = p.act(&obs, &mut (), &mut r).unwrap();
                let reward = if a[0] > 0.0 { 1.0 } else { 0.0 };
                Trajectory {
                    obs: vec![obs.clone()],
                    actions: vec![a],
                    rewards: vec![reward],
                    log_probs: vec![lp],
                    raw_obs: vec![obs.clone(), obs.clone()],
                    env_id: 0,
                    terminal: false,
                }
            })
            .collect();
        let zeros = vec![vec![0.0]; n];
        RolloutBatch::new(trs, 0.99, 1.0, &zeros).unwrap()
    }

    fn prob_positive(p: &GaussianPolicy) -> f64 {
        let m = p.mean.predict(&[1.0, 0.5]).unwrap()[0];
        let s = p.log_std()[0].exp();
        // Standard normal CDF at m / s by midpoint integration.
        let z = m / s;
        let steps = 20_000;
        let lo = -10.0;
        let h = (z - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * h;
            acc += (-0.5 * x * x).exp();
        }
        acc * h / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let mut p = GaussianPolicy::new(2, &[8], 1, 0.0, 1).unwrap();
        let mut batch = bandit_batch(&p, 0, 32);
        for a in &mut batch.advantages {
            a[0] = 0.0;
        }
        let before = p.params();
        let mut adam = AdamState::new(before.len(), AdamConfig::with_lr(1e-2));
        trust_region_update(&mut p, &batch, &mut adam, &UpdateConfig::default(), 0).unwrap();
        assert_eq!(before, p.params());
    }

    #[test]
    fn kl_stays_within_limit() {
        let mut p = GaussianPolicy::new(2, &[8], 1, 0.0, 2).unwrap();
        let old = p.clone();
        let batch = bandit_batch(&p, 3, 64);
        let mut adam = AdamState::new(p.params().len(), AdamConfig::with_lr(0.05));
        let cfg = UpdateConfig::default();
        let rep = trust_region_update(&mut p, &batch, &mut adam, &cfg, 0).unwrap();
        let eps: Vec<&[Vec<f64>]> = batch.trajectories.iter().map(|t| t.obs.as_slice()).collect();
        let kl = mean_kl(&old, &p, &eps).unwrap();
        assert!(kl <= cfg.kl_limit + 1e-12, "kl {kl}");
        assert!((kl - rep.mean_kl).abs() < 1e-12);
        assert!(rep.backtracks > 0, "large learning rate should need backtracking");
    }

    #[test]
    fn bandit_probability_increases() {
        let mut improved = 0;
        for seed in 0..10 {
            let mut p = GaussianPolicy::new(2, &[8], 1, 0.0, seed).unwrap();
            let mut adam = AdamState::new(p.params().len(), AdamConfig::with_lr(3e-3));
            let start = prob_positive(&p);
            for it in 0..10 {
                let batch = bandit_batch(&p, seed * 100 + it, 64);
                trust_region_update(&mut p, &batch, &mut adam, &UpdateConfig::default(), it).unwrap();
            }
            if prob_positive(&p) > start {
                improved += 1;
            }
        }
        assert!(improved >= 9, "improved in {improved}/10 seeds");
    }

    #[test]
    fn kl_matches_sampled_estimate() {
        let a = GaussianPolicy::new(2, &[4], 2, -0.2, 5).unwrap();
        let b = GaussianPolicy::new(2, &[4], 2, 0.1, 6).unwrap();
        let obs = vec![vec![0.3, -0.4]];
        let kl = mean_kl(&a, &b, &[obs.as_slice()]).unwrap();
        let ma = a.mean.predict(&obs[0]).unwrap();
        let mb = b.mean.predict(&obs[0]).unwrap();
        let mut r = rng::stream(0, 0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: Vec<f64> = (0..2)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    ma[k] + a.log_std()[k].exp() * z
                })
                .collect();
            acc += gaussian_log_prob(&x, &ma, &a.log_std()) - gaussian_log_prob(&x, &mb, &b.log_std());
        }
        assert!((acc / n as f64 - kl).abs() < 0.01);
    }

    #[test]
    fn non_finite_advantage_reverts() {
        let mut p = GaussianPolicy::new(2, &[8], 1, 0.0, 1).unwrap();
        let mut batch = bandit_batch(&p, 0, 8);
        batch.advantages[0][0] = f64::NAN;
        let before = p.params();
        let mut adam = AdamState::new(before.len(), AdamConfig::default());
        let rep = trust_region_update(&mut p, &batch, &mut adam, &UpdateConfig::default(), 0).unwrap();
        assert!(rep.reverted);
        assert_eq!(before, p.params());
        assert_eq!(adam.t, 0);
    }
}
