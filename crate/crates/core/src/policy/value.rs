//! State-value baseline fitted by regression on discounted returns.

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::Trajectory;
use crate::error::Result;
use crate::nn::{adam_step, mse_loss, Activation, AdamConfig, AdamState, Mlp, NetworkSpec};
use crate::rng;

/// `[obs ‖ t / horizon] -> 32 -> 32 -> 1`, trained on standardized returns.
#[derive(Debug, Clone)]
pub struct ValueBaseline {
    net: Mlp,
    adam: AdamState,
    horizon: f64,
    target_mean: f64,
    target_std: f64,
    fitted: bool,
    epochs: usize,
    minibatch: usize,
    seed: u64,
    fits: u64,
}

impl ValueBaseline {
    pub fn new(obs_dim: usize, horizon: usize, seed: u64) -> Result<Self> {
        let spec = NetworkSpec::uniform(&[obs_dim + 1, 32, 32, 1], Activation::Tanh)?;
        let net = Mlp::new(spec, rng::derive(seed, rng::tag("value_init")));
        let adam = AdamState::new(net.params.len(), AdamConfig::with_lr(1e-3));
        Ok(Self {
            net,
            adam,
            horizon: horizon.max(1) as f64,
            target_mean: 0.0,
            target_std: 1.0,
            fitted: false,
            epochs: 5,
            minibatch: 128,
            seed,
            fits: 0,
        })
    }

    fn features(&self, tr: &Trajectory) -> Array2<f64> {
        let d = self.net.input_dim();
        let mut x = Array2::zeros((tr.len(), d));
        for (t, obs) in tr.obs.iter().enumerate() {
            for (c, &v) in obs.iter().enumerate().take(d - 1) {
                x[[t, c]] = v;
            }
            x[[t, d - 1]] = t as f64 / self.horizon;
        }
        x
    }

    /// Predicted returns per step; zero before the first fit.
    pub fn predict(&self, trajectories: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
        trajectories
            .iter()
            .map(|tr| {
                if !self.fitted || tr.is_empty() {
                    return Ok(vec![0.0; tr.len()]);
                }
                let y = self.net.predict_batch(self.features(tr).view())?;
                Ok(y.column(0).iter().map(|v| v * self.target_std + self.target_mean).collect())
            })
            .collect()
    }

    /// A few epochs of minibatch regression onto `returns`.
    pub fn fit(&mut self, trajectories: &[Trajectory], returns: &[Vec<f64>]) -> Result<f64> {
        let d = self.net.input_dim();
        let n: usize = returns.iter().map(|r| r.len()).sum();
        if n == 0 {
            return Ok(0.0);
        }
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        let mut row = 0;
        for (tr, ret) in trajectories.iter().zip(returns) {
            let f = self.features(tr);
            x.slice_mut(ndarray::s![row..row + tr.len(), ..]).assign(&f);
            row += tr.len();
            y.extend_from_slice(ret);
        }
        let mean = y.iter().sum::<f64>() / n as f64;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-6);
        self.target_mean = mean;
        self.target_std = std;
        let targets: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(rng::derive(self.seed, self.fits), rng::tag("value_fit"));
        self.fits += 1;
        let mut last = 0.0;
        for _ in 0..self.epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            for chunk in order.chunks(self.minibatch) {
                let xb = x.select(ndarray::Axis(0), chunk);
                let yb = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| targets[chunk[i]]);
                let (pred, cache) = self.net.forward_batch(xb.view())?;
                let (loss, grad) = mse_loss(pred.view(), yb.view())?;
                let (g, _) = self.net.backward_batch(&cache, grad.view())?;
                adam_step(&mut self.net.params, &g, &mut self.adam)?;
                total += loss * chunk.len() as f64;
            }
            last = total / n as f64;
        }
        self.fitted = true;
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(len: usize, obs_dim: usize) -> Trajectory {
        Trajectory {
            obs: (0..len).map(|t| vec![t as f64 * 0.01; obs_dim]).collect(),
            actions: vec![vec![0.0]; len],
            rewards: vec![1.0; len],
            log_probs: vec![0.0; len],
            raw_obs: vec![vec![0.0; obs_dim]; len + 1],
            env_id: 0,
            terminal: false,
        }
    }

    #[test]
    fn unfitted_predicts_zero_then_learns_returns() {
        let mut v = ValueBaseline::new(3, 50, 0).unwrap();
        let trs = vec![traj(50, 3), traj(50, 3)];
        assert!(v.predict(&trs).unwrap().iter().flatten().all(|&p| p == 0.0));
        let rets: Vec<Vec<f64>> = trs
            .iter()
            .map(|t| super::super::discounted_returns(&t.rewards, 1.0).unwrap())
            .collect();
        let mut loss = f64::INFINITY;
        for _ in 0..40 {
            loss = v.fit(&trs, &rets).unwrap();
        }
        assert!(loss < 0.05, "loss {loss}");
        let p = v.predict(&trs).unwrap();
        assert!((p[0][0] - 50.0).abs() < 5.0);
        assert!((p[0][49] - 1.0).abs() < 5.0);
    }
}
