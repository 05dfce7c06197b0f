use ndarray::{Array2, ArrayView2};

use super::{floored_log_std, PolicyModel};
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchCache, Mlp, NetworkSpec};

/// Feedforward Gaussian policy: relu MLP mean, free log-std vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f32>,
}

impl GaussianPolicy {
    /// `obs -> hidden... -> act` with relu hidden layers. The output layer is
    /// scaled down so initial actions stay near zero.
    pub fn new(obs_dim: usize, hidden: &[usize], act_dim: usize, init_log_std: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        let spec = NetworkSpec::uniform(&sizes, Activation::Relu)?;
        let mut mean = Mlp::new(spec, seed);
        let last = mean.spec.num_layers() - 1;
        for w in mean.params.weights_mut(last) {
            *w *= 0.1;
        }
        Ok(Self {
            mean,
            log_std: vec![init_log_std as f32; act_dim],
        })
    }

    pub fn from_parts(mean: Mlp, log_std: Vec<f32>) -> Result<Self> {
        if log_std.len() != mean.output_dim() {
            return Err(Error::dim("policy log-std", mean.output_dim(), log_std.len()));
        }
        Ok(Self { mean, log_std })
    }
}

impl PolicyModel for GaussianPolicy {
    type Memory = ();
    type Cache = BatchCache;

    fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    fn act_dim(&self) -> usize {
        self.mean.output_dim()
    }

    fn initial_memory(&self) {}

    fn step_mean(&self, obs: &[f64], _memory: &mut ()) -> Result<Vec<f64>> {
        self.mean.predict(obs)
    }

    fn log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|&v| floored_log_std(v as f64)).collect()
    }

    fn forward_means(&self, episodes: &[&[Vec<f64>]]) -> Result<(Array2<f64>, BatchCache)> {
        let rows: usize = episodes.iter().map(|e| e.len()).sum();
        let d = self.obs_dim();
        let mut x = Array2::zeros((rows, d));
        let mut r = 0;
        for ep in episodes {
            for obs in ep.iter() {
                if obs.len() != d {
                    return Err(Error::dim("policy observation", d, obs.len()));
                }
                for (c, &v) in obs.iter().enumerate() {
                    x[[r, c]] = v;
                }
                r += 1;
            }
        }
        self.mean.forward_batch(x.view())
    }

    fn backward_means(&self, cache: &BatchCache, d_mean: ArrayView2<f64>, d_log_std: &[f64]) -> Result<Vec<f64>> {
        let (mut grads, _) = self.mean.backward_batch(cache, d_mean)?;
        for (k, &g) in d_log_std.iter().enumerate() {
            // The floor is a clamp, so no gradient flows below it.
            let live = floored_log_std(self.log_std[k] as f64) == self.log_std[k] as f64;
            grads.push(if live { g } else { 0.0 });
        }
        Ok(grads)
    }

    fn params(&self) -> Vec<f32> {
        let mut p = self.mean.params.as_slice().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    fn set_params(&mut self, params: &[f32]) -> Result<()> {
        let n = self.mean.params.len();
        if params.len() != n + self.log_std.len() {
            return Err(Error::dim("gaussian policy parameters", n + self.log_std.len(), params.len()));
        }
        self.mean.params.as_mut_slice().copy_from_slice(&params[..n]);
        self.log_std.copy_from_slice(&params[n..]);
        Ok(())
    }

    fn describe_param(&self, idx: usize) -> String {
        let n = self.mean.params.len();
        if idx < n {
            format!("mean network {}", self.mean.params.describe_index(idx))
        } else {
            "log_std".into()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gaussian_log_prob;
    use super::*;
    use crate::rng;

    #[test]
    fn log_prob_at_mean_is_closed_form() {
        let p = GaussianPolicy::new(3, &[8], 2, -0.7, 1).unwrap();
        let (a, lp) = p.act_deterministic(&[0.1, 0.2, 0.3], &mut ()).unwrap();
        let expect = -(2.0 * -0.7f32 as f64) - (2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert_eq!(a, p.mean.predict(&[0.1, 0.2, 0.3]).unwrap());
    }

    #[test]
    fn floored_std_acts_at_mean() {
        let p = GaussianPolicy::new(3, &[8], 2, -100.0, 1).unwrap();
        let obs = [0.5, -0.5, 1.0];
        let mean = p.mean.predict(&obs).unwrap();
        let (a, lp) = p.act(&obs, &mut (), &mut rng::stream(0, 0)).unwrap();
        for (x, m) in a.iter().zip(&mean) {
            assert!((x - m).abs() < 1e-4);
        }
        assert!(lp.is_finite());
    }

    #[test]
    fn same_seed_same_action() {
        let p = GaussianPolicy::new(3, &[8], 2, -0.5, 1).unwrap();
        let a = p.act(&[0.0; 3], &mut (), &mut rng::stream(9, 9)).unwrap();
        let b = p.act(&[0.0; 3], &mut (), &mut rng::stream(9, 9)).unwrap();
        assert_eq!(a, b);
        assert!(p.act(&[f64::NAN, 0.0, 0.0], &mut (), &mut rng::stream(9, 9)).is_err());
    }

    #[test]
    fn log_prob_matches_independent_density() {
        let p = GaussianPolicy::new(4, &[16, 16], 3, -0.3, 2).unwrap();
        let mut r = rng::stream(5, 5);
        for i in 0..50 {
            let obs: Vec<f64> = (0..4).map(|k| ((i * 7 + k) as f64).sin()).collect();
            let (a, lp) = p.act(&obs, &mut (), &mut r).unwrap();
            let mean = p.mean.predict(&obs).unwrap();
            let sigma = (-0.3f32 as f64).exp();
            let mut density = 1.0;
            for k in 0..3 {
                let z = (a[k] - mean[k]) / sigma;
                density *= (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            }
            assert!((lp.exp() - density).abs() < 1e-8 * density.max(1.0));
            assert!((gaussian_log_prob(&a, &mean, &p.log_std()) - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn param_round_trip() {
        let p = GaussianPolicy::new(3, &[4], 1, 0.0, 3).unwrap();
        let mut q = GaussianPolicy::new(3, &[4], 1, 0.0, 4).unwrap();
        q.set_params(&p.params()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_params(&[0.0]).is_err());
        assert_eq!(q.describe_param(q.params().len() - 1), "log_std");
    }
}
