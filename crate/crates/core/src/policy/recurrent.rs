//! Recurrent Gaussian policy built on a single-gate recurrent cell.
//!
//! ```text
//! f  = sigmoid(Wf x + Uf h + bf)
//! n  = tanh(Wn x + Un (f * h) + bn)
//! h' = (1 - f) * h + f * n
//! mean = Wo h' + bo
//! ```
//!
//! The hidden state starts at zero for every episode. Gradients are computed
//! by backpropagation through time over whole episodes.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::{floored_log_std, PolicyModel};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentPolicy {
    obs_dim: usize,
    hidden: usize,
    act_dim: usize,
    /// `[Wf, Uf, bf, Wn, Un, bn, Wo, bo, log_std]`, row-major.
    params: Vec<f32>,
}

struct Layout {
    wf: usize,
    uf: usize,
    bf: usize,
    wn: usize,
    un: usize,
    bn: usize,
    wo: usize,
    bo: usize,
    log_std: usize,
    total: usize,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    f: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

pub struct RecurrentCache {
    episodes: Vec<Vec<StepCache>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RecurrentPolicy {
    pub fn new(obs_dim: usize, hidden: usize, act_dim: usize, init_log_std: f64, seed: u64) -> Result<Self> {
        if obs_dim == 0 || hidden == 0 || act_dim == 0 {
            return Err(Error::invalid("recurrent policy dimensions must be positive"));
        }
        let mut p = Self {
            obs_dim,
            hidden,
            act_dim,
            params: Vec::new(),
        };
        let lay = p.layout();
        p.params = vec![0.0; lay.total];
        let mut r = rng::stream(seed, rng::tag("recurrent_init"));
        let mut fill = |start: usize, len: usize, scale: f64, params: &mut Vec<f32>| {
            for v in &mut params[start..start + len] {
                let z: f64 = StandardNormal.sample(&mut r);
                *v = (z * scale) as f32;
            }
        };
        let (i, h, a) = (obs_dim, hidden, act_dim);
        let mut buf = std::mem::take(&mut p.params);
        fill(lay.wf, h * i, (1.0 / i as f64).sqrt(), &mut buf);
        fill(lay.uf, h * h, (1.0 / h as f64).sqrt(), &mut buf);
        fill(lay.wn, h * i, (1.0 / i as f64).sqrt(), &mut buf);
        fill(lay.un, h * h, (1.0 / h as f64).sqrt(), &mut buf);
        fill(lay.wo, a * h, 0.1 * (1.0 / h as f64).sqrt(), &mut buf);
        for v in &mut buf[lay.log_std..lay.log_std + a] {
            *v = init_log_std as f32;
        }
        p.params = buf;
        Ok(p)
    }

    pub fn from_flat(obs_dim: usize, hidden: usize, act_dim: usize, params: Vec<f32>) -> Result<Self> {
        let mut p = Self::new(obs_dim, hidden, act_dim, 0.0, 0)?;
        p.set_params(&params)?;
        Ok(p)
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn layout(&self) -> Layout {
        let (i, h, a) = (self.obs_dim, self.hidden, self.act_dim);
        let wf = 0;
        let uf = wf + h * i;
        let bf = uf + h * h;
        let wn = bf + h;
        let un = wn + h * i;
        let bn = un + h * h;
        let wo = bn + h;
        let bo = wo + a * h;
        let log_std = bo + a;
        Layout {
            wf,
            uf,
            bf,
            wn,
            un,
            bn,
            wo,
            bo,
            log_std,
            total: log_std + a,
        }
    }

    fn w(&self, idx: usize) -> f64 {
        self.params[idx] as f64
    }

    fn cell(&self, x: &[f64], h_prev: &[f64]) -> StepCache {
        let lay = self.layout();
        let (ni, nh) = (self.obs_dim, self.hidden);
        let mut f = vec![0.0; nh];
        for r in 0..nh {
            let mut s = self.w(lay.bf + r);
            for c in 0..ni {
                s += self.w(lay.wf + r * ni + c) * x[c];
            }
            for c in 0..nh {
                s += self.w(lay.uf + r * nh + c) * h_prev[c];
            }
            f[r] = sigmoid(s);
        }
        let gated: Vec<f64> = f.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let mut n = vec![0.0; nh];
        for r in 0..nh {
            let mut s = self.w(lay.bn + r);
            for c in 0..ni {
                s += self.w(lay.wn + r * ni + c) * x[c];
            }
            for c in 0..nh {
                s += self.w(lay.un + r * nh + c) * gated[c];
            }
            n[r] = s.tanh();
        }
        let h: Vec<f64> = (0..nh).map(|k| (1.0 - f[k]) * h_prev[k] + f[k] * n[k]).collect();
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            f,
            n,
            h,
        }
    }

    fn head(&self, h: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        (0..self.act_dim)
            .map(|r| {
                let mut s = self.w(lay.bo + r);
                for c in 0..self.hidden {
                    s += self.w(lay.wo + r * self.hidden + c) * h[c];
                }
                s
            })
            .collect()
    }
}

impl PolicyModel for RecurrentPolicy {
    type Memory = Vec<f64>;
    type Cache = RecurrentCache;

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn initial_memory(&self) -> Vec<f64> {
        vec![0.0; self.hidden]
    }

    fn step_mean(&self, obs: &[f64], memory: &mut Vec<f64>) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::dim("recurrent policy observation", self.obs_dim, obs.len()));
        }
        if memory.len() != self.hidden {
            return Err(Error::dim("recurrent hidden state", self.hidden, memory.len()));
        }
        let step = self.cell(obs, memory);
        *memory = step.h;
        Ok(self.head(memory))
    }

    fn log_std(&self) -> Vec<f64> {
        let lay = self.layout();
        self.params[lay.log_std..]
            .iter()
            .map(|&v| floored_log_std(v as f64))
            .collect()
    }

    fn forward_means(&self, episodes: &[&[Vec<f64>]]) -> Result<(Array2<f64>, RecurrentCache)> {
        let rows: usize = episodes.iter().map(|e| e.len()).sum();
        let mut means = Array2::zeros((rows, self.act_dim));
        let mut cache = RecurrentCache {
            episodes: Vec::with_capacity(episodes.len()),
        };
        let mut r = 0;
        for ep in episodes {
            let mut h = self.initial_memory();
            let mut steps = Vec::with_capacity(ep.len());
            for obs in ep.iter() {
                if obs.len() != self.obs_dim {
                    return Err(Error::dim("recurrent policy observation", self.obs_dim, obs.len()));
                }
                let step = self.cell(obs, &h);
                for (c, m) in self.head(&step.h).into_iter().enumerate() {
                    means[[r, c]] = m;
                }
                h.clone_from(&step.h);
                steps.push(step);
                r += 1;
            }
            cache.episodes.push(steps);
        }
        Ok((means, cache))
    }

    fn backward_means(&self, cache: &RecurrentCache, d_mean: ArrayView2<f64>, d_log_std: &[f64]) -> Result<Vec<f64>> {
        let rows: usize = cache.episodes.iter().map(|e| e.len()).sum();
        if d_mean.nrows() != rows || d_mean.ncols() != self.act_dim {
            return Err(Error::dim("recurrent upstream rows", rows, d_mean.nrows()));
        }
        let lay = self.layout();
        let (ni, nh, na) = (self.obs_dim, self.hidden, self.act_dim);
        let mut g = vec![0.0; lay.total];
        let mut row_start = 0;
        for ep in &cache.episodes {
            let mut dh_next = vec![0.0; nh];
            for (t, st) in ep.iter().enumerate().rev() {
                let row = row_start + t;
                let mut dh = dh_next.clone();
                for r in 0..na {
                    let dm = d_mean[[row, r]];
                    g[lay.bo + r] += dm;
                    for c in 0..nh {
                        g[lay.wo + r * nh + c] += dm * st.h[c];
                        dh[c] += dm * self.w(lay.wo + r * nh + c);
                    }
                }
                let mut dh_prev: Vec<f64> = (0..nh).map(|k| dh[k] * (1.0 - st.f[k])).collect();
                let mut df: Vec<f64> = (0..nh).map(|k| dh[k] * (st.n[k] - st.h_prev[k])).collect();
                let da_n: Vec<f64> = (0..nh).map(|k| dh[k] * st.f[k] * (1.0 - st.n[k] * st.n[k])).collect();
                let mut dgated = vec![0.0; nh];
                for r in 0..nh {
                    let d = da_n[r];
                    if d == 0.0 {
                        continue;
                    }
                    g[lay.bn + r] += d;
                    for c in 0..ni {
                        g[lay.wn + r * ni + c] += d * st.x[c];
                    }
                    for c in 0..nh {
                        g[lay.un + r * nh + c] += d * st.f[c] * st.h_prev[c];
                        dgated[c] += d * self.w(lay.un + r * nh + c);
                    }
                }
                for k in 0..nh {
                    df[k] += dgated[k] * st.h_prev[k];
                    dh_prev[k] += dgated[k] * st.f[k];
                }
                for r in 0..nh {
                    let d = df[r] * st.f[r] * (1.0 - st.f[r]);
                    if d == 0.0 {
                        continue;
                    }
                    g[lay.bf + r] += d;
                    for c in 0..ni {
                        g[lay.wf + r * ni + c] += d * st.x[c];
                    }
                    for c in 0..nh {
                        g[lay.uf + r * nh + c] += d * st.h_prev[c];
                        dh_prev[c] += d * self.w(lay.uf + r * nh + c);
                    }
                }
                dh_next = dh_prev;
            }
            row_start += ep.len();
        }
        for (k, &d) in d_log_std.iter().enumerate() {
            let raw = self.params[lay.log_std + k] as f64;
            if floored_log_std(raw) == raw {
                g[lay.log_std + k] += d;
            }
        }
        Ok(g)
    }

    fn params(&self) -> Vec<f32> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim("recurrent policy parameters", self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn describe_param(&self, idx: usize) -> String {
        let lay = self.layout();
        let names = [
            (lay.uf, "Wf"),
            (lay.bf, "Uf"),
            (lay.wn, "bf"),
            (lay.un, "Wn"),
            (lay.bn, "Un"),
            (lay.wo, "bn"),
            (lay.bo, "Wo"),
            (lay.log_std, "bo"),
            (lay.total, "log_std"),
        ];
        names
            .iter()
            .find(|(end, _)| idx < *end)
            .map(|(_, n)| format!("recurrent {n}"))
            .unwrap_or_else(|| format!("index {idx} (out of range)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn episodes(seed: u64, lens: &[usize], dim: usize) -> Vec<Vec<Vec<f64>>> {
        let mut r = rng::stream(seed, 0);
        lens.iter()
            .map(|&n| (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect())
            .collect()
    }

    fn objective(p: &RecurrentPolicy, eps: &[Vec<Vec<f64>>], up: &Array2<f64>, dls: &[f64]) -> f64 {
        let refs: Vec<&[Vec<f64>]> = eps.iter().map(|e| e.as_slice()).collect();
        let (m, _) = p.forward_means(&refs).unwrap();
        let ls = p.log_std();
        (&m * up).sum() + ls.iter().zip(dls).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let p = RecurrentPolicy::new(3, 4, 2, -0.5, 7).unwrap();
        let eps = episodes(1, &[4, 3], 3);
        let mut r = rng::stream(2, 0);
        let up = Array2::from_shape_fn((7, 2), |_| r.random_range(-1.0..1.0));
        let dls = [0.3, -0.7];
        let refs: Vec<&[Vec<f64>]> = eps.iter().map(|e| e.as_slice()).collect();
        let (_, cache) = p.forward_means(&refs).unwrap();
        let g = p.backward_means(&cache, up.view(), &dls).unwrap();
        let base = p.params();
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut q = p.clone();
            let mut v = base.clone();
            v[k] = (base[k] as f64 + 1e-4) as f32;
            let hi = v[k] as f64;
            q.set_params(&v).unwrap();
            let fp = objective(&q, &eps, &up, &dls);
            v[k] = (base[k] as f64 - 1e-4) as f32;
            let lo = v[k] as f64;
            q.set_params(&v).unwrap();
            let fm = objective(&q, &eps, &up, &dls);
            let num = (fp - fm) / (hi - lo);
            let err = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn hidden_state_resets_per_episode() {
        let p = RecurrentPolicy::new(3, 5, 1, 0.0, 3).unwrap();
        let eps = episodes(4, &[5, 6, 2], 3);
        let forward = |order: &[usize]| {
            let refs: Vec<&[Vec<f64>]> = order.iter().map(|&i| eps[i].as_slice()).collect();
            p.forward_means(&refs).unwrap().0
        };
        let a = forward(&[0, 1, 2]);
        let b = forward(&[2, 0, 1]);
        // Episode 0 occupies rows 0..5 in `a` and rows 2..7 in `b`.
        for t in 0..5 {
            assert_eq!(a[[t, 0]], b[[2 + t, 0]]);
        }
        let mut mem = p.initial_memory();
        let first = p.step_mean(&eps[0][0], &mut mem).unwrap();
        assert_eq!(first[0], a[[0, 0]]);
        assert!(mem.iter().any(|&v| v != 0.0));
        assert!(p.initial_memory().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_cover_every_block() {
        let p = RecurrentPolicy::new(2, 3, 1, 0.0, 0).unwrap();
        assert_eq!(p.describe_param(0), "recurrent Wf");
        assert_eq!(p.describe_param(p.params().len() - 1), "recurrent log_std");
    }
}
