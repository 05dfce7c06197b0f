//! The fixed transition dataset used to train the prediction models.
//!
//! Transitions come from two sources: a seed policy (trained on a single
//! environment) executed epsilon-greedily across the training grid, and
//! "vine" groups in which every grid environment is set to the same anchor
//! state and given the same action, so the next states differ only through
//! the physical parameters.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};

use crate::binio::{Reader, Writer};
use crate::envsim::{EnvInstance, Family, GridSide, ParamGrid};
use crate::error::{Error, Result};
use crate::policy::{
    collect_trajectories, task_reset_seed, train_policy, ActionMode, EnvSampler, GaussianPolicy, IterationStats,
    PlainObs, PolicyModel, TrainLoopConfig,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    /// The executed action, after clipping to `[-1, 1]`.
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub env_id: usize,
    pub vine_group: Option<u32>,
}

/// Trains the seed policy on the grid's center cell only.
pub fn pretrain_seed_policy(
    grid: &ParamGrid,
    hidden: &[usize],
    config: &TrainLoopConfig,
    dt: f64,
    episode_limit: usize,
    seed: u64,
    on_iteration: impl FnMut(&IterationStats),
) -> Result<GaussianPolicy> {
    let family = grid.family();
    let cell = grid.center_cell();
    let sampler = EnvSampler::single(cell, grid.params(GridSide::Train, cell)?, dt, episode_limit)?;
    let init = GaussianPolicy::new(
        family.obs_dim(),
        hidden,
        family.act_dim(),
        -0.5,
        rng::derive(seed, rng::tag("seed_policy_init")),
    )?;
    let (policy, _) = train_policy(init, &PlainObs, &sampler, config, seed, on_iteration)?;
    Ok(policy)
}

fn transitions_from(tr: &crate::policy::Trajectory) -> impl Iterator<Item = Transition> + '_ {
    (0..tr.len()).map(move |t| Transition {
        s: tr.raw_obs[t].clone(),
        a: tr.actions[t].iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        s_next: tr.raw_obs[t + 1].clone(),
        env_id: tr.env_id,
        vine_group: None,
    })
}

/// Runs `policy` epsilon-greedily on uniformly drawn training cells until at
/// least `n_transitions` transitions are gathered (whole episodes).
pub fn collect_epsilon_greedy(
    policy: &GaussianPolicy,
    grid: &ParamGrid,
    n_transitions: usize,
    epsilon: f64,
    dt: f64,
    episode_limit: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let sampler = EnvSampler::grid(grid, GridSide::Train, dt, episode_limit)?;
    let eps = collect_trajectories(
        policy,
        &PlainObs,
        &sampler,
        n_transitions,
        seed,
        ActionMode::EpsilonGreedy(epsilon),
    )?;
    Ok(eps.iter().flat_map(|e| transitions_from(&e.trajectory)).collect())
}

/// True when the opposite corners of the grid disagree on the next state.
fn outcome_differs(corners: &mut [EnvInstance], state: &crate::envsim::EnvState, a: &[f64]) -> Result<bool> {
    let mut next = Vec::with_capacity(corners.len());
    for env in corners.iter_mut() {
        env.set_state(state)?;
        next.push(env.step(a)?.obs);
    }
    Ok(next.windows(2).any(|w| w[0] != w[1]))
}

/// Vine groups: anchors are drawn from seed-policy rollouts among steps that
/// are not terminal and whose next transition depends on the physical
/// parameters; each anchor is replayed in every training cell.
pub fn collect_vine(
    policy: &GaussianPolicy,
    grid: &ParamGrid,
    n_anchors: usize,
    dt: f64,
    episode_limit: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    if n_anchors == 0 {
        return Err(Error::invalid("collect_vine needs at least one anchor"));
    }
    let sampler = EnvSampler::grid(grid, GridSide::Train, dt, episode_limit)?;
    let mut corners = [0, grid.num_cells() - 1]
        .into_iter()
        .map(|c| EnvInstance::new(grid.params(GridSide::Train, c)?, dt, episode_limit))
        .collect::<Result<Vec<_>>>()?;
    let mut candidates = Vec::new();
    let mut episode = 0u64;
    let max_episodes = 64 * n_anchors as u64 + 64;
    while candidates.len() < 4 * n_anchors && episode < max_episodes {
        let ep_seed = rng::derive(seed, rng::tag("vine_rollout") ^ episode);
        episode += 1;
        let (_, mut env) = sampler.make(ep_seed)?;
        env.reset(task_reset_seed(ep_seed));
        let mut r = rng::stream(ep_seed, rng::tag("actions"));
        let mut mem = policy.initial_memory();
        loop {
            let obs = env.observe();
            let (a, _) = policy.act(&obs, &mut mem, &mut r)?;
            let a: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let state = env.get_state();
            let active = env.parameters_active() && outcome_differs(&mut corners, &state, &a)?;
            let step = env.step(&a)?;
            if active && !step.fell {
                candidates.push((state, a));
            }
            if step.done {
                break;
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::invalid("seed-policy rollouts produced no parameter-sensitive states"));
    }
    let mut r = rng::stream(seed, rng::tag("vine_anchor_pick"));
    let mut picks: Vec<usize> = if candidates.len() >= n_anchors {
        index::sample(&mut r, candidates.len(), n_anchors).into_vec()
    } else {
        (0..n_anchors).map(|k| k % candidates.len()).collect()
    };
    picks.sort_unstable();
    let mut out = Vec::with_capacity(n_anchors * grid.num_cells());
    for (g, &k) in picks.iter().enumerate() {
        let (state, action) = &candidates[k];
        for cell in 0..grid.num_cells() {
            let mut env = EnvInstance::new(grid.params(GridSide::Train, cell)?, dt, episode_limit)?;
            env.set_state(state)?;
            let s = env.observe();
            let step = env.step(action)?;
            out.push(Transition {
                s,
                a: action.clone(),
                s_next: step.obs,
                env_id: cell,
                vine_group: Some(g as u32),
            });
        }
    }
    Ok(out)
}

/// Per-dimension mean and standard deviation; constant dimensions get unit
/// scale so they normalize to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for k in 0..dim {
                let d = row[k] - mean[k];
                mean[k] += d / n as f64;
                m2[k] += d * (row[k] - mean[k]);
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, v) in x.iter().enumerate() {
            out[k] = (v - self.mean[k]) / self.std[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub s: Moments,
    pub a: Moments,
    pub s_next: Moments,
}

/// A split, normalized and frozen transition set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    family: Family,
    ranges: Vec<(f64, f64)>,
    transitions: Vec<Transition>,
    is_val: Vec<bool>,
    train: Vec<usize>,
    val: Vec<usize>,
    stats: NormStats,
}

/// Splits with stratification by `env_id`; each vine group lands entirely on
/// one side. Normalization statistics come from the training side only.
pub fn split_and_freeze(
    grid: &ParamGrid,
    transitions: Vec<Transition>,
    val_fraction: f64,
    seed: u64,
) -> Result<TransitionDataset> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    if transitions.is_empty() {
        return Err(Error::invalid("cannot split an empty transition list"));
    }
    let family = grid.family();
    for (i, t) in transitions.iter().enumerate() {
        if t.s.len() != family.obs_dim() || t.s_next.len() != family.obs_dim() || t.a.len() != family.act_dim() {
            return Err(Error::invalid(format!("transition {i} has wrong dimensions for {}", family.name())));
        }
        if t.env_id >= grid.num_cells() {
            return Err(Error::invalid(format!("transition {i} has env_id {} outside the grid", t.env_id)));
        }
    }
    let n = transitions.len();
    let val_cap = (val_fraction * n as f64).round() as usize;
    let train_cap = n - val_cap;
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    let mut loose: Vec<Vec<usize>> = vec![Vec::new(); grid.num_cells()];
    for (i, t) in transitions.iter().enumerate() {
        match t.vine_group {
            Some(g) => groups.entry(g).or_default().push(i),
            None => loose[t.env_id].push(i),
        }
    }
    if let Some((g, members)) = groups.iter().find(|(_, m)| m.len() > val_cap.min(train_cap)) {
        return Err(Error::invalid(format!(
            "vine group {g} has {} transitions, more than a split side holds ({} validation, {} training)",
            members.len(),
            val_cap,
            train_cap
        )));
    }
    let mut r = rng::stream(seed, rng::tag("split"));
    let mut is_val = vec![false; n];
    for ids in &mut loose {
        ids.shuffle(&mut r);
        let k = (val_fraction * ids.len() as f64).round() as usize;
        for &i in &ids[..k] {
            is_val[i] = true;
        }
    }
    let mut keys: Vec<u32> = groups.keys().copied().collect();
    keys.shuffle(&mut r);
    let k = (val_fraction * keys.len() as f64).round() as usize;
    for g in &keys[..k] {
        for &i in &groups[g] {
            is_val[i] = true;
        }
    }
    TransitionDataset::assemble(family, grid.ranges().to_vec(), transitions, is_val)
}

impl TransitionDataset {
    fn assemble(family: Family, ranges: Vec<(f64, f64)>, transitions: Vec<Transition>, is_val: Vec<bool>) -> Result<Self> {
        let train: Vec<usize> = (0..transitions.len()).filter(|&i| !is_val[i]).collect();
        let val: Vec<usize> = (0..transitions.len()).filter(|&i| is_val[i]).collect();
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let tr: Vec<&Transition> = train.iter().map(|&i| &transitions[i]).collect();
        let stats = NormStats {
            s: Moments::of(tr.iter().map(|t| t.s.as_slice()), family.obs_dim()),
            a: Moments::of(tr.iter().map(|t| t.a.as_slice()), family.act_dim()),
            s_next: Moments::of(tr.iter().map(|t| t.s_next.as_slice()), family.obs_dim()),
        };
        drop(tr);
        Ok(Self {
            family,
            ranges,
            transitions,
            is_val,
            train,
            val,
            stats,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn is_validation(&self, i: usize) -> bool {
        self.is_val[i]
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// The dataset never changes after the split.
    pub fn push(&mut self, _t: Transition) -> Result<()> {
        Err(Error::Frozen("transition dataset"))
    }

    /// Indices of `subset` grouped by environment cell.
    pub fn by_env(&self, subset: &[usize], num_cells: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_cells];
        for &i in subset {
            out[self.transitions[i].env_id].push(i);
        }
        out
    }

    /// Normalized `[s ‖ a]` rows and normalized `s_next` targets.
    pub fn normalized(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let ds = self.family.obs_dim();
        let da = self.family.act_dim();
        let mut x = Array2::zeros((idx.len(), ds + da));
        let mut y = Array2::zeros((idx.len(), ds));
        for (r, &i) in idx.iter().enumerate() {
            let t = &self.transitions[i];
            let mut row = x.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            self.stats.s.apply_into(&t.s, &mut row[..ds]);
            self.stats.a.apply_into(&t.a, &mut row[ds..]);
            let mut yr = y.row_mut(r);
            self.stats.s_next.apply_into(&t.s_next, yr.as_slice_mut().expect("standard layout"));
        }
        (x, y)
    }

    /// A copy without vine transitions, re-split the same way for the rest.
    pub fn without_vine(&self) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.transitions[i].vine_group.is_none()).collect();
        Self::assemble(
            self.family,
            self.ranges.clone(),
            keep.iter().map(|&i| self.transitions[i].clone()).collect(),
            keep.iter().map(|&i| self.is_val[i]).collect(),
        )
    }

    const MAGIC: &'static [u8; 8] = b"EPIDSET\0";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(Self::MAGIC);
        w.u32(Self::VERSION);
        w.str(self.family.name());
        w.u32(self.ranges.len() as u32);
        for &(lo, hi) in &self.ranges {
            w.f64(lo);
            w.f64(hi);
        }
        for m in [&self.stats.s, &self.stats.a, &self.stats.s_next] {
            w.f64s(&m.mean);
            w.f64s(&m.std);
        }
        w.u64(self.transitions.len() as u64);
        for (t, &v) in self.transitions.iter().zip(&self.is_val) {
            w.u64(t.env_id as u64);
            w.i64(t.vine_group.map_or(-1, i64::from));
            w.u8(v as u8);
            for x in t.s.iter().chain(&t.a).chain(&t.s_next) {
                w.f64(*x);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Format("not a transition dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: Self::VERSION,
            });
        }
        let family = Family::parse(&r.str()?)?;
        let np = r.u32()? as usize;
        let ranges = (0..np).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
        let mut moments = Vec::new();
        for _ in 0..3 {
            moments.push(Moments {
                mean: r.f64s()?,
                std: r.f64s()?,
            });
        }
        let n = r.u64()? as usize;
        let (ds, da) = (family.obs_dim(), family.act_dim());
        let mut transitions = Vec::with_capacity(n.min(1 << 20));
        let mut is_val = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let env_id = r.u64()? as usize;
            let g = r.i64()?;
            let v = r.u8()? != 0;
            let mut read = |k: usize| (0..k).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
            let s = read(ds)?;
            let a = read(da)?;
            let s_next = read(ds)?;
            transitions.push(Transition {
                s,
                a,
                s_next,
                env_id,
                vine_group: (g >= 0).then_some(g as u32),
            });
            is_val.push(v);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after transition dataset".into()));
        }
        let ds = Self::assemble(family, ranges, transitions, is_val)?;
        let stored = NormStats {
            a: moments.remove(1),
            s: moments.remove(0),
            s_next: moments.remove(0),
        };
        if stored != ds.stats {
            return Err(Error::Format("stored normalization statistics disagree with the data".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One row per transition: `env_id,vine_group,split,s*,a*,s_next*`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (ds, da) = (self.family.obs_dim(), self.family.act_dim());
        let mut header = vec!["env_id".to_string(), "vine_group".into(), "split".into()];
        header.extend((0..ds).map(|k| format!("s{k}")));
        header.extend((0..da).map(|k| format!("a{k}")));
        header.extend((0..ds).map(|k| format!("next_s{k}")));
        writeln!(out, "{}", header.join(","))?;
        for (t, &v) in self.transitions.iter().zip(&self.is_val) {
            let group = t.vine_group.map_or(String::new(), |g| g.to_string());
            let nums: Vec<String> = t.s.iter().chain(&t.a).chain(&t.s_next).map(|x| x.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{}",
                t.env_id,
                group,
                if v { "val" } else { "train" },
                nums.join(",")
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{grid_make, slide_puck};
    use crate::policy::UpdateConfig;

    fn puck_grid() -> ParamGrid {
        grid_make(Family::SlidePuck, &Family::SlidePuck.default_ranges()).unwrap()
    }

    fn untrained(log_std: f64) -> GaussianPolicy {
        GaussianPolicy::new(10, &[16], 2, log_std, 3).unwrap()
    }

    fn fake(n: usize, cells: usize, seed: u64) -> Vec<Transition> {
        use rand::Rng as _;
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|i| Transition {
                s: (0..10).map(|_| r.random_range(-3.0..5.0)).collect(),
                a: (0..2).map(|_| r.random_range(-1.0..1.0)).collect(),
                s_next: (0..10).map(|_| r.random_range(-1.0..2.0)).collect(),
                env_id: i % cells,
                vine_group: None,
            })
            .collect()
    }

    #[test]
    fn zero_iterations_returns_initial_policy() {
        let g = puck_grid();
        let cfg = TrainLoopConfig {
            iterations: 0,
            batch_timesteps: 100,
            gamma: 0.99,
            lambda: 0.95,
            update: UpdateConfig::default(),
        };
        let a = pretrain_seed_policy(&g, &[8], &cfg, 0.05, 100, 4, |_| {}).unwrap();
        let b = GaussianPolicy::new(10, &[8], 2, -0.5, rng::derive(4, rng::tag("seed_policy_init"))).unwrap();
        assert_eq!(a, b);
    }

    /// Kolmogorov-Smirnov statistic against U(-1, 1).
    fn ks_uniform(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let t = collect_epsilon_greedy(&untrained(-0.5), &puck_grid(), 10_000, 1.0, 0.05, 100, 2).unwrap();
        assert!(t.len() >= 10_000);
        let xs: Vec<f64> = t.iter().take(10_000).map(|t| t.a[0]).collect();
        // Critical value at alpha = 0.01 is 1.628 / sqrt(n).
        assert!(ks_uniform(xs) < 1.628 / 100.0);
    }

    #[test]
    fn epsilon_zero_follows_mean() {
        let p = untrained(-30.0);
        let t = collect_epsilon_greedy(&p, &puck_grid(), 1000, 0.0, 0.05, 100, 2).unwrap();
        assert!(t.len() >= 1000);
        for tr in t.iter().take(200) {
            let m = p.mean.predict(&tr.s).unwrap();
            for k in 0..2 {
                assert!((tr.a[k] - m[k].clamp(-1.0, 1.0)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn vine_groups_share_state_and_action() {
        let g = puck_grid();
        let v = collect_vine(&untrained(0.0), &g, 10, 0.05, 100, 1).unwrap();
        assert_eq!(v.len(), 250);
        for group in v.chunks(25) {
            let id = group[0].vine_group;
            assert!(id.is_some());
            for t in group {
                assert_eq!(t.vine_group, id);
                assert_eq!(t.s, group[0].s);
                assert_eq!(t.a, group[0].a);
            }
            let distinct = group.iter().any(|t| t.s_next != group[0].s_next);
            assert!(distinct, "{:?} {:?}", group[0].s, group[0].a);
        }
    }

    #[test]
    fn split_balances_and_normalizes() {
        let g = puck_grid();
        let mut t = fake(1000, 25, 0);
        let vine = collect_vine(&untrained(0.0), &g, 4, 0.05, 100, 1).unwrap();
        t.extend(vine);
        let d = split_and_freeze(&g, t.clone(), 0.2, 9).unwrap();
        let n = d.len();
        assert!((d.val_indices().len() as i64 - (0.2 * n as f64) as i64).abs() <= 25);
        for g in 0..4u32 {
            let sides: Vec<bool> = (0..n)
                .filter(|&i| d.transitions()[i].vine_group == Some(g))
                .map(|i| d.is_validation(i))
                .collect();
            assert!(sides.iter().all(|&s| s == sides[0]));
        }
        for env in d.by_env(d.val_indices(), 25) {
            let share = env.len() as f64 / (n as f64 / 25.0);
            assert!((share - 0.2).abs() <= 0.05 + 1e-9, "share {share}");
        }
        let (x, _) = d.normalized(d.train_indices());
        for c in 0..10 {
            let col = x.column(c);
            let m = col.mean().unwrap();
            let s = (col.mapv(|v| (v - m).powi(2)).mean().unwrap()).sqrt();
            assert!(m.abs() < 1e-6);
            // Goal coordinates are constant and normalize to zero.
            if c < slide_puck::GOAL_POS {
                assert!((0.99..=1.01).contains(&s), "column {c} std {s}");
            }
        }
        let again = split_and_freeze(&g, t, 0.2, 9).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn oversized_group_is_rejected() {
        let g = puck_grid();
        let mut t = fake(30, 25, 0);
        for x in &mut t {
            x.vine_group = Some(0);
        }
        assert!(split_and_freeze(&g, t, 0.2, 0).is_err());
    }

    #[test]
    fn frozen_and_persistent() {
        let g = puck_grid();
        let mut t = fake(200, 25, 1);
        t[3].vine_group = Some(7);
        let mut d = split_and_freeze(&g, t, 0.25, 2).unwrap();
        assert!(matches!(d.push(fake(1, 25, 0).remove(0)), Err(Error::Frozen(_))));
        let back = TransitionDataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        let mut bytes = d.to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            TransitionDataset::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut csv = Vec::new();
        d.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 201);
        assert!(text.starts_with("env_id,vine_group,split,s0"));
        let nv = d.without_vine().unwrap();
        assert_eq!(nv.len(), 199);
    }
}
