//! Held-out evaluation, one-parameter sweeps and embedding analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsim::{EnvInstance, EnvParams, Family, GridSide};
use crate::epimodel::EpiModels;
use crate::error::{Error, Result};
use crate::policy::{EnvSampler, GaussianPolicy};
use crate::rng;
use crate::training::{probe_and_embed, PolicyBundle, ProbeActions, Setting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Undiscounted sum of rewards; higher is better.
    EpisodeReturn,
    /// Object-to-goal distance at the end of the episode; lower is better.
    FinalDistance,
}

impl MetricKind {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::SlidePuck => MetricKind::FinalDistance,
            Family::SpringHopper => MetricKind::EpisodeReturn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::EpisodeReturn => "episode_return",
            MetricKind::FinalDistance => "final_distance",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricKind::EpisodeReturn
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub episodes_per_env: usize,
    pub embedding_rollouts_per_env: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            episodes_per_env: 4,
            embedding_rollouts_per_env: 8,
        }
    }
}

/// One policy evaluated with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub seed: u64,
    /// `per_cell[c][k]` is the metric of episode `k` in cell `c`.
    pub per_cell: Vec<Vec<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub metric: MetricKind,
    pub runs: Vec<EvalRun>,
    pub mean: f64,
    /// Standard deviation of the per-seed means.
    pub std: f64,
    /// Standard deviation over every episode of every seed.
    pub episode_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalReport {
    pub fn from_runs(name: &str, metric: MetricKind, runs: Vec<EvalRun>) -> Self {
        let means: Vec<f64> = runs.iter().map(|r| r.mean).collect();
        let all: Vec<f64> = runs.iter().flat_map(|r| r.per_cell.iter().flatten().copied()).collect();
        let (mean, std) = mean_std(&means);
        let (_, episode_std) = mean_std(&all);
        Self {
            name: name.to_string(),
            metric,
            runs,
            mean,
            std,
            episode_std,
        }
    }

    pub fn seed_means(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.mean).collect()
    }
}

/// Seed of episode `k`; independent of the cell so that any two
/// environments with equal parameters see identical episodes.
fn episode_seed(seed: u64, k: usize) -> u64 {
    rng::derive(rng::derive(seed, rng::tag("eval")), k as u64)
}

fn metric_of(bundle: &PolicyBundle, sampler: &EnvSampler, metric: MetricKind, seed: u64) -> Result<f64> {
    let out = bundle.run_episode(sampler, seed)?;
    Ok(match metric {
        MetricKind::EpisodeReturn => out.episode_return,
        MetricKind::FinalDistance => out
            .final_distance
            .ok_or_else(|| Error::invalid("final distance is undefined for this environment family"))?,
    })
}

fn run_cells(
    bundle: &PolicyBundle,
    setting: &Setting,
    cells: &[EnvParams],
    episodes: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if episodes == 0 {
        return Err(Error::invalid("episodes_per_env must be positive"));
    }
    let metric = MetricKind::for_family(setting.family());
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..episodes).map(move |k| (c, k))).collect();
    let values = jobs
        .par_iter()
        .map(|&(c, k)| {
            let s = EnvSampler::single(c, cells[c].clone(), setting.dt, setting.episode_limit)?;
            metric_of(bundle, &s, metric, episode_seed(seed, k))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.chunks(episodes).map(|c| c.to_vec()).collect())
}

/// Every cell of one grid side, `episodes_per_env` deterministic episodes
/// each.
pub fn evaluate_run(
    bundle: &PolicyBundle,
    setting: &Setting,
    side: GridSide,
    episodes_per_env: usize,
    seed: u64,
) -> Result<EvalRun> {
    let cells = (0..setting.grid.num_cells())
        .map(|c| setting.grid.params(side, c))
        .collect::<Result<Vec<_>>>()?;
    let per_cell = run_cells(bundle, setting, &cells, episodes_per_env, seed)?;
    let all: Vec<f64> = per_cell.iter().flatten().copied().collect();
    Ok(EvalRun {
        seed,
        mean: all.iter().sum::<f64>() / all.len() as f64,
        per_cell,
    })
}

pub fn evaluate(
    name: &str,
    bundle: &PolicyBundle,
    setting: &Setting,
    side: GridSide,
    episodes_per_env: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    let runs = seeds
        .iter()
        .map(|&s| evaluate_run(bundle, setting, side, episodes_per_env, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(name, MetricKind::for_family(setting.family()), runs))
}

/// Table rows: `method,metric,mean,std,episode_std,seeds`.
pub fn write_report_csv<W: Write>(mut out: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "method,metric,mean,std,episode_std,seeds")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name,
            r.metric.name(),
            r.mean,
            r.std,
            r.episode_std,
            r.runs.len()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub in_training_range: bool,
}

/// Varies one parameter with the others at their default values.
pub fn sweep_parameter(
    bundle: &PolicyBundle,
    setting: &Setting,
    param: &str,
    values: &[f64],
    episodes_per_env: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let idx = setting.grid.param_index(param)?;
    let family = setting.family();
    let defaults = setting.grid.default_values();
    let cells = values
        .iter()
        .map(|&v| {
            let mut p = defaults.clone();
            p[idx] = v;
            EnvParams::new(family, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let per = run_cells(bundle, setting, &cells, episodes_per_env, seed)?;
    let (lo, hi) = setting.grid.ranges()[idx];
    Ok(values
        .iter()
        .zip(per)
        .map(|(&value, v)| {
            let (mean, std) = mean_std(&v);
            SweepRow {
                value,
                mean,
                std,
                in_training_range: value >= lo && value <= hi,
            }
        })
        .collect())
}

/// `values` evenly spaced from half the lower bound to 1.5 times the upper
/// bound of `param`'s training range.
pub fn default_sweep_values(setting: &Setting, param: &str, n: usize) -> Result<Vec<f64>> {
    let (lo, hi) = setting.grid.ranges()[setting.grid.param_index(param)?];
    let (a, b) = (0.5 * lo, 1.5 * hi);
    Ok((0..n)
        .map(|i| if n == 1 { lo } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect())
}

pub fn write_sweep_csv<W: Write>(mut out: W, series: &[(String, Vec<SweepRow>)]) -> Result<()> {
    writeln!(out, "method,value,mean,std,in_training_range")?;
    for (name, rows) in series {
        for r in rows {
            writeln!(out, "{name},{},{},{},{}", r.value, r.mean, r.std, r.in_training_range as u8)?;
        }
    }
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Line plot of metric against parameter value with the training range
/// shaded.
pub fn sweep_svg(param: &str, metric: MetricKind, range: (f64, f64), series: &[(String, Vec<SweepRow>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|(_, r)| r.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (range.0, range.1, f64::INFINITY, f64::NEG_INFINITY);
    for r in pts {
        x0 = x0.min(r.value);
        x1 = x1.max(r.value);
        if r.mean.is_finite() {
            y0 = y0.min(r.mean);
            y1 = y1.max(r.mean);
        }
    }
    if !(y0.is_finite() && y1 > y0) {
        y0 = if y0.is_finite() { y0 - 1.0 } else { 0.0 };
        y1 = y0 + 2.0;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{:.2}" y="{m}" width="{:.2}" height="{:.2}" fill="#dddddd"/>"##,
        sx(range.0),
        sx(range.1) - sx(range.0),
        h - 2.0 * m
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#, sx(xv), h - m + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#, m - 6.0, sy(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{param}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        metric.name()
    );
    for (i, (name, rows)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = rows
            .iter()
            .filter(|r| r.mean.is_finite())
            .map(|r| format!("{:.2},{:.2}", sx(r.value), sy(r.mean)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, w - m - 120.0, m + 16.0 * (i as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub env_id: usize,
    pub rho: Vec<f64>,
    pub embedding: Vec<f64>,
    pub projection: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    /// Builds a dump from raw embeddings, computing the 2-D projection.
    pub fn from_embeddings(items: Vec<(usize, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let emb: Vec<Vec<f64>> = items.iter().map(|i| i.2.clone()).collect();
        let proj = project_2d(&emb)?;
        Ok(Self {
            rows: items
                .into_iter()
                .zip(proj)
                .map(|((env_id, rho, embedding), projection)| EmbeddingRow {
                    env_id,
                    rho,
                    embedding,
                    projection,
                })
                .collect(),
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.env_id).collect()
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.embedding.clone()).collect()
    }

    /// `env_id,rho*,e*,p0,p1`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (np, ne) = self.rows.first().map_or((0, 0), |r| (r.rho.len(), r.embedding.len()));
        let mut header = vec!["env_id".to_string()];
        header.extend((0..np).map(|i| format!("rho{i}")));
        header.extend((0..ne).map(|i| format!("e{i}")));
        header.extend(["p0".to_string(), "p1".to_string()]);
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut f = vec![r.env_id.to_string()];
            f.extend(r.rho.iter().chain(&r.embedding).chain(&r.projection).map(|v| v.to_string()));
            writeln!(out, "{}", f.join(","))?;
        }
        Ok(())
    }
}

/// Probes every training cell `rollouts_per_env` times and embeds the
/// result. Row order is cell-major.
pub fn export_embeddings(
    policy: &GaussianPolicy,
    models: &EpiModels,
    setting: &Setting,
    rollouts_per_env: usize,
    seed: u64,
    actions: ProbeActions,
) -> Result<EmbeddingDump> {
    if rollouts_per_env == 0 {
        return Err(Error::invalid("rollouts_per_env must be positive"));
    }
    let n = setting.grid.num_cells();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|c| (0..rollouts_per_env).map(move |k| (c, k))).collect();
    let items = jobs
        .par_iter()
        .map(|&(c, k)| {
            let params = setting.grid.params(GridSide::Train, c)?;
            let rho = params.as_slice().to_vec();
            let mut env = EnvInstance::new(params, setting.dt, setting.episode_limit)?;
            let s = rng::derive(rng::derive(seed, rng::tag("embeddings")), (c * rollouts_per_env + k) as u64);
            let (_, tau) = probe_and_embed(policy, models, &mut env, c, s, actions)?;
            Ok((c, rho, models.embed(&tau)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingDump::from_embeddings(items)
}

/// Top-`k` eigenpairs of a symmetric matrix by cyclic Jacobi rotations,
/// sorted by decreasing eigenvalue.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (vals, vecs)
}

/// Principal-component projection to two dimensions. Each component's
/// largest-magnitude loading is made positive. Two-dimensional input is
/// returned unchanged.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = points.first().map_or(0, |p| p.len());
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("embeddings have mixed dimensions"));
    }
    match d {
        0 => return Ok(vec![[0.0, 0.0]; points.len()]),
        1 => return Ok(points.iter().map(|p| [p[0], 0.0]).collect()),
        2 => return Ok(points.iter().map(|p| [p[0], p[1]]).collect()),
        _ => {}
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let (_, vecs) = symmetric_eigen(cov);
    let comps: Vec<Vec<f64>> = vecs
        .into_iter()
        .take(2)
        .map(|mut v| {
            let big = v.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(points
        .iter()
        .map(|p| {
            let c = |v: &Vec<f64>| v.iter().zip(p.iter().zip(&mean)).map(|(w, (x, m))| w * (x - m)).sum::<f64>();
            [c(&comps[0]), c(&comps[1])]
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distances. Points alone in
/// their cluster score 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::dim("silhouette labels", points.len(), labels.len()));
    }
    let groups: BTreeMap<usize, Vec<usize>> = labels.iter().enumerate().fold(BTreeMap::new(), |mut m, (i, &l)| {
        m.entry(l).or_insert_with(Vec::new).push(i);
        m
    });
    if groups.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = &groups[&labels[i]];
            if own.len() < 2 {
                return 0.0;
            }
            let mean_to = |g: &[usize], skip: bool| {
                let s: f64 = g.iter().filter(|&&j| !skip || j != i).map(|&j| dist(&points[i], &points[j])).sum();
                s / (g.len() - skip as usize) as f64
            };
            let a = mean_to(own, true);
            let b = groups
                .iter()
                .filter(|(&l, _)| l != labels[i])
                .map(|(_, g)| mean_to(g, false))
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean silhouette over `permutations` random relabelings.
pub fn silhouette_null(points: &[Vec<f64>], labels: &[usize], permutations: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, rng::tag("silhouette_null"));
    let mut l = labels.to_vec();
    let mut total = 0.0;
    for _ in 0..permutations.max(1) {
        l.shuffle(&mut r);
        total += silhouette_score(points, &l)?;
    }
    Ok(total / permutations.max(1) as f64)
}

/// Mean distance between environment centroids divided by the mean
/// distance of embeddings to their own centroid. Zero when every
/// embedding is identical.
pub fn embedding_separation_score(dump: &EmbeddingDump) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for r in &dump.rows {
        groups.entry(r.env_id).or_default().push(&r.embedding);
    }
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::invalid("separation score needs two or more rollouts in each of two or more environments"));
    }
    let centroids: Vec<Vec<f64>> = groups
        .values()
        .map(|g| {
            let d = g[0].len();
            (0..d).map(|k| g.iter().map(|e| e[k]).sum::<f64>() / g.len() as f64).collect()
        })
        .collect();
    let spread = groups
        .values()
        .zip(&centroids)
        .map(|(g, c)| g.iter().map(|e| dist(e, c)).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    Ok(if spread > 1e-12 {
        inter / spread
    } else if inter > 1e-12 {
        f64::INFINITY
    } else {
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyModel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ring(center: [f64; 2], r: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                vec![center[0] + r * t.cos(), center[1] + r * t.sin()]
            })
            .collect()
    }

    fn dump_of(groups: Vec<Vec<Vec<f64>>>) -> EmbeddingDump {
        let items = groups
            .into_iter()
            .enumerate()
            .flat_map(|(e, g)| g.into_iter().map(move |p| (e, vec![1.0], p)))
            .collect();
        EmbeddingDump::from_embeddings(items).unwrap()
    }

    #[test]
    fn separation_of_two_rings() {
        let d = dump_of(vec![ring([0.0, 0.0], 0.1, 16), ring([1.0, 0.0], 0.1, 16)]);
        let s = embedding_separation_score(&d).unwrap();
        assert_relative_eq!(s, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_embeddings_score_zero() {
        let d = dump_of(vec![vec![vec![0.3, 0.3]; 3], vec![vec![0.3, 0.3]; 3]]);
        assert_eq!(embedding_separation_score(&d).unwrap(), 0.0);
        assert!(embedding_separation_score(&dump_of(vec![vec![vec![0.0, 0.0]; 3]])).is_err());
    }

    /// Silhouette for four points in one dimension, worked by hand.
    #[test]
    fn silhouette_matches_hand_computation() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0], vec![7.0]];
        let labels = [0, 0, 1, 1];
        // a/b for each point from the definition.
        let s0 = (6.0 - 1.0) / 6.0;
        let s1 = (5.0 - 1.0) / 5.0;
        let s2 = (4.5 - 2.0) / 4.5;
        let s3 = (6.5 - 2.0) / 6.5;
        let expect = (s0 + s1 + s2 + s3) / 4.0;
        assert_relative_eq!(silhouette_score(&pts, &labels).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn silhouette_of_clean_clusters_beats_null() {
        let mut pts = ring([0.0, 0.0], 0.1, 10);
        pts.extend(ring([3.0, 0.0], 0.1, 10));
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let s = silhouette_score(&pts, &labels).unwrap();
        let null = silhouette_null(&pts, &labels, 20, 0).unwrap();
        assert!(s > 0.9);
        assert!(null < 0.1);
    }

    #[test]
    fn pca_is_identity_on_2d_and_idempotent() {
        let p = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        assert_eq!(project_2d(&p).unwrap(), vec![[1.0, -2.0], [0.5, 3.0]]);
        let p3: Vec<Vec<f64>> = (0..20).map(|i| {
            let t = i as f64;
            vec![t, 0.5 * t + (t * 1.3).sin(), 0.01 * (t * 0.7).cos()]
        }).collect();
        let once = project_2d(&p3).unwrap();
        let as_vec: Vec<Vec<f64>> = once.iter().map(|q| q.to_vec()).collect();
        assert_eq!(project_2d(&as_vec).unwrap(), once);
    }

    #[test]
    fn pca_recovers_dominant_axis_with_sign_convention() {
        // Points along -(1, 1, 0) direction with tiny noise in z.
        let pts: Vec<Vec<f64>> = (0..11)
            .map(|i| {
                let t = i as f64 - 5.0;
                vec![-t, -t, 0.01 * (i % 2) as f64]
            })
            .collect();
        let proj = project_2d(&pts).unwrap();
        // First component is (1, 1, 0)/sqrt(2) with a positive largest
        // loading, so the projection of point i is -t*sqrt(2).
        for (i, q) in proj.iter().enumerate() {
            let t = i as f64 - 5.0;
            assert_relative_eq!(q[0], -t * 2f64.sqrt(), epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn jacobi_reconstructs_symmetric_matrices(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let a = vec![
                vec![vals[0], vals[1], vals[2]],
                vec![vals[1], vals[3], vals[4]],
                vec![vals[2], vals[4], vals[5]],
            ];
            let (l, v) = symmetric_eigen(a.clone());
            for i in 0..3 {
                for j in 0..3 {
                    let r: f64 = (0..3).map(|k| l[k] * v[k][i] * v[k][j]).sum();
                    prop_assert!((r - a[i][j]).abs() < 1e-9);
                }
            }
            prop_assert!(l[0] >= l[1] && l[1] >= l[2]);
        }

        #[test]
        fn silhouette_is_bounded(pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 6..20)) {
            let p: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
            let labels: Vec<usize> = (0..p.len()).map(|i| i % 3).collect();
            let s = silhouette_score(&p, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    fn zero_policy(obs: usize) -> GaussianPolicy {
        let mut p = GaussianPolicy::new(obs, &[4], 2, -1.0, 0).unwrap();
        let n = p.params().len();
        p.set_params(&vec![0.0; n]).unwrap();
        p
    }

    #[test]
    fn do_nothing_policy_leaves_initial_distance() {
        let setting = Setting::default_for(Family::SlidePuck).unwrap();
        let b = PolicyBundle::Plain(zero_policy(10));
        let run = evaluate_run(&b, &setting, GridSide::Test, 2, 3).unwrap();
        // Linear damping stops a puck launched at speed v after at most
        // v * mass / damping.
        let start = crate::envsim::constants::GOAL[0] - crate::envsim::constants::PUCK_START[0];
        let v0 = crate::envsim::constants::PUCK_RESET_SPEED * 2f64.sqrt();
        for (c, eps) in run.per_cell.iter().enumerate() {
            let p = setting.grid.cell_values(GridSide::Test, c);
            for v in eps {
                assert!((v - start).abs() <= v0 * p[0] / p[1] + 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn evaluation_is_repeatable_and_pure() {
        let setting = Setting::default_for(Family::SlidePuck).unwrap();
        let p = GaussianPolicy::new(10, &[8], 2, -0.5, 4).unwrap();
        let b = PolicyBundle::Plain(p);
        let before = b.parameters();
        let r1 = evaluate("x", &b, &setting, GridSide::Test, 2, &[0, 1]).unwrap();
        let r2 = evaluate("x", &b, &setting, GridSide::Test, 2, &[0, 1]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(b.parameters(), before);
        assert_eq!(r1.runs.len(), 2);
        assert_eq!(r1.runs[0].per_cell.len(), 25);
        assert!(evaluate("x", &b, &setting, GridSide::Test, 0, &[0]).is_err());
    }

    #[test]
    fn sweep_over_training_values_matches_cells() {
        let setting = Setting::default_for(Family::SlidePuck).unwrap();
        let b = PolicyBundle::Plain(GaussianPolicy::new(10, &[8], 2, -0.5, 5).unwrap());
        let values = setting.grid.values(GridSide::Train)[0].clone();
        let rows = sweep_parameter(&b, &setting, "mass", &values, 3, 11).unwrap();
        assert_eq!(rows.len(), values.len());
        assert!(rows.iter().all(|r| r.in_training_range));
        let run = evaluate_run(&b, &setting, GridSide::Train, 3, 11).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let cell = setting.grid.cell_index(&[i, 2]);
            let (m, _) = mean_std(&run.per_cell[cell]);
            assert!((r.mean - m).abs() <= 1e-9);
        }
        assert!(sweep_parameter(&b, &setting, "colour", &values, 1, 0).is_err());
        let svg = sweep_svg("mass", MetricKind::FinalDistance, setting.grid.ranges()[0], &[("x".into(), rows)]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
