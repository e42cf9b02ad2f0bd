//! Conditional DDPM over absolute-frame node point clouds, with
//! noise-aware focal weighting.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scene::Point;
use crate::tensor::Tensor;

pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::invalid(format!("unknown schedule `{s}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::LinearBeta => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Per-step coefficients, stored at index `t - 1` for `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::invalid("diffusion needs at least one step"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            // The 1e-4..0.02 range is tuned for 1000 steps; rescale so that
            // shorter chains still end near pure noise.
            let s = 1000.0 / steps as f64;
            let (b1, bt) = (1e-4 * s, 0.02 * s);
            (0..steps)
                .map(|i| {
                    let f = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                    (b1 + (bt - b1) * f).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let off = 0.008;
            let f = |t: f64| (((t / steps as f64) + off) / (1.0 + off) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        out[k] = (t as f64 * freq).sin();
        out[k + half] = (t as f64 * freq).cos();
    }
    out
}

/// Shared per-point noise predictor conditioned on a node latent.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cond_dim: usize,
    mlp: Mlp,
}

impl Denoiser {
    pub fn new(cond_dim: usize, hidden: usize) -> Self {
        Self {
            cond_dim,
            mlp: Mlp::new("den.mlp", &[3 + TIME_EMBED_DIM + cond_dim, hidden, hidden, 3], false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// `x_t`: N×3, `steps`: the diffusion step of every row, `cond`: N×d.
    pub fn predict_noise(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let n = g.value(x_t).rows();
        if g.value(x_t).cols() != 3 || steps.len() != n || g.value(cond).rows() != n {
            return Err(Error::shape("predict_noise", "x_t, steps and condition must agree"));
        }
        let emb: Vec<[f64; TIME_EMBED_DIM]> = steps.iter().map(|&t| time_embedding(t)).collect();
        let emb = g.constant(Tensor::from_rows(&emb)?)?;
        let x = g.concat_cols(&[x_t, emb, cond])?;
        self.mlp.forward(g, store, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaflConfig {
    pub k: usize,
    /// Density scale, 1/m.
    pub alpha: f64,
    pub beta: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub eps: f64,
    /// Neighborhoods within each node instead of over the merged cloud.
    pub per_node: bool,
}

impl Default for NaflConfig {
    fn default() -> Self {
        Self {
            k: 16,
            alpha: 20.0,
            beta: 0.8,
            w_min: 0.1,
            w_max: 1.2,
            eps: 1e-9,
            per_node: false,
        }
    }
}

impl NaflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("nafl.k must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("nafl.beta must be in [0, 1]"));
        }
        if self.w_min > self.w_max {
            return Err(Error::invalid("nafl.w_min exceeds nafl.w_max"));
        }
        if self.alpha < 0.0 || self.eps <= 0.0 {
            return Err(Error::invalid("nafl.alpha must be >= 0 and nafl.eps > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGeometry {
    /// Ascending.
    pub eigenvalues: [f64; 3],
    pub mean_knn_dist: f64,
}

/// Brute-force K nearest neighbours (self excluded), covariance with
/// `1/(K−1)`, sorted eigenvalues clamped at zero.
pub fn local_covariance_eigs(points: &[Point], k: usize) -> Result<Vec<LocalGeometry>> {
    if k < 2 || points.len() <= k {
        return Err(Error::invalid(format!("{} points cannot supply {k} neighbours", points.len())));
    }
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist(p, q), j))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nb = &d[..k];
            let mut mean = [0.0; 3];
            for &(_, j) in nb {
                for a in 0..3 {
                    mean[a] += points[j][a] / k as f64;
                }
            }
            let mut cov = Matrix3::zeros();
            for &(_, j) in nb {
                for a in 0..3 {
                    for b in 0..3 {
                        cov[(a, b)] += (points[j][a] - mean[a]) * (points[j][b] - mean[b]);
                    }
                }
            }
            cov /= (k - 1) as f64;
            let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
            ev.sort_by(f64::total_cmp);
            LocalGeometry {
                eigenvalues: [ev[0], ev[1], ev[2]],
                mean_knn_dist: nb.iter().map(|x| x.0).sum::<f64>() / k as f64,
            }
        })
        .collect())
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sphericity of one neighbourhood, `λ1 / (λ3 + ε)`.
pub fn sphericity(geo: &LocalGeometry, eps: f64) -> f64 {
    geo.eigenvalues[0] / (geo.eigenvalues[2] + eps)
}

pub fn nafl_weights(points: &[Point], cfg: &NaflConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(local_covariance_eigs(points, cfg.k)?
        .iter()
        .map(|geo| {
            let s_struct = 1.0 - sphericity(geo, cfg.eps);
            let s_dense = (-cfg.alpha * geo.mean_knn_dist).exp();
            let mix = (cfg.beta * s_struct + (1.0 - cfg.beta) * s_dense).clamp(0.0, 1.0);
            cfg.w_min + (cfg.w_max - cfg.w_min) * mix
        })
        .collect())
}

/// Clean absolute-frame targets for one sample with cached weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GenTargets {
    pub points: Vec<Vec<Point>>,
    pub weights: Vec<Vec<f64>>,
}

/// Subsamples up to `per_node` points from every node (without replacement)
/// and computes the focal weights once on the clean cloud.
pub fn gen_targets(nodes: &[Vec<Point>], per_node: usize, nafl: Option<&NaflConfig>, seed: u64) -> Result<GenTargets> {
    let mut rng = SeededRng::new(seed);
    let points: Vec<Vec<Point>> = nodes
        .iter()
        .map(|pts| {
            if pts.len() <= per_node {
                pts.clone()
            } else {
                let mut idx = rng.choose_distinct(pts.len(), per_node);
                idx.sort_unstable();
                idx.into_iter().map(|i| pts[i]).collect()
            }
        })
        .collect();
    let weights = match nafl {
        None => points.iter().map(|p| vec![1.0; p.len()]).collect(),
        Some(cfg) if cfg.per_node => points.iter().map(|p| nafl_weights(p, cfg)).collect::<Result<_>>()?,
        Some(cfg) => {
            let merged: Vec<Point> = points.iter().flatten().copied().collect();
            let w = nafl_weights(&merged, cfg)?;
            let mut out = Vec::with_capacity(points.len());
            let mut at = 0;
            for p in &points {
                out.push(w[at..at + p.len()].to_vec());
                at += p.len();
            }
            out
        }
    };
    Ok(GenTargets { points, weights })
}

/// Mean over nodes of the weighted mean over points of `‖ε − ε̂‖²`.
/// `node_of` maps rows to nodes; weights are constants.
pub fn weighted_noise_loss(
    g: &mut Graph,
    eps_hat: Var,
    eps: &Tensor,
    weights: &[f64],
    node_of: &[usize],
    n_nodes: usize,
) -> Result<Var> {
    let rows = eps.rows();
    if weights.len() != rows || node_of.len() != rows || n_nodes == 0 {
        return Err(Error::shape("weighted_noise_loss", "weights/rows/nodes disagree"));
    }
    let mut counts = vec![0usize; n_nodes];
    for &i in node_of {
        counts[i] += 1;
    }
    let coeff: Vec<f64> = weights
        .iter()
        .zip(node_of)
        .map(|(w, &i)| w / (counts[i] as f64 * n_nodes as f64))
        .collect();
    let target = g.constant(eps.clone())?;
    let diff = g.sub(eps_hat, target)?;
    let sq = g.square(diff)?;
    let per_point = g.sum_cols(sq)?;
    let c = g.constant(Tensor::matrix(rows, 1, coeff)?)?;
    let weighted = g.mul(per_point, c)?;
    g.sum_all(weighted)
}

/// One `(τ, ε)` draw per node, noised targets, predicted noise, weighted
/// loss. `latent` holds one conditioning row per node.
pub fn gen_loss(
    g: &mut Graph,
    store: &ParamStore,
    denoiser: &Denoiser,
    latent: Var,
    targets: &GenTargets,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Var> {
    let n_nodes = targets.points.len();
    if g.value(latent).rows() != n_nodes {
        return Err(Error::shape("gen_loss", "one latent row per node required"));
    }
    let mut rng = SeededRng::new(seed);
    let total: usize = targets.points.iter().map(Vec::len).sum();
    let mut xt = Vec::with_capacity(total * 3);
    let mut eps = Vec::with_capacity(total * 3);
    let mut steps = Vec::with_capacity(total);
    let mut node_of = Vec::with_capacity(total);
    for (i, pts) in targets.points.iter().enumerate() {
        let tau = 1 + rng.below(schedule.steps());
        let ab = schedule.alpha_bar(tau)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for p in pts {
            for x in p {
                let e = rng.normal();
                eps.push(e);
                xt.push(a * x + b * e);
            }
            steps.push(tau);
            node_of.push(i);
        }
    }
    let x = g.constant(Tensor::matrix(total, 3, xt)?)?;
    let cond = g.gather_rows(latent, &node_of)?;
    let eps_hat = denoiser.predict_noise(g, store, x, &steps, cond)?;
    let weights: Vec<f64> = targets.weights.iter().flatten().copied().collect();
    weighted_noise_loss(g, eps_hat, &Tensor::matrix(total, 3, eps)?, &weights, &node_of, n_nodes)
}

/// Ancestral sampling from unit noise with posterior variance
/// `β̃_t = β_t(1−ᾱ_{t−1})/(1−ᾱ_t)`; `conditions` has one row per node.
pub fn reverse_sample(
    denoiser: &Denoiser,
    store: &ParamStore,
    conditions: &Tensor,
    points_per_node: &[usize],
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<Vec<Point>>> {
    if conditions.rows() != points_per_node.len() {
        return Err(Error::shape("reverse_sample", "one condition per node required"));
    }
    let mut rng = SeededRng::new(seed);
    let node_of: Vec<usize> = points_per_node
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat(i).take(n))
        .collect();
    let total = node_of.len();
    let cond = conditions.gather_rows(&node_of);
    let mut x = Tensor::matrix(total, 3, (0..total * 3).map(|_| rng.normal()).collect())?;
    for t in (1..=schedule.steps()).rev() {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone())?;
        let cv = g.constant(cond.clone())?;
        let eps_hat = denoiser.predict_noise(&mut g, store, xv, &vec![t; total], cv)?;
        let eps_hat = g.value(eps_hat);
        let (alpha, beta, ab) = (schedule.alphas[t - 1], schedule.betas[t - 1], schedule.alpha_bars[t - 1]);
        let coef = beta / (1.0 - ab).sqrt();
        let mut next = x.zip_map(eps_hat, |xv, e| (xv - coef * e) / alpha.sqrt());
        if t > 1 {
            let ab_prev = schedule.alpha_bars[t - 2];
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            for v in next.data_mut() {
                *v += sigma * rng.normal();
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { op: "reverse_sample" });
        }
        x = next;
    }
    let mut out = vec![Vec::new(); points_per_node.len()];
    for (r, &i) in node_of.iter().enumerate() {
        let row = x.row(r);
        out[i].push([row[0], row[1], row[2]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_are_running_products() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = build_schedule(100, kind).unwrap();
            let mut acc = 1.0;
            for t in 0..100 {
                acc *= s.alphas[t];
                assert!((s.alpha_bars[t] - acc).abs() < 1e-12);
                if t > 0 {
                    assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
                }
            }
            assert!(s.alpha_bars[99] < 0.05, "{kind}");
        }
        let one = build_schedule(1, ScheduleKind::LinearBeta).unwrap();
        assert_eq!(one.alpha_bars[0], one.alphas[0]);
        assert!(build_schedule(0, ScheduleKind::Cosine).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = build_schedule(10, ScheduleKind::LinearBeta).unwrap();
        let x0 = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let xt = forward_noise(&x0, 4, &zero, &s).unwrap();
        let a = s.alpha_bars[3].sqrt();
        for (u, v) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*u, a * v);
        }
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 11, &zero, &s).is_err());
    }

    #[test]
    fn plane_has_zero_smallest_eigenvalue() {
        let pts: Vec<Point> = (0..20)
            .flat_map(|i| (0..20).map(move |j| [i as f64 * 0.01, j as f64 * 0.013, 0.7]))
            .collect();
        for geo in local_covariance_eigs(&pts, 16).unwrap() {
            assert!(geo.eigenvalues[0] <= 1e-10);
            assert!(geo.eigenvalues[0] <= geo.eigenvalues[1] && geo.eigenvalues[1] <= geo.eigenvalues[2]);
        }
        let w = nafl_weights(&pts, &NaflConfig::default()).unwrap();
        assert!(w.iter().all(|&v| v > 1.0 && v <= 1.2));
        assert!(local_covariance_eigs(&pts[..16], 16).is_err());
    }

    #[test]
    fn one_step_sampler_with_zero_predictor() {
        let den = Denoiser::new(2, 4);
        let mut store = ParamStore::new();
        den.init(&mut store, &mut SeededRng::new(0)).unwrap();
        let names: Vec<String> = store.names().filter(|n| n.starts_with("den.mlp.2")).map(String::from).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let s = build_schedule(1, ScheduleKind::LinearBeta).unwrap();
        let cond = Tensor::zeros(&[2, 2]);
        let out = reverse_sample(&den, &store, &cond, &[2, 1], &s, 17).unwrap();
        let mut rng = SeededRng::new(17);
        let root = s.alphas[0].sqrt();
        let flat: Vec<f64> = out.iter().flatten().flatten().copied().collect();
        for v in flat {
            assert_eq!(v, rng.normal() / root);
        }
        assert_eq!(out, reverse_sample(&den, &store, &cond, &[2, 1], &s, 17).unwrap());
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let eps = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let hat = g.input(eps.clone()).unwrap();
        let l = weighted_noise_loss(&mut g, hat, &eps, &[0.2, 0.9, 1.1], &[0, 0, 1], 2).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
