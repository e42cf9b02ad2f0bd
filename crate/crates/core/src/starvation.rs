//! Linearized two-pathway gradient flow.
//!
//! The prediction is `G_prior·θ_node + G_topo·θ_edge` against a fixed
//! target under squared loss. Each pathway's gradient is scaled by its own
//! gain. With a full-rank prior the residual vanishes at a rate set by the
//! prior gain and the edge parameters barely move; with a rank-one prior
//! (translation only) a residual of size `C` survives that only the edge
//! pathway can remove.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Multi,
    Single,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Multi => "multi",
            Regime::Single => "single",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Regime::Multi),
            "single" => Ok(Regime::Single),
            _ => Err(Error::invalid(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPathwayModel {
    pub regime: Regime,
    pub lambda_prior: f64,
    pub lambda_topo: f64,
    /// Columns are the prior feature directions.
    pub g_prior: DMatrix<f64>,
    pub g_topo: DMatrix<f64>,
    pub target: DVector<f64>,
    pub theta_node: DVector<f64>,
    pub theta_edge: DVector<f64>,
    /// Best residual the prior pathway can reach on its own.
    pub ceiling: f64,
}

pub const DEFAULT_DIM: usize = 4;
pub const DEFAULT_CEILING: f64 = 0.5;

/// Orthonormal columns from Gram–Schmidt on Gaussian draws.
fn orthonormal(dim: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(dim, cols);
    let mut j = 0;
    while j < cols {
        let mut v = DVector::from_fn(dim, |_, _| rng.normal());
        for k in 0..j {
            let proj = m.column(k).dot(&v);
            v -= m.column(k) * proj;
        }
        let n = v.norm();
        if n > 1e-8 {
            m.set_column(j, &(v / n));
            j += 1;
        }
    }
    m
}

pub fn build_model(regime: Regime, lambda_prior: f64, lambda_topo: f64, seed: u64) -> Result<LinearPathwayModel> {
    build_model_with(regime, lambda_prior, lambda_topo, DEFAULT_DIM, DEFAULT_CEILING, seed)
}

/// `lambda_topo = 0` is allowed for the frozen-edge control.
pub fn build_model_with(
    regime: Regime,
    lambda_prior: f64,
    lambda_topo: f64,
    dim: usize,
    ceiling: f64,
    seed: u64,
) -> Result<LinearPathwayModel> {
    if !(lambda_prior > 0.0) || lambda_topo < 0.0 || !lambda_topo.is_finite() {
        return Err(Error::invalid("gains must be positive"));
    }
    if !(2..=8).contains(&dim) {
        return Err(Error::invalid("dimension must be in [2, 8]"));
    }
    let mut rng = SeededRng::new(seed);
    let g_topo = orthonormal(dim, dim, &mut rng);
    let (g_prior, target, ceiling) = match regime {
        Regime::Multi => {
            let g = orthonormal(dim, dim, &mut rng);
            let t = orthonormal(dim, 1, &mut rng).column(0).into_owned();
            (g, t, 0.0)
        }
        Regime::Single => {
            if !(ceiling > 0.0) {
                return Err(Error::invalid("single regime needs a positive ceiling"));
            }
            let basis = orthonormal(dim, 2, &mut rng);
            let u = basis.column(0).into_owned();
            let v = basis.column(1).into_owned();
            (DMatrix::from_columns(&[u.clone()]), u + v * ceiling, ceiling)
        }
    };
    Ok(LinearPathwayModel {
        regime,
        lambda_prior,
        lambda_topo,
        theta_node: DVector::zeros(g_prior.ncols()),
        theta_edge: DVector::zeros(g_topo.ncols()),
        g_prior,
        g_topo,
        target,
        ceiling,
    })
}

impl LinearPathwayModel {
    pub fn residual(&self) -> DVector<f64> {
        &self.g_prior * &self.theta_node + &self.g_topo * &self.theta_edge - &self.target
    }

    /// Residual norm with `θ_node` at its least-squares optimum and the
    /// edge pathway held where it is.
    pub fn prior_only_residual(&self) -> f64 {
        let rest = &self.target - &self.g_topo * &self.theta_edge;
        let gtg = self.g_prior.transpose() * &self.g_prior;
        let rhs = self.g_prior.transpose() * &rest;
        let theta = gtg.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(self.g_prior.ncols()));
        (&self.g_prior * theta - rest).norm()
    }

    /// Largest eigenvalue of `λ_prior·G_p·G_pᵀ + λ_topo·G_t·G_tᵀ`.
    pub fn max_gain(&self) -> f64 {
        let a = &self.g_prior * self.g_prior.transpose() * self.lambda_prior
            + &self.g_topo * self.g_topo.transpose() * self.lambda_topo;
        a.symmetric_eigenvalues().iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn stability_bound(&self) -> f64 {
        1.0 / (2.0 * self.max_gain())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub residual: Vec<f64>,
    /// `∫‖dθ_edge/dt‖ dt` up to each recorded time.
    pub cum_update: Vec<f64>,
    pub theta_node: Vec<DVector<f64>>,
    pub theta_edge: Vec<DVector<f64>>,
}

impl FlowTrajectory {
    pub fn final_residual(&self) -> f64 {
        *self.residual.last().unwrap_or(&f64::NAN)
    }

    pub fn final_cum_update(&self) -> f64 {
        *self.cum_update.last().unwrap_or(&0.0)
    }

    /// Least-squares slope of `−ln‖e‖` over the recorded window where the
    /// residual stays above `floor`.
    pub fn decay_exponent(&self, from: f64, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.residual)
            .filter(|&(&t, &r)| t >= from && r > floor)
            .map(|(&t, &r)| (t, -r.ln()))
            .collect();
        fit_slope(&pts)
    }
}

/// Explicit Euler on the preconditioned gradient flow. At most
/// `max_records` evenly spaced states are kept (the final state always).
pub fn simulate_flow(model: &LinearPathwayModel, dt: f64, t_end: f64, max_records: usize) -> Result<FlowTrajectory> {
    let bound = model.stability_bound();
    if !(dt > 0.0) || dt >= bound {
        return Err(Error::UnstableStep { dt, bound });
    }
    if !(t_end > 0.0) {
        return Err(Error::invalid("t_end must be positive"));
    }
    let steps = (t_end / dt).ceil() as usize;
    let stride = (steps / max_records.max(1)).max(1);
    let mut m = model.clone();
    let mut out = FlowTrajectory {
        times: vec![0.0],
        residual: vec![m.residual().norm()],
        cum_update: vec![0.0],
        theta_node: vec![m.theta_node.clone()],
        theta_edge: vec![m.theta_edge.clone()],
    };
    let gp_t = m.g_prior.transpose();
    let gt_t = m.g_topo.transpose();
    let mut cum = 0.0;
    for k in 1..=steps {
        let e = m.residual();
        let d_node = &gp_t * &e * (-m.lambda_prior * dt);
        let d_edge = &gt_t * &e * (-m.lambda_topo * dt);
        cum += d_edge.norm();
        m.theta_node += d_node;
        m.theta_edge += d_edge;
        if k % stride == 0 || k == steps {
            let r = m.residual().norm();
            if !r.is_finite() {
                return Err(Error::NonFinite { op: "simulate_flow" });
            }
            out.times.push(k as f64 * dt);
            out.residual.push(r);
            out.cum_update.push(cum);
            out.theta_node.push(m.theta_node.clone());
            out.theta_edge.push(m.theta_edge.clone());
        }
    }
    Ok(out)
}

fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub lambda_topo: f64,
    pub trials: usize,
    /// Step as a fraction of `1 / max_gain`.
    pub dt_fraction: f64,
    pub t_end: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_topo: 0.1,
            trials: 5,
            dt_fraction: 0.025,
            t_end: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub lambda_prior: f64,
    pub regime: Regime,
    pub cum_update: f64,
    pub final_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub points: Vec<SweepPoint>,
    /// Log-log slope of cumulative edge update against prior gain.
    pub slope: f64,
}

/// Trial-averaged sweep over prior gains for one regime.
pub fn starvation_scaling(lambdas: &[f64], regime: Regime, cfg: &SweepConfig) -> Result<ScalingReport> {
    if lambdas.len() < 3 {
        return Err(Error::invalid("need at least three gains"));
    }
    let (lo, hi) = lambdas.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &l| (a.min(l), b.max(l)));
    if !(lo > 0.0) || hi / lo < 100.0 {
        return Err(Error::invalid("gains must be positive and span two decades"));
    }
    let mut points = Vec::with_capacity(lambdas.len());
    for (i, &lp) in lambdas.iter().enumerate() {
        let mut cum = 0.0;
        let mut res = 0.0;
        for trial in 0..cfg.trials.max(1) {
            let seed = crate::rng::derive_seed(cfg.seed, &[i as u64, trial as u64]);
            let model = build_model(regime, lp, cfg.lambda_topo, seed)?;
            let dt = cfg.dt_fraction / model.max_gain();
            let traj = simulate_flow(&model, dt, cfg.t_end, 16)?;
            cum += traj.final_cum_update();
            res += traj.final_residual();
        }
        let n = cfg.trials.max(1) as f64;
        points.push(SweepPoint {
            lambda_prior: lp,
            regime,
            cum_update: cum / n,
            final_residual: res / n,
        });
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda_prior.ln(), p.cum_update.ln())).collect();
    if pts.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::invalid("cumulative update is zero; slope undefined"));
    }
    let slope = fit_slope(&pts).ok_or_else(|| Error::invalid("degenerate slope fit"))?;
    Ok(ScalingReport { points, slope })
}
