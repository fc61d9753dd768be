//! Estimation of the parameter distribution from paired BrAC/TAC episodes.
//!
//! The cost is the sum over episodes of squared differences between the
//! population-model TAC and the observed TAC at the observation instants.
//! Gradients come from an adjoint recursion per parameter cell, chained
//! through the cell weights and conditional means of the density.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data_io::resample;
pub use crate::data_io::Episode;
use crate::density::{grid_moments, grid_moments_adaptive, support_meshes, GridMoments, PopulationParams};
use crate::error::{Error, Result};
use crate::forward_model::{DiscreteSystem, DiscreteTimeOps, DiscretizationGrid};
use crate::optim::{nelder_mead, projected_lbfgs, LbfgsOptions, NelderMeadOptions};

/// An episode on the `τ` grid: inputs `u_0..u_{J-1}` and observed outputs
/// `(j, ỹ_j)` with `1 ≤ j ≤ J`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEpisode {
    pub id: String,
    pub u: Vec<f64>,
    pub obs: Vec<(usize, f64)>,
}

impl TrainingEpisode {
    /// BrAC is spline-resampled onto the grid (zero beyond its last sample);
    /// each TAC sample is attached to the nearest grid index. The sample at
    /// `t = 0` is not fitted since the state starts at zero.
    pub fn from_episode(ep: &Episode, tau: f64) -> Result<Self> {
        ep.validate_training()?;
        let mut obs: Vec<(usize, f64)> = Vec::new();
        for &(t, v) in &ep.tac {
            if t < 0.0 {
                return Err(Error::Validation(format!("episode '{}': negative TAC time {t}", ep.id)));
            }
            let j = (t / tau).round() as usize;
            if j == 0 {
                continue;
            }
            if obs.last().is_some_and(|&(k, _)| k == j) {
                return Err(Error::Validation(format!("episode '{}': two TAC samples map to grid index {j}", ep.id)));
            }
            obs.push((j, v));
        }
        if obs.is_empty() {
            return Err(Error::Validation(format!("episode '{}': no TAC samples after t = 0", ep.id)));
        }
        let horizon = obs.last().unwrap().0;
        let mut u = resample(&ep.brac, tau)?;
        u.resize(horizon, 0.0);
        Ok(Self { id: ep.id.clone(), u, obs })
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Residuals `y_j − ỹ_j` for a simulated output `y_1..y_J`.
    pub fn residuals(&self, y: &[f64]) -> Vec<f64> {
        self.obs.iter().map(|&(j, v)| y[j - 1] - v).collect()
    }
}

/// Which entries of `[a1, a2, b1, b2, mu1, mu2, l11, l21, l22]` are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub fix_lower: bool,
}

impl Default for ParamLayout {
    fn default() -> Self {
        Self { fix_lower: true }
    }
}

const MIN_CHOL_DIAG: f64 = 1e-6;
const MIN_SUPPORT_WIDTH: f64 = 1e-3;

impl ParamLayout {
    pub fn active(&self) -> Vec<usize> {
        if self.fix_lower {
            (2..9).collect()
        } else {
            (0..9).collect()
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.active().into_iter().map(|i| crate::density::PARAM_NAMES[i]).collect()
    }

    pub fn to_active(&self, p: &PopulationParams) -> Result<Vec<f64>> {
        let v = p.to_vector()?;
        Ok(self.active().into_iter().map(|i| v[i]).collect())
    }

    pub fn from_active(&self, base: &PopulationParams, x: &[f64]) -> Result<PopulationParams> {
        let mut v = base.to_vector()?;
        for (k, i) in self.active().into_iter().enumerate() {
            v[i] = x[k];
        }
        PopulationParams::from_vector(&v)
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo_full =
            [0.0, 0.0, MIN_SUPPORT_WIDTH, MIN_SUPPORT_WIDTH, f64::NEG_INFINITY, f64::NEG_INFINITY, MIN_CHOL_DIAG, f64::NEG_INFINITY, MIN_CHOL_DIAG];
        let lo = self.active().into_iter().map(|i| lo_full[i]).collect();
        let hi = vec![f64::INFINITY; self.active().len()];
        (lo, hi)
    }
}

fn episode_outputs(ops: &DiscreteTimeOps, ep: &TrainingEpisode) -> Vec<f64> {
    ops.simulate(&ep.u)
}

/// `Σ_e Σ_j (y_j − ỹ_j)²` at `params`.
pub fn cost(params: &PopulationParams, episodes: &[TrainingEpisode], grid: &DiscretizationGrid) -> Result<f64> {
    let ops = DiscreteSystem::assemble(params, grid)?.discrete_time()?;
    let parts: Vec<f64> = episodes.par_iter().map(|ep| ep.residuals(&episode_outputs(&ops, ep)).iter().map(|r| r * r).sum()).collect();
    Ok(parts.iter().sum())
}

/// Cost together with its gradient over the full parameter vector
/// `[a1, a2, b1, b2, mu1, mu2, l11, l21, l22]`.
pub fn cost_and_gradient(params: &PopulationParams, episodes: &[TrainingEpisode], grid: &DiscretizationGrid) -> Result<(f64, [f64; 9])> {
    let (pm1, pm2) = support_meshes(params, grid.m1, grid.m2)?;
    let moments = grid_moments_adaptive(params, &pm1, &pm2, true)?;
    let sys = DiscreteSystem::from_moments(grid, pm1, pm2, &moments)?;
    let ops = sys.discrete_time_with_sensitivities()?;
    let nc = ops.cells();

    // Per-episode cost and sensitivities to (w_c, κ_c, β_c).
    let parts: Vec<(f64, Vec<[f64; 3]>)> = episodes.par_iter().map(|ep| episode_sensitivities(&ops, ep)).collect();
    let mut total = 0.0;
    let mut sens = vec![[0.0; 3]; nc];
    for (j, s) in &parts {
        total += j;
        for c in 0..nc {
            for k in 0..3 {
                sens[c][k] += s[c][k];
            }
        }
    }

    let mut grad = [0.0; 9];
    for (c, m) in moments.cells.iter().enumerate() {
        for k in 0..5 {
            grad[4 + k] += sens[c][0] * m.d_weight[k] + sens[c][1] * m.d_mean_q1[k] + sens[c][2] * m.d_mean_q2[k];
        }
    }
    // Support bounds move the integration domain: central differences of the
    // cell moments at the same rule order.
    let v = params.to_vector()?;
    for i in 0..4 {
        let h = 1e-5 * v[i].abs().max(1.0);
        let shifted = |sgn: f64| -> Result<GridMoments> {
            let mut w = v;
            w[i] += sgn * h;
            let p = PopulationParams::from_vector(&w)?;
            let (q1, q2) = support_meshes(&p, grid.m1, grid.m2)?;
            grid_moments(&p, &q1, &q2, moments.quad_order, false)
        };
        let (mp, mm) = match (shifted(1.0), shifted(-1.0)) {
            (Ok(a), Ok(b)) => (a, b),
            // At a = 0 only one side is admissible.
            _ if i < 2 => {
                let p = shifted(1.0)?;
                let mut g = 0.0;
                for c in 0..nc {
                    let (x, y) = (&p.cells[c], &moments.cells[c]);
                    g += sens[c][0] * (x.weight - y.weight) + sens[c][1] * (x.mean_q1 - y.mean_q1) + sens[c][2] * (x.mean_q2 - y.mean_q2);
                }
                grad[i] = g / h;
                continue;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let mut g = 0.0;
        for c in 0..nc {
            let (x, y) = (&mp.cells[c], &mm.cells[c]);
            g += sens[c][0] * (x.weight - y.weight) + sens[c][1] * (x.mean_q1 - y.mean_q1) + sens[c][2] * (x.mean_q2 - y.mean_q2);
        }
        grad[i] = g / (2.0 * h);
    }
    Ok((total, grad))
}

/// Gradient over the active parameters.
pub fn gradient(params: &PopulationParams, episodes: &[TrainingEpisode], grid: &DiscretizationGrid, layout: ParamLayout) -> Result<Vec<f64>> {
    let (_, g) = cost_and_gradient(params, episodes, grid)?;
    Ok(layout.active().into_iter().map(|i| g[i]).collect())
}

/// Cost of one episode and `∂J/∂(w_c, κ_c, β_c)` for every cell.
fn episode_sensitivities(ops: &DiscreteTimeOps, ep: &TrainingEpisode) -> (f64, Vec<[f64; 3]>) {
    let big_j = ep.horizon();
    let y = episode_outputs(ops, ep);
    let mut r = vec![0.0; big_j + 1];
    let mut cost = 0.0;
    for &(j, v) in &ep.obs {
        let d = y[j - 1] - v;
        cost += d * d;
        r[j] = 2.0 * d;
    }
    let d = ops.dim;
    let sens = ops
        .blocks
        .iter()
        .map(|b| {
            let psi = b.psi.as_ref().expect("sensitivities requested");
            let dg0 = b.dg0.as_ref().expect("sensitivities requested");
            let gb = b.bhat();
            let mut xs = Vec::with_capacity(big_j + 1);
            xs.push(DVector::zeros(d));
            for j in 0..big_j {
                let next = &b.ahat * &xs[j] + &gb * ep.u[j];
                xs.push(next);
            }
            let s_w: f64 = (1..=big_j).map(|j| r[j] * xs[j][0]).sum();
            let at = b.ahat.transpose();
            let mut lam = DVector::zeros(d);
            let (mut s_k, mut s_b) = (0.0, 0.0);
            for j in (1..=big_j).rev() {
                lam = &at * &lam;
                lam[0] += b.weight * r[j];
                let uj = ep.u[j - 1];
                s_k += lam.dot(&(psi * &xs[j - 1])) + b.beta * uj * lam.dot(dg0);
                s_b += uj * lam.dot(&b.g0);
            }
            [s_w, s_k, s_b]
        })
        .collect();
    (cost, sens)
}

/// Deterministic least-squares estimate for a single episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicFit {
    pub q: [f64; 2],
    pub cost: f64,
    /// The estimate sits on the boundary of the search box.
    pub at_boundary: bool,
}

pub const DEFAULT_Q_MAX: f64 = 10.0;
const Q_MIN: f64 = 1e-6;

fn deterministic_cost(q: &[f64], ep: &TrainingEpisode, n: usize, tau: f64) -> f64 {
    let ops = match DiscreteSystem::deterministic([q[0], q[1]], n, tau).and_then(|s| s.discrete_time()) {
        Ok(o) => o,
        Err(_) => return f64::INFINITY,
    };
    ep.residuals(&ops.simulate(&ep.u)).iter().map(|r| r * r).sum()
}

/// Fits `q = (q1, q2)` for one episode with the single-parameter model,
/// starting Nelder–Mead from each point of `{0.25, 0.5, 1}²`.
pub fn fit_episode_deterministic(ep: &TrainingEpisode, grid: &DiscretizationGrid, q_max: f64) -> Result<DeterministicFit> {
    let f = |q: &[f64]| deterministic_cost(q, ep, grid.n, grid.tau);
    let opts = NelderMeadOptions { max_iter: 3000, ftol: 1e-15, xtol: 1e-10, lower: Some(vec![Q_MIN; 2]), upper: Some(vec![q_max; 2]) };
    let starts: Vec<[f64; 2]> = [0.25, 0.5, 1.0].iter().flat_map(|&a| [0.25, 0.5, 1.0].map(|b| [a, b])).collect();
    let runs: Vec<(f64, f64, Vec<f64>)> = starts
        .par_iter()
        .map(|s| {
            let f0 = f(s);
            let simplex = vec![s.to_vec(), vec![s[0] * 1.1, s[1]], vec![s[0], s[1] * 1.1]];
            let r = nelder_mead(f, simplex, &opts);
            (f0, r.f, r.x)
        })
        .collect();
    let best = runs.iter().filter(|(f0, f1, _)| f1 < f0 || *f0 == 0.0).min_by(|a, b| a.1.total_cmp(&b.1)).ok_or_else(|| {
        Error::Fit(format!("episode '{}': no start reduced the cost (start costs {:?})", ep.id, runs.iter().map(|r| r.0).collect::<Vec<_>>()))
    })?;
    let q = [best.2[0], best.2[1]];
    let edge = |v: f64| v <= Q_MIN * 10.0 || v >= q_max * (1.0 - 1e-9);
    let at_boundary = edge(q[0]) || edge(q[1]);
    if at_boundary {
        log::warn!("episode '{}': deterministic estimate {:?} lies on the search boundary", ep.id, q);
    }
    Ok(DeterministicFit { q, cost: best.1, at_boundary })
}

/// Starting distribution from per-episode estimates: sample mean, sample
/// covariance (ridged when nearly singular) and support `[0, μ + 4σ]`.
pub fn initial_guess(qs: &[[f64; 2]]) -> Result<PopulationParams> {
    if qs.len() < 2 {
        return Err(Error::Fit("an initial guess needs at least 2 episode estimates; supply an explicit initial distribution".into()));
    }
    let n = qs.len() as f64;
    let mu = [qs.iter().map(|q| q[0]).sum::<f64>() / n, qs.iter().map(|q| q[1]).sum::<f64>() / n];
    let mut s = [[0.0; 2]; 2];
    for q in qs {
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += (q[i] - mu[i]) * (q[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    let tr = s[0][0] + s[1][1];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let min_eig = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
    if min_eig <= 1e-8 * tr.max(1.0) {
        s[0][0] += 1e-4;
        s[1][1] += 1e-4;
    }
    let mut b = [0.0; 2];
    for i in 0..2 {
        let qmax = qs.iter().map(|q| q[i]).fold(f64::NEG_INFINITY, f64::max);
        b[i] = (mu[i] + 4.0 * s[i][i].sqrt()).max(qmax).max(MIN_SUPPORT_WIDTH);
    }
    PopulationParams::new([0.0, 0.0], b, mu, s)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub layout: ParamLayout,
    pub max_iter: usize,
    pub pgtol: f64,
    pub q_max: f64,
    /// Extra starts used when no initial distribution is given: each adds
    /// `(cv·μ_i)²` to the variances of the data-driven guess. The fit with
    /// the lowest cost wins.
    pub spread_starts: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { layout: ParamLayout::default(), max_iter: 500, pgtol: 1e-6, q_max: DEFAULT_Q_MAX, spread_starts: vec![0.1, 0.25] }
    }
}

/// `base` with `(cv·μ_i)²` added to each variance and the upper support
/// widened to `μ + 4σ` if needed.
pub fn inflate_spread(base: &PopulationParams, cv: f64) -> Result<PopulationParams> {
    let mut s = base.sigma;
    let mut b = base.b;
    for i in 0..2 {
        s[i][i] += (cv * base.mu[i]).powi(2);
        b[i] = b[i].max(base.mu[i] + 4.0 * s[i][i].sqrt());
    }
    PopulationParams::new(base.a, b, base.mu, s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitLogEntry {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub rho_star: PopulationParams,
    pub initial: PopulationParams,
    pub initial_cost: f64,
    pub cost: f64,
    /// Norm of the projected gradient over the active parameters.
    /// Convergence is judged on the cost divided by `Σ ỹ²`.
    pub gradient_norm: f64,
    pub per_episode_residuals: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
    pub log: Vec<FitLogEntry>,
}

impl FitResult {
    /// One JSON object per accepted iterate.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| format!("{{\"iteration\":{},\"cost\":{:e},\"gradient_norm\":{:e}}}\n", e.iteration, e.cost, e.gradient_norm))
            .collect()
    }
}

/// Prepares training episodes on the `τ` grid.
pub fn training_set(episodes: &[Episode], tau: f64) -> Result<Vec<TrainingEpisode>> {
    episodes.iter().map(|e| TrainingEpisode::from_episode(e, tau)).collect()
}

/// Minimises the population cost with projected L-BFGS. Without `init` the
/// starts come from per-episode deterministic fits (see
/// [`FitOptions::spread_starts`]).
pub fn fit_population(
    episodes: &[TrainingEpisode],
    grid: &DiscretizationGrid,
    init: Option<PopulationParams>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if episodes.is_empty() {
        return Err(Error::Fit("no training episodes".into()));
    }
    grid.validate()?;
    if let Some(p) = init {
        return fit_from(episodes, grid, p, opts);
    }
    let qs = episodes.iter().map(|e| fit_episode_deterministic(e, grid, opts.q_max).map(|f| f.q)).collect::<Result<Vec<_>>>()?;
    let base = initial_guess(&qs)?;
    let mut starts = vec![base];
    for &cv in &opts.spread_starts {
        starts.push(inflate_spread(&base, cv)?);
    }
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for (k, start) in starts.into_iter().enumerate() {
        match fit_from(episodes, grid, start, opts) {
            Ok(r) => {
                log::info!("start {k}: cost {:.6e} after {} iterations", r.cost, r.iterations);
                if best.as_ref().is_none_or(|b| r.cost < b.cost) {
                    best = Some(r);
                }
            }
            Err(e) => {
                log::warn!("start {k} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Internal("no start was tried".into())))
}

fn fit_from(episodes: &[TrainingEpisode], grid: &DiscretizationGrid, init: PopulationParams, opts: &FitOptions) -> Result<FitResult> {
    let layout = opts.layout;
    let active = layout.active();
    let x0 = layout.to_active(&init)?;
    let (lo, hi) = layout.bounds();
    let mut lopts = LbfgsOptions::new(lo, hi);
    lopts.max_iter = opts.max_iter;
    lopts.pgtol = opts.pgtol;
    // The optimiser sees the cost divided by the data energy so that its
    // tolerances do not depend on the concentration units.
    let energy: f64 = episodes.iter().flat_map(|e| e.obs.iter().map(|o| o.1 * o.1)).sum();
    let scale = if energy > 0.0 { 1.0 / energy } else { 1.0 };
    let mut last_err = None;
    let fg = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let p = layout.from_active(&init, x).ok()?;
        match cost_and_gradient(&p, episodes, grid) {
            Ok((f, g)) => Some((f * scale, active.iter().map(|&i| g[i] * scale).collect())),
            Err(e) => {
                log::debug!("cost undefined at {x:?}: {e}");
                last_err = Some(e);
                None
            }
        }
    };
    let mut log_entries = Vec::new();
    let res = projected_lbfgs(fg, &x0, &lopts, |it| {
        log::info!("iter {:4}  cost {:.6e}  |pg| {:.3e}", it.iteration, it.cost / scale, it.projected_gradient_norm / scale);
        log_entries.push(FitLogEntry { iteration: it.iteration, cost: it.cost / scale, gradient_norm: it.projected_gradient_norm / scale });
    })
    .ok_or_else(|| match last_err.take() {
        Some(e) => Error::Fit(format!("cost undefined at the initial distribution: {e}")),
        None => Error::Fit("cost undefined at the initial distribution".into()),
    })?;
    let rho_star = layout.from_active(&init, &res.x)?;
    let ops = DiscreteSystem::assemble(&rho_star, grid)?.discrete_time()?;
    let per_episode_residuals = episodes.iter().map(|e| e.residuals(&episode_outputs(&ops, e))).collect();
    Ok(FitResult {
        rho_star,
        initial: init,
        initial_cost: log_entries.first().map(|e| e.cost).unwrap_or(res.f),
        cost: res.f / scale,
        gradient_norm: res.projected_gradient_norm / scale,
        per_episode_residuals,
        iterations: res.iterations,
        converged: res.converged,
        message: res.message,
        log: log_entries,
    })
}
