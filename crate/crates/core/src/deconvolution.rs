//! Regularised nonnegative deconvolution of BrAC from TAC.
//!
//! The input is expanded in temporal hat functions, either shared by the
//! whole population (`Scalar`) or separately per parameter cell (`Tq`).
//! Coefficients are flattened with the temporal index fastest:
//! `(i, c) ↦ i + m·c`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::data_io::resample;
use crate::density::{support_meshes, PopulationParams};
use crate::error::{Error, Result};
use crate::forward_model::{DiscreteSystem, DiscreteTimeOps, DiscretizationGrid, Kernels, MINUTES_PER_HOUR};
use crate::grid_basis::{ParamMesh, TimeMesh};
use crate::nnls::nnls_gram;
use crate::optim::{nelder_mead, simplex_degenerate, NelderMeadOptions};
use crate::population_fit::Episode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Input depends on time only.
    Scalar,
    /// Input depends on time and on the parameter cell.
    Tq,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Variant::Scalar),
            "tq" => Ok(Variant::Tq),
            _ => Err(Error::Config(format!("variant must be 'tq' or 'scalar', got '{s}'"))),
        }
    }
}

/// TAC targets `ŷ_1..ŷ_K` from the spline-resampled record.
pub fn tac_targets(ep: &Episode, tau: f64) -> Result<Vec<f64>> {
    ep.validate_tac()?;
    let r = resample(&ep.tac, tau)?;
    if r.len() < 2 {
        return Err(Error::Validation(format!("episode '{}': TAC record shorter than one step", ep.id)));
    }
    Ok(r[1..].to_vec())
}

/// BrAC on the input grid `0, τ, …, (K−1)τ`, zero beyond the record.
pub fn brac_targets(ep: &Episode, tau: f64, k: usize) -> Result<Vec<f64>> {
    let mut r = resample(&ep.brac, tau)?;
    r.resize(k, 0.0);
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct DeconvolutionProblem {
    pub variant: Variant,
    pub grid: DiscretizationGrid,
    pub time_mesh: TimeMesh,
    /// `K × (m·cells)` or `K × m`.
    pub hmat: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub r1: f64,
    pub r2: f64,
    pub yhat: DVector<f64>,
    /// Cell probabilities (a single 1 for the scalar variant).
    pub weights: Vec<f64>,
    hth: DMatrix<f64>,
    hty: DVector<f64>,
    g0: DMatrix<f64>,
    g1: DMatrix<f64>,
}

/// `H[k−1, i + m c] = w_c Σ_{j<k} h_{k−j, c} φ_i(jτ)`.
fn kernel_matrix(ker: &Kernels, tm: &TimeMesh, variant: Variant) -> DMatrix<f64> {
    let k_len = tm.samples();
    let m = tm.basis_count();
    let cells = match variant {
        Variant::Scalar => 1,
        Variant::Tq => ker.weights.len(),
    };
    let mut h = DMatrix::zeros(k_len, m * cells);
    for j in 0..k_len {
        for (i, s) in tm.support_at(j as f64 * tm.tau()) {
            for c in 0..cells {
                let col = i + m * c;
                for k in j + 1..=k_len {
                    let hk = match variant {
                        Variant::Scalar => ker.mean[k - j - 1],
                        Variant::Tq => ker.weights[c] * ker.per_cell[k - j - 1][c],
                    };
                    h[(k - 1, col)] += hk * s;
                }
            }
        }
    }
    h
}

fn block_diag_weighted(g: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let m = g.nrows();
    let mut out = DMatrix::zeros(m * weights.len(), m * weights.len());
    for (c, &w) in weights.iter().enumerate() {
        out.view_mut((m * c, m * c), (m, m)).copy_from(&(g * w));
    }
    out
}

/// Symmetric positive semidefinite square root; negative eigenvalues from
/// roundoff are clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Builds the least-squares problem for TAC targets `ŷ_1..ŷ_K`.
pub fn build_problem(
    ops: &DiscreteTimeOps,
    grid: &DiscretizationGrid,
    tac: &[f64],
    r1: f64,
    r2: f64,
    variant: Variant,
) -> Result<DeconvolutionProblem> {
    if !(r1 >= 0.0 && r2 >= 0.0) {
        return Err(Error::Domain(format!("regularisation weights must be >= 0, got ({r1}, {r2})")));
    }
    if tac.is_empty() {
        return Err(Error::Input("empty TAC series".into()));
    }
    if tac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("TAC series has non-finite values".into()));
    }
    let k_len = tac.len();
    let tm = grid.time_mesh(k_len)?;
    let ker = ops.impulse_kernels(k_len);
    if ker.mean.iter().all(|&v| v == 0.0) {
        return Err(Error::Model("all impulse-response kernels vanish".into()));
    }
    let hmat = kernel_matrix(&ker, &tm, variant);
    let weights = match variant {
        Variant::Scalar => vec![1.0],
        Variant::Tq => ker.weights.clone(),
    };
    // Penalties are integrated in hours, the model's time unit.
    let tmats = tm.basis_matrices();
    let g0 = tmats.g0 / MINUTES_PER_HOUR;
    let g1 = tmats.g1 * MINUTES_PER_HOUR;
    let q1 = block_diag_weighted(&g0, &weights);
    let q2 = block_diag_weighted(&g1, &weights);
    let yhat = DVector::from_column_slice(tac);
    let hth = hmat.transpose() * &hmat;
    let hty = hmat.transpose() * &yhat;
    Ok(DeconvolutionProblem { variant, grid: *grid, time_mesh: tm, hmat, q1, q2, r1, r2, yhat, weights, hth, hty, g0, g1 })
}

impl DeconvolutionProblem {
    pub fn basis_count(&self) -> usize {
        self.time_mesh.basis_count()
    }

    pub fn cells(&self) -> usize {
        self.weights.len()
    }

    /// Same data and kernels with other regularisation weights.
    pub fn with_weights(&self, r1: f64, r2: f64) -> Result<Self> {
        if !(r1 >= 0.0 && r2 >= 0.0) {
            return Err(Error::Domain(format!("regularisation weights must be >= 0, got ({r1}, {r2})")));
        }
        Ok(Self { r1, r2, ..self.clone() })
    }

    pub fn regularizer(&self) -> DMatrix<f64> {
        &self.q1 * self.r1 + &self.q2 * self.r2
    }

    /// `[H; (r1 Q1 + r2 Q2)^{1/2}]` and `[ŷ; 0]`. The root is formed per cell
    /// as `√w_c (r1 G0 + r2 G1)^{1/2}`.
    pub fn stacked_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let root_t = psd_sqrt(&(&self.g0 * self.r1 + &self.g1 * self.r2));
        let sw: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        let root = block_diag_weighted(&root_t, &sw);
        let (k, n) = self.hmat.shape();
        let mut a = DMatrix::zeros(k + n, n);
        a.view_mut((0, 0), (k, n)).copy_from(&self.hmat);
        a.view_mut((k, 0), (n, n)).copy_from(&root);
        let mut b = DVector::zeros(k + n);
        b.rows_mut(0, k).copy_from(&self.yhat);
        (a, b)
    }

    /// `‖HU − ŷ‖² + Uᵀ(r1 Q1 + r2 Q2)U`.
    pub fn objective(&self, coeffs: &DVector<f64>) -> f64 {
        (&self.hmat * coeffs - &self.yhat).norm_squared() + coeffs.dot(&(self.regularizer() * coeffs))
    }

    /// Input values `u_j` at `jτ` for coefficient column `c`.
    fn curve(&self, coeffs: &DVector<f64>, c: usize) -> Vec<f64> {
        let m = self.basis_count();
        (0..self.time_mesh.samples())
            .map(|j| self.time_mesh.support_at(j as f64 * self.time_mesh.tau()).iter().map(|&(i, s)| s * coeffs[i + m * c]).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DeconvolutionResult {
    pub variant: Variant,
    pub grid: DiscretizationGrid,
    pub time_mesh: TimeMesh,
    /// `m × cells` (one column for the scalar variant).
    pub coeffs: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// `E[u(jτ)]` for `j = 0..K−1`.
    pub mean_curve: Vec<f64>,
    /// Model TAC `y_1..y_K` for the estimated input.
    pub fitted_tac: Vec<f64>,
    /// `‖HU − ŷ‖`.
    pub residual: f64,
    pub objective: f64,
    pub nnls_converged: bool,
}

impl DeconvolutionResult {
    pub fn tau(&self) -> f64 {
        self.time_mesh.tau()
    }

    /// Input curve for parameter cell `c` at the grid instants.
    pub fn cell_curve(&self, c: usize) -> Vec<f64> {
        let col = if self.variant == Variant::Scalar { 0 } else { c };
        (0..self.time_mesh.samples())
            .map(|j| self.time_mesh.support_at(j as f64 * self.tau()).iter().map(|&(i, s)| s * self.coeffs[(i, col)]).sum())
            .collect()
    }
}

pub fn deconvolve(problem: &DeconvolutionProblem) -> Result<DeconvolutionResult> {
    let g = &problem.hth + problem.regularizer();
    let sol = nnls_gram(&g, &problem.hty)?;
    if !sol.converged {
        log::warn!("deconvolution: nonnegative solver hit its iteration cap");
    }
    let x = sol.x;
    let m = problem.basis_count();
    let cells = problem.cells();
    let coeffs = DMatrix::from_column_slice(m, cells, x.as_slice());
    let mut mean_curve = vec![0.0; problem.time_mesh.samples()];
    for c in 0..cells {
        let curve = problem.curve(&x, c);
        mean_curve.iter_mut().zip(&curve).for_each(|(a, b)| *a += problem.weights[c] * b);
    }
    let fitted = &problem.hmat * &x;
    let residual = (&fitted - &problem.yhat).norm();
    Ok(DeconvolutionResult {
        variant: problem.variant,
        grid: problem.grid,
        time_mesh: problem.time_mesh,
        coeffs,
        weights: problem.weights.clone(),
        mean_curve,
        fitted_tac: fitted.as_slice().to_vec(),
        residual,
        objective: problem.objective(&x),
        nnls_converged: sol.converged,
    })
}

/// Lower end of the `log10 r` search box; weights at this end are zero.
pub const LOG_R_MIN: f64 = -6.0;
pub const LOG_R_MAX: f64 = 2.0;

pub fn weight_from_log(v: f64) -> f64 {
    if v <= LOG_R_MIN {
        0.0
    } else {
        10f64.powf(v.min(LOG_R_MAX))
    }
}

#[derive(Debug, Clone)]
pub struct RegularizationChoice {
    pub r1: f64,
    pub r2: f64,
    pub objective: f64,
    /// `(log10 r1, log10 r2, objective)` at the probe points.
    pub probes: Vec<(f64, f64, f64)>,
    /// `false` when the simplex search did not meet its tolerances.
    pub converged: bool,
}

struct TrainingCase {
    base: DeconvolutionProblem,
    brac: Vec<f64>,
}

/// Picks `(r1, r2)` minimising, over training episodes, the squared error
/// of the mean deconvolved BrAC plus the squared TAC misfit.
pub fn select_regularization(
    training: &[Episode],
    rho: &PopulationParams,
    grid: &DiscretizationGrid,
    variant: Variant,
) -> Result<RegularizationChoice> {
    if training.is_empty() {
        return Err(Error::Config("regularisation search needs at least one training episode".into()));
    }
    let ops = DiscreteSystem::assemble(rho, grid)?.discrete_time()?;
    let cases = training
        .iter()
        .map(|ep| {
            ep.validate_training()?;
            let tac = tac_targets(ep, grid.tau)?;
            let base = build_problem(&ops, grid, &tac, 0.0, 0.0, variant)?;
            let brac = brac_targets(ep, grid.tau, tac.len())?;
            Ok(TrainingCase { base, brac })
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = |x: &[f64]| -> f64 {
        let (r1, r2) = (weight_from_log(x[0]), weight_from_log(x[1]));
        let parts: Vec<f64> = cases
            .par_iter()
            .map(|case| {
                let p = match case.base.with_weights(r1, r2) {
                    Ok(p) => p,
                    Err(_) => return f64::INFINITY,
                };
                match deconvolve(&p) {
                    Ok(r) => {
                        let eu: f64 = r.mean_curve.iter().zip(&case.brac).map(|(a, b)| (a - b).powi(2)).sum();
                        let ey: f64 = r.fitted_tac.iter().zip(p.yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                        eu + ey
                    }
                    Err(_) => f64::INFINITY,
                }
            })
            .collect();
        parts.iter().sum()
    };
    let probe_pts = [[-4.0, -4.0], [-1.0, -4.0], [-4.0, -1.0], [-1.0, -1.0]];
    let probe_vals: Vec<f64> = probe_pts.par_iter().map(|p| objective(p)).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| probe_vals[a].total_cmp(&probe_vals[b]));
    let mut simplex: Vec<Vec<f64>> = order[..3].iter().map(|&i| probe_pts[i].to_vec()).collect();
    let opts = NelderMeadOptions { max_iter: 80, ftol: 1e-6, xtol: 1e-2, lower: Some(vec![LOG_R_MIN; 2]), upper: Some(vec![LOG_R_MAX; 2]) };
    let mut res = nelder_mead(objective, simplex.clone(), &opts);
    if !res.converged && simplex_degenerate(&simplex) {
        log::warn!("regularisation search: degenerate simplex, restarting with jitter");
        simplex[1][0] += 0.37;
        simplex[2][1] -= 0.41;
        res = nelder_mead(objective, simplex, &opts);
    }
    let probes: Vec<(f64, f64, f64)> = probe_pts.iter().zip(&probe_vals).map(|(p, &v)| (p[0], p[1], v)).collect();
    let (mut bx, mut bf) = (res.x.clone(), res.f);
    for (p, &v) in probe_pts.iter().zip(&probe_vals) {
        if v < bf {
            bx = p.to_vec();
            bf = v;
        }
    }
    if !bf.is_finite() {
        return Err(Error::Numerical("regularisation objective is not finite anywhere on the search path".into()));
    }
    Ok(RegularizationChoice { r1: weight_from_log(bx[0]), r2: weight_from_log(bx[1]), objective: bf, probes, converged: res.converged })
}

/// Parameter meshes over the support of `rho` for `grid`.
pub fn param_meshes(rho: &PopulationParams, grid: &DiscretizationGrid) -> Result<(ParamMesh, ParamMesh)> {
    support_meshes(rho, grid.m1, grid.m2)
}
