//! Galerkin population model and its discrete-time operators.
//!
//! The state is expanded in hat functions in `η` times indicator functions of
//! the parameter cells, so every matrix is block diagonal with one
//! `(n+1)×(n+1)` block per cell. Blocks are kept separate; the dense matrices
//! are only materialised on request.
//!
//! Model time is measured in hours: a sampling interval of `τ` minutes
//! advances the system by `τ / 60`.

use nalgebra::{DMatrix, DVector};

use crate::density::{grid_moments_adaptive, support_meshes, GridMoments, PopulationParams};
use crate::error::{Error, Result};
use crate::expm::{expm, expm_frechet};
use crate::grid_basis::{Gram1d, ParamMesh, SpatialMesh, TensorIndex, TimeMesh};

pub const MINUTES_PER_HOUR: f64 = 60.0;

/// Discretisation levels `(n, m1, m2)`, the temporal basis size `m` and the
/// sampling interval `τ` in minutes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationGrid {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    /// Temporal basis count; `None` means six per hour of record.
    pub m: Option<usize>,
    pub tau: f64,
}

impl Default for DiscretizationGrid {
    fn default() -> Self {
        Self { n: 4, m1: 4, m2: 4, m: None, tau: 1.0 }
    }
}

impl DiscretizationGrid {
    pub fn new(n: usize, m1: usize, m2: usize) -> Self {
        Self { n, m1, m2, ..Self::default() }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_temporal(mut self, m: usize) -> Self {
        self.m = Some(m);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(Error::Config(format!("grid sizes must be positive, got ({}, {}, {})", self.n, self.m1, self.m2)));
        }
        if matches!(self.m, Some(m) if m < 2) {
            return Err(Error::Config("temporal basis count must be >= 2".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("sampling interval must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn state_index(&self) -> TensorIndex {
        TensorIndex::new(self.n + 1, self.m1, self.m2)
    }

    /// Temporal mesh for `samples` input values at spacing `τ`.
    pub fn time_mesh(&self, samples: usize) -> Result<TimeMesh> {
        let m = self.m.unwrap_or_else(|| TimeMesh::default_basis_count(samples, self.tau));
        TimeMesh::new(m, samples, self.tau)
    }

    /// Reads `n`, `m1`, `m2`, `m` and `tau` keys, defaulting to `(4, 4, 4)`.
    pub fn from_config(kv: &crate::data_io::KvConfig) -> Result<Self> {
        let d = Self::default();
        let g = Self {
            n: kv.usize_or("n", d.n)?,
            m1: kv.usize_or("m1", d.m1)?,
            m2: kv.usize_or("m2", d.m2)?,
            m: match kv.get("m") {
                None => None,
                Some(_) => Some(kv.usize_or("m", 0)?),
            },
            tau: kv.f64_or("tau", d.tau)?,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Dynamics of one parameter cell.
#[derive(Debug, Clone)]
pub struct CellBlock {
    /// Cell probability.
    pub weight: f64,
    /// Conditional mean of `q1` on the cell.
    pub kappa: f64,
    /// Conditional mean of `q2` on the cell.
    pub beta: f64,
}

/// Assembled Galerkin system.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub grid: DiscretizationGrid,
    pub pm1: ParamMesh,
    pub pm2: ParamMesh,
    pub gram: Gram1d,
    pub blocks: Vec<CellBlock>,
    /// Spatial mass matrix inverse applied to the trace at `η = 1`.
    mass_inv_trace1: DVector<f64>,
    mass_inv_stiffness: DMatrix<f64>,
    mass_inv_boundary: DMatrix<f64>,
}

impl DiscreteSystem {
    pub fn assemble(params: &PopulationParams, grid: &DiscretizationGrid) -> Result<Self> {
        grid.validate()?;
        let (pm1, pm2) = support_meshes(params, grid.m1, grid.m2)?;
        let moments = grid_moments_adaptive(params, &pm1, &pm2, false)?;
        Self::from_moments(grid, pm1, pm2, &moments)
    }

    pub fn from_moments(grid: &DiscretizationGrid, pm1: ParamMesh, pm2: ParamMesh, moments: &GridMoments) -> Result<Self> {
        if moments.cells.len() != grid.cells() {
            return Err(Error::Config(format!("{} cell moments for a {}x{} parameter grid", moments.cells.len(), grid.m1, grid.m2)));
        }
        let blocks = moments.cells.iter().map(|c| CellBlock { weight: c.weight, kappa: c.mean_q1, beta: c.mean_q2 }).collect();
        Self::from_blocks(grid, pm1, pm2, blocks)
    }

    /// System with explicitly given cell weights and conditional means.
    pub fn from_blocks(grid: &DiscretizationGrid, pm1: ParamMesh, pm2: ParamMesh, blocks: Vec<CellBlock>) -> Result<Self> {
        grid.validate()?;
        if blocks.len() != grid.cells() || pm1.cells() != grid.m1 || pm2.cells() != grid.m2 {
            return Err(Error::Config("cell blocks do not match the parameter grid".into()));
        }
        for (c, b) in blocks.iter().enumerate() {
            if !(b.weight >= 0.0) || !b.kappa.is_finite() || !b.beta.is_finite() || !b.weight.is_finite() {
                return Err(Error::Internal(format!("cell {c}: invalid weight/moment ({}, {}, {})", b.weight, b.kappa, b.beta)));
            }
        }
        let gram = SpatialMesh::new(grid.n)?.assemble_1d_gram();
        let chol = gram.mass.clone().cholesky().ok_or_else(|| Error::Internal("spatial mass matrix is not positive definite".into()))?;
        let mass_inv_trace1 = chol.solve(&gram.trace1);
        let mass_inv_stiffness = chol.solve(&gram.stiffness);
        let mass_inv_boundary = chol.solve(&gram.boundary0);
        Ok(Self { grid: *grid, pm1, pm2, gram, blocks, mass_inv_trace1, mass_inv_stiffness, mass_inv_boundary })
    }

    /// Single-parameter system: one cell of unit weight at `q`.
    pub fn deterministic(q: [f64; 2], n: usize, tau: f64) -> Result<Self> {
        let grid = DiscretizationGrid { n, m1: 1, m2: 1, m: None, tau };
        let pm = |x: f64| ParamMesh::new(1, 0.0, x.max(f64::MIN_POSITIVE) * 2.0);
        Self::from_blocks(&grid, pm(q[0])?, pm(q[1])?, vec![CellBlock { weight: 1.0, kappa: q[0], beta: q[1] }])
    }

    pub fn block_dim(&self) -> usize {
        self.grid.n + 1
    }

    /// Continuous-time generator of cell `c` in hours: `-Mass⁻¹(B0 + κ S)`.
    pub fn generator(&self, c: usize) -> DMatrix<f64> {
        -(&self.mass_inv_boundary + &self.mass_inv_stiffness * self.blocks[c].kappa)
    }

    /// `∂A/∂κ = -Mass⁻¹ S`.
    pub fn generator_kappa_derivative(&self) -> DMatrix<f64> {
        -&self.mass_inv_stiffness
    }

    fn blockdiag(&self, f: impl Fn(usize) -> DMatrix<f64>) -> DMatrix<f64> {
        let d = self.block_dim();
        let nc = self.blocks.len();
        let mut out = DMatrix::zeros(d * nc, d * nc);
        for c in 0..nc {
            out.view_mut((c * d, c * d), (d, d)).copy_from(&f(c));
        }
        out
    }

    /// Dense mass matrix `𝕄`.
    pub fn mmat(&self) -> DMatrix<f64> {
        self.blockdiag(|c| &self.gram.mass * self.blocks[c].weight)
    }

    /// Dense operator matrix `𝕂`.
    pub fn kmat(&self) -> DMatrix<f64> {
        self.blockdiag(|c| {
            let b = &self.blocks[c];
            -(&self.gram.boundary0 + &self.gram.stiffness * b.kappa) * b.weight
        })
    }

    /// Input vector for an input depending on time only.
    pub fn bvec_scalar(&self) -> DVector<f64> {
        self.bmat_tq().column_sum()
    }

    /// Input matrix for an input that is piecewise constant over cells.
    pub fn bmat_tq(&self) -> DMatrix<f64> {
        let d = self.block_dim();
        let mut out = DMatrix::zeros(d * self.blocks.len(), self.blocks.len());
        for (c, b) in self.blocks.iter().enumerate() {
            out.view_mut((c * d, c), (d, 1)).copy_from(&(&self.gram.trace1 * (b.weight * b.beta)));
        }
        out
    }

    /// Output row `ℂ`.
    pub fn cvec(&self) -> DVector<f64> {
        let d = self.block_dim();
        let mut out = DVector::zeros(d * self.blocks.len());
        for (c, b) in self.blocks.iter().enumerate() {
            out.rows_mut(c * d, d).copy_from(&(&self.gram.trace0 * b.weight));
        }
        out
    }

    pub fn discrete_time(&self) -> Result<DiscreteTimeOps> {
        self.discrete_time_impl(false)
    }

    /// Discrete-time operators together with their `κ`-derivatives per cell.
    pub fn discrete_time_with_sensitivities(&self) -> Result<DiscreteTimeOps> {
        self.discrete_time_impl(true)
    }

    fn discrete_time_impl(&self, sens: bool) -> Result<DiscreteTimeOps> {
        let dt = self.grid.tau / MINUTES_PER_HOUR;
        let d = self.block_dim();
        let id = DMatrix::<f64>::identity(d, d);
        let e = self.generator_kappa_derivative();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (c, b) in self.blocks.iter().enumerate() {
            let a = self.generator(c);
            let (ahat, psi) = if sens {
                let (x, l) = expm_frechet(&(&a * dt), &(&e * dt))?;
                (x, Some(l))
            } else {
                (expm(&(&a * dt))?, None)
            };
            let lu = a.clone().lu();
            let solve = |v: &DVector<f64>| -> Result<DVector<f64>> {
                lu.solve(v).ok_or_else(|| {
                    let sv = a.clone().singular_values();
                    let cond = sv.max() / sv.min();
                    Error::Numerical(format!("cell {c}: singular generator (condition number {cond:.3e}, kappa = {})", b.kappa))
                })
            };
            let g0 = solve(&((&ahat - &id) * &self.mass_inv_trace1))?;
            let dg0 = match &psi {
                Some(psi) => Some(solve(&(psi * &self.mass_inv_trace1 - &e * &g0))?),
                None => None,
            };
            blocks.push(BlockOps { weight: b.weight, beta: b.beta, ahat, g0, psi, dg0 });
        }
        Ok(DiscreteTimeOps { dim: d, tau: self.grid.tau, blocks })
    }
}

/// Discrete-time operators of one cell.
#[derive(Debug, Clone)]
pub struct BlockOps {
    pub weight: f64,
    pub beta: f64,
    /// State transition over one sampling interval.
    pub ahat: DMatrix<f64>,
    /// Input vector per unit input and unit `β`: `A⁻¹(Â − I)Mass⁻¹ e_n`.
    pub g0: DVector<f64>,
    /// `∂Â/∂κ` when sensitivities were requested.
    pub psi: Option<DMatrix<f64>>,
    /// `∂g0/∂κ` when sensitivities were requested.
    pub dg0: Option<DVector<f64>>,
}

impl BlockOps {
    /// Input vector `β g0`.
    pub fn bhat(&self) -> DVector<f64> {
        &self.g0 * self.beta
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteTimeOps {
    pub dim: usize,
    pub tau: f64,
    pub blocks: Vec<BlockOps>,
}

/// Impulse-response kernels. `per_cell[l - 1][c]` is the representer value on
/// cell `c` at lag `l`; `mean[l - 1] = Σ_c w_c per_cell[l - 1][c]`.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub per_cell: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Kernels {
    pub fn lags(&self) -> usize {
        self.mean.len()
    }

    /// `y_k = Σ_{j<k} h_{k-j} u_j` for `k = 1..=K`.
    pub fn convolve(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() > self.lags() {
            return Err(Error::Input(format!("{} inputs but only {} kernel lags", u.len(), self.lags())));
        }
        Ok((1..=u.len()).map(|k| (0..k).map(|j| self.mean[k - j - 1] * u[j]).sum()).collect())
    }

    /// Convolution with a cell-dependent input `u[(j, c)]`.
    pub fn convolve_tq(&self, u: &DMatrix<f64>) -> Result<Vec<f64>> {
        let k_len = u.nrows();
        if k_len > self.lags() || u.ncols() != self.weights.len() {
            return Err(Error::Input(format!(
                "input is {}x{}, kernels have {} lags and {} cells",
                u.nrows(),
                u.ncols(),
                self.lags(),
                self.weights.len()
            )));
        }
        Ok((1..=k_len)
            .map(|k| {
                (0..k)
                    .map(|j| {
                        let h = &self.per_cell[k - j - 1];
                        (0..h.len()).map(|c| self.weights[c] * h[c] * u[(j, c)]).sum::<f64>()
                    })
                    .sum()
            })
            .collect())
    }
}

impl DiscreteTimeOps {
    pub fn cells(&self) -> usize {
        self.blocks.len()
    }

    pub fn ahat_dense(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut out = DMatrix::zeros(d * self.cells(), d * self.cells());
        for (c, b) in self.blocks.iter().enumerate() {
            out.view_mut((c * d, c * d), (d, d)).copy_from(&b.ahat);
        }
        out
    }

    pub fn bhat_tq(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut out = DMatrix::zeros(d * self.cells(), self.cells());
        for (c, b) in self.blocks.iter().enumerate() {
            out.view_mut((c * d, c), (d, 1)).copy_from(&b.bhat());
        }
        out
    }

    pub fn bhat_scalar(&self) -> DVector<f64> {
        self.bhat_tq().column_sum()
    }

    pub fn chat(&self) -> DVector<f64> {
        let d = self.dim;
        let mut out = DVector::zeros(d * self.cells());
        for (c, b) in self.blocks.iter().enumerate() {
            out[c * d] = b.weight;
        }
        out
    }

    /// Marches `x_{j+1} = Â x_j + B̂ u_j` from `x_0 = 0` and returns
    /// `y_1, …, y_K` for an input `u_0, …, u_{K-1}` that depends on time only.
    pub fn simulate(&self, u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; u.len()];
        for b in &self.blocks {
            let gb = b.bhat();
            let mut x = DVector::zeros(self.dim);
            for (j, &uj) in u.iter().enumerate() {
                x = &b.ahat * &x + &gb * uj;
                y[j] += b.weight * x[0];
            }
        }
        y
    }

    /// As [`simulate`](Self::simulate) with a cell-dependent input `u[(j, c)]`.
    pub fn simulate_tq(&self, u: &DMatrix<f64>) -> Result<Vec<f64>> {
        if u.ncols() != self.cells() {
            return Err(Error::Input(format!("tq input has {} columns, system has {} cells", u.ncols(), self.cells())));
        }
        let mut y = vec![0.0; u.nrows()];
        for (c, b) in self.blocks.iter().enumerate() {
            let gb = b.bhat();
            let mut x = DVector::zeros(self.dim);
            for j in 0..u.nrows() {
                x = &b.ahat * &x + &gb * u[(j, c)];
                y[j] += b.weight * x[0];
            }
        }
        Ok(y)
    }

    /// Kernels `h_l = Ĉ Â^{l-1} B̂` for `l = 1..=lags`, by repeated
    /// products with `Âᵀ`.
    pub fn impulse_kernels(&self, lags: usize) -> Kernels {
        let nc = self.cells();
        let mut per_cell = vec![vec![0.0; nc]; lags];
        for (c, b) in self.blocks.iter().enumerate() {
            let gb = b.bhat();
            let at = b.ahat.transpose();
            let mut v = DVector::zeros(self.dim);
            v[0] = 1.0;
            for row in per_cell.iter_mut() {
                row[c] = v.dot(&gb);
                v = &at * v;
            }
        }
        let weights: Vec<f64> = self.blocks.iter().map(|b| b.weight).collect();
        let mean = per_cell.iter().map(|h| h.iter().zip(&weights).map(|(a, w)| a * w).sum()).collect();
        Kernels { per_cell, weights, mean }
    }
}

/// Convenience: assemble and discretise in one step.
pub fn discrete_ops(params: &PopulationParams, grid: &DiscretizationGrid) -> Result<DiscreteTimeOps> {
    DiscreteSystem::assemble(params, grid)?.discrete_time()
}
