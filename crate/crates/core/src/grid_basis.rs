//! Meshes, 1-D bases and the Gram matrices built from them.
//!
//! Three families of basis functions are used throughout the crate:
//!
//! * linear hat functions on the uniform spatial mesh `{j/n}` of `[0, 1]`,
//! * piecewise constants (cell indicators) on uniform meshes of the
//!   parameter support `[lo, hi]`,
//! * linear hat functions on a uniform temporal mesh of `[0, T]`.
//!
//! Tensor-product coefficient vectors are flattened with the first index
//! fastest: a state index `(j, j1, j2)` maps to `j + (n+1) * (j1 + m1 * j2)`
//! and an input index `(i, j1, j2)` maps to `i + m * (j1 + m1 * j2)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Uniform mesh `{j/n}` on `[0, 1]` carrying the linear hat basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialMesh {
    n: usize,
}

impl SpatialMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("spatial mesh needs at least one interval".into()));
        }
        Ok(Self { n })
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    /// Number of basis functions, `n + 1`.
    pub fn dim(&self) -> usize {
        self.n + 1
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|j| j as f64 / self.n as f64).collect()
    }

    /// Hat function centred on node `j`, evaluated at `eta`.
    pub fn eval_linear_spline(&self, j: usize, eta: f64) -> Result<f64> {
        if j > self.n {
            return Err(Error::Domain(format!("basis index {j} outside 0..={}", self.n)));
        }
        Ok(hat(j as f64 * self.h(), self.h(), eta))
    }

    /// Exact Gram matrices of the hat basis.
    pub fn assemble_1d_gram(&self) -> Gram1d {
        let dim = self.dim();
        let (mass, stiffness) = hat_grams(dim, self.h());
        let mut boundary0 = DMatrix::zeros(dim, dim);
        boundary0[(0, 0)] = 1.0;
        let mut trace0 = DVector::zeros(dim);
        trace0[0] = 1.0;
        let mut trace1 = DVector::zeros(dim);
        trace1[dim - 1] = 1.0;
        Gram1d { mass, stiffness, boundary0, trace0, trace1 }
    }
}

/// Gram matrices of the spatial hat basis.
///
/// `mass = ∫ φ_i φ_j`, `stiffness = ∫ φ_i' φ_j'`, `boundary0 = e_0 e_0ᵀ`
/// (the point term at `η = 0`), and the trace vectors hold the basis values
/// at `η = 0` and `η = 1`.
#[derive(Debug, Clone)]
pub struct Gram1d {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub boundary0: DMatrix<f64>,
    pub trace0: DVector<f64>,
    pub trace1: DVector<f64>,
}

/// Uniform cell mesh on `[lo, hi]` carrying the piecewise-constant basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamMesh {
    m: usize,
    lo: f64,
    hi: f64,
}

impl ParamMesh {
    pub fn new(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("parameter mesh needs at least one cell".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
            return Err(Error::Domain(format!("parameter mesh bounds must satisfy 0 <= lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { m, lo, hi })
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.m as f64
    }

    pub fn edge(&self, j: usize) -> f64 {
        if j == self.m {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * j as f64 / self.m as f64
        }
    }

    pub fn cell_edges(&self) -> Vec<f64> {
        (0..=self.m).map(|j| self.edge(j)).collect()
    }

    /// Index of the cell containing `x`; the upper bound belongs to the last cell.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let j = ((x - self.lo) / self.width()).floor() as usize;
        Some(j.min(self.m - 1))
    }
}

/// Uniform temporal mesh of `[0, T]` with `m` hat functions (`m - 1` intervals)
/// sampled at the instants `k τ`, `k = 0..K`, where `T = K τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMesh {
    m: usize,
    samples: usize,
    tau: f64,
}

impl TimeMesh {
    pub fn new(m: usize, samples: usize, tau: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain(format!("temporal basis needs m >= 2, got {m}")));
        }
        if samples == 0 || !(tau > 0.0) {
            return Err(Error::Domain("temporal mesh needs K >= 1 samples and tau > 0".into()));
        }
        Ok(Self { m, samples, tau })
    }

    /// `m = 6 T_h` basis functions for a record of `samples` steps of `tau_minutes`.
    pub fn default_basis_count(samples: usize, tau_minutes: f64) -> usize {
        let hours = samples as f64 * tau_minutes / 60.0;
        ((6.0 * hours).round() as usize).max(2)
    }

    pub fn basis_count(&self) -> usize {
        self.m
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn horizon(&self) -> f64 {
        self.samples as f64 * self.tau
    }

    pub fn h(&self) -> f64 {
        self.horizon() / (self.m - 1) as f64
    }

    pub fn eval(&self, i: usize, t: f64) -> f64 {
        hat(i as f64 * self.h(), self.h(), t)
    }

    pub fn basis_matrices(&self) -> TemporalMatrices {
        let (g0, g1) = hat_grams(self.m, self.h());
        let mut sample = DMatrix::zeros(self.samples, self.m);
        for k in 0..self.samples {
            let t = k as f64 * self.tau;
            for (i, v) in self.support_at(t) {
                sample[(k, i)] = v;
            }
        }
        TemporalMatrices { g0, g1, sample }
    }

    /// Nonzero basis values at time `t` (at most two).
    pub fn support_at(&self, t: f64) -> Vec<(usize, f64)> {
        let h = self.h();
        let x = t / h;
        if !(x >= 0.0) || x > (self.m - 1) as f64 + 1e-12 {
            return Vec::new();
        }
        let left = (x.floor() as usize).min(self.m - 2);
        let frac = (x - left as f64).clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(2);
        if 1.0 - frac > 0.0 {
            out.push((left, 1.0 - frac));
        }
        if frac > 0.0 {
            out.push((left + 1, frac));
        }
        out
    }
}

/// `G0 = ∫ φ_i φ_j dt`, `G1 = ∫ φ_i' φ_j' dt`, and `sample[k, i] = φ_i(k τ)`.
#[derive(Debug, Clone)]
pub struct TemporalMatrices {
    pub g0: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub sample: DMatrix<f64>,
}

/// Shape of a three-way tensor flattened with the first index fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorIndex {
    pub dims: [usize; 3],
}

impl TensorIndex {
    pub fn new(d0: usize, d1: usize, d2: usize) -> Self {
        Self { dims: [d0, d1, d2] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, i0: usize, i1: usize, i2: usize) -> usize {
        debug_assert!(i0 < self.dims[0] && i1 < self.dims[1] && i2 < self.dims[2]);
        i0 + self.dims[0] * (i1 + self.dims[1] * i2)
    }

    pub fn unflatten(&self, flat: usize) -> (usize, usize, usize) {
        debug_assert!(flat < self.len());
        let i0 = flat % self.dims[0];
        let rest = flat / self.dims[0];
        (i0, rest % self.dims[1], rest / self.dims[1])
    }
}

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn hat(center: f64, h: f64, x: f64) -> f64 {
    let r = (x - center).abs() / h;
    if r < 1.0 {
        1.0 - r
    } else {
        0.0
    }
}

/// Mass and stiffness Gram matrices of `dim` hat functions with spacing `h`.
fn hat_grams(dim: usize, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut mass = DMatrix::zeros(dim, dim);
    let mut stiff = DMatrix::zeros(dim, dim);
    for e in 0..dim - 1 {
        let (i, j) = (e, e + 1);
        mass[(i, i)] += h / 3.0;
        mass[(j, j)] += h / 3.0;
        mass[(i, j)] += h / 6.0;
        mass[(j, i)] += h / 6.0;
        stiff[(i, i)] += 1.0 / h;
        stiff[(j, j)] += 1.0 / h;
        stiff[(i, j)] -= 1.0 / h;
        stiff[(j, i)] -= 1.0 / h;
    }
    (mass, stiff)
}
