//! Truncated bivariate normal distribution of the random model parameters.
//!
//! The density is `φ(q; μ, Σ) · 1_box(q) / Z` where `Z` is the untruncated
//! probability of the box `[a1, b1] × [a2, b2]`. All integrals are tensor
//! Gauss–Legendre rules; the rule order starts at 5 and is doubled until two
//! successive orders agree.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid_basis::{GaussLegendre, ParamMesh};

/// Base Gauss–Legendre order per cell.
pub const BASE_QUAD_ORDER: usize = 5;
const MAX_QUAD_ORDER: usize = 80;
/// Two successive rule orders closer than this are accepted.
const QUAD_AGREEMENT: f64 = 1e-10;
const MIN_ACCEPTANCE: f64 = 1e-6;

/// Distribution parameters `ρ = (a, b, μ, Σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationParams {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
}

/// Lower Cholesky factor `[l11, l21, l22]` of a 2×2 covariance.
pub type Chol2 = [f64; 3];

/// Active-parameter layout used by the fitting code:
/// `[a1, a2, b1, b2, mu1, mu2, l11, l21, l22]`.
pub const PARAM_NAMES: [&str; 9] = ["a1", "a2", "b1", "b2", "mu1", "mu2", "l11", "l21", "l22"];

impl PopulationParams {
    pub fn new(a: [f64; 2], b: [f64; 2], mu: [f64; 2], sigma: [[f64; 2]; 2]) -> Result<Self> {
        let p = Self { a, b, mu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a[0], self.a[1], self.b[0], self.b[1], self.mu[0], self.mu[1]];
        if all.iter().chain(self.sigma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite entry".into()));
        }
        for i in 0..2 {
            if self.a[i] < 0.0 {
                return Err(Error::Parameter(format!("a{} = {} must be >= 0", i + 1, self.a[i])));
            }
            if self.a[i] >= self.b[i] {
                return Err(Error::Parameter(format!("support bound a{0} = {1} must be below b{0} = {2}", i + 1, self.a[i], self.b[i])));
            }
        }
        if (self.sigma[0][1] - self.sigma[1][0]).abs() > 1e-12 * (1.0 + self.sigma[0][1].abs()) {
            return Err(Error::Parameter("covariance is not symmetric".into()));
        }
        self.cholesky().map(|_| ())
    }

    pub fn cholesky(&self) -> Result<Chol2> {
        let s = self.sigma;
        if !(s[0][0] > 0.0) {
            return Err(Error::Parameter(format!("covariance is not positive definite (s11 = {})", s[0][0])));
        }
        let l11 = s[0][0].sqrt();
        let l21 = s[1][0] / l11;
        let d = s[1][1] - l21 * l21;
        if !(d > 0.0) {
            return Err(Error::Parameter(format!("covariance is not positive definite (det = {})", s[0][0] * s[1][1] - s[0][1] * s[1][0])));
        }
        Ok([l11, l21, d.sqrt()])
    }

    pub fn from_cholesky(a: [f64; 2], b: [f64; 2], mu: [f64; 2], l: Chol2) -> Result<Self> {
        let [l11, l21, l22] = l;
        let s11 = l11 * l11;
        let s12 = l11 * l21;
        let s22 = l21 * l21 + l22 * l22;
        Self::new(a, b, mu, [[s11, s12], [s12, s22]])
    }

    /// `[a1, a2, b1, b2, mu1, mu2, l11, l21, l22]`.
    pub fn to_vector(&self) -> Result<[f64; 9]> {
        let l = self.cholesky()?;
        Ok([self.a[0], self.a[1], self.b[0], self.b[1], self.mu[0], self.mu[1], l[0], l[1], l[2]])
    }

    pub fn from_vector(v: &[f64; 9]) -> Result<Self> {
        Self::from_cholesky([v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7], v[8]])
    }

    /// Flat `key=value` text with keys `a1,a2,b1,b2,mu1,mu2,s11,s12,s22`.
    pub fn to_kv(&self) -> String {
        let pairs = [
            ("a1", self.a[0]),
            ("a2", self.a[1]),
            ("b1", self.b[0]),
            ("b2", self.b[1]),
            ("mu1", self.mu[0]),
            ("mu2", self.mu[1]),
            ("s11", self.sigma[0][0]),
            ("s12", self.sigma[0][1]),
            ("s22", self.sigma[1][1]),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={}\n", crate::data_io::fmt_f64(*v))).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = crate::data_io::KvConfig::parse(text)?;
        Self::from_config(&kv, "")
    }

    /// Reads the nine keys, each optionally prefixed (e.g. `rho_true.mu1`).
    pub fn from_config(kv: &crate::data_io::KvConfig, prefix: &str) -> Result<Self> {
        let get = |k: &str| kv.require_f64(&format!("{prefix}{k}"));
        let s12 = get("s12")?;
        Self::new([get("a1")?, get("a2")?], [get("b1")?, get("b2")?], [get("mu1")?, get("mu2")?], [[get("s11")?, s12], [s12, get("s22")?]])
    }
}

/// Conditional moments of one parameter cell, normalised over the whole support.
///
/// `weight` is the cell probability, `mean_q1`/`mean_q2` the conditional means
/// `E[q_i | cell]`. When derivatives are requested they are taken with respect
/// to `(mu1, mu2, l11, l21, l22)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMoments {
    pub weight: f64,
    pub mean_q1: f64,
    pub mean_q2: f64,
    pub d_weight: [f64; 5],
    pub d_mean_q1: [f64; 5],
    pub d_mean_q2: [f64; 5],
}

/// Moments for every cell of a parameter grid, cell `(j1, j2)` at `j1 + m1 * j2`.
#[derive(Debug, Clone)]
pub struct GridMoments {
    pub m1: usize,
    pub m2: usize,
    pub cells: Vec<CellMoments>,
    /// Natural log of the untruncated normal probability of the whole grid.
    pub log_box_mass: f64,
    pub quad_order: usize,
}

impl GridMoments {
    pub fn weights(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.weight).collect()
    }
}

/// Truncated bivariate normal with cached factorization and normaliser.
#[derive(Debug, Clone)]
pub struct TruncatedNormal {
    params: PopulationParams,
    chol: Chol2,
    log_norm: f64,
}

impl TruncatedNormal {
    pub fn new(params: PopulationParams) -> Result<Self> {
        params.validate()?;
        let chol = params.cholesky()?;
        let support = support_meshes(&params, 4, 4)?;
        let moments = grid_moments_adaptive(&params, &support.0, &support.1, false)?;
        Ok(Self { params, chol, log_norm: moments.log_box_mass })
    }

    pub fn params(&self) -> &PopulationParams {
        &self.params
    }

    /// Untruncated normal probability of the support box.
    pub fn box_mass(&self) -> f64 {
        self.log_norm.exp()
    }

    pub fn in_support(&self, q: [f64; 2]) -> bool {
        let p = &self.params;
        (0..2).all(|i| q[i] >= p.a[i] && q[i] <= p.b[i])
    }

    pub fn pdf(&self, q: [f64; 2]) -> f64 {
        if !self.in_support(q) {
            return 0.0;
        }
        (log_normal_pdf(&self.params.mu, &self.chol, q) - self.log_norm).exp()
    }

    /// Rejection sampling of the untruncated normal against the support box.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
        if count == 0 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        let acceptance = self.box_mass();
        if acceptance < MIN_ACCEPTANCE {
            return Err(Error::Sampling(format!(
                "support box holds only {acceptance:.3e} of the normal mass (mu = {:?}); rejection sampling would not terminate",
                self.params.mu
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [l11, l21, l22] = self.chol;
        let mu = self.params.mu;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let q = [mu[0] + l11 * z1, mu[1] + l21 * z1 + l22 * z2];
            if self.in_support(q) {
                out.push(q);
            }
        }
        Ok(out)
    }

    /// Probability of the Euclidean disk of radius `r` centred at `μ`.
    pub fn disk_mass(&self, r: f64) -> f64 {
        if !(r > 0.0) {
            return 0.0;
        }
        let p = &self.params;
        let [mu1, mu2] = p.mu;
        let s_lo = ((p.a[0] - mu1) / r).max(-1.0);
        let s_hi = ((p.b[0] - mu1) / r).min(1.0);
        if s_lo >= s_hi {
            return 0.0;
        }
        let (th_lo, th_hi) = (s_lo.asin(), s_hi.asin());
        // Kinks where a chord end meets a horizontal support edge.
        let mut brk = vec![th_lo, th_hi];
        for c in [(p.a[1] - mu2).abs(), (p.b[1] - mu2).abs()] {
            if c < r {
                let t = (c / r).acos();
                for t in [t, -t] {
                    if t > th_lo && t < th_hi {
                        brk.push(t);
                    }
                }
            }
        }
        brk.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let gl = GaussLegendre::new(16);
        let sd2 = self.chol[2].max(1e-300);
        let mut total = 0.0;
        for w in brk.windows(2) {
            let panels = 32;
            let dt = (w[1] - w[0]) / panels as f64;
            for k in 0..panels {
                let t0 = w[0] + k as f64 * dt;
                total += gl.integrate(t0, t0 + dt, |th| {
                    let q1 = mu1 + r * th.sin();
                    let c = r * th.cos();
                    let lo = (mu2 - c).max(p.a[1]);
                    let hi = (mu2 + c).min(p.b[1]);
                    if hi <= lo {
                        return 0.0;
                    }
                    let inner_panels = (((hi - lo) / sd2).ceil() as usize).clamp(1, 64);
                    let dq = (hi - lo) / inner_panels as f64;
                    let mut s = 0.0;
                    for j in 0..inner_panels {
                        let q0 = lo + j as f64 * dq;
                        s += gl.integrate(q0, q0 + dq, |q2| (log_normal_pdf(&p.mu, &self.chol, [q1, q2]) - self.log_norm).exp());
                    }
                    c * s
                });
            }
        }
        total
    }

    /// Radius of the disk centred at `μ` holding probability `alpha`.
    pub fn credible_region_radius(&self, alpha: f64) -> Result<CredibleRadius> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let p = &self.params;
        let r_max = [p.a[0], p.b[0]].iter().flat_map(|&x| [p.a[1], p.b[1]].map(|y| (x - p.mu[0]).hypot(y - p.mu[1]))).fold(0.0, f64::max);
        let full = self.disk_mass(r_max);
        if full < alpha {
            log::warn!("credible mass {alpha} unattainable; disk covering the support holds {full}");
            return Ok(CredibleRadius { radius: r_max, mass: full, attained: false });
        }
        let (mut lo, mut hi) = (0.0, r_max);
        let mut mass = full;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let m = self.disk_mass(mid);
            if m < alpha {
                lo = mid;
            } else {
                hi = mid;
                mass = m;
            }
            if hi - lo <= 1e-12 * r_max {
                break;
            }
        }
        Ok(CredibleRadius { radius: hi, mass, attained: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CredibleRadius {
    pub radius: f64,
    /// Probability of the returned disk.
    pub mass: f64,
    /// `false` when the target mass could not be reached inside the support.
    pub attained: bool,
}

/// Meshes covering exactly the support of `params`.
pub fn support_meshes(params: &PopulationParams, m1: usize, m2: usize) -> Result<(ParamMesh, ParamMesh)> {
    Ok((ParamMesh::new(m1, params.a[0], params.b[0])?, ParamMesh::new(m2, params.a[1], params.b[1])?))
}

/// Per-cell probabilities, `masses[(j1, j2)]` laid out as `j1 + m1 * j2`.
pub fn cell_masses(params: &PopulationParams, pm1: &ParamMesh, pm2: &ParamMesh) -> Result<Vec<f64>> {
    Ok(grid_moments_adaptive(params, pm1, pm2, false)?.weights())
}

fn check_meshes(params: &PopulationParams, pm1: &ParamMesh, pm2: &ParamMesh) -> Result<()> {
    let tol = |x: f64| 1e-12 * (1.0 + x.abs());
    for (i, pm) in [pm1, pm2].into_iter().enumerate() {
        if (pm.lo() - params.a[i]).abs() > tol(params.a[i]) || (pm.hi() - params.b[i]).abs() > tol(params.b[i]) {
            return Err(Error::Config(format!(
                "parameter mesh {} spans [{}, {}] but the support is [{}, {}]",
                i + 1,
                pm.lo(),
                pm.hi(),
                params.a[i],
                params.b[i]
            )));
        }
    }
    Ok(())
}

/// Cell moments with the rule order doubled from [`BASE_QUAD_ORDER`] until
/// two successive orders agree.
pub fn grid_moments_adaptive(params: &PopulationParams, pm1: &ParamMesh, pm2: &ParamMesh, with_grad: bool) -> Result<GridMoments> {
    check_meshes(params, pm1, pm2)?;
    let mut order = BASE_QUAD_ORDER;
    let mut prev = grid_moments_unchecked(params, pm1, pm2, order, with_grad)?;
    loop {
        if order >= MAX_QUAD_ORDER {
            return Ok(prev);
        }
        order *= 2;
        let next = grid_moments_unchecked(params, pm1, pm2, order, with_grad)?;
        if moments_agree(&prev, &next) {
            return Ok(next);
        }
        prev = next;
    }
}

/// Cell moments with a fixed rule order.
pub fn grid_moments(params: &PopulationParams, pm1: &ParamMesh, pm2: &ParamMesh, order: usize, with_grad: bool) -> Result<GridMoments> {
    check_meshes(params, pm1, pm2)?;
    grid_moments_unchecked(params, pm1, pm2, order, with_grad)
}

fn moments_agree(x: &GridMoments, y: &GridMoments) -> bool {
    if (x.log_box_mass - y.log_box_mass).abs() > QUAD_AGREEMENT {
        return false;
    }
    x.cells.iter().zip(&y.cells).all(|(c, d)| {
        (c.weight - d.weight).abs() <= QUAD_AGREEMENT
            && (c.mean_q1 - d.mean_q1).abs() <= QUAD_AGREEMENT * (1.0 + c.mean_q1.abs())
            && (c.mean_q2 - d.mean_q2).abs() <= QUAD_AGREEMENT * (1.0 + c.mean_q2.abs())
    })
}

fn grid_moments_unchecked(params: &PopulationParams, pm1: &ParamMesh, pm2: &ParamMesh, order: usize, with_grad: bool) -> Result<GridMoments> {
    let chol = params.cholesky()?;
    let gl = GaussLegendre::new(order);
    let (m1, m2) = (pm1.cells(), pm2.cells());

    struct Raw {
        log_mass: f64,
        mean: [f64; 2],
        score: [f64; 5],
        cov1: [f64; 5],
        cov2: [f64; 5],
    }

    let mut raw = Vec::with_capacity(m1 * m2);
    let mut nodes: Vec<([f64; 2], f64, f64)> = Vec::with_capacity(order * order);
    for j2 in 0..m2 {
        for j1 in 0..m1 {
            nodes.clear();
            let (x0, x1) = (pm1.edge(j1), pm1.edge(j1 + 1));
            let (y0, y1) = (pm2.edge(j2), pm2.edge(j2 + 1));
            for w1 in panels(x0, x1, params.mu[0], chol[0]).windows(2) {
                for (qa, wa) in gl.mapped(w1[0], w1[1]) {
                    let cond = params.mu[1] + chol[1] * (qa - params.mu[0]) / chol[0];
                    for w2 in panels(y0, y1, cond, chol[2]).windows(2) {
                        for (qb, wb) in gl.mapped(w2[0], w2[1]) {
                            let q = [qa, qb];
                            nodes.push((q, wa * wb, log_normal_pdf(&params.mu, &chol, q)));
                        }
                    }
                }
            }
            let shift = nodes.iter().map(|n| n.2).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let mut mean = [0.0; 2];
            let mut score = [0.0; 5];
            let mut s1 = [0.0; 5];
            let mut s2 = [0.0; 5];
            for &(q, w, e) in &nodes {
                let om = w * (e - shift).exp();
                total += om;
                mean[0] += om * q[0];
                mean[1] += om * q[1];
                if with_grad {
                    let g = log_pdf_grad(&params.mu, &chol, q);
                    for k in 0..5 {
                        score[k] += om * g[k];
                        s1[k] += om * q[0] * g[k];
                        s2[k] += om * q[1] * g[k];
                    }
                }
            }
            let mean = [mean[0] / total, mean[1] / total];
            for k in 0..5 {
                score[k] /= total;
                s1[k] = s1[k] / total - mean[0] * score[k];
                s2[k] = s2[k] / total - mean[1] * score[k];
            }
            raw.push(Raw { log_mass: shift + total.ln(), mean, score, cov1: s1, cov2: s2 });
        }
    }

    let top = raw.iter().map(|r| r.log_mass).fold(f64::NEG_INFINITY, f64::max);
    let log_box_mass = top + raw.iter().map(|r| (r.log_mass - top).exp()).sum::<f64>().ln();
    let weights: Vec<f64> = raw.iter().map(|r| (r.log_mass - log_box_mass).exp()).collect();
    let mut mean_score = [0.0; 5];
    for (r, w) in raw.iter().zip(&weights) {
        for k in 0..5 {
            mean_score[k] += w * r.score[k];
        }
    }
    let cells = raw
        .iter()
        .zip(&weights)
        .map(|(r, &w)| {
            let mut d_weight = [0.0; 5];
            for k in 0..5 {
                d_weight[k] = w * (r.score[k] - mean_score[k]);
            }
            if !(r.mean[0].is_finite() && r.mean[1].is_finite() && w.is_finite()) {
                return Err(Error::Numerical("cell moment quadrature produced a non-finite value".into()));
            }
            Ok(CellMoments { weight: w, mean_q1: r.mean[0], mean_q2: r.mean[1], d_weight, d_mean_q1: r.cov1, d_mean_q2: r.cov2 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridMoments { m1, m2, cells, log_box_mass, quad_order: order })
}

/// Panel breakpoints of `[lo, hi]`. A density much narrower than the cell
/// gets extra breakpoints around its centre.
fn panels(lo: f64, hi: f64, centre: f64, sd: f64) -> Vec<f64> {
    let mut out = vec![lo];
    if sd < 0.25 * (hi - lo) {
        for k in [-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
            let x = centre + k * sd;
            if x > lo && x < hi {
                out.push(x);
            }
        }
    }
    out.push(hi);
    out
}

fn log_normal_pdf(mu: &[f64; 2], chol: &Chol2, q: [f64; 2]) -> f64 {
    let [l11, l21, l22] = *chol;
    let z1 = (q[0] - mu[0]) / l11;
    let z2 = (q[1] - mu[1] - l21 * z1) / l22;
    -(2.0 * PI).ln() - l11.ln() - l22.ln() - 0.5 * (z1 * z1 + z2 * z2)
}

/// Gradient of the log normal density with respect to `(mu1, mu2, l11, l21, l22)`.
fn log_pdf_grad(mu: &[f64; 2], chol: &Chol2, q: [f64; 2]) -> [f64; 5] {
    let [l11, l21, l22] = *chol;
    let z1 = (q[0] - mu[0]) / l11;
    let z2 = (q[1] - mu[1] - l21 * z1) / l22;
    // v = L^{-T} z
    let v2 = z2 / l22;
    let v1 = (z1 - l21 * v2) / l11;
    [v1, v2, -1.0 / l11 + v1 * z1, v2 * z1, -1.0 / l22 + v2 * z2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn reference_params() -> PopulationParams {
        PopulationParams::new([0.0, 0.0], [1.4942, 2.0409], [0.6245, 1.0274], [[0.0259, 0.0067], [0.0067, 0.1227]]).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PopulationParams::new([0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(PopulationParams::new([1.0, 0.0], [1.0, 1.0], [0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(PopulationParams::new([-0.1, 0.0], [1.0, 1.0], [0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn cholesky_round_trip() {
        let p = reference_params();
        let v = p.to_vector().unwrap();
        let q = PopulationParams::from_vector(&v).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(p.sigma[i][j], q.sigma[i][j], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn pdf_zero_outside() {
        let d = TruncatedNormal::new(reference_params()).unwrap();
        assert_eq!(d.pdf([-0.1, 1.0]), 0.0);
        assert_eq!(d.pdf([0.5, 2.1]), 0.0);
        assert!(d.pdf([0.6, 1.0]) > 0.0);
    }

    #[test]
    fn pdf_integrates_to_one() {
        let p = reference_params();
        let d = TruncatedNormal::new(p).unwrap();
        // Independent composite rule over a 16x16 panel grid.
        let gl = GaussLegendre::new(12);
        let (nx, ny) = (16, 16);
        let (hx, hy) = (p.b[0] / nx as f64, p.b[1] / ny as f64);
        let mut s = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                for (x, wx) in gl.mapped(i as f64 * hx, (i + 1) as f64 * hx) {
                    for (y, wy) in gl.mapped(j as f64 * hy, (j + 1) as f64 * hy) {
                        s += wx * wy * d.pdf([x, y]);
                    }
                }
            }
        }
        assert_relative_eq!(s, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn wide_support_matches_product_of_normals() {
        let (s1, s2) = (0.2_f64, 0.5_f64);
        let mu = [5.0, 12.0];
        let p = PopulationParams::new(
            [mu[0] - 20.0 * s1, mu[1] - 20.0 * s2],
            [mu[0] + 20.0 * s1, mu[1] + 20.0 * s2],
            mu,
            [[s1 * s1, 0.0], [0.0, s2 * s2]],
        )
        .unwrap();
        let d = TruncatedNormal::new(p).unwrap();
        let expected = 1.0 / ((2.0 * PI).sqrt() * s1) / ((2.0 * PI).sqrt() * s2);
        assert_relative_eq!(d.pdf(mu), expected, max_relative = 1e-6);
    }

    #[test]
    fn symmetric_masses() {
        let p = PopulationParams::new([0.0, 0.0], [2.0, 3.0], [1.0, 1.5], [[0.3, 0.0], [0.0, 0.5]]).unwrap();
        let (pm1, pm2) = support_meshes(&p, 4, 3).unwrap();
        let w = cell_masses(&p, &pm1, &pm2).unwrap();
        for j2 in 0..3 {
            for j1 in 0..4 {
                let mirror = (3 - j1) + 4 * (2 - j2);
                assert!((w[j1 + 4 * j2] - w[mirror]).abs() < 1e-10);
            }
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mesh_mismatch_is_config_error() {
        let p = reference_params();
        let pm1 = ParamMesh::new(4, 0.0, 1.0).unwrap();
        let pm2 = ParamMesh::new(4, 0.0, p.b[1]).unwrap();
        assert!(matches!(cell_masses(&p, &pm1, &pm2), Err(Error::Config(_))));
    }

    #[test]
    fn sample_determinism_and_support() {
        let d = TruncatedNormal::new(reference_params()).unwrap();
        let s1 = d.sample(500, 7).unwrap();
        let s2 = d.sample(500, 7).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&q| d.in_support(q)));
        assert_ne!(s1, d.sample(500, 8).unwrap());
    }

    #[test]
    fn sampling_fails_for_disjoint_support() {
        let p = PopulationParams::new([0.0, 0.0], [1.0, 1.0], [20.0, 20.0], [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = TruncatedNormal::new(p).unwrap();
        assert!(matches!(d.sample(10, 1), Err(Error::Sampling(_))));
    }

    #[test]
    fn sample_mean_law_of_large_numbers() {
        let (s1, s2) = (0.1_f64, 0.2_f64);
        let mu = [1.0, 2.0];
        let p = PopulationParams::new([0.0, 0.0], [mu[0] + 12.0 * s1, mu[1] + 12.0 * s2], mu, [[s1 * s1, 0.0], [0.0, s2 * s2]]).unwrap();
        let d = TruncatedNormal::new(p).unwrap();
        let n = 1_000_000;
        let s = d.sample(n, 3).unwrap();
        let m1 = s.iter().map(|q| q[0]).sum::<f64>() / n as f64;
        let m2 = s.iter().map(|q| q[1]).sum::<f64>() / n as f64;
        assert!((m1 - mu[0]).abs() < 4.0 * s1 / (n as f64).sqrt());
        assert!((m2 - mu[1]).abs() < 4.0 * s2 / (n as f64).sqrt());
    }

    #[test]
    fn radius_monotone_in_alpha() {
        let d = TruncatedNormal::new(reference_params()).unwrap();
        let tiny = d.credible_region_radius(1e-6).unwrap().radius;
        let half = d.credible_region_radius(0.5).unwrap().radius;
        assert!(tiny < half);
        let mut last = 0.0;
        for k in 1..10 {
            let r = d.credible_region_radius(k as f64 / 10.0).unwrap();
            assert!(r.attained);
            assert!((r.mass - k as f64 / 10.0).abs() < 1e-4);
            assert!(r.radius >= last);
            last = r.radius;
        }
        assert!(d.credible_region_radius(1.0).is_err());
    }

    #[test]
    fn disk_mass_matches_cartesian_quadrature() {
        // Fine Cartesian grid with an indicator; independent of the polar scheme.
        let p = reference_params();
        let d = TruncatedNormal::new(p).unwrap();
        let r = 0.3;
        let n = 1500;
        let (hx, hy) = (p.b[0] / n as f64, p.b[1] / n as f64);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let q = [(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy];
                if (q[0] - p.mu[0]).hypot(q[1] - p.mu[1]) <= r {
                    s += d.pdf(q) * hx * hy;
                }
            }
        }
        assert!((d.disk_mass(r) - s).abs() < 2e-4, "{} vs {}", d.disk_mass(r), s);
    }

    #[test]
    fn score_derivatives_match_finite_differences() {
        let p = reference_params();
        let (pm1, pm2) = support_meshes(&p, 3, 2).unwrap();
        let g = grid_moments(&p, &pm1, &pm2, 20, true).unwrap();
        let v = p.to_vector().unwrap();
        let h = 1e-6;
        for k in 0..5 {
            let mut vp = v;
            let mut vm = v;
            vp[4 + k] += h;
            vm[4 + k] -= h;
            let gp = grid_moments(&PopulationParams::from_vector(&vp).unwrap(), &pm1, &pm2, 20, false).unwrap();
            let gm = grid_moments(&PopulationParams::from_vector(&vm).unwrap(), &pm1, &pm2, 20, false).unwrap();
            for c in 0..6 {
                let fw = (gp.cells[c].weight - gm.cells[c].weight) / (2.0 * h);
                let f1 = (gp.cells[c].mean_q1 - gm.cells[c].mean_q1) / (2.0 * h);
                let f2 = (gp.cells[c].mean_q2 - gm.cells[c].mean_q2) / (2.0 * h);
                assert!((fw - g.cells[c].d_weight[k]).abs() < 1e-6 * (1.0 + fw.abs()), "w k={k} c={c}");
                assert!((f1 - g.cells[c].d_mean_q1[k]).abs() < 1e-6 * (1.0 + f1.abs()), "q1 k={k} c={c}");
                assert!((f2 - g.cells[c].d_mean_q2[k]).abs() < 1e-6 * (1.0 + f2.abs()), "q2 k={k} c={c}");
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let p = reference_params();
        let q = PopulationParams::from_kv(&p.to_kv()).unwrap();
        assert_eq!(p, q);
    }

    fn arb_params() -> impl Strategy<Value = PopulationParams> {
        (0.1f64..2.0, 0.1f64..2.0, 0.05f64..0.6, 0.05f64..0.6, -0.8f64..0.8, 0.5f64..4.0, 0.5f64..4.0).prop_map(|(m1, m2, s1, s2, r, w1, w2)| {
            let c = r * s1 * s2;
            PopulationParams::new([0.0, 0.0], [m1 + w1 * s1, m2 + w2 * s2], [m1, m2], [[s1 * s1, c], [c, s2 * s2]]).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn masses_sum_to_one(p in arb_params(), m1 in 1usize..6, m2 in 1usize..6) {
            let (pm1, pm2) = support_meshes(&p, m1, m2).unwrap();
            let w = cell_masses(&p, &pm1, &pm2).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }

        #[test]
        fn pdf_nonnegative(p in arb_params(), x in -1.0f64..5.0, y in -1.0f64..5.0) {
            let d = TruncatedNormal::new(p).unwrap();
            let v = d.pdf([x, y]);
            prop_assert!(v >= 0.0);
            if !d.in_support([x, y]) { prop_assert_eq!(v, 0.0); }
        }
    }
}
