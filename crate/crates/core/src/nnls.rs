//! Lawson–Hanson active-set nonnegative least squares.
//!
//! The solver works on the normal equations `G = AᵀA`, `c = Aᵀb`, keeping an
//! upper-triangular factor of the passive block that is updated by one row on
//! insertion and by Givens rotations on deletion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NnlsResult {
    pub x: DVector<f64>,
    /// Number of variables moved into the passive set.
    pub iterations: usize,
    /// `false` when the iteration cap was hit; `x` is then the best feasible
    /// iterate found.
    pub converged: bool,
}

/// Minimises `‖Ax − b‖²` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsResult> {
    if a.ncols() == 0 {
        return Err(Error::Input("nnls needs at least one column".into()));
    }
    if a.nrows() != b.len() {
        return Err(Error::Input(format!("nnls: A has {} rows, b has {}", a.nrows(), b.len())));
    }
    nnls_gram(&(a.transpose() * a), &(a.transpose() * b))
}

/// Minimises `½xᵀGx − cᵀx` subject to `x ≥ 0` for symmetric positive
/// semidefinite `G`.
pub fn nnls_gram(g: &DMatrix<f64>, c: &DVector<f64>) -> Result<NnlsResult> {
    let n = c.len();
    if n == 0 || g.nrows() != n || g.ncols() != n {
        return Err(Error::Input(format!("nnls_gram: G is {}x{}, c has {} entries", g.nrows(), g.ncols(), n)));
    }
    if g.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("nnls input has non-finite entries".into()));
    }
    let cnorm = c.norm();
    if cnorm == 0.0 {
        return Ok(NnlsResult { x: DVector::zeros(n), iterations: 0, converged: true });
    }
    let tol = 1e-12 * cnorm;
    let max_iter = 3 * n;
    let mut x = DVector::<f64>::zeros(n);
    let mut fac = Factor::default();
    let mut blocked = vec![false; n];
    let mut iterations = 0;
    let mut converged = true;
    let mut w = c.clone();
    let mut best = (objective(g, c, &x), x.clone());
    loop {
        let in_p = fac.membership(n);
        let cand = (0..n).filter(|&j| !in_p[j] && !blocked[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        if iterations >= max_iter {
            converged = false;
            log::warn!("nnls: iteration cap {max_iter} reached");
            break;
        }
        if !fac.push(g, j) {
            blocked[j] = true;
            continue;
        }
        iterations += 1;
        let mut first = true;
        loop {
            let z = fac.solve(c);
            if z.iter().all(|&v| v > 0.0) {
                for (k, &p) in fac.idx.iter().enumerate() {
                    x[p] = z[k];
                }
                break;
            }
            if first && z[z.len() - 1] <= 0.0 {
                // The new variable cannot enter; keep x and try another.
                fac.remove(fac.idx.len() - 1);
                blocked[j] = true;
                break;
            }
            first = false;
            let mut alpha = f64::INFINITY;
            let mut hit = 0;
            for (k, &p) in fac.idx.iter().enumerate() {
                if z[k] <= 0.0 && x[p] / (x[p] - z[k]) < alpha {
                    alpha = x[p] / (x[p] - z[k]);
                    hit = fac.idx[k];
                }
            }
            for (k, &p) in fac.idx.iter().enumerate() {
                x[p] += alpha * (z[k] - x[p]);
            }
            x[hit] = 0.0;
            let mut k = fac.idx.len();
            while k > 0 {
                k -= 1;
                let p = fac.idx[k];
                if x[p] <= 1e-14 * x.amax() {
                    x[p] = 0.0;
                    fac.remove(k);
                }
            }
            if fac.idx.is_empty() {
                break;
            }
        }
        blocked.iter_mut().for_each(|b| *b = false);
        w = c - g * &x;
        let obj = objective(g, c, &x);
        if obj < best.0 {
            best = (obj, x.clone());
        }
    }
    if !converged {
        x = best.1;
    } else if !fac.idx.is_empty() {
        // One step of iterative refinement on the passive block.
        let r = c - g * &x;
        let dz = fac.solve(&r);
        let mut xr = x.clone();
        for (k, &p) in fac.idx.iter().enumerate() {
            xr[p] += dz[k];
        }
        if xr.iter().all(|&v| v >= 0.0) && objective(g, c, &xr) <= objective(g, c, &x) {
            x = xr;
        }
    }
    Ok(NnlsResult { x, iterations, converged })
}

fn objective(g: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(g * x)) - c.dot(x)
}

/// Upper-triangular `R` with `RᵀR = G[idx, idx]`, stored column-major by
/// passive position.
#[derive(Debug, Default)]
struct Factor {
    idx: Vec<usize>,
    /// `cols[k]` holds column `k` of `R` (length `k + 1`).
    cols: Vec<Vec<f64>>,
}

impl Factor {
    fn membership(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        self.idx.iter().for_each(|&i| m[i] = true);
        m
    }

    /// Appends variable `j`; returns `false` if its column is numerically
    /// dependent on the passive set.
    fn push(&mut self, g: &DMatrix<f64>, j: usize) -> bool {
        let k = self.idx.len();
        let mut r = vec![0.0; k + 1];
        for i in 0..k {
            let mut s = g[(self.idx[i], j)];
            for l in 0..i {
                s -= self.cols[i][l] * r[l];
            }
            r[i] = s / self.cols[i][i];
        }
        let d2 = g[(j, j)] - r[..k].iter().map(|v| v * v).sum::<f64>();
        if !(d2 > 1e-14 * g[(j, j)].abs().max(f64::MIN_POSITIVE)) {
            return false;
        }
        r[k] = d2.sqrt();
        self.idx.push(j);
        self.cols.push(r);
        true
    }

    /// Removes passive position `k` and restores triangular form.
    fn remove(&mut self, k: usize) {
        self.idx.remove(k);
        self.cols.remove(k);
        // Columns after k now carry one subdiagonal entry at row (col index + 1).
        for c in k..self.cols.len() {
            let (a, b) = (self.cols[c][c], self.cols[c][c + 1]);
            let h = a.hypot(b);
            let (cs, sn) = if h == 0.0 { (1.0, 0.0) } else { (a / h, b / h) };
            for col in self.cols.iter_mut().skip(c) {
                let (u, v) = (col[c], col[c + 1]);
                col[c] = cs * u + sn * v;
                col[c + 1] = -sn * u + cs * v;
            }
            self.cols[c].truncate(c + 1);
        }
    }

    /// Solves `G[idx, idx] z = rhs[idx]`.
    fn solve(&self, rhs: &DVector<f64>) -> Vec<f64> {
        let k = self.idx.len();
        let mut y = vec![0.0; k];
        for i in 0..k {
            let mut s = rhs[self.idx[i]];
            for l in 0..i {
                s -= self.cols[i][l] * y[l];
            }
            y[i] = s / self.cols[i][i];
        }
        for i in (0..k).rev() {
            let mut s = y[i];
            for l in i + 1..k {
                s -= self.cols[l][i] * y[l];
            }
            y[i] = s / self.cols[i][i];
        }
        y
    }
}

/// Checks the optimality conditions of `min ‖Ax − b‖², x ≥ 0` with tolerance
/// `rel·‖Aᵀb‖`; returns the largest violation relative to that scale.
pub fn kkt_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let grad = a.transpose() * (a * x - b);
    let scale = (a.transpose() * b).norm().max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let v = if x[i] < 0.0 {
            f64::INFINITY
        } else if x[i] > 0.0 {
            grad[i].abs()
        } else {
            (-grad[i]).max(0.0)
        };
        worst = worst.max(v / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_clips() {
        let r = nnls(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(r.x.as_slice(), &[1.0, 0.0]);
        assert!(r.converged);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = DMatrix::from_fn(5, 3, |i, j| (i + 2 * j) as f64);
        let r = nnls(&a, &DVector::zeros(5)).unwrap();
        assert!(r.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_consistent_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = DMatrix::from_fn(15, 6, |_, _| rng.random::<f64>() - 0.3);
            let x0 = DVector::from_fn(6, |i, _| if i % 3 == 0 { 0.0 } else { rng.random::<f64>() });
            let r = nnls(&a, &(&a * &x0)).unwrap();
            assert!((r.x - x0).amax() < 1e-8);
        }
    }

    #[test]
    fn factor_deletion_keeps_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(10, 6, |_, _| rng.random::<f64>());
        let g = a.transpose() * &a;
        let mut f = Factor::default();
        for j in [4, 1, 5, 0, 2] {
            assert!(f.push(&g, j));
        }
        f.remove(1);
        f.remove(2);
        let k = f.idx.len();
        let r = DMatrix::from_fn(k, k, |i, j| if i <= j { f.cols[j][i] } else { 0.0 });
        let sub = DMatrix::from_fn(k, k, |i, j| g[(f.idx[i], f.idx[j])]);
        assert!((r.transpose() * r - sub).amax() < 1e-12);
    }

    #[test]
    fn dependent_columns_are_handled() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![3.0, 2.0, 1.0]);
        let r = nnls(&a, &b).unwrap();
        assert!(kkt_violation(&a, &b, &r.x) < 1e-8);
    }

    #[test]
    fn rejects_empty() {
        assert!(nnls(&DMatrix::zeros(3, 0), &DVector::zeros(3)).is_err());
    }
}
