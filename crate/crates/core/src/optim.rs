//! Derivative-free simplex search and a projected limited-memory quasi-Newton
//! method for box-constrained problems.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when the spread of simplex values is below `ftol·(1 + |f_best|)`
    /// and the simplex diameter is below `xtol`.
    pub ftol: f64,
    pub xtol: f64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 400, ftol: 1e-10, xtol: 1e-8, lower: None, upper: None }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>) {
    if let Some(lo) = lo {
        x.iter_mut().zip(lo).for_each(|(v, l)| *v = v.max(*l));
    }
    if let Some(hi) = hi {
        x.iter_mut().zip(hi).for_each(|(v, h)| *v = v.min(*h));
    }
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// `true` when the simplex edges span fewer than `n` dimensions.
pub fn simplex_degenerate(simplex: &[Vec<f64>]) -> bool {
    let n = simplex.len() - 1;
    let scale = simplex.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| simplex[i + 1][j] - simplex[0][j]);
    m.singular_values().min() <= 1e-10 * scale
}

/// Nelder–Mead over an explicit initial simplex of `n + 1` points. Trial
/// points are clamped into the optional box. Reflection and expansion are
/// evaluated concurrently.
pub fn nelder_mead<F>(f: F, simplex: Vec<Vec<f64>>, opts: &NelderMeadOptions) -> OptimResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = simplex[0].len();
    assert_eq!(simplex.len(), n + 1, "simplex needs n + 1 vertices");
    let mut evals = 0;
    let mut pts: Vec<(Vec<f64>, f64)> = simplex
        .into_iter()
        .map(|mut x| {
            clamp(&mut x, &opts.lower, &opts.upper);
            let v = nan_to_inf(f(&x));
            (x, v)
        })
        .collect();
    evals += n + 1;
    let order = |p: &mut Vec<(Vec<f64>, f64)>| p.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        order(&mut pts);
        let fb = pts[0].1;
        let spread = pts[n].1 - fb;
        let diam = pts[1..].iter().map(|(x, _)| x.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        if spread.is_finite() && spread <= opts.ftol * (1.0 + fb.abs()) && diam <= opts.xtol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut centroid = vec![0.0; n];
        for (x, _) in &pts[..n] {
            centroid.iter_mut().zip(x).for_each(|(c, v)| *c += v / n as f64);
        }
        let along = |t: f64| {
            let mut x: Vec<f64> = centroid.iter().zip(&pts[n].0).map(|(c, w)| c + t * (c - w)).collect();
            clamp(&mut x, &opts.lower, &opts.upper);
            x
        };
        let xr = along(1.0);
        let xe = along(2.0);
        let (fr, fe) = rayon::join(|| nan_to_inf(f(&xr)), || nan_to_inf(f(&xe)));
        evals += 2;
        if fr < fb {
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < pts[n - 1].1 {
            pts[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < pts[n].1 {
            let x = along(0.5);
            let v = nan_to_inf(f(&x));
            (x, v)
        } else {
            let x = along(-0.5);
            let v = nan_to_inf(f(&x));
            (x, v)
        };
        evals += 1;
        if fc < pts[n].1.min(fr) {
            pts[n] = (xc, fc);
            continue;
        }
        let best = pts[0].0.clone();
        for p in pts.iter_mut().skip(1) {
            let mut x: Vec<f64> = best.iter().zip(&p.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
            clamp(&mut x, &opts.lower, &opts.upper);
            p.1 = nan_to_inf(f(&x));
            p.0 = x;
        }
        evals += n;
    }
    order(&mut pts);
    let (x, f) = pts.swap_remove(0);
    OptimResult { x, f, iterations, evaluations: evals, converged }
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Converged when `‖P(x − g) − x‖₂ ≤ pgtol·(1 + f)`.
    pub pgtol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub max_backtracks: usize,
}

impl LbfgsOptions {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { max_iter: 500, memory: 10, pgtol: 1e-6, lower, upper, max_backtracks: 40 }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    pub cost: f64,
    pub projected_gradient_norm: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter().zip(g).enumerate().map(|(i, (xi, gi))| ((xi - gi).clamp(lo[i], hi[i]) - xi).powi(2)).sum::<f64>().sqrt()
}

/// Projected L-BFGS with Armijo backtracking along the projection arc.
///
/// `fg` returns the objective and gradient, or `None` where the objective is
/// undefined (treated as an infinite value during the line search).
pub fn projected_lbfgs<F, C>(mut fg: F, x0: &[f64], opts: &LbfgsOptions, mut on_iter: C) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    C: FnMut(&IterRecord),
{
    let (lo, hi) = (&opts.lower, &opts.upper);
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut f, mut g) = fg(&x)?;
    let mut evals = 1;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut pgn = projected_gradient_norm(&x, &g, lo, hi);
    on_iter(&IterRecord { iteration: 0, cost: f, projected_gradient_norm: pgn, x: x.clone() });
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut failed_once = false;
    while iterations < opts.max_iter {
        if pgn <= opts.pgtol * (1.0 + f) {
            converged = true;
            message = "projected gradient below tolerance".into();
            break;
        }
        // Variables held at an active bound.
        let active: Vec<bool> = (0..n).map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)).collect();
        let mask = |v: &mut [f64]| {
            v.iter_mut().zip(&active).for_each(|(a, &m)| {
                if m {
                    *a = 0.0
                }
            })
        };
        let mut q = g.clone();
        mask(&mut q);
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        mask(&mut d);
        if dot(&d, &g) >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            mask(&mut d);
        }
        let mut step = if mem.is_empty() {
            let dn = dot(&d, &d).sqrt();
            if dn > 0.0 {
                (1.0 / dn).min(1.0)
            } else {
                1.0
            }
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xt, lo, hi);
            let dx: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &dx);
            if decrease >= 0.0 && dot(&dx, &dx) == 0.0 {
                break;
            }
            evals += 1;
            if let Some((ft, gt)) = fg(&xt) {
                if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) && ft <= f {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if failed_once || mem.is_empty() {
                message = "line search failed".into();
                break;
            }
            failed_once = true;
            mem.clear();
            continue;
        };
        failed_once = false;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        f = fnew;
        g = gn;
        iterations += 1;
        pgn = projected_gradient_norm(&x, &g, lo, hi);
        on_iter(&IterRecord { iteration: iterations, cost: f, projected_gradient_norm: pgn, x: x.clone() });
    }
    if !converged && pgn <= opts.pgtol * (1.0 + f) {
        converged = true;
        message = "projected gradient below tolerance".into();
    }
    Some(LbfgsResult { x, f, gradient: g, projected_gradient_norm: pgn, iterations, evaluations: evals, converged, message })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosen_grad(x: &[f64]) -> Vec<f64> {
        vec![-2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]), 200.0 * (x[1] - x[0] * x[0])]
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let opts = NelderMeadOptions { max_iter: 2000, ..Default::default() };
        let r = nelder_mead(rosen, vec![vec![-1.2, 1.0], vec![-1.0, 1.0], vec![-1.2, 1.2]], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn nelder_mead_respects_box() {
        let opts = NelderMeadOptions { lower: Some(vec![2.0, -5.0]), upper: Some(vec![5.0, 5.0]), ..Default::default() };
        let r = nelder_mead(rosen, vec![vec![3.0, 0.0], vec![4.0, 0.0], vec![3.0, 1.0]], &opts);
        assert!(r.x[0] >= 2.0);
        assert!((r.x[0] - 2.0).abs() < 1e-6 && (r.x[1] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_simplex_detected() {
        assert!(simplex_degenerate(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]));
        assert!(!simplex_degenerate(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]));
    }

    #[test]
    fn lbfgs_rosenbrock_unconstrained() {
        let opts = LbfgsOptions::new(vec![-10.0; 2], vec![10.0; 2]);
        let mut costs = Vec::new();
        let r = projected_lbfgs(|x| Some((rosen(x), rosen_grad(x))), &[-1.2, 1.0], &opts, |it| costs.push(it.cost)).unwrap();
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-5);
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_active_bound() {
        // Minimum of the quadratic at (-1, 2) lies outside x0 >= 0.
        let f = |x: &[f64]| (x[0] + 1.0).powi(2) + 3.0 * (x[1] - 2.0).powi(2) + x[0] * x[1];
        let g = |x: &[f64]| vec![2.0 * (x[0] + 1.0) + x[1], 6.0 * (x[1] - 2.0) + x[0]];
        let opts = LbfgsOptions::new(vec![0.0, -10.0], vec![10.0, 10.0]);
        let r = projected_lbfgs(|x| Some((f(x), g(x))), &[3.0, -3.0], &opts, |_| {}).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0], 0.0);
        assert!((r.x[1] - 2.0).abs() < 1e-6);
    }
}
