//! Credible bands for deconvolved BrAC, per-episode statistics and their
//! credible intervals.
//!
//! Samples are drawn from the fitted population and kept when they fall in
//! the disk around `μ` holding probability `α`. The mean `μ` itself is always
//! evaluated along with the kept draws, so bands and intervals contain the
//! value at `μ` by construction.

use rayon::prelude::*;

use crate::data_io::fmt_f64;
use crate::deconvolution::{build_problem, deconvolve, param_meshes, DeconvolutionResult, Variant};
use crate::density::{CredibleRadius, PopulationParams, TruncatedNormal};
use crate::error::{Error, Result};
use crate::forward_model::{DiscreteSystem, DiscretizationGrid, MINUTES_PER_HOUR};

pub const DEFAULT_ALPHA: f64 = 0.75;
pub const DEFAULT_SAMPLES: usize = 1000;
/// BrAC level (percent alcohol) treated as zero by the rate statistics.
pub const DEFAULT_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct CredibleBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Draws inside the disk.
    pub kept: usize,
    pub radius: f64,
}

impl CredibleBand {
    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    pub fn contains(&self, curve: &[f64], tol: f64) -> bool {
        curve.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// Draws inside the credible disk, with `μ` prepended.
#[derive(Debug, Clone)]
pub struct CredibleSamples {
    pub points: Vec<[f64; 2]>,
    pub radius: CredibleRadius,
    pub drawn: usize,
}

impl CredibleSamples {
    /// Number of random draws kept (excludes `μ`).
    pub fn kept(&self) -> usize {
        self.points.len() - 1
    }
}

pub fn credible_samples(rho: &PopulationParams, alpha: f64, n_samples: usize, seed: u64) -> Result<CredibleSamples> {
    let dist = TruncatedNormal::new(*rho)?;
    let radius = dist.credible_region_radius(alpha)?;
    let draws = dist.sample(n_samples, seed)?;
    let mu = rho.mu;
    let mut points = vec![mu];
    points.extend(draws.into_iter().filter(|q| (q[0] - mu[0]).hypot(q[1] - mu[1]) <= radius.radius));
    if points.len() == 1 {
        return Err(Error::Sampling(format!(
            "no draw out of {n_samples} fell inside the credible disk of radius {:.4e}; increase the sample count",
            radius.radius
        )));
    }
    Ok(CredibleSamples { points, radius, drawn: n_samples })
}

fn min_max_band(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = curves[0].len();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for c in curves {
        for j in 0..k {
            lo[j] = lo[j].min(c[j]);
            hi[j] = hi[j].max(c[j]);
        }
    }
    (lo, hi)
}

/// Input curves of a `tq` result at each sample point (cell lookup).
fn tq_curves(result: &DeconvolutionResult, rho: &PopulationParams, samples: &CredibleSamples) -> Result<Vec<Vec<f64>>> {
    if result.variant != Variant::Tq {
        return Err(Error::Config("credible bands from a fitted result need the tq variant".into()));
    }
    let (pm1, pm2) = param_meshes(rho, &result.grid)?;
    if pm1.cells() * pm2.cells() != result.coeffs.ncols() {
        return Err(Error::Config(format!("result has {} cells but the grid gives {}x{}", result.coeffs.ncols(), pm1.cells(), pm2.cells())));
    }
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; result.coeffs.ncols()];
    samples
        .points
        .iter()
        .map(|q| {
            let (Some(j1), Some(j2)) = (pm1.cell_of(q[0]), pm2.cell_of(q[1])) else {
                return Err(Error::Internal(format!("sample {q:?} outside the parameter support")));
            };
            let c = j1 + pm1.cells() * j2;
            Ok(cache[c].get_or_insert_with(|| result.cell_curve(c)).clone())
        })
        .collect()
}

pub fn credible_band(result: &DeconvolutionResult, rho: &PopulationParams, alpha: f64, n_samples: usize, seed: u64) -> Result<CredibleBand> {
    let samples = credible_samples(rho, alpha, n_samples, seed)?;
    let curves = tq_curves(result, rho, &samples)?;
    let (lower, upper) = min_max_band(&curves);
    Ok(CredibleBand { lower, upper, alpha, n_samples, seed, kept: samples.kept(), radius: samples.radius.radius })
}

/// Deconvolved input for a single parameter value `q`.
pub fn deterministic_curve(tac: &[f64], q: [f64; 2], grid: &DiscretizationGrid, r1: f64, r2: f64) -> Result<(Vec<f64>, bool)> {
    let ops = DiscreteSystem::deterministic(q, grid.n, grid.tau)?.discrete_time()?;
    let p = build_problem(&ops, grid, tac, r1, r2, Variant::Scalar)?;
    let r = deconvolve(&p)?;
    Ok((r.mean_curve, r.nnls_converged))
}

/// Per-sample curves of the scalar variant, `μ` first.
fn scalar_curves(tac: &[f64], grid: &DiscretizationGrid, samples: &CredibleSamples, r1: f64, r2: f64) -> Result<Vec<Vec<f64>>> {
    let solved: Vec<Result<(Vec<f64>, bool)>> = samples.points.par_iter().map(|&q| deterministic_curve(tac, q, grid, r1, r2)).collect();
    let total = solved.len();
    let mut curves = Vec::with_capacity(total);
    let mut failures = 0;
    for (i, s) in solved.into_iter().enumerate() {
        match s {
            Ok((c, true)) => curves.push(c),
            Ok((c, false)) => {
                failures += 1;
                // A flagged solve is still feasible; keep it for μ so the band has a reference.
                if i == 0 {
                    curves.push(c);
                }
            }
            Err(e) if i == 0 => return Err(e),
            Err(e) => {
                log::debug!("per-sample deconvolution failed: {e}");
                failures += 1;
            }
        }
    }
    if failures * 10 > total {
        return Err(Error::Numerical(format!("{failures} of {total} per-sample deconvolutions failed")));
    }
    if failures > 0 {
        log::warn!("{failures} of {total} per-sample deconvolutions failed and were skipped");
    }
    Ok(curves)
}

/// Band for the scalar variant, built from one deterministic deconvolution
/// per kept sample.
#[allow(clippy::too_many_arguments)]
pub fn credible_band_scalar(
    tac: &[f64],
    rho: &PopulationParams,
    grid: &DiscretizationGrid,
    alpha: f64,
    n_samples: usize,
    seed: u64,
    r1: f64,
    r2: f64,
) -> Result<CredibleBand> {
    let samples = credible_samples(rho, alpha, n_samples, seed)?;
    let curves = scalar_curves(tac, grid, &samples, r1, r2)?;
    let (lower, upper) = min_max_band(&curves);
    Ok(CredibleBand { lower, upper, alpha, n_samples, seed, kept: samples.kept(), radius: samples.radius.radius })
}

/// Statistics I–V of one BrAC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    /// Percent alcohol.
    pub peak: f64,
    /// Hours.
    pub peak_time: f64,
    /// Percent alcohol times hours.
    pub auc: f64,
    /// Percent per hour; `None` when the curve never drops below the
    /// threshold after the peak.
    pub elimination_rate: Option<f64>,
    /// Percent per hour; `None` when no sample before the peak is below the
    /// threshold.
    pub absorption_rate: Option<f64>,
    pub threshold: f64,
}

fn fmt4(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".into(),
    }
}

impl EpisodeStats {
    pub fn values(&self) -> [Option<f64>; 5] {
        [Some(self.peak), Some(self.peak_time), Some(self.auc), self.elimination_rate, self.absorption_rate]
    }

    /// Row layout of a statistics table: four decimals, comma separated.
    pub fn render_row(&self) -> String {
        self.values().iter().map(|v| fmt4(*v)).collect::<Vec<_>>().join(", ")
    }
}

/// Statistics of a curve sampled every `tau_minutes` starting at zero.
pub fn episode_stats(curve: &[f64], tau_minutes: f64, threshold: f64) -> Result<EpisodeStats> {
    if curve.is_empty() {
        return Err(Error::Input("empty curve".into()));
    }
    if !(tau_minutes > 0.0) || !(threshold > 0.0) {
        return Err(Error::Domain("statistics need tau > 0 and threshold > 0".into()));
    }
    if let Some(v) = curve.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Input(format!("curve value {v} is negative or not finite")));
    }
    let dt = tau_minutes / MINUTES_PER_HOUR;
    let mut p = 0;
    for (j, &v) in curve.iter().enumerate() {
        if v > curve[p] {
            p = j;
        }
    }
    let peak = curve[p];
    let auc = curve.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
    let (elimination_rate, absorption_rate) = if peak == 0.0 {
        (None, None)
    } else {
        let after = (p + 1..curve.len()).find(|&j| curve[j] < threshold);
        let before = (0..p).rev().find(|&j| curve[j] < threshold);
        (after.map(|j| peak / ((j - p) as f64 * dt)), before.map(|j| peak / ((p - j) as f64 * dt)))
    };
    Ok(EpisodeStats { peak, peak_time: p as f64 * dt, auc, elimination_rate, absorption_rate, threshold })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn render(&self) -> String {
        format!("[{:.4},{:.4}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsIntervals {
    pub peak: Interval,
    pub peak_time: Interval,
    pub auc: Interval,
    pub elimination: Option<Interval>,
    pub absorption: Option<Interval>,
    /// Samples whose rate was undefined and left out.
    pub excluded_elimination: usize,
    pub excluded_absorption: usize,
    /// Curves evaluated (kept draws plus `μ`).
    pub evaluated: usize,
}

impl StatsIntervals {
    pub fn intervals(&self) -> [Option<Interval>; 5] {
        [Some(self.peak), Some(self.peak_time), Some(self.auc), self.elimination, self.absorption]
    }

    pub fn render_row(&self) -> String {
        self.intervals().iter().map(|i| i.map_or_else(|| "NA".to_string(), |i| i.render())).collect::<Vec<_>>().join(", ")
    }
}

fn span(values: impl Iterator<Item = f64>) -> Option<Interval> {
    values.fold(None, |acc, v| match acc {
        None => Some(Interval { lo: v, hi: v }),
        Some(i) => Some(Interval { lo: i.lo.min(v), hi: i.hi.max(v) }),
    })
}

/// Min/max of each statistic over a set of curves.
pub fn intervals_from_curves(curves: &[Vec<f64>], tau_minutes: f64, threshold: f64) -> Result<StatsIntervals> {
    let stats = curves.iter().map(|c| episode_stats(c, tau_minutes, threshold)).collect::<Result<Vec<_>>>()?;
    if stats.is_empty() {
        return Err(Error::Input("no curves".into()));
    }
    let excluded_elimination = stats.iter().filter(|s| s.elimination_rate.is_none()).count();
    let excluded_absorption = stats.iter().filter(|s| s.absorption_rate.is_none()).count();
    Ok(StatsIntervals {
        peak: span(stats.iter().map(|s| s.peak)).unwrap(),
        peak_time: span(stats.iter().map(|s| s.peak_time)).unwrap(),
        auc: span(stats.iter().map(|s| s.auc)).unwrap(),
        elimination: span(stats.iter().filter_map(|s| s.elimination_rate)),
        absorption: span(stats.iter().filter_map(|s| s.absorption_rate)),
        excluded_elimination,
        excluded_absorption,
        evaluated: stats.len(),
    })
}

pub fn stats_credible_intervals(
    result: &DeconvolutionResult,
    rho: &PopulationParams,
    alpha: f64,
    n_samples: usize,
    seed: u64,
    threshold: f64,
) -> Result<StatsIntervals> {
    let samples = credible_samples(rho, alpha, n_samples, seed)?;
    let curves = tq_curves(result, rho, &samples)?;
    intervals_from_curves(&curves, result.tau(), threshold)
}

/// Intervals for the scalar variant from per-sample deterministic solves.
#[allow(clippy::too_many_arguments)]
pub fn stats_credible_intervals_scalar(
    tac: &[f64],
    rho: &PopulationParams,
    grid: &DiscretizationGrid,
    alpha: f64,
    n_samples: usize,
    seed: u64,
    r1: f64,
    r2: f64,
    threshold: f64,
) -> Result<StatsIntervals> {
    let samples = credible_samples(rho, alpha, n_samples, seed)?;
    let curves = scalar_curves(tac, grid, &samples, r1, r2)?;
    intervals_from_curves(&curves, grid.tau, threshold)
}

/// One episode of a statistics report.
#[derive(Debug, Clone)]
pub struct StatsReportRow {
    pub episode: String,
    pub measured: Option<EpisodeStats>,
    pub estimated: EpisodeStats,
    pub intervals: StatsIntervals,
}

const STAT_LABELS: [&str; 5] = ["I", "II", "III", "IV", "V"];

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

pub fn stats_report_csv(rows: &[StatsReportRow]) -> String {
    let mut header = vec!["episode".to_string()];
    header.extend(STAT_LABELS.iter().map(|l| format!("{l}_measured")));
    header.extend(STAT_LABELS.iter().map(|l| format!("{l}_estimated")));
    for l in STAT_LABELS {
        header.push(format!("{l}_lo"));
        header.push(format!("{l}_hi"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let mut cells = vec![r.episode.clone()];
        let measured = r.measured.map(|m| m.values()).unwrap_or([None; 5]);
        cells.extend(measured.iter().map(|v| opt_num(*v)));
        cells.extend(r.estimated.values().iter().map(|v| opt_num(*v)));
        for i in r.intervals.intervals() {
            cells.push(opt_num(i.map(|i| i.lo)));
            cells.push(opt_num(i.map(|i| i.hi)));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Deconvolution output table. Row `j` is time `jτ`; `measured_tac[j]` is
/// the resampled TAC at that instant and the fitted TAC is `y_j` (zero at
/// `j = 0`).
pub fn result_csv(result: &DeconvolutionResult, band: Option<&CredibleBand>, measured_tac: &[f64]) -> String {
    let mut out = String::from("t_minutes,mean_brac,lower_band,upper_band,fitted_tac,measured_tac\n");
    let tau = result.tau();
    for (j, &m) in result.mean_curve.iter().enumerate() {
        let (lo, hi) = band.map_or((String::new(), String::new()), |b| (fmt_f64(b.lower[j]), fmt_f64(b.upper[j])));
        let fitted = if j == 0 { 0.0 } else { result.fitted_tac[j - 1] };
        let meas = measured_tac.get(j).map_or(String::new(), |v| fmt_f64(*v));
        out.push_str(&format!("{},{},{},{},{},{}\n", fmt_f64(j as f64 * tau), fmt_f64(m), lo, hi, fmt_f64(fitted), meas));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deconvolution::build_problem;
    use crate::forward_model::discrete_ops;

    fn rho() -> PopulationParams {
        PopulationParams::new([0.0, 0.0], [1.4942, 2.0409], [0.6245, 1.0274], [[0.0259, 0.0067], [0.0067, 0.1227]]).unwrap()
    }

    fn triangle() -> Vec<f64> {
        (0..=120).map(|j| if j <= 60 { 0.08 * j as f64 / 60.0 } else { 0.08 * (120 - j) as f64 / 60.0 }).collect()
    }

    #[test]
    fn triangle_statistics() {
        let s = episode_stats(&triangle(), 1.0, 0.001).unwrap();
        assert_eq!(s.peak, 0.08);
        assert!((s.peak_time - 1.0).abs() < 1e-12);
        assert!((s.auc - 0.08).abs() < 1e-12);
        // Exact rates are 0.08 %/h; crossings are resolved to one τ step.
        let step = |t: f64| 0.08 / t;
        let e = s.elimination_rate.unwrap();
        let a = s.absorption_rate.unwrap();
        assert!(e <= step(59.0 / 60.0) + 1e-12 && e >= step(61.0 / 60.0) - 1e-12);
        assert!(a <= step(59.0 / 60.0) + 1e-12 && a >= step(61.0 / 60.0) - 1e-12);
    }

    #[test]
    fn zero_curve_statistics() {
        let s = episode_stats(&[0.0; 50], 1.0, 0.001).unwrap();
        assert_eq!((s.peak, s.auc, s.peak_time), (0.0, 0.0, 0.0));
        assert!(s.elimination_rate.is_none() && s.absorption_rate.is_none());
    }

    #[test]
    fn earliest_peak_wins() {
        let s = episode_stats(&[0.0, 0.05, 0.02, 0.05, 0.0], 30.0, 0.001).unwrap();
        assert_eq!(s.peak_time, 0.5);
    }

    #[test]
    fn missing_crossing_is_undefined() {
        let s = episode_stats(&[0.01, 0.03, 0.02], 10.0, 0.001).unwrap();
        assert!(s.elimination_rate.is_none());
        assert!(s.absorption_rate.is_none());
    }

    #[test]
    fn table_row_rendering() {
        let s = EpisodeStats {
            peak: 0.052,
            peak_time: 0.75,
            auc: 0.1019,
            elimination_rate: Some(0.0173),
            absorption_rate: Some(0.0693),
            threshold: 0.001,
        };
        assert_eq!(s.render_row(), "0.0520, 0.7500, 0.1019, 0.0173, 0.0693");
        assert_eq!(Interval { lo: 0.0286, hi: 0.0661 }.render(), "[0.0286,0.0661]");
    }

    #[test]
    fn rejects_negative_curve() {
        assert!(episode_stats(&[0.0, -0.1], 1.0, 0.001).is_err());
    }

    fn tq_result() -> DeconvolutionResult {
        let grid = DiscretizationGrid::default();
        let ops = discrete_ops(&rho(), &grid).unwrap();
        let u: Vec<f64> = triangle().into_iter().chain(std::iter::repeat_n(0.0, 119)).collect();
        let y = ops.simulate(&u);
        deconvolve(&build_problem(&ops, &grid, &y, 1e-3, 1e-3, Variant::Tq).unwrap()).unwrap()
    }

    #[test]
    fn band_properties() {
        let r = tq_result();
        let b75 = credible_band(&r, &rho(), 0.75, 400, 11).unwrap();
        let b25 = credible_band(&r, &rho(), 0.25, 400, 11).unwrap();
        let (pm1, pm2) = param_meshes(&rho(), &r.grid).unwrap();
        let mu = rho().mu;
        let c = pm1.cell_of(mu[0]).unwrap() + 4 * pm2.cell_of(mu[1]).unwrap();
        assert!(b75.contains(&r.cell_curve(c), 0.0));
        assert!(b75.lower.iter().zip(&b75.upper).all(|(l, u)| 0.0 <= *l && l <= u));
        for j in 0..b75.lower.len() {
            assert!(b75.lower[j] <= b25.lower[j] && b25.upper[j] <= b75.upper[j]);
        }
        assert_eq!(b75, credible_band(&r, &rho(), 0.75, 400, 11).unwrap());
    }

    #[test]
    fn intervals_nest_and_contain_mu() {
        let r = tq_result();
        let i25 = stats_credible_intervals(&r, &rho(), 0.25, 400, 5, 0.001).unwrap();
        let i75 = stats_credible_intervals(&r, &rho(), 0.75, 400, 5, 0.001).unwrap();
        let (pm1, pm2) = param_meshes(&rho(), &r.grid).unwrap();
        let c = pm1.cell_of(rho().mu[0]).unwrap() + 4 * pm2.cell_of(rho().mu[1]).unwrap();
        let at_mu = episode_stats(&r.cell_curve(c), 1.0, 0.001).unwrap();
        for ((a, b), v) in i25.intervals().iter().zip(i75.intervals()).zip(at_mu.values()) {
            if let (Some(a), Some(b)) = (a, b) {
                assert!(b.lo <= a.lo && a.hi <= b.hi);
                if let Some(v) = v {
                    assert!(a.contains(v));
                }
            }
        }
    }

    #[test]
    fn scalar_band_collapses_for_point_mass() {
        let grid = DiscretizationGrid::default();
        let tight = PopulationParams::new([0.0, 0.0], [1.4942, 2.0409], [0.6245, 1.0274], [[1e-10, 0.0], [0.0, 1e-10]]).unwrap();
        let q = tight.mu;
        let ops = DiscreteSystem::deterministic(q, grid.n, grid.tau).unwrap().discrete_time().unwrap();
        let u: Vec<f64> = triangle().into_iter().chain(std::iter::repeat_n(0.0, 119)).collect();
        let y = ops.simulate(&u);
        let _ = build_problem(&ops, &grid, &y, 0.0, 0.0, Variant::Scalar).unwrap();
        let b = credible_band_scalar(&y, &tight, &grid, 0.75, 50, 3, 1e-4, 1e-4).unwrap();
        let peak = b.upper.iter().cloned().fold(0.0, f64::max);
        assert!(b.width().iter().all(|w| *w <= 1e-3 * peak));
        assert_eq!(b, credible_band_scalar(&y, &tight, &grid, 0.75, 50, 3, 1e-4, 1e-4).unwrap());
    }

    #[test]
    fn report_csv_layout() {
        let s = episode_stats(&triangle(), 1.0, 0.001).unwrap();
        let i = intervals_from_curves(&[triangle()], 1.0, 0.001).unwrap();
        let csv = stats_report_csv(&[StatsReportRow { episode: "ep1".into(), measured: None, estimated: s, intervals: i }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 21);
        assert_eq!(lines[1].split(',').count(), 21);
        assert!(lines[1].starts_with("ep1,NA,NA,NA,NA,NA,0.08,"));
    }
}
