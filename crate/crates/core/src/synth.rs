//! Synthetic episodes with known ground truth.
//!
//! Each episode scales and stretches a piecewise-linear BrAC template, records
//! BrAC every `brac_cadence` minutes, drives the model with the
//! spline-resampled record (exactly the input a fit will see) and records TAC
//! every `tac_cadence` minutes with clamped Gaussian noise.
//!
//! Random streams: episode `i` uses a ChaCha8 generator seeded with `seed` on
//! stream `i`, so episodes are independent of how many are generated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data_io::{resample, Episode, KvConfig};
use crate::density::{PopulationParams, TruncatedNormal};
use crate::error::{Error, Result};
use crate::forward_model::{discrete_ops, DiscreteSystem, DiscretizationGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// TAC is the population-model output at the true distribution.
    Population,
    /// Each episode draws its own `q` and uses the single-parameter model.
    Individual,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub rho_true: PopulationParams,
    /// Piecewise-linear BrAC template `(minutes, percent)`.
    pub input_profile: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    pub n_episodes: usize,
    pub seed: u64,
    pub grid: DiscretizationGrid,
    pub mode: SynthMode,
    pub brac_cadence: f64,
    pub tac_cadence: f64,
    /// Record length in minutes; `None` adds four hours after the template.
    pub duration: Option<f64>,
    /// Random peak scaling `[1 − j, 1 + j]` and time stretching per episode.
    pub jitter: f64,
}

pub fn default_profile() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (60.0, 0.08), (240.0, 0.0)]
}

impl SynthConfig {
    pub fn new(rho_true: PopulationParams) -> Self {
        Self {
            rho_true,
            input_profile: default_profile(),
            noise_sigma: 0.0,
            n_episodes: 5,
            seed: 0,
            grid: DiscretizationGrid::default(),
            mode: SynthMode::Population,
            brac_cadence: 30.0,
            tac_cadence: 5.0,
            duration: None,
            jitter: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rho_true.validate()?;
        self.grid.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        if self.input_profile.len() < 2 || self.input_profile.windows(2).any(|w| !(w[1].0 > w[0].0)) || self.input_profile.iter().any(|p| p.1 < 0.0) {
            return Err(Error::Config("input_profile needs >= 2 points with increasing times and nonnegative values".into()));
        }
        for (name, c) in [("brac_cadence", self.brac_cadence), ("tac_cadence", self.tac_cadence)] {
            let steps = c / self.grid.tau;
            if !(c > 0.0) || (steps - steps.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} = {c} must be a positive multiple of tau = {}", self.grid.tau)));
            }
        }
        Ok(())
    }

    /// Reads a flat config. Distribution keys carry the `rho_true.` prefix;
    /// the template is `profile = t0:v0, t1:v1, …`.
    pub fn from_config(kv: &KvConfig) -> Result<Self> {
        let rho = PopulationParams::from_config(kv, "rho_true.")?;
        let mut c = Self::new(rho);
        c.grid = DiscretizationGrid::from_config(kv)?;
        c.noise_sigma = kv.f64_or("noise_sigma", c.noise_sigma)?;
        c.n_episodes = kv.usize_or("n_episodes", c.n_episodes)?;
        c.seed = kv.u64_or("seed", c.seed)?;
        c.brac_cadence = kv.f64_or("brac_cadence", c.brac_cadence)?;
        c.tac_cadence = kv.f64_or("tac_cadence", c.tac_cadence)?;
        c.jitter = kv.f64_or("jitter", c.jitter)?;
        if kv.contains("duration") {
            c.duration = Some(kv.require_f64("duration")?);
        }
        c.mode = match kv.str_or("mode", "population") {
            "population" => SynthMode::Population,
            "individual" => SynthMode::Individual,
            other => return Err(Error::Config(format!("mode must be 'population' or 'individual', got '{other}'"))),
        };
        if let Some(p) = kv.get("profile") {
            c.input_profile = parse_profile(p)?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn parse_profile(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|pair| {
            let (t, v) = pair.split_once(':').ok_or_else(|| Error::Config(format!("profile entry '{pair}' is not t:v")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("profile entry '{pair}' is not numeric")));
            Ok((num(t)?, num(v)?))
        })
        .collect()
}

/// Linear interpolation of the template; zero outside it.
pub fn profile_value(profile: &[(f64, f64)], t: f64) -> f64 {
    if t < profile[0].0 || t > profile[profile.len() - 1].0 {
        return 0.0;
    }
    let i = profile.partition_point(|p| p.0 <= t).clamp(1, profile.len() - 1);
    let (a, b) = (profile[i - 1], profile[i]);
    a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
}

#[derive(Debug, Clone)]
pub struct GeneratedEpisode {
    pub episode: Episode,
    /// Per-episode parameter in individual mode.
    pub q: Option<[f64; 2]>,
    /// Noise-free TAC at the recorded instants.
    pub clean_tac: Vec<f64>,
    /// The input the model was driven with, `u_j` at `jτ`.
    pub input: Vec<f64>,
}

fn episode_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<GeneratedEpisode>> {
    cfg.validate()?;
    let pop_ops = match cfg.mode {
        SynthMode::Population => Some(discrete_ops(&cfg.rho_true, &cfg.grid)?),
        SynthMode::Individual => None,
    };
    let dist = match cfg.mode {
        SynthMode::Individual => Some(TruncatedNormal::new(cfg.rho_true)?),
        SynthMode::Population => None,
    };
    (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(cfg.seed, i);
            let scale = 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
            let stretch = 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
            let profile: Vec<(f64, f64)> = cfg.input_profile.iter().map(|&(t, v)| (t * stretch, v * scale)).collect();
            let lcm = cfg.brac_cadence.max(cfg.tac_cadence);
            let raw_end = cfg.duration.unwrap_or(profile[profile.len() - 1].0 + 240.0);
            let end = (raw_end / lcm).ceil() * lcm;
            let nb = (end / cfg.brac_cadence).round() as usize;
            let brac: Vec<(f64, f64)> = (0..=nb)
                .map(|k| {
                    let t = k as f64 * cfg.brac_cadence;
                    (t, profile_value(&profile, t))
                })
                .collect();
            let mut u = resample(&brac, cfg.grid.tau)?;
            let steps = (end / cfg.grid.tau).round() as usize;
            u.resize(steps, 0.0);
            let (y, q) = match (&pop_ops, &dist) {
                (Some(ops), _) => (ops.simulate(&u), None),
                (None, Some(d)) => {
                    let sub_seed = rng.random::<u64>();
                    let q = d.sample(1, sub_seed)?[0];
                    let ops = DiscreteSystem::deterministic(q, cfg.grid.n, cfg.grid.tau)?.discrete_time()?;
                    (ops.simulate(&u), Some(q))
                }
                _ => unreachable!(),
            };
            let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let stride = (cfg.tac_cadence / cfg.grid.tau).round() as usize;
            let mut clean = Vec::new();
            let mut tac = Vec::new();
            for j in (0..=steps).step_by(stride) {
                let v = if j == 0 { 0.0 } else { y[j - 1] };
                clean.push(v);
                // The discretised model can dip a hair below zero early on; recorded
                // values are clamped like a sensor reading.
                let noisy = if cfg.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v }.max(0.0);
                tac.push((j as f64 * cfg.grid.tau, noisy));
            }
            let episode = Episode::new(format!("ep{:03}", i + 1), brac, tac)?;
            Ok(GeneratedEpisode { episode, q, clean_tac: clean, input: u })
        })
        .collect()
}
