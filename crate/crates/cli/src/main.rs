use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use popdecon::data_io::{fmt_f64, parse_episode, parse_episodes, read_curve, resample, write_episode, KvConfig};
use popdecon::deconvolution::{build_problem, deconvolve, select_regularization, tac_targets, Variant};
use popdecon::density::PopulationParams;
use popdecon::forward_model::{discrete_ops, DiscretizationGrid};
use popdecon::population_fit::{fit_population, training_set, FitOptions};
use popdecon::synth::{generate, SynthConfig};
use popdecon::uncertainty::{self, result_csv, stats_report_csv, EpisodeStats, StatsReportRow};

#[derive(Parser)]
#[command(name = "popdecon", version, about = "Population-model deconvolution of breath alcohol from transdermal alcohol")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic episodes from a config file.
    Simulate {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_episodes: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Fit the parameter distribution to paired BrAC/TAC episodes.
    Fit(FitArgs),
    /// Estimate BrAC from a TAC episode with credible band and statistics.
    Deconvolve(DeconvolveArgs),
    /// Statistics I–V of a sampled BrAC curve.
    Stats {
        curve: PathBuf,
        /// Value column; defaults to the first column after `t_minutes`.
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(required = true)]
    episodes: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Discretisation `n,m1,m2`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Starting distribution (key=value file).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "rho.txt")]
    out: PathBuf,
    /// Iteration log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    pgtol: Option<f64>,
}

#[derive(Args)]
struct DeconvolveArgs {
    episode: PathBuf,
    /// Fitted distribution (key=value file).
    #[arg(long)]
    rho: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Number of temporal basis functions.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    /// Choose the regularisation weights from `--training` episodes.
    #[arg(long)]
    auto_reg: bool,
    #[arg(long, num_args = 1..)]
    training: Vec<PathBuf>,
    /// `tq` (default) or `scalar`.
    #[arg(long)]
    variant: Option<String>,
    /// Credible mass of the parameter disk.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Run finished but a solver did not meet its tolerance.
struct NotConverged(String);

type RunResult = Result<Option<NotConverged>>;

fn load_config(path: Option<&Path>) -> Result<KvConfig> {
    Ok(match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::parse("")?,
    })
}

fn override_kv<T: ToString>(kv: &mut KvConfig, key: &str, v: Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn apply_grid_flag(kv: &mut KvConfig, grid: Option<&str>) -> Result<()> {
    if let Some(g) = grid {
        let parts: Vec<&str> = g.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(popdecon::Error::Config(format!("--grid expects n,m1,m2, got '{g}'")).into());
        }
        for (k, v) in ["n", "m1", "m2"].iter().zip(parts) {
            kv.set(*k, v);
        }
    }
    Ok(())
}

fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(popdecon::Error::file(path))?;
    Ok(())
}

fn load_rho(path: &Path) -> Result<PopulationParams> {
    let text = fs::read_to_string(path).map_err(popdecon::Error::file(path))?;
    Ok(PopulationParams::from_kv(&text)?)
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, n_episodes: Option<usize>, noise_sigma: Option<f64>) -> RunResult {
    let mut kv = KvConfig::load(config)?;
    override_kv(&mut kv, "seed", seed);
    override_kv(&mut kv, "n_episodes", n_episodes);
    override_kv(&mut kv, "noise_sigma", noise_sigma);
    let cfg = SynthConfig::from_config(&kv)?;
    let eps = generate(&cfg)?;
    fs::create_dir_all(out).map_err(popdecon::Error::file(out))?;
    let mut manifest = String::from("episode,file,q1,q2\n");
    for g in &eps {
        let file = format!("{}.csv", g.episode.id);
        write_episode(&out.join(&file), &g.episode)?;
        let (q1, q2) = g.q.map_or((String::new(), String::new()), |q| (fmt_f64(q[0]), fmt_f64(q[1])));
        manifest.push_str(&format!("{},{file},{q1},{q2}\n", g.episode.id));
    }
    write_file(out.join("manifest.csv"), manifest)?;
    println!("wrote {} episodes to {}", eps.len(), out.display());
    Ok(None)
}

fn fit(a: FitArgs) -> RunResult {
    let mut kv = load_config(a.config.as_deref())?;
    apply_grid_flag(&mut kv, a.grid.as_deref())?;
    override_kv(&mut kv, "tau", a.tau);
    override_kv(&mut kv, "max_iter", a.max_iter);
    override_kv(&mut kv, "pgtol", a.pgtol);
    let grid = DiscretizationGrid::from_config(&kv)?;
    let mut opts = FitOptions::default();
    opts.max_iter = kv.usize_or("max_iter", opts.max_iter)?;
    opts.pgtol = kv.f64_or("pgtol", opts.pgtol)?;
    opts.layout.fix_lower = kv.bool_or("fix_lower", opts.layout.fix_lower)?;
    let init = a.init.as_deref().map(load_rho).transpose()?;
    let eps = parse_episodes(&a.episodes)?;
    let tr = training_set(&eps, grid.tau)?;
    let res = fit_population(&tr, &grid, init, &opts)?;
    write_file(&a.out, res.rho_star.to_kv())?;
    let log_path = a.log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.out.display())));
    write_file(&log_path, res.log_jsonl())?;
    println!("cost {:e} -> {:e} in {} iterations ({}); wrote {}", res.initial_cost, res.cost, res.iterations, res.message, a.out.display());
    Ok((!res.converged).then(|| NotConverged(format!("fit stopped before convergence: {}", res.message))))
}

fn deconvolve_cmd(a: DeconvolveArgs) -> RunResult {
    let mut kv = load_config(a.config.as_deref())?;
    apply_grid_flag(&mut kv, a.grid.as_deref())?;
    override_kv(&mut kv, "tau", a.tau);
    override_kv(&mut kv, "m", a.m);
    override_kv(&mut kv, "r1", a.r1);
    override_kv(&mut kv, "r2", a.r2);
    override_kv(&mut kv, "variant", a.variant.as_deref());
    override_kv(&mut kv, "alpha", a.alpha);
    override_kv(&mut kv, "n_samples", a.samples);
    override_kv(&mut kv, "seed", a.seed);
    override_kv(&mut kv, "threshold", a.threshold);
    let grid = DiscretizationGrid::from_config(&kv)?;
    let variant: Variant = kv.str_or("variant", "tq").parse()?;
    let alpha = kv.f64_or("alpha", uncertainty::DEFAULT_ALPHA)?;
    let n_samples = kv.usize_or("n_samples", uncertainty::DEFAULT_SAMPLES)?;
    let seed = kv.u64_or("seed", 0)?;
    let threshold = kv.f64_or("threshold", uncertainty::DEFAULT_THRESHOLD)?;
    let auto_reg = a.auto_reg || kv.bool_or("auto_reg", false)?;

    let rho = load_rho(&a.rho)?;
    let ep = parse_episode(&a.episode)?;
    let (r1, r2) = if auto_reg {
        if a.training.is_empty() {
            return Err(popdecon::Error::Config("--auto-reg needs training episodes (--training FILE...)".into()).into());
        }
        let training = parse_episodes(&a.training)?;
        let choice = select_regularization(&training, &rho, &grid, variant)?;
        info!("regularisation search: objective {:e}, converged {}", choice.objective, choice.converged);
        (choice.r1, choice.r2)
    } else {
        (kv.f64_or("r1", 0.0)?, kv.f64_or("r2", 0.0)?)
    };

    let tac = tac_targets(&ep, grid.tau)?;
    let ops = discrete_ops(&rho, &grid)?;
    let result = deconvolve(&build_problem(&ops, &grid, &tac, r1, r2, variant)?)?;
    let (band, intervals) = match variant {
        Variant::Tq => (
            uncertainty::credible_band(&result, &rho, alpha, n_samples, seed)?,
            uncertainty::stats_credible_intervals(&result, &rho, alpha, n_samples, seed, threshold)?,
        ),
        Variant::Scalar => (
            uncertainty::credible_band_scalar(&tac, &rho, &grid, alpha, n_samples, seed, r1, r2)?,
            uncertainty::stats_credible_intervals_scalar(&tac, &rho, &grid, alpha, n_samples, seed, r1, r2, threshold)?,
        ),
    };
    let estimated = uncertainty::episode_stats(&result.mean_curve, grid.tau, threshold)?;
    let measured: Option<EpisodeStats> =
        if ep.brac.len() >= 2 { Some(uncertainty::episode_stats(&resample(&ep.brac, grid.tau)?, grid.tau, threshold)?) } else { None };

    fs::create_dir_all(&a.out).map_err(popdecon::Error::file(&a.out))?;
    let measured_tac = resample(&ep.tac, grid.tau)?;
    let result_path = a.out.join(format!("{}_deconvolution.csv", ep.id));
    write_file(&result_path, result_csv(&result, Some(&band), &measured_tac))?;
    let row = StatsReportRow { episode: ep.id.clone(), measured, estimated, intervals };
    write_file(a.out.join(format!("{}_stats.csv", ep.id)), stats_report_csv(&[row]))?;
    let summary = format!(
        "variant={}\nr1={}\nr2={}\nresidual={}\nalpha={alpha}\nn_samples={n_samples}\nkept={}\nradius={}\nseed={seed}\n",
        match variant {
            Variant::Tq => "tq",
            Variant::Scalar => "scalar",
        },
        fmt_f64(r1),
        fmt_f64(r2),
        fmt_f64(result.residual),
        band.kept,
        fmt_f64(band.radius),
    );
    write_file(a.out.join(format!("{}_summary.txt", ep.id)), summary)?;
    println!("r1 {r1:e}, r2 {r2:e}, residual {:e}; wrote {}", result.residual, result_path.display());
    Ok((!result.nnls_converged).then(|| NotConverged("nonnegative solver hit its iteration cap".into())))
}

fn stats(curve: &Path, column: Option<&str>, threshold: Option<f64>, out: Option<&Path>) -> RunResult {
    let c = read_curve(curve, column)?;
    let s = uncertainty::episode_stats(&c.values, c.tau, threshold.unwrap_or(uncertainty::DEFAULT_THRESHOLD))?;
    let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_f64);
    let text =
        format!("peak,peak_time,auc,elimination_rate,absorption_rate\n{}\n", s.values().iter().map(|v| cell(*v)).collect::<Vec<_>>().join(","));
    match out {
        Some(p) => write_file(p, text)?,
        None => print!("{text}"),
    }
    Ok(None)
}

fn run(cli: Cli) -> RunResult {
    match cli.command {
        Command::Simulate { config, out, seed, n_episodes, noise_sigma } => simulate(&config, &out, seed, n_episodes, noise_sigma),
        Command::Fit(a) => fit(a),
        Command::Deconvolve(a) => deconvolve_cmd(a),
        Command::Stats { curve, column, threshold, out } => stats(&curve, column.as_deref(), threshold, out.as_deref()),
    }
}

/// 2 for usage, configuration and input problems; 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<popdecon::Error>() {
        Some(popdecon::Error::Numerical(_)) => 3,
        Some(popdecon::Error::Internal(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(NotConverged(msg))) => {
            warn!("{msg}");
            eprintln!("warning: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
