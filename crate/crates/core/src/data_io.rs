//! Episode files, key-value configs, cubic-spline resampling and CSV output.
//!
//! Episode CSV layout (one file per episode):
//!
//! ```text
//! t_minutes,channel,value
//! 0,brac,0
//! 30,brac,0.05
//! 0,tac,0
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const EPISODE_HEADER: [&str; 3] = ["t_minutes", "channel", "value"];

/// Lossless decimal text for a float (shortest representation that round-trips).
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    Brac,
    Tac,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Brac => "brac",
            Channel::Tac => "tac",
        }
    }
}

/// One drinking episode: time-sorted `(minutes, value)` series per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub brac: Vec<(f64, f64)>,
    pub tac: Vec<(f64, f64)>,
}

impl Episode {
    pub fn new(id: impl Into<String>, brac: Vec<(f64, f64)>, tac: Vec<(f64, f64)>) -> Result<Self> {
        let ep = Self { id: id.into(), brac, tac };
        for (ch, s) in [(Channel::Brac, &ep.brac), (Channel::Tac, &ep.tac)] {
            check_series(&ep.id, ch, s)?;
        }
        Ok(ep)
    }

    /// Training requires both channels with at least two samples each.
    pub fn validate_training(&self) -> Result<()> {
        if self.brac.len() < 2 {
            return Err(Error::Validation(format!("episode '{}' has no usable BrAC series (need >= 2 samples)", self.id)));
        }
        self.validate_tac()
    }

    pub fn validate_tac(&self) -> Result<()> {
        if self.tac.len() < 2 {
            return Err(Error::Validation(format!("episode '{}' has no usable TAC series (need >= 2 samples)", self.id)));
        }
        Ok(())
    }

    /// Same episode with every timestamp shifted by `dt` minutes.
    pub fn shifted(&self, dt: f64) -> Result<Self> {
        let mv = |s: &[(f64, f64)]| s.iter().map(|&(t, v)| (t + dt, v)).collect();
        Self::new(self.id.clone(), mv(&self.brac), mv(&self.tac))
    }
}

fn check_series(id: &str, ch: Channel, s: &[(f64, f64)]) -> Result<()> {
    for w in s.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Validation(format!("episode '{id}': {} times not strictly increasing at t = {}", ch.as_str(), w[1].0)));
        }
    }
    if let Some(&(t, v)) = s.iter().find(|(t, v)| !t.is_finite() || !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("episode '{id}': invalid {} sample ({t}, {v})", ch.as_str())));
    }
    Ok(())
}

pub fn parse_episode(path: &Path) -> Result<Episode> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_episode_str(&text, &id, path)
}

/// Parses several episode files concurrently, keeping their order.
pub fn parse_episodes(paths: &[PathBuf]) -> Result<Vec<Episode>> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| parse_episode(p)).collect()
}

/// Parses episode CSV text; `path` is used only in error messages.
pub fn parse_episode_str(text: &str, id: &str, path: &Path) -> Result<Episode> {
    let perr = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != EPISODE_HEADER {
        return Err(perr(1, format!("expected header '{}', found '{}'", EPISODE_HEADER.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut series: BTreeMap<Channel, Vec<(f64, f64, u64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(perr(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(line, format!("invalid {what} '{s}'")))
        };
        let t = num(&rec[0], "time")?;
        let channel = match &rec[1] {
            "brac" => Channel::Brac,
            "tac" => Channel::Tac,
            other => return Err(perr(line, format!("unknown channel '{other}' (expected brac or tac)"))),
        };
        let v = num(&rec[2], "value")?;
        if v < 0.0 {
            return Err(perr(line, format!("negative {} value {v}", channel.as_str())));
        }
        let s = series.entry(channel).or_default();
        if let Some(&(tp, _, lp)) = s.last() {
            if t == tp {
                return Err(perr(line, format!("duplicate {} sample at t = {t} (first seen on line {lp})", channel.as_str())));
            }
            if t < tp {
                return Err(perr(line, format!("{} timestamps not increasing ({t} after {tp})", channel.as_str())));
            }
        }
        s.push((t, v, line));
    }
    let mut take = |c| series.remove(&c).unwrap_or_default().into_iter().map(|(t, v, _)| (t, v)).collect();
    let brac = take(Channel::Brac);
    let tac = take(Channel::Tac);
    Episode::new(id, brac, tac)
}

pub fn episode_to_csv(ep: &Episode) -> String {
    let mut out = EPISODE_HEADER.join(",") + "\n";
    for (ch, s) in [(Channel::Brac, &ep.brac), (Channel::Tac, &ep.tac)] {
        for &(t, v) in s {
            out.push_str(&format!("{},{},{}\n", fmt_f64(t), ch.as_str(), fmt_f64(v)));
        }
    }
    out
}

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    fs::write(path, episode_to_csv(ep)).map_err(Error::file(path))?;
    Ok(())
}

/// Natural cubic spline through strictly increasing knots.
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Domain(format!("spline needs at least 2 points, got {n}")));
        }
        let x: Vec<f64> = points.iter().map(|p| p.0).collect();
        let y: Vec<f64> = points.iter().map(|p| p.1).collect();
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sup = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                sup[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let sub = x[i + 1] - x[i];
                let f = sub / diag[i - 1];
                diag[i] -= f * sup[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - sup[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    pub fn knots(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    /// Evaluates the spline; outside the knot range the end cubics are extended.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&xk| xk <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Values of the clamped natural spline at `0, τ, 2τ, …, floor(T_last/τ)·τ`.
/// Grid points before the first sample are 0.
pub fn resample(points: &[(f64, f64)], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("resampling step must be positive, got {tau}")));
    }
    let spline = NaturalCubicSpline::new(points)?;
    let (t0, t1) = spline.knots();
    if t1 < 0.0 {
        return Err(Error::Domain("series lies entirely before t = 0".into()));
    }
    let k = (t1 / tau + 1e-9).floor() as usize + 1;
    Ok((0..k)
        .map(|j| {
            let t = j as f64 * tau;
            if t < t0 - 1e-9 * tau {
                0.0
            } else {
                spline.eval(t.min(t1)).max(0.0)
            }
        })
        .collect())
}

/// Flat `key = value` configuration. `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, Path::new("<config>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_named(&text, path)
    }

    fn parse_named(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { path: path.to_path_buf(), line: i as u64 + 1, msg: format!("expected key=value, found '{line}'") });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse { path: path.to_path_buf(), line: i as u64 + 1, msg: "empty key".into() });
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse { path: path.to_path_buf(), line: i as u64 + 1, msg: format!("duplicate key '{k}'") });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        v.parse().map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.contains(key) {
            self.require_f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a non-negative integer"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a non-negative integer"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("key '{key}': '{v}' is not a boolean"))),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }
}

/// Writes a numeric table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(Error::file(path))?);
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// A uniformly sampled curve read from a CSV with a `t_minutes` column.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    pub tau: f64,
    pub values: Vec<f64>,
}

/// Reads column `column` (or the first column after `t_minutes`) from a
/// CSV whose times are uniformly spaced starting at 0.
pub fn read_curve(path: &Path, column: Option<&str>) -> Result<SampledCurve> {
    let perr = |line: u64, msg: String| Error::Parse { path: PathBuf::from(path), line, msg };
    let file = fs::File::open(path).map_err(Error::file(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers()?.clone();
    let t_col = header.iter().position(|h| h == "t_minutes").ok_or_else(|| perr(1, "missing 't_minutes' column".into()))?;
    let v_col = match column {
        Some(c) => header.iter().position(|h| h == c).ok_or_else(|| perr(1, format!("missing '{c}' column")))?,
        None => (0..header.len()).find(|&i| i != t_col).ok_or_else(|| perr(1, "no value column".into()))?,
    };
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line, format!("bad number in column {}", i + 1)))
        };
        ts.push(get(t_col)?);
        let v = get(v_col)?;
        if v < 0.0 {
            return Err(perr(line, format!("negative value {v}")));
        }
        vs.push(v);
    }
    if ts.len() < 2 {
        return Err(Error::Validation(format!("{}: need at least 2 samples", path.display())));
    }
    let tau = ts[1] - ts[0];
    let uniform = ts.iter().enumerate().all(|(j, &t)| (t - ts[0] - j as f64 * tau).abs() <= 1e-6 * tau.abs().max(1.0));
    if !(tau > 0.0) || ts[0].abs() > 1e-9 || !uniform {
        return Err(Error::Validation(format!("{}: times must be uniformly spaced starting at 0", path.display())));
    }
    Ok(SampledCurve { tau, values: vs })
}
