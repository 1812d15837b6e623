//! Empirical mode decomposition.
//!
//! A series is split into intrinsic mode functions (IMFs) by repeated
//! sifting: the mean of the cubic-spline envelopes through the local maxima
//! and minima is subtracted until the candidate stops changing (the SD rule)
//! and its extrema and zero-crossing counts differ by at most one. Each IMF
//! is removed from the running residual and the process repeats until the
//! residual no longer oscillates.
//!
//! Envelope construction details that affect the numbers:
//! - extrema are strict three-point extrema; a plateau of equal values
//!   contributes its lower-median index;
//! - the two extrema nearest each end are mirrored about the end sample
//!   (`x -> -x` on the left, `x -> 2(n-1) - x` on the right);
//! - the spline uses natural end conditions on the extended knot set.

pub mod spline;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use spline::{CubicSpline, EndCondition, SplineError};

#[derive(Debug, Error)]
pub enum EmdError {
    #[error("series of length {0} is too short (need at least 3 samples)")]
    TooShort(usize),
    #[error("{found} envelope knots after boundary extension; at least 2 are required")]
    TooFewExtrema { found: usize },
    #[error("invalid sift configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed decomposition file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

pub type Result<T, E = EmdError> = std::result::Result<T, E>;

/// How extrema are extended past the ends of the series before the spline
/// fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Reflect the two extrema nearest each end about that end sample.
    #[default]
    Mirror,
    /// Fit through the extrema as given; the spline continues linearly past
    /// the outermost knots.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftConfig {
    /// SD stopping threshold, `sum (h_prev - h)^2 / sum h_prev^2`.
    pub sd_threshold: f64,
    pub max_sift_iterations: usize,
    pub max_imfs: usize,
    pub boundary: Boundary,
    /// Stop once `||residual||^2 < ratio * ||input||^2`; `0` disables the
    /// rule.
    pub min_residual_energy_ratio: f64,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            sd_threshold: 0.25,
            max_sift_iterations: 100,
            max_imfs: 10,
            boundary: Boundary::Mirror,
            min_residual_energy_ratio: 0.005,
        }
    }
}

impl SiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd_threshold > 0.0 && self.sd_threshold < 1.0) {
            return Err(EmdError::InvalidConfig(format!(
                "sd_threshold must lie in (0, 1), got {}",
                self.sd_threshold
            )));
        }
        if self.max_sift_iterations == 0 || self.max_imfs == 0 {
            return Err(EmdError::InvalidConfig(
                "max_sift_iterations and max_imfs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.min_residual_energy_ratio) {
            return Err(EmdError::InvalidConfig(format!(
                "min_residual_energy_ratio must lie in [0, 1), got {}",
                self.min_residual_energy_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extrema {
    pub maxima: Vec<usize>,
    pub minima: Vec<usize>,
}

impl Extrema {
    pub fn count(&self) -> usize {
        self.maxima.len() + self.minima.len()
    }
}

/// Strict local extrema by three-point comparison. A run of equal values
/// bounded by lower (higher) neighbours on both sides is one maximum
/// (minimum) located at the run's lower-median index. Runs touching either
/// end of the series never count.
pub fn find_extrema(series: &[f64]) -> Result<Extrema> {
    let n = series.len();
    if n < 3 {
        return Err(EmdError::TooShort(n));
    }
    let mut out = Extrema::default();
    let mut start = 1;
    while start < n - 1 {
        let v = series[start];
        let mut end = start;
        while end + 1 < n && series[end + 1] == v {
            end += 1;
        }
        if end < n - 1 {
            let before = series[start - 1];
            let after = series[end + 1];
            let mid = (start + end) / 2;
            if before < v && after < v {
                out.maxima.push(mid);
            } else if before > v && after > v {
                out.minima.push(mid);
            }
        }
        start = end + 1;
    }
    Ok(out)
}

/// Sign changes across the series, skipping exact zeros.
pub fn count_zero_crossings(series: &[f64]) -> usize {
    let mut last = 0.0f64;
    let mut count = 0;
    for &x in series {
        if x == 0.0 {
            continue;
        }
        if last != 0.0 && (x > 0.0) != (last > 0.0) {
            count += 1;
        }
        last = x;
    }
    count
}

/// Extrema and zero-crossing counts differ by at most one.
pub fn satisfies_imf_counts(series: &[f64]) -> bool {
    match find_extrema(series) {
        Ok(e) => e.count().abs_diff(count_zero_crossings(series)) <= 1,
        Err(_) => false,
    }
}

fn energy(series: &[f64]) -> f64 {
    series.iter().map(|x| x * x).sum()
}

fn is_monotone(series: &[f64]) -> bool {
    series.windows(2).all(|w| w[1] >= w[0]) || series.windows(2).all(|w| w[1] <= w[0])
}

/// Natural cubic spline through `extrema` (sample index, value), evaluated at
/// every index in `0..length`.
pub fn spline_envelope(
    extrema: &[(usize, f64)],
    length: usize,
    boundary: Boundary,
) -> Result<Vec<f64>> {
    let mut knots: Vec<(f64, f64)> = extrema.iter().map(|&(i, v)| (i as f64, v)).collect();
    knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    knots.dedup_by(|a, b| a.0 == b.0);

    if boundary == Boundary::Mirror && !knots.is_empty() {
        let last_x = length.saturating_sub(1) as f64;
        let left: Vec<(f64, f64)> = knots
            .iter()
            .take(2)
            .filter(|k| k.0 > 0.0)
            .map(|&(x, v)| (-x, v))
            .collect();
        let right: Vec<(f64, f64)> = knots
            .iter()
            .rev()
            .take(2)
            .filter(|k| k.0 < last_x)
            .map(|&(x, v)| (2.0 * last_x - x, v))
            .collect();
        knots.extend(left);
        knots.extend(right);
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        knots.dedup_by(|a, b| a.0 == b.0);
    }

    if knots.len() < 2 {
        return Err(EmdError::TooFewExtrema { found: knots.len() });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = knots.into_iter().unzip();
    let spline = CubicSpline::new(&xs, &ys, EndCondition::Natural)
        .expect("knots are sorted and deduplicated");
    Ok(spline.eval_grid(length))
}

/// One intrinsic mode function.
#[derive(Debug, Clone, PartialEq)]
pub struct Imf {
    pub values: Vec<f64>,
    /// 1-based position in the decomposition.
    pub index: usize,
    pub sift_iterations: usize,
}

/// Result of sifting a single component out of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Both the SD rule and the extrema/zero-crossing condition held when
    /// sifting stopped.
    pub converged: bool,
}

fn envelope_mean(h: &[f64], ext: &Extrema, boundary: Boundary) -> Option<Vec<f64>> {
    if ext.maxima.is_empty() || ext.minima.is_empty() {
        return None;
    }
    let pts = |idx: &[usize]| idx.iter().map(|&i| (i, h[i])).collect::<Vec<_>>();
    let upper = spline_envelope(&pts(&ext.maxima), h.len(), boundary).ok()?;
    let lower = spline_envelope(&pts(&ext.minima), h.len(), boundary).ok()?;
    Some(upper.iter().zip(&lower).map(|(u, l)| 0.5 * (u + l)).collect())
}

/// Extra sifting budget, in multiples of `max_sift_iterations`, granted to a
/// candidate that reaches the cap without a valid extrema/zero-crossing
/// balance.
pub const OVERRUN_FACTOR: usize = 9;

/// Sifts the first intrinsic mode out of `series`.
///
/// Iterates `h <- h - mean(upper, lower)` until
/// `SD = sum (h_prev - h)^2 / sum h_prev^2 < sd_threshold` and the candidate
/// has matching extrema and zero-crossing counts, or the iteration cap is
/// hit. A candidate that still fails the count condition at the cap keeps
/// sifting, on the count condition alone, for up to
/// `OVERRUN_FACTOR * max_sift_iterations` further iterations. Sifting also
/// stops early if the candidate loses its maxima or minima.
pub fn extract_imf(series: &[f64], config: &SiftConfig) -> Result<SiftOutcome> {
    config.validate()?;
    let first = find_extrema(series)?;
    if first.count() < 3 {
        return Err(EmdError::TooFewExtrema {
            found: first.count(),
        });
    }

    let mut h = series.to_vec();
    let mut ext = first;
    let mut iterations = 0;
    let mut converged = false;
    let ceiling = config.max_sift_iterations * (1 + OVERRUN_FACTOR);
    while iterations < ceiling {
        let Some(mean) = envelope_mean(&h, &ext, config.boundary) else {
            break;
        };
        let mut num = 0.0;
        let mut den = 0.0;
        let next: Vec<f64> = h
            .iter()
            .zip(&mean)
            .map(|(&prev, &m)| {
                let v = prev - m;
                num += (prev - v) * (prev - v);
                den += prev * prev;
                v
            })
            .collect();
        iterations += 1;
        h = next;
        ext = find_extrema(&h)?;
        let sd = if den > 0.0 { num / den } else { 0.0 };
        let counts_ok = ext.count().abs_diff(count_zero_crossings(&h)) <= 1;
        if counts_ok && (sd < config.sd_threshold || iterations >= config.max_sift_iterations) {
            converged = true;
            break;
        }
    }
    Ok(SiftOutcome {
        values: h,
        iterations,
        converged,
    })
}

/// IMFs plus the final residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub imfs: Vec<Imf>,
    pub residual: Vec<f64>,
}

impl Decomposition {
    pub fn len(&self) -> usize {
        self.imfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imfs.is_empty()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = self.residual.clone();
        for imf in &self.imfs {
            for (o, v) in out.iter_mut().zip(&imf.values) {
                *o += v;
            }
        }
        out
    }

    /// `||input - (sum IMFs + residual)||_2 / ||input||_2`; zero input
    /// yields the absolute error norm.
    pub fn reconstruction_error(&self, input: &[f64]) -> f64 {
        let rec = self.reconstruct();
        let err: f64 = input
            .iter()
            .zip(&rec)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = input.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            err / norm
        } else {
            err
        }
    }
}

/// Decomposes `series` into IMFs and a residual.
///
/// Extraction stops when the residual has fewer than 3 extrema, is
/// monotone, holds less than `min_residual_energy_ratio` of the input
/// energy, or `max_imfs` components have been taken. A candidate whose
/// sifting did not converge to a valid IMF is left in the residual and ends
/// the decomposition, so every returned IMF satisfies the
/// extrema/zero-crossing condition.
pub fn decompose(series: &[f64], config: &SiftConfig) -> Result<Decomposition> {
    config.validate()?;
    let mut residual = series.to_vec();
    let mut imfs = Vec::new();
    if series.len() < 3 {
        return Ok(Decomposition { imfs, residual });
    }
    let input_energy = energy(series);
    while imfs.len() < config.max_imfs {
        if is_monotone(&residual) || find_extrema(&residual)?.count() < 3 {
            break;
        }
        if !imfs.is_empty() && energy(&residual) < config.min_residual_energy_ratio * input_energy {
            break;
        }
        let outcome = extract_imf(&residual, config)?;
        if !satisfies_imf_counts(&outcome.values) {
            log::debug!(
                "sifting stopped after {} iterations without a valid IMF; keeping remainder as residual",
                outcome.iterations
            );
            break;
        }
        for (r, v) in residual.iter_mut().zip(&outcome.values) {
            *r -= v;
        }
        imfs.push(Imf {
            values: outcome.values,
            index: imfs.len() + 1,
            sift_iterations: outcome.iterations,
        });
    }
    Ok(Decomposition { imfs, residual })
}

/// Summary written next to the per-component CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub samples: usize,
    pub sample_rate_hz: Option<u32>,
    pub imf_count: usize,
    pub sift_iterations: Vec<usize>,
    pub files: Vec<String>,
    pub residual_file: String,
}

fn write_series(path: &Path, values: &[f64]) -> Result<()> {
    let io = |source| EmdError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for v in values {
        writeln!(w, "{v:.16e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_series(path: &Path) -> Result<Vec<f64>> {
    let io = |source| EmdError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|e| EmdError::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Writes `imf_1.csv .. imf_n.csv`, `residual.csv` and `decomposition.json`
/// into `dir` (created if missing). Values carry 17 significant digits.
pub fn write_decomposition(
    dir: &Path,
    decomposition: &Decomposition,
    sample_rate_hz: Option<u32>,
) -> Result<DecompositionSummary> {
    fs::create_dir_all(dir).map_err(|source| EmdError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for imf in &decomposition.imfs {
        let name = format!("imf_{}.csv", imf.index);
        write_series(&dir.join(&name), &imf.values)?;
        files.push(name);
    }
    let residual_file = "residual.csv".to_string();
    write_series(&dir.join(&residual_file), &decomposition.residual)?;
    let summary = DecompositionSummary {
        samples: decomposition.residual.len(),
        sample_rate_hz,
        imf_count: decomposition.imfs.len(),
        sift_iterations: decomposition.imfs.iter().map(|i| i.sift_iterations).collect(),
        files,
        residual_file,
    };
    let path = dir.join("decomposition.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(&path, json + "\n").map_err(|source| EmdError::Io { path, source })?;
    Ok(summary)
}

/// Reads back a directory produced by [`write_decomposition`].
pub fn read_decomposition(dir: &Path) -> Result<(Decomposition, DecompositionSummary)> {
    let path = dir.join("decomposition.json");
    let text = fs::read_to_string(&path).map_err(|source| EmdError::Io {
        path: path.clone(),
        source,
    })?;
    let summary: DecompositionSummary =
        serde_json::from_str(&text).map_err(|e| EmdError::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    let mut imfs = Vec::with_capacity(summary.files.len());
    for (k, name) in summary.files.iter().enumerate() {
        let values = read_series(&dir.join(name))?;
        if values.len() != summary.samples {
            return Err(EmdError::Malformed {
                path: dir.join(name),
                reason: format!("{} samples, expected {}", values.len(), summary.samples),
            });
        }
        imfs.push(Imf {
            values,
            index: k + 1,
            sift_iterations: summary.sift_iterations.get(k).copied().unwrap_or(0),
        });
    }
    let residual = read_series(&dir.join(&summary.residual_file))?;
    Ok((Decomposition { imfs, residual }, summary))
}
