//! Twelve statistical features per IMF and the labelled instance table.
//!
//! All moments use the population (1/N) convention. The "moment" feature is
//! the third central moment and the "cumulant" feature is the fourth
//! cumulant `m4 - 3 m2^2`; see [`third_moment_feature`] and
//! [`cumulant_feature`]. The mode of a continuous series is the centre of the
//! fullest of 100 equal-width bins spanning `[min, max]`, lowest bin on ties.
//! Correlation is Pearson's r against the recording the IMF came from.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AuscultationSite, Label};
use crate::emd::Decomposition;
use crate::hilbert;

pub const FEATURE_COUNT: usize = 12;
pub const MODE_BINS: usize = 100;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "mean", "median", "std", "max", "min", "var", "mode", "corr", "kurt", "m3", "c4", "energy",
];

pub const CSV_HEADER: &str =
    "subject,channel,imf,label,mean,median,std,max,min,var,mode,corr,kurt,m3,c4,energy";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("series of length {0} is too short (need at least 2 samples)")]
    TooShort(usize),
    #[error("series and source differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot fit a normalizer on an empty matrix")]
    EmptyMatrix,
    #[error("row has {got} features, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Hilbert(#[from] hilbert::HilbertError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Which series the features are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// The IMF samples themselves.
    #[default]
    Imf,
    /// The instantaneous amplitude of the IMF's analytic signal.
    Envelope,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "imf" => Ok(Self::Imf),
            "envelope" => Ok(Self::Envelope),
            other => Err(format!("unknown feature source {other:?} (expected imf or envelope)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
    pub maximum: f64,
    pub minimum: f64,
    pub variance: f64,
    pub mode_binned: f64,
    pub corr_with_source: f64,
    pub kurtosis: f64,
    pub third_central_moment: f64,
    pub fourth_cumulant: f64,
    pub energy: f64,
}

impl FeatureVector {
    /// Values in CSV column order.
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.mean,
            self.median,
            self.std_dev,
            self.maximum,
            self.minimum,
            self.variance,
            self.mode_binned,
            self.corr_with_source,
            self.kurtosis,
            self.third_central_moment,
            self.fourth_cumulant,
            self.energy,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            mean: v[0],
            median: v[1],
            std_dev: v[2],
            maximum: v[3],
            minimum: v[4],
            variance: v[5],
            mode_binned: v[6],
            corr_with_source: v[7],
            kurtosis: v[8],
            third_central_moment: v[9],
            fourth_cumulant: v[10],
            energy: v[11],
        }
    }
}

/// Features plus a flag raised when a statistic was undefined (constant
/// series or constant source) and reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputedFeatures {
    pub vector: FeatureVector,
    pub degenerate: bool,
}

/// Central moments of order 2, 3 and 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralMoments {
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

pub fn third_moment_feature(m: &CentralMoments) -> f64 {
    m.m3
}

pub fn cumulant_feature(m: &CentralMoments) -> f64 {
    m.m4 - 3.0 * m.m2 * m.m2
}

fn median_of(series: &[f64]) -> f64 {
    let mut v = series.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn binned_mode(series: &[f64], min: f64, max: f64) -> f64 {
    if !(max > min) {
        return min;
    }
    let width = (max - min) / MODE_BINS as f64;
    let mut counts = [0usize; MODE_BINS];
    for &x in series {
        let b = (((x - min) / width).floor() as usize).min(MODE_BINS - 1);
        counts[b] += 1;
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = b;
        }
    }
    min + (best as f64 + 0.5) * width
}

pub fn compute_features(series: &[f64], source: &[f64]) -> Result<ComputedFeatures> {
    let n = series.len();
    if n < 2 {
        return Err(FeatureError::TooShort(n));
    }
    if source.len() != n {
        return Err(FeatureError::LengthMismatch(n, source.len()));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    let mut energy = 0.0;
    let mut maximum = f64::NEG_INFINITY;
    let mut minimum = f64::INFINITY;
    for &x in series {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        energy += x * x;
        maximum = maximum.max(x);
        minimum = minimum.min(x);
    }
    let moments = CentralMoments {
        m2: m2 / nf,
        m3: m3 / nf,
        m4: m4 / nf,
    };

    let source_mean = source.iter().sum::<f64>() / nf;
    let (mut sxy, mut syy) = (0.0, 0.0);
    for (&x, &y) in series.iter().zip(source) {
        let dy = y - source_mean;
        sxy += (x - mean) * dy;
        syy += dy * dy;
    }

    let mut degenerate = false;
    let corr = if m2 > 0.0 && syy > 0.0 {
        (sxy / (m2.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    } else {
        degenerate = true;
        0.0
    };
    let kurtosis = if moments.m2 > 0.0 {
        moments.m4 / (moments.m2 * moments.m2)
    } else {
        degenerate = true;
        0.0
    };

    Ok(ComputedFeatures {
        vector: FeatureVector {
            mean,
            median: median_of(series),
            std_dev: moments.m2.sqrt(),
            maximum,
            minimum,
            variance: moments.m2,
            mode_binned: binned_mode(series, minimum, maximum),
            corr_with_source: corr,
            kurtosis,
            third_central_moment: third_moment_feature(&moments),
            fourth_cumulant: cumulant_feature(&moments),
            energy,
        },
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInstance {
    pub subject_id: String,
    pub channel: AuscultationSite,
    /// 1-based IMF index; never the last IMF of its decomposition.
    pub imf_index: usize,
    pub vector: FeatureVector,
    pub label: Label,
}

/// One instance per IMF except the last; recordings with fewer than two IMFs
/// contribute nothing.
pub fn extract_instances(
    decomposition: &Decomposition,
    source: &[f64],
    subject_id: &str,
    channel: AuscultationSite,
    label: Label,
    feature_source: FeatureSource,
) -> Result<Vec<FeatureInstance>> {
    let count = decomposition.imfs.len();
    if count < 2 {
        log::warn!(
            "{subject_id}/{channel}: {count} IMF(s); recording contributes no instances"
        );
        return Ok(Vec::new());
    }
    decomposition.imfs[..count - 1]
        .iter()
        .map(|imf| {
            let computed = match feature_source {
                FeatureSource::Imf => compute_features(&imf.values, source)?,
                FeatureSource::Envelope => {
                    let amp = hilbert::hilbert_transform(&imf.values)?.amplitude();
                    compute_features(&amp, source)?
                }
            };
            if computed.degenerate {
                log::warn!("{subject_id}/{channel} IMF {}: degenerate statistics", imf.index);
            }
            Ok(FeatureInstance {
                subject_id: subject_id.to_string(),
                channel,
                imf_index: imf.index,
                vector: computed.vector,
                label,
            })
        })
        .collect()
}

/// Per-feature min-max scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(FeatureError::EmptyMatrix)?;
        let width = first.len();
        let mut min = first.clone();
        let mut max = first.clone();
        for row in rows {
            if row.len() != width {
                return Err(FeatureError::WidthMismatch {
                    expected: width,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    /// Maps each value to `[0, 1]`, clamping values outside the fitted
    /// range. A feature that was constant in training maps to 0.5.
    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.width() {
            return Err(FeatureError::WidthMismatch {
                expected: self.width(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 {
                    ((v - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect())
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// Labelled instances, optionally carrying the normalizer that was applied
/// to their vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub instances: Vec<FeatureInstance>,
    pub normalization: Option<Normalizer>,
}

impl FeatureMatrix {
    pub fn new(instances: Vec<FeatureInstance>) -> Self {
        Self {
            instances,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.instances.iter().map(|i| i.vector.to_array().to_vec()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

pub fn fit_normalizer(train: &FeatureMatrix) -> Result<Normalizer> {
    Normalizer::fit(&train.rows())
}

pub fn apply_normalizer(matrix: &FeatureMatrix, params: &Normalizer) -> Result<FeatureMatrix> {
    let instances = matrix
        .instances
        .iter()
        .map(|inst| {
            let row = params.apply_row(&inst.vector.to_array())?;
            let mut arr = [0.0; FEATURE_COUNT];
            arr.copy_from_slice(&row);
            Ok(FeatureInstance {
                vector: FeatureVector::from_array(arr),
                ..inst.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        instances,
        normalization: Some(params.clone()),
    })
}

/// Renders instances as CSV with 17 significant digits per value.
pub fn to_csv(instances: &[FeatureInstance]) -> String {
    let mut out = String::with_capacity(64 + instances.len() * 300);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for inst in instances {
        write!(out, "{},{},{},{}", inst.subject_id, inst.channel, inst.imf_index, inst.label).unwrap();
        for v in inst.vector.to_array() {
            write!(out, ",{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, instances: &[FeatureInstance]) -> Result<()> {
    fs::write(path, to_csv(instances)).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<FeatureInstance>> {
    let err = |line: usize, reason: String| FeatureError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(err(1, format!("expected header {CSV_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + FEATURE_COUNT {
            return Err(err(
                line_no,
                format!("{} fields, expected {}", fields.len(), 4 + FEATURE_COUNT),
            ));
        }
        let channel = fields[1].parse().map_err(|e| err(line_no, e))?;
        let imf_index = fields[2]
            .parse()
            .map_err(|e| err(line_no, format!("imf index: {e}")))?;
        let label = fields[3].parse().map_err(|e| err(line_no, e))?;
        let mut arr = [0.0; FEATURE_COUNT];
        for (j, f) in fields[4..].iter().enumerate() {
            arr[j] = f
                .trim()
                .parse()
                .map_err(|e| err(line_no, format!("{}: {e}", FEATURE_NAMES[j])))?;
        }
        out.push(FeatureInstance {
            subject_id: fields[0].to_string(),
            channel,
            imf_index,
            vector: FeatureVector::from_array(arr),
            label,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<FeatureInstance>> {
    let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text, path)
}
