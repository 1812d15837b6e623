//! Hilbert spectral analysis of IMFs.
//!
//! The analytic signal is formed in the frequency domain at the natural
//! length of the series (no padding): negative-frequency bins are zeroed,
//! positive ones doubled, DC and (for even lengths) Nyquist kept, and the
//! result inverse-transformed. `rustfft` plans mixed-radix or Bluestein
//! kernels as the length requires.

use std::f64::consts::{PI, TAU};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emd::Decomposition;

#[derive(Debug, Error, PartialEq)]
pub enum HilbertError {
    #[error("series of length {0} is too short for a Hilbert transform (need at least 2)")]
    TooShort(usize),
    #[error("decomposition has no IMFs")]
    EmptyDecomposition,
    #[error("real and imaginary parts differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSignal {
    pub real_part: Vec<f64>,
    /// Hilbert transform of `real_part`.
    pub imag_part: Vec<f64>,
}

impl AnalyticSignal {
    pub fn new(real_part: Vec<f64>, imag_part: Vec<f64>) -> Result<Self, HilbertError> {
        if real_part.len() != imag_part.len() {
            return Err(HilbertError::LengthMismatch(real_part.len(), imag_part.len()));
        }
        Ok(Self {
            real_part,
            imag_part,
        })
    }

    pub fn len(&self) -> usize {
        self.real_part.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real_part.is_empty()
    }

    /// Modulus at every sample.
    pub fn amplitude(&self) -> Vec<f64> {
        self.real_part
            .iter()
            .zip(&self.imag_part)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

/// Instantaneous amplitude, unwrapped phase and forward-difference frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantAttributes {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    /// One shorter than `amplitude`.
    pub frequency_hz: Vec<f64>,
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    fft.process(buf);
}

pub fn hilbert_transform(series: &[f64]) -> Result<AnalyticSignal, HilbertError> {
    let n = series.len();
    if n < 2 {
        return Err(HilbertError::TooShort(n));
    }
    let mut spectrum: Vec<Complex64> = series.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut spectrum, false);

    let half = n / 2;
    // Bins 1..ceil(n/2) are strictly positive; for even n bin n/2 is Nyquist.
    let positive_end = if n % 2 == 0 { half } else { half + 1 };
    for bin in &mut spectrum[1..positive_end] {
        *bin *= 2.0;
    }
    for bin in &mut spectrum[half + 1..] {
        *bin = Complex64::new(0.0, 0.0);
    }

    fft_in_place(&mut spectrum, true);
    let scale = 1.0 / n as f64;
    Ok(AnalyticSignal {
        real_part: series.to_vec(),
        imag_part: spectrum.iter().map(|c| c.im * scale).collect(),
    })
}

/// Unwraps a phase series so successive differences lie in `(-pi, pi]`.
pub fn unwrap_phase(wrapped: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(wrapped.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &p in wrapped {
        if let Some(q) = prev {
            let d = p - q;
            if d > PI {
                offset -= TAU * ((d + PI) / TAU).floor();
            } else if d < -PI {
                offset += TAU * ((-d + PI) / TAU).floor();
            }
        }
        out.push(p + offset);
        prev = Some(p);
    }
    out
}

pub fn instant_attributes(analytic: &AnalyticSignal, sample_rate_hz: u32) -> InstantAttributes {
    let amplitude = analytic.amplitude();
    let wrapped: Vec<f64> = analytic
        .real_part
        .iter()
        .zip(&analytic.imag_part)
        .map(|(r, i)| i.atan2(*r))
        .collect();
    let phase = unwrap_phase(&wrapped);
    let k = f64::from(sample_rate_hz) / TAU;
    let frequency_hz = phase.windows(2).map(|w| (w[1] - w[0]) * k).collect();
    InstantAttributes {
        amplitude,
        phase,
        frequency_hz,
    }
}

/// Instantaneous attributes of every IMF, in IMF order.
pub fn hilbert_spectrum(
    decomposition: &Decomposition,
    sample_rate_hz: u32,
) -> Result<Vec<InstantAttributes>, HilbertError> {
    if decomposition.imfs.is_empty() {
        return Err(HilbertError::EmptyDecomposition);
    }
    decomposition
        .imfs
        .iter()
        .map(|imf| Ok(instant_attributes(&hilbert_transform(&imf.values)?, sample_rate_hz)))
        .collect()
}

/// Median and interquartile range of a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            median: quantile_sorted(&v, 0.5),
            iqr: quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
        })
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImfSpectrumSummary {
    pub imf: usize,
    pub amplitude: Spread,
    pub frequency_hz: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub sample_rate_hz: u32,
    pub imfs: Vec<ImfSpectrumSummary>,
}

pub fn summarize_spectrum(attributes: &[InstantAttributes], sample_rate_hz: u32) -> SpectrumSummary {
    let imfs = attributes
        .iter()
        .enumerate()
        .map(|(k, a)| ImfSpectrumSummary {
            imf: k + 1,
            amplitude: Spread::of(&a.amplitude).unwrap_or(Spread {
                median: 0.0,
                iqr: 0.0,
            }),
            frequency_hz: Spread::of(&a.frequency_hz).unwrap_or(Spread {
                median: 0.0,
                iqr: 0.0,
            }),
        })
        .collect();
    SpectrumSummary {
        sample_rate_hz,
        imfs,
    }
}
