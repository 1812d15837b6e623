//! Seeded synthetic auscultation recordings.
//!
//! A normal recording is white Gaussian noise passed through a band-pass
//! made of two cascaded RBJ biquads (Butterworth high-pass at the lower band
//! edge, Butterworth low-pass at the upper edge, both `Q = 1/sqrt(2)`),
//! scaled to a fixed RMS and shaped by a breathing envelope. Each breath
//! cycle is split into an inspiratory and an expiratory half; inside each
//! half the envelope is a raised-cosine hump `sin^2(pi u)`, `u` in `[0, 1)`,
//! with expiration at [`EXPIRATION_LEVEL`] of the inspiratory level.
//!
//! An asthmatic recording adds, inside every complete expiratory half, a
//! Hann-windowed sinusoid at the wheeze frequency, centred in the half:
//! `gain * 0.5 (1 - cos(2 pi tau / D)) * sin(2 pi f tau)` for `tau` in `[0, D)`.
//!
//! Biquad coefficients (normalised so `a0 = 1`), with `w = 2 pi fc / fs`,
//! `alpha = sin(w) / (2 Q)`:
//!
//! ```text
//! low-pass : b = [(1-cos w)/2, 1-cos w, (1-cos w)/2] / (1+alpha)
//! high-pass: b = [(1+cos w)/2, -(1+cos w), (1+cos w)/2] / (1+alpha)
//! both     : a = [-2 cos w, 1-alpha] / (1+alpha)
//! ```
//!
//! At the defaults (4000 Hz, 100-1000 Hz band) this gives
//!
//! ```text
//! high-pass: b0 =  0.894858606123  b1 = -1.78971721225  b2 =  0.894858606123
//!            a1 = -1.77863177782   a2 =  0.800802646666
//! low-pass : b0 =  0.292893218813  b1 =  0.585786437627  b2 =  0.292893218813
//!            a1 =  0.0             a2 =  0.171572875254
//! ```
//!
//! The first 1000 filter outputs are discarded as warm-up. Noise comes from
//! [`SplitMix64::next_gaussian`].

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, AuscultationSite, Label, ManifestEntry, RecordingManifest, Signal};
use crate::rng::{fnv1a64, SplitMix64};

/// Shortest wheeze duration accepted for the asthma class, in milliseconds.
pub const MIN_WHEEZE_MS: f64 = 250.0;
/// Lowest wheeze frequency accepted for the asthma class, in hertz.
pub const MIN_WHEEZE_HZ: f64 = 400.0;
/// RMS of the band-limited noise before the breathing envelope is applied.
pub const NOISE_RMS: f64 = 0.12;
/// Expiratory envelope level relative to inspiration.
pub const EXPIRATION_LEVEL: f64 = 0.6;
/// Largest peak amplitude of a normal recording.
pub const MAX_NORMAL_PEAK: f64 = 0.9;
/// Fraction of samples that may be clipped before generation fails.
pub const MAX_CLIP_FRACTION: f64 = 0.001;

const WARMUP_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
    #[error("wheeze {what} {value} is below the asthma threshold {min}")]
    WheezeBelowThreshold {
        what: &'static str,
        value: f64,
        min: f64,
    },
    #[error("no complete expiratory half-cycle fits in {duration_s} s to hold a wheeze")]
    NoExpiration { duration_s: f64 },
    #[error("{clipped} of {total} samples would clip")]
    ExcessiveClipping { clipped: usize, total: usize },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub breath_cycle_s: f64,
    pub noise_band_hz: (f64, f64),
    pub wheeze_freq_hz: f64,
    pub wheeze_duration_ms: f64,
    pub wheeze_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 4000,
            duration_s: 10.0,
            breath_cycle_s: 4.0,
            noise_band_hz: (100.0, 1000.0),
            wheeze_freq_hz: 450.0,
            wheeze_duration_ms: 300.0,
            wheeze_gain: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate_hz)).round() as usize
    }

    /// Checks the fields shared by both classes.
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        let (lo, hi) = self.noise_band_hz;
        if self.sample_rate_hz < audio::MIN_SAMPLE_RATE_HZ {
            return Err(SynthError::InvalidConfig(format!(
                "sample rate {} Hz is below {} Hz",
                self.sample_rate_hz,
                audio::MIN_SAMPLE_RATE_HZ
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(SynthError::InvalidConfig(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if !(self.breath_cycle_s > 0.0 && self.breath_cycle_s.is_finite()) {
            return Err(SynthError::InvalidConfig(format!(
                "breath cycle must be positive, got {}",
                self.breath_cycle_s
            )));
        }
        if !(lo > 0.0 && lo < hi && hi < nyquist) {
            return Err(SynthError::InvalidConfig(format!(
                "noise band ({lo}, {hi}) Hz must satisfy 0 < low < high < {nyquist}"
            )));
        }
        Ok(())
    }

    /// Checks the wheeze fields on top of [`SynthConfig::validate`].
    pub fn validate_wheeze(&self) -> Result<()> {
        self.validate()?;
        if !(self.wheeze_freq_hz >= MIN_WHEEZE_HZ) {
            return Err(SynthError::WheezeBelowThreshold {
                what: "frequency (Hz)",
                value: self.wheeze_freq_hz,
                min: MIN_WHEEZE_HZ,
            });
        }
        if !(self.wheeze_duration_ms >= MIN_WHEEZE_MS) {
            return Err(SynthError::WheezeBelowThreshold {
                what: "duration (ms)",
                value: self.wheeze_duration_ms,
                min: MIN_WHEEZE_MS,
            });
        }
        if self.wheeze_freq_hz >= f64::from(self.sample_rate_hz) / 2.0 {
            return Err(SynthError::InvalidConfig(format!(
                "wheeze frequency {} Hz is at or above Nyquist",
                self.wheeze_freq_hz
            )));
        }
        if !(self.wheeze_gain >= 0.0 && self.wheeze_gain <= 1.0) {
            return Err(SynthError::InvalidConfig(format!(
                "wheeze gain must lie in [0, 1], got {}",
                self.wheeze_gain
            )));
        }
        if self.wheeze_duration_ms / 1000.0 > self.breath_cycle_s / 2.0 {
            return Err(SynthError::InvalidConfig(format!(
                "a {} ms wheeze does not fit in a {} s expiration",
                self.wheeze_duration_ms,
                self.breath_cycle_s / 2.0
            )));
        }
        Ok(())
    }
}

/// Direct-form I biquad section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn rbj(cutoff_hz: f64, sample_rate_hz: f64, high_pass: bool) -> Self {
        let w = TAU * cutoff_hz / sample_rate_hz;
        let cos_w = w.cos();
        let alpha = w.sin() / (2.0 * FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b = if high_pass {
            let k = (1.0 + cos_w) / 2.0;
            [k, -2.0 * k, k]
        } else {
            let k = (1.0 - cos_w) / 2.0;
            [k, 2.0 * k, k]
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos_w / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn butterworth_low_pass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        Self::rbj(cutoff_hz, sample_rate_hz, false)
    }

    pub fn butterworth_high_pass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        Self::rbj(cutoff_hz, sample_rate_hz, true)
    }

    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        input
            .iter()
            .map(|&x| {
                let y = self.b[0] * x + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

/// The two sections applied to white noise, high-pass first.
pub fn band_pass_sections(config: &SynthConfig) -> [Biquad; 2] {
    let fs = f64::from(config.sample_rate_hz);
    [
        Biquad::butterworth_high_pass(config.noise_band_hz.0, fs),
        Biquad::butterworth_low_pass(config.noise_band_hz.1, fs),
    ]
}

/// Breathing envelope value at time `t` seconds.
pub fn breath_envelope(t: f64, breath_cycle_s: f64) -> f64 {
    let half = breath_cycle_s / 2.0;
    let pos = t.rem_euclid(breath_cycle_s);
    let (u, level) = if pos < half {
        (pos / half, 1.0)
    } else {
        ((pos - half) / half, EXPIRATION_LEVEL)
    };
    let s = (PI * u).sin();
    level * s * s
}

/// Start sample and length of every wheeze placed in the recording.
pub fn wheeze_windows(config: &SynthConfig) -> Vec<(usize, usize)> {
    let fs = f64::from(config.sample_rate_hz);
    let n = config.n_samples();
    let len = (config.wheeze_duration_ms / 1000.0 * fs).round() as usize;
    let half = config.breath_cycle_s / 2.0;
    let mut out = Vec::new();
    let mut cycle = 0usize;
    loop {
        let exp_start = cycle as f64 * config.breath_cycle_s + half;
        let exp_end = exp_start + half;
        if exp_end > config.duration_s + 1e-9 {
            break;
        }
        let centre = exp_start + half / 2.0;
        let start = ((centre - config.wheeze_duration_ms / 2000.0) * fs).round() as usize;
        if start + len <= n {
            out.push((start, len));
        }
        cycle += 1;
    }
    out
}

/// Band-limited breathing noise for the healthy class.
pub fn gen_normal(config: &SynthConfig) -> Result<Signal> {
    config.validate()?;
    let n = config.n_samples();
    let fs = f64::from(config.sample_rate_hz);
    let mut rng = SplitMix64::new(config.seed);
    let white: Vec<f64> = (0..n + WARMUP_SAMPLES).map(|_| rng.next_gaussian()).collect();
    let [hp, lp] = band_pass_sections(config);
    let band = lp.filter(&hp.filter(&white));
    let band = &band[WARMUP_SAMPLES..];

    let rms = (band.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let gain = if rms > 0.0 { NOISE_RMS / rms } else { 0.0 };
    let mut samples: Vec<f64> = band
        .iter()
        .enumerate()
        .map(|(i, &x)| gain * x * breath_envelope(i as f64 / fs, config.breath_cycle_s))
        .collect();

    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > MAX_NORMAL_PEAK {
        let k = MAX_NORMAL_PEAK / peak;
        samples.iter_mut().for_each(|x| *x *= k);
    }
    Ok(Signal::new(samples, config.sample_rate_hz)?)
}

/// Normal recording plus one Hann-windowed wheeze per expiration.
pub fn gen_asthmatic(config: &SynthConfig) -> Result<Signal> {
    config.validate_wheeze()?;
    let windows = wheeze_windows(config);
    if windows.is_empty() {
        return Err(SynthError::NoExpiration {
            duration_s: config.duration_s,
        });
    }
    let mut samples = gen_normal(config)?.into_samples();
    let fs = f64::from(config.sample_rate_hz);
    for (start, len) in windows {
        for k in 0..len {
            let tau = k as f64;
            let hann = 0.5 * (1.0 - (TAU * tau / len as f64).cos());
            samples[start + k] +=
                config.wheeze_gain * hann * (TAU * config.wheeze_freq_hz * tau / fs).sin();
        }
    }
    let clipped = samples.iter().filter(|x| x.abs() > 1.0).count();
    if clipped as f64 > MAX_CLIP_FRACTION * samples.len() as f64 {
        return Err(SynthError::ExcessiveClipping {
            clipped,
            total: samples.len(),
        });
    }
    samples.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
    Ok(Signal::new(samples, config.sample_rate_hz)?)
}

/// Recording of one class, with the given seed.
pub fn gen_recording(config: &SynthConfig, label: Label) -> Result<Signal> {
    match label {
        Label::Asthma => gen_asthmatic(config),
        Label::Healthy => gen_normal(config),
    }
}

/// Seed for one recording: `seed XOR fnv1a64("<subject>/<channel>")`.
pub fn channel_seed(seed: u64, subject: &str, channel: AuscultationSite) -> u64 {
    seed ^ fnv1a64(format!("{subject}/{channel}").as_bytes())
}

pub fn subject_id(label: Label, ordinal: usize) -> String {
    match label {
        Label::Asthma => format!("A{ordinal:02}"),
        Label::Healthy => format!("H{ordinal:02}"),
    }
}

/// Writes `n_per_class` asthma and healthy subjects with all twelve channels
/// into `out_dir`, plus `manifest.json` with paths relative to `out_dir`.
pub fn gen_dataset(n_per_class: usize, config: &SynthConfig, out_dir: &Path) -> Result<RecordingManifest> {
    if n_per_class == 0 {
        return Err(SynthError::InvalidConfig("n_per_class must be at least 1".into()));
    }
    config.validate_wheeze()?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut entries = Vec::with_capacity(2 * n_per_class * 12);
    for label in [Label::Asthma, Label::Healthy] {
        for ordinal in 1..=n_per_class {
            let subject = subject_id(label, ordinal);
            for channel in AuscultationSite::ALL {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("{subject}_{channel}.wav")),
                    subject: subject.clone(),
                    channel,
                    label,
                });
            }
        }
    }

    entries.par_iter().try_for_each(|e| -> Result<()> {
        let cfg = SynthConfig {
            seed: channel_seed(config.seed, &e.subject, e.channel),
            ..config.clone()
        };
        let signal = gen_recording(&cfg, e.label)?;
        let path = out_dir.join(&e.path);
        audio::write_wav(&signal, &path).map_err(|err| match err {
            AudioError::Io { path, source } => SynthError::Write { path, source },
            other => other.into(),
        })
    })?;

    let manifest = RecordingManifest { entries };
    let manifest_path = out_dir.join("manifest.json");
    audio::save_manifest(&manifest, &manifest_path).map_err(|err| match err {
        AudioError::Io { path, source } => SynthError::Write { path, source },
        other => other.into(),
    })?;
    Ok(manifest)
}
