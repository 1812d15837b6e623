//! Auscultation recordings: WAV I/O, windowing and the dataset manifest.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest accepted sample rate. Wheeze energy sits at 400 Hz and above, so
/// the Nyquist limit must leave headroom above that.
pub const MIN_SAMPLE_RATE_HZ: u32 = 2000;

/// Full-scale divisor for 16-bit two's-complement PCM.
pub const PCM16_FULL_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported channel count {channels} in {path} (expected mono)")]
    UnsupportedChannels { path: PathBuf, channels: u16 },
    #[error("unsupported sample format in {path}: {bits}-bit {format} (expected 16-bit integer PCM)")]
    UnsupportedBitDepth {
        path: PathBuf,
        bits: u16,
        format: &'static str,
    },
    #[error("corrupt WAV header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("recording has {available} samples but the {seconds} s window needs {required}")]
    TooShort {
        seconds: f64,
        required: usize,
        available: usize,
    },
    #[error("invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("duplicate manifest entry for subject {subject} channel {channel}")]
    DuplicateEntry {
        subject: String,
        channel: AuscultationSite,
    },
    #[error("subject {subject} carries both asthma and healthy labels")]
    MixedLabels { subject: String },
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// The twelve standard chest and back auscultation positions.
///
/// Per side: 1 posterior-upper, 2 posterior-middle, 3 posterior-lower,
/// 4 costophrenic, 5 anterior-upper, 6 anterior-lower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuscultationSite {
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
}

impl AuscultationSite {
    pub const ALL: [AuscultationSite; 12] = [
        Self::L1,
        Self::L2,
        Self::L3,
        Self::L4,
        Self::L5,
        Self::L6,
        Self::R1,
        Self::R2,
        Self::R3,
        Self::R4,
        Self::R5,
        Self::R6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::L3 => "L3",
            Self::L4 => "L4",
            Self::L5 => "L5",
            Self::L6 => "L6",
            Self::R1 => "R1",
            Self::R2 => "R2",
            Self::R3 => "R3",
            Self::R4 => "R4",
            Self::R5 => "R5",
            Self::R6 => "R6",
        }
    }
}

impl fmt::Display for AuscultationSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuscultationSite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| format!("unknown auscultation site {s:?}"))
    }
}

/// Diagnostic class. Asthma is the positive class throughout evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Asthma,
    Healthy,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Asthma => "asthma",
            Label::Healthy => "healthy",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "asthma" => Ok(Label::Asthma),
            "healthy" => Ok(Label::Healthy),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// A mono auscultation waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    pub channel: Option<AuscultationSite>,
    pub subject_id: Option<String>,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::InvalidSignal("no samples".into()));
        }
        if sample_rate_hz < MIN_SAMPLE_RATE_HZ {
            return Err(AudioError::InvalidSignal(format!(
                "sample rate {sample_rate_hz} Hz is below {MIN_SAMPLE_RATE_HZ} Hz"
            )));
        }
        if let Some(i) = samples
            .iter()
            .position(|x| !x.is_finite() || x.abs() > 1.0)
        {
            return Err(AudioError::InvalidSignal(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            channel: None,
            subject_id: None,
        })
    }

    pub fn with_origin(mut self, subject_id: impl Into<String>, channel: AuscultationSite) -> Self {
        self.subject_id = Some(subject_id.into());
        self.channel = Some(channel);
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// Reads a 16-bit mono PCM WAV file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Signal> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedChannels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            bits: spec.bits_per_sample,
            format: match spec.sample_format {
                hound::SampleFormat::Int => "integer",
                hound::SampleFormat::Float => "float",
            },
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / PCM16_FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    Signal::new(samples, spec.sample_rate)
}

/// Writes a signal as 16-bit mono PCM. Samples are rounded to the nearest
/// multiple of 1/32768 and saturated to the int16 range.
pub fn write_wav(signal: &Signal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &x in &signal.samples {
        writer
            .write_sample(to_pcm16(x))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

pub fn to_pcm16(x: f64) -> i16 {
    (x * PCM16_FULL_SCALE)
        .round()
        .clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::FormatError(reason) => AudioError::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        },
        other => AudioError::CorruptHeader {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Keeps the leading `floor(seconds * rate)` samples.
pub fn segment(signal: &Signal, seconds: f64) -> Result<Signal> {
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(AudioError::InvalidSignal(format!(
            "window length must be positive, got {seconds}"
        )));
    }
    let required = (seconds * f64::from(signal.sample_rate_hz)).floor() as usize;
    if required == 0 || required > signal.len() {
        return Err(AudioError::TooShort {
            seconds,
            required,
            available: signal.len(),
        });
    }
    let mut out = signal.clone();
    out.samples.truncate(required);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject: String,
    pub channel: AuscultationSite,
    pub label: Label,
}

/// The set of recordings that make up a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RecordingManifest {
    /// Checks non-emptiness, `(subject, channel)` uniqueness and one label
    /// per subject.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(AudioError::EmptyManifest);
        }
        let mut seen = HashMap::new();
        let mut labels: HashMap<&str, Label> = HashMap::new();
        for e in &self.entries {
            if seen.insert((e.subject.as_str(), e.channel), ()).is_some() {
                return Err(AudioError::DuplicateEntry {
                    subject: e.subject.clone(),
                    channel: e.channel,
                });
            }
            match labels.get(e.subject.as_str()) {
                Some(&l) if l != e.label => {
                    return Err(AudioError::MixedLabels {
                        subject: e.subject.clone(),
                    })
                }
                _ => {
                    labels.insert(&e.subject, e.label);
                }
            }
        }
        Ok(())
    }

    /// Distinct subjects with their labels, sorted by subject id.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let mut map = std::collections::BTreeMap::new();
        for e in &self.entries {
            map.entry(e.subject.clone()).or_insert(e.label);
        }
        map.into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

/// Loads and validates a manifest. Relative entry paths are left as written;
/// see [`resolve_entry_path`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<RecordingManifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: RecordingManifest =
        serde_json::from_str(&text).map_err(|e| AudioError::InvalidManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &RecordingManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json() + "\n").map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Relative entry paths are interpreted against the manifest's directory.
pub fn resolve_entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    if entry.path.is_absolute() {
        entry.path.clone()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&entry.path)
    }
}

/// Reads one manifest entry and tags the signal with its origin.
pub fn read_entry(manifest_path: &Path, entry: &ManifestEntry) -> Result<Signal> {
    let signal = read_wav(resolve_entry_path(manifest_path, entry))?;
    Ok(signal.with_origin(entry.subject.clone(), entry.channel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw_wav(path: &Path, channels: u16, bits: u16, rate: u32, frames: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &f in frames {
            match bits {
                8 => w.write_sample(f as i8).unwrap(),
                16 => w.write_sample(f).unwrap(),
                _ => w.write_sample(i32::from(f)).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn sig(samples: Vec<f64>) -> Signal {
        Signal::new(samples, 4000).unwrap()
    }

    #[test]
    fn reads_scaled_int16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_wav(&p, 1, 16, 4000, &[0, 16384, -32768]);
        let s = read_wav(&p).unwrap();
        assert_eq!(s.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(s.sample_rate_hz(), 4000);
    }

    #[test]
    fn distinct_read_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_wav(dir.path().join("missing.wav")),
            Err(AudioError::NotFound(_))
        ));

        let stereo = dir.path().join("stereo.wav");
        write_raw_wav(&stereo, 2, 16, 4000, &[1, 2, 3, 4]);
        let err = read_wav(&stereo).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedChannels { channels: 2, .. }));
        assert!(err.to_string().contains("unsupported channel count"));

        let wide = dir.path().join("wide.wav");
        write_raw_wav(&wide, 1, 24, 4000, &[1, 2, 3]);
        assert!(matches!(
            read_wav(&wide),
            Err(AudioError::UnsupportedBitDepth { bits: 24, .. })
        ));

        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"RIFX not a wave file at all").unwrap();
        assert!(matches!(read_wav(&junk), Err(AudioError::CorruptHeader { .. })));
    }

    #[test]
    fn wav_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wav");
        let b = dir.path().join("b.wav");
        let frames: Vec<i16> = (0..4000).map(|i| ((i * 7919) % 65536 - 32768) as i16).collect();
        write_raw_wav(&a, 1, 16, 4000, &frames);
        let s = read_wav(&a).unwrap();
        write_wav(&s, &b).unwrap();
        let back: Vec<i16> = hound::WavReader::open(&b)
            .unwrap()
            .into_samples::<i16>()
            .map(|x| x.unwrap())
            .collect();
        assert_eq!(back, frames);
    }

    #[test]
    fn signal_invariants() {
        assert!(Signal::new(vec![], 4000).is_err());
        assert!(Signal::new(vec![0.0, 1.5], 4000).is_err());
        assert!(Signal::new(vec![0.0, f64::NAN], 4000).is_err());
        assert!(Signal::new(vec![0.0], 1000).is_err());
        assert!(Signal::new(vec![-1.0, 1.0], 2000).is_ok());
    }

    #[test]
    fn segment_cases() {
        let twelve = sig(vec![0.1; 48_000]);
        let ten = segment(&twelve, 10.0).unwrap();
        assert_eq!(ten.len(), 40_000);

        let same = segment(&ten, 10.0).unwrap();
        assert_eq!(same, ten);

        let five = sig(vec![0.0; 20_000]);
        assert!(matches!(segment(&five, 10.0), Err(AudioError::TooShort { .. })));
        assert!(segment(&five, 0.0).is_err());
    }

    #[test]
    fn segment_preserves_metadata() {
        let s = sig(vec![0.0; 100]).with_origin("S1", AuscultationSite::R4);
        let w = segment(&s, 0.01).unwrap();
        assert_eq!(w.len(), 40);
        assert_eq!(w.channel, Some(AuscultationSite::R4));
        assert_eq!(w.subject_id.as_deref(), Some("S1"));
    }

    #[test]
    fn site_enumeration() {
        let names: std::collections::HashSet<_> =
            AuscultationSite::ALL.iter().map(|s| s.as_str()).collect();
        assert_eq!(names.len(), 12);
        for s in AuscultationSite::ALL {
            assert_eq!(s.as_str().parse::<AuscultationSite>().unwrap(), s);
        }
        assert!("L7".parse::<AuscultationSite>().is_err());
    }

    fn manifest(n_subjects: usize) -> RecordingManifest {
        let mut entries = Vec::new();
        for s in 0..n_subjects {
            for ch in AuscultationSite::ALL {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("S{s:02}_{ch}.wav")),
                    subject: format!("S{s:02}"),
                    channel: ch,
                    label: if s < 5 { Label::Asthma } else { Label::Healthy },
                });
            }
        }
        RecordingManifest { entries }
    }

    #[test]
    fn manifest_load_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");

        let m = manifest(15);
        save_manifest(&m, &p).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.entries.len(), 180);
        assert_eq!(loaded, m);
        assert_eq!(loaded.subjects().len(), 15);

        fs::write(&p, r#"{"entries": []}"#).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, AudioError::EmptyManifest));
        assert_eq!(err.to_string(), "empty manifest");

        let mut mixed = manifest(2);
        mixed.entries[3].label = Label::Healthy;
        save_manifest(&mixed, &p).unwrap();
        assert!(matches!(load_manifest(&p), Err(AudioError::MixedLabels { .. })));

        let mut dup = manifest(1);
        dup.entries[1].channel = AuscultationSite::L1;
        save_manifest(&dup, &p).unwrap();
        assert!(matches!(load_manifest(&p), Err(AudioError::DuplicateEntry { .. })));

        fs::write(&p, r#"{"entries": [{"path": "a.wav", "subject": "x", "channel": "L9", "label": "asthma"}]}"#)
            .unwrap();
        assert!(matches!(load_manifest(&p), Err(AudioError::InvalidManifest { .. })));
    }

    #[test]
    fn manifest_schema_literal() {
        let json = r#"{"entries": [{"path": "rec/a.wav", "subject": "P1", "channel": "R6", "label": "healthy"}]}"#;
        let m: RecordingManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.entries[0].channel, AuscultationSite::R6);
        assert_eq!(m.entries[0].label, Label::Healthy);
        let resolved = resolve_entry_path(Path::new("/data/m.json"), &m.entries[0]);
        assert_eq!(resolved, PathBuf::from("/data/rec/a.wav"));
    }

    proptest! {
        #[test]
        fn segment_is_idempotent(len in 4000usize..12000, secs in 0.01f64..1.0) {
            let s = sig((0..len).map(|i| (i as f64 * 0.01).sin() * 0.5).collect());
            let once = segment(&s, secs).unwrap();
            let twice = segment(&once, secs).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
