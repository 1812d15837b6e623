//! End-to-end orchestration: manifest -> decomposition -> features ->
//! cross-validated networks -> report.
//!
//! Every operation the command-line tool exposes lives here so it can be
//! driven and tested as a library. Errors name the stage and, when one is
//! involved, the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioError, Label, RecordingManifest};
use crate::dbn::{self, DbnModel, TrainConfig, TrainingHistory};
use crate::emd::{self, DecompositionSummary, SiftConfig};
use crate::eval::{self, CvReport};
use crate::features::{self, FeatureInstance, FeatureSource, Normalizer};
use crate::hilbert::{self, SpectrumSummary};
use crate::synth::{self, SynthConfig};

/// Written into the work directory when a run stops early; removed when a
/// run completes.
pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Manifest,
    Decompose,
    Hsa,
    Features,
    Train,
    CrossValidate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Manifest => "manifest",
            Stage::Decompose => "decompose",
            Stage::Hsa => "hsa",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::CrossValidate => "cv",
            Stage::Report => "report",
        })
    }
}

/// Whether a failure came from what the user supplied or from the tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Internal,
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub path: Option<PathBuf>,
    pub kind: ErrorKind,
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn new(
        stage: Stage,
        kind: ErrorKind,
        path: Option<&Path>,
        source: impl Into<Box<dyn std::error::Error + Send + Sync>>,
    ) -> Self {
        Self {
            stage,
            path: path.map(Path::to_path_buf),
            kind,
            source: source.into(),
        }
    }

    fn input(stage: Stage, path: Option<&Path>, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self::new(stage, ErrorKind::Input, path, source)
    }

    fn internal(stage: Stage, path: Option<&Path>, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self::new(stage, ErrorKind::Internal, path, source)
    }

    /// Process exit status: 2 for bad input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input => 2,
            ErrorKind::Internal => 1,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed", self.stage)?;
        if let Some(p) = &self.path {
            write!(f, " on {}", p.display())?;
        }
        write!(f, ": {}", self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn audio_error(stage: Stage, err: AudioError) -> PipelineError {
    let path = match &err {
        AudioError::NotFound(p)
        | AudioError::UnsupportedChannels { path: p, .. }
        | AudioError::UnsupportedBitDepth { path: p, .. }
        | AudioError::CorruptHeader { path: p, .. }
        | AudioError::Io { path: p, .. } => Some(p.clone()),
        _ => None,
    };
    PipelineError::input(stage, path.as_deref(), err)
}

fn write_file(stage: Stage, path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::internal(stage, Some(dir), e))?;
    }
    fs::write(path, contents).map_err(|e| PipelineError::internal(stage, Some(path), e))
}

/// Every setting of a run. All fields are optional in the JSON file; absent
/// fields take the defaults shown by `PipelineConfig::default()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Report path; `workdir/report.json` when absent.
    pub report: Option<PathBuf>,
    pub sift: SiftConfig,
    pub feature_source: FeatureSource,
    /// Hidden layer widths, input side first.
    pub arch: Vec<usize>,
    pub train: TrainConfig,
    pub k: usize,
    /// Seeds the fold assignment.
    pub seed: u64,
    pub subject_vote: bool,
    pub synth: SynthConfig,
    pub n_per_class: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            workdir: PathBuf::from("respir-hht-out"),
            report: None,
            sift: SiftConfig::default(),
            feature_source: FeatureSource::Imf,
            arch: vec![160, 130],
            train: TrainConfig::default(),
            k: 5,
            seed: 0,
            subject_vote: false,
            synth: SynthConfig::default(),
            n_per_class: 10,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::input(Stage::Config, Some(path), e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::input(Stage::Config, Some(path), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.workdir.join("report.json"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| PipelineError::input(Stage::Config, None, msg);
        if self.arch.is_empty() || self.arch.contains(&0) {
            return Err(bad(format!("arch must list positive layer widths, got {:?}", self.arch)));
        }
        if self.k < 2 {
            return Err(bad(format!("k must be at least 2, got {}", self.k)));
        }
        self.sift.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| PipelineError::input(Stage::Config, None, "no manifest given"))
    }
}

/// Parses `160,130` style layer lists.
pub fn parse_arch(text: &str) -> std::result::Result<Vec<usize>, String> {
    let sizes = text
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad layer width {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(format!("layer widths must be positive: {text:?}"));
    }
    Ok(sizes)
}

pub fn arch_label(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

pub fn load_manifest(path: &Path) -> Result<RecordingManifest> {
    if !path.exists() {
        return Err(PipelineError::input(
            Stage::Manifest,
            Some(path),
            format!("manifest not found: {}", path.display()),
        ));
    }
    audio::load_manifest(path).map_err(|e| PipelineError::input(Stage::Manifest, Some(path), e))
}

pub fn synthesize(config: &SynthConfig, n_per_class: usize, out_dir: &Path) -> Result<RecordingManifest> {
    synth::gen_dataset(n_per_class, config, out_dir).map_err(|e| {
        let kind = match e {
            synth::SynthError::Write { .. } => ErrorKind::Internal,
            _ => ErrorKind::Input,
        };
        PipelineError::new(Stage::Synth, kind, Some(out_dir), e)
    })
}

/// Decomposes one WAV file and writes the components into `out_dir`.
pub fn decompose_file(input: &Path, out_dir: &Path, sift: &SiftConfig) -> Result<DecompositionSummary> {
    let signal = audio::read_wav(input).map_err(|e| audio_error(Stage::Decompose, e))?;
    let dec = emd::decompose(signal.samples(), sift).map_err(|e| PipelineError::internal(Stage::Decompose, Some(input), e))?;
    emd::write_decomposition(out_dir, &dec, Some(signal.sample_rate_hz()))
        .map_err(|e| PipelineError::internal(Stage::Decompose, Some(out_dir), e))
}

/// Hilbert spectral summary of a decomposition directory.
pub fn hsa_dir(dir: &Path, sample_rate_hz: u32) -> Result<SpectrumSummary> {
    let (dec, _) = emd::read_decomposition(dir).map_err(|e| PipelineError::input(Stage::Hsa, Some(dir), e))?;
    let attrs = hilbert::hilbert_spectrum(&dec, sample_rate_hz).map_err(|e| PipelineError::input(Stage::Hsa, Some(dir), e))?;
    Ok(hilbert::summarize_spectrum(&attrs, sample_rate_hz))
}

/// Decomposes every recording of the manifest in parallel and returns the
/// instances sorted by subject, channel and IMF index.
pub fn extract_features(
    manifest_path: &Path,
    manifest: &RecordingManifest,
    sift: &SiftConfig,
    source: FeatureSource,
) -> Result<Vec<FeatureInstance>> {
    let per_entry = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let path = audio::resolve_entry_path(manifest_path, entry);
            let signal = audio::read_entry(manifest_path, entry).map_err(|e| audio_error(Stage::Features, e))?;
            let dec = emd::decompose(signal.samples(), sift)
                .map_err(|e| PipelineError::internal(Stage::Decompose, Some(&path), e))?;
            features::extract_instances(&dec, signal.samples(), &entry.subject, entry.channel, entry.label, source)
                .map_err(|e| PipelineError::internal(Stage::Features, Some(&path), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut instances: Vec<FeatureInstance> = per_entry.into_iter().flatten().collect();
    instances.sort_by(|a, b| {
        (&a.subject_id, a.channel, a.imf_index).cmp(&(&b.subject_id, b.channel, b.imf_index))
    });
    Ok(instances)
}

pub fn features_from_manifest(manifest_path: &Path, sift: &SiftConfig, source: FeatureSource) -> Result<Vec<FeatureInstance>> {
    let manifest = load_manifest(manifest_path)?;
    extract_features(manifest_path, &manifest, sift, source)
}

pub fn write_features(path: &Path, instances: &[FeatureInstance]) -> Result<()> {
    write_file(Stage::Features, path, &features::to_csv(instances))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureInstance>> {
    features::read_csv(path).map_err(|e| PipelineError::input(Stage::Train, Some(path), e))
}

/// Fits a normalizer on all `instances` and trains one network on them.
pub fn train_model(
    instances: &[FeatureInstance],
    arch: &[usize],
    config: &TrainConfig,
) -> Result<(DbnModel, TrainingHistory)> {
    if instances.is_empty() {
        return Err(PipelineError::input(Stage::Train, None, "no training instances"));
    }
    let raw: Vec<Vec<f64>> = instances.iter().map(|i| i.vector.to_array().to_vec()).collect();
    let normalizer = Normalizer::fit(&raw).map_err(|e| PipelineError::internal(Stage::Train, None, e))?;
    let scaled = normalizer.apply(&raw).map_err(|e| PipelineError::internal(Stage::Train, None, e))?;
    let x = dbn::rows_to_array(&scaled).map_err(|e| PipelineError::internal(Stage::Train, None, e))?;
    let labels: Vec<Label> = instances.iter().map(|i| i.label).collect();
    dbn::train(&x.view(), &labels, arch, config, Some(normalizer))
        .map_err(|e| PipelineError::input(Stage::Train, None, e))
}

/// Fraction of `instances` that `model` labels correctly, after applying
/// the model's own normalizer.
pub fn accuracy_on(model: &DbnModel, instances: &[FeatureInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(PipelineError::input(Stage::Train, None, "no instances to score"));
    }
    let raw: Vec<Vec<f64>> = instances.iter().map(|i| i.vector.to_array().to_vec()).collect();
    let rows = match &model.normalizer {
        Some(n) => n.apply(&raw).map_err(|e| PipelineError::input(Stage::Train, None, e))?,
        None => raw,
    };
    let predicted = model.predict(&rows).map_err(|e| PipelineError::input(Stage::Train, None, e))?;
    let correct = predicted.iter().zip(instances).filter(|(p, i)| **p == i.label).count();
    Ok(correct as f64 / instances.len() as f64)
}

pub fn save_model(model: &DbnModel, path: &Path) -> Result<()> {
    write_file(Stage::Train, path, &(model.to_json() + "\n"))
}

/// Files produced by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: CvReport,
    pub features_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
    pub report_path: PathBuf,
    pub text_report_path: PathBuf,
}

/// Cross-validates `instances` over the subjects of `manifest`.
pub fn cross_validate(
    manifest: &RecordingManifest,
    instances: &[FeatureInstance],
    config: &PipelineConfig,
) -> Result<(CvReport, eval::CvOutcome)> {
    let plan = eval::make_folds(&manifest.subjects(), config.k, config.seed)
        .map_err(|e| PipelineError::input(Stage::CrossValidate, None, e))?;
    let outcome = eval::cross_validate(instances, &plan, &config.arch, &config.train).map_err(|e| {
        let kind = match e {
            eval::EvalError::EmptyFold { .. } | eval::EvalError::EmptyTrainingFold { .. } => ErrorKind::Input,
            _ => ErrorKind::Internal,
        };
        PipelineError::new(Stage::CrossValidate, kind, None, e)
    })?;
    let mut report = CvReport::from_outcome(&outcome, config.subject_vote);
    report.config = Some(serde_json::to_value(config).expect("config serialises"));
    Ok((report, outcome))
}

fn run_stages(config: &PipelineConfig, done: &mut Vec<String>) -> Result<PipelineOutput> {
    let manifest_path = config.manifest_path()?;
    let manifest = load_manifest(manifest_path)?;

    let instances = extract_features(manifest_path, &manifest, &config.sift, config.feature_source)?;
    let features_path = config.workdir.join("features.csv");
    write_features(&features_path, &instances)?;
    done.push(features_path.display().to_string());

    let (report, outcome) = cross_validate(&manifest, &instances, config)?;
    let mut model_paths = Vec::new();
    for fold in &outcome.folds {
        let path = config.workdir.join("models").join(format!("fold_{}.json", fold.fold + 1));
        write_file(Stage::CrossValidate, &path, &(fold.model.to_json() + "\n"))?;
        done.push(path.display().to_string());
        model_paths.push(path);
    }

    let report_path = config.report_path();
    write_file(Stage::Report, &report_path, &report.to_json())?;
    done.push(report_path.display().to_string());
    let text_report_path = report_path.with_extension("txt");
    write_file(Stage::Report, &text_report_path, &report.to_text(&arch_label(&config.arch)))?;
    Ok(PipelineOutput {
        report,
        features_path,
        model_paths,
        report_path,
        text_report_path,
    })
}

/// Runs features, cross-validation and reporting. On failure the work
/// directory holds a [`PARTIAL_MARKER`] file naming the failed stage and
/// the outputs that were completed.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let marker = config.workdir.join(PARTIAL_MARKER);
    let _ = fs::remove_file(&marker);
    let mut done = Vec::new();
    let result = run_stages(config, &mut done);
    if let Err(e) = &result {
        if config.workdir.exists() || !done.is_empty() {
            let mut text = format!("incomplete run: {e}\n");
            for d in &done {
                text.push_str(&format!("completed: {d}\n"));
            }
            let _ = write_file(e.stage, &marker, &text);
        }
    }
    result
}

pub fn load_report(path: &Path) -> Result<CvReport> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::input(Stage::Report, Some(path), e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::input(Stage::Report, Some(path), e))
}

/// Layer label for the text table: the echoed architecture when the report
/// carries its configuration.
pub fn report_arch(report: &CvReport) -> String {
    report
        .config
        .as_ref()
        .and_then(|c| serde_json::from_value::<PipelineConfig>(c.clone()).ok())
        .map_or_else(|| "DBN".to_string(), |c| arch_label(&c.arch))
}
