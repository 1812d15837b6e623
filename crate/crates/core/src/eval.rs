//! Subject-disjoint k-fold cross-validation and classification metrics.
//!
//! Asthma is the positive class. Folds are built at the subject level so no
//! recording of a test subject ever reaches the normalizer or the network
//! of its fold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Label;
use crate::dbn::{self, DbnError, DbnModel, TrainConfig};
use crate::features::{FeatureError, FeatureInstance, Normalizer};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("no subjects to split")]
    NoSubjects,
    #[error("subject {0} appears with both labels")]
    ConflictingLabels(String),
    #[error("fold {fold} has no test instances")]
    EmptyFold { fold: usize },
    #[error("fold {fold} has no training instances")]
    EmptyTrainingFold { fold: usize },
    #[error("subject {subject} is in both the training and test set of fold {fold}")]
    Leakage { fold: usize, subject: String },
    #[error("instance subject {0} is missing from the fold plan")]
    UnknownSubject(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("fold {fold}: {source}")]
    Training {
        fold: usize,
        #[source]
        source: DbnError,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Assignment of every subject to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    pub labels: BTreeMap<String, Label>,
    /// Set when a class has fewer subjects than folds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn test_subjects(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// `(asthma, healthy)` subject counts in `fold`.
    pub fn class_counts(&self, fold: usize) -> (usize, usize) {
        self.test_subjects(fold)
            .iter()
            .fold((0, 0), |(a, h), s| match self.labels[s] {
                Label::Asthma => (a + 1, h),
                Label::Healthy => (a, h + 1),
            })
    }
}

/// Shuffles each class with the seeded generator (asthma first, each class
/// starting from its sorted order) and deals subjects round-robin to folds.
pub fn make_folds(subjects: &[(String, Label)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if subjects.is_empty() {
        return Err(EvalError::NoSubjects);
    }
    let mut labels = BTreeMap::new();
    for (s, l) in subjects {
        if let Some(prev) = labels.insert(s.clone(), *l) {
            if prev != *l {
                return Err(EvalError::ConflictingLabels(s.clone()));
            }
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut assignments = BTreeMap::new();
    let mut warnings = Vec::new();
    for class in [Label::Asthma, Label::Healthy] {
        let mut ids: Vec<&String> = labels.iter().filter(|(_, &l)| l == class).map(|(s, _)| s).collect();
        if !ids.is_empty() && ids.len() < k {
            let msg = format!(
                "only {} {class} subject(s) for {k} folds; some folds have no {class} test subjects",
                ids.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        rng.shuffle(&mut ids);
        for (i, s) in ids.into_iter().enumerate() {
            assignments.insert(s.clone(), i % k);
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
        labels,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Asthma, Label::Asthma) => self.tp += 1,
            (Label::Asthma, Label::Healthy) => self.fn_ += 1,
            (Label::Healthy, Label::Asthma) => self.fp += 1,
            (Label::Healthy, Label::Healthy) => self.tn += 1,
        }
    }

    pub fn from_pairs(truth: &[Label], predicted: &[Label]) -> Self {
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p);
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fn_: self.fn_ + other.fn_,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
        }
    }

    /// The same counts with healthy treated as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fn_: self.fp,
            fp: self.fn_,
            tn: self.tp,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Ratios with a zero denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    }
}

/// Alternative convention: "sensitivity" is `tp / (tp + fp)` (the positive
/// predictive value) while specificity keeps `tn / (tn + fp)`.
pub fn ppv_convention_metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fp),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub cm: ConfusionMatrix,
    pub subject_cm: ConfusionMatrix,
    pub model: DbnModel,
    pub final_training_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub pooled: ConfusionMatrix,
    pub pooled_subjects: ConfusionMatrix,
}

/// Sort key that makes training independent of input order.
fn canonical_key(i: &FeatureInstance) -> (&str, crate::audio::AuscultationSite, usize) {
    (&i.subject_id, i.channel, i.imf_index)
}

/// Majority vote per subject; ties go to asthma.
fn subject_votes(test: &[FeatureInstance], predicted: &[Label]) -> ConfusionMatrix {
    let mut tally: BTreeMap<&str, (Label, usize, usize)> = BTreeMap::new();
    for (inst, &p) in test.iter().zip(predicted) {
        let e = tally.entry(&inst.subject_id).or_insert((inst.label, 0, 0));
        match p {
            Label::Asthma => e.1 += 1,
            Label::Healthy => e.2 += 1,
        }
    }
    let mut cm = ConfusionMatrix::default();
    for (truth, a, h) in tally.into_values() {
        cm.record(truth, if a >= h { Label::Asthma } else { Label::Healthy });
    }
    cm
}

fn run_fold(
    fold: usize,
    instances: &[FeatureInstance],
    plan: &FoldPlan,
    sizes: &[usize],
    config: &TrainConfig,
) -> Result<FoldResult> {
    let test_subjects = plan.test_subjects(fold);
    let train_subjects = plan.train_subjects(fold);
    let test_set: BTreeSet<&String> = test_subjects.iter().collect();
    if let Some(s) = train_subjects.iter().find(|s| test_set.contains(s)) {
        return Err(EvalError::Leakage {
            fold,
            subject: s.clone(),
        });
    }
    let (test, train): (Vec<FeatureInstance>, Vec<FeatureInstance>) = instances
        .iter()
        .cloned()
        .partition(|i| test_set.contains(&i.subject_id));
    if test.is_empty() {
        return Err(EvalError::EmptyFold { fold });
    }
    if train.is_empty() {
        return Err(EvalError::EmptyTrainingFold { fold });
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|i| i.subject_id.as_str()).collect();
    if let Some(s) = test.iter().find(|i| train_ids.contains(i.subject_id.as_str())) {
        return Err(EvalError::Leakage {
            fold,
            subject: s.subject_id.clone(),
        });
    }

    let raw_train: Vec<Vec<f64>> = train.iter().map(|i| i.vector.to_array().to_vec()).collect();
    let raw_test: Vec<Vec<f64>> = test.iter().map(|i| i.vector.to_array().to_vec()).collect();
    let normalizer = Normalizer::fit(&raw_train)?;
    let x_train = dbn::rows_to_array(&normalizer.apply(&raw_train)?).map_err(|source| EvalError::Training { fold, source })?;
    let x_test = normalizer.apply(&raw_test)?;
    let labels: Vec<Label> = train.iter().map(|i| i.label).collect();

    let fold_config = TrainConfig {
        seed: config.seed.wrapping_add(fold as u64),
        ..config.clone()
    };
    let (model, history) = dbn::train(&x_train.view(), &labels, sizes, &fold_config, Some(normalizer))
        .map_err(|source| EvalError::Training { fold, source })?;
    let predicted = model
        .predict(&x_test)
        .map_err(|source| EvalError::Training { fold, source })?;
    let truth: Vec<Label> = test.iter().map(|i| i.label).collect();
    log::info!("fold {fold}: {} train / {} test instances", train.len(), test.len());
    Ok(FoldResult {
        fold,
        train_subjects,
        test_subjects,
        cm: ConfusionMatrix::from_pairs(&truth, &predicted),
        subject_cm: subject_votes(&test, &predicted),
        final_training_loss: history.fine_tune.loss.last().copied(),
        model,
    })
}

/// Trains and tests one network per fold. Each fold fits its own
/// normalizer on training instances and trains with seed
/// `config.seed + fold`. Folds run in parallel; results are reduced in fold
/// order, so the outcome does not depend on scheduling or on the order of
/// `instances`.
pub fn cross_validate(
    instances: &[FeatureInstance],
    plan: &FoldPlan,
    sizes: &[usize],
    config: &TrainConfig,
) -> Result<CvOutcome> {
    if let Some(i) = instances.iter().find(|i| plan.fold_of(&i.subject_id).is_none()) {
        return Err(EvalError::UnknownSubject(i.subject_id.clone()));
    }
    let mut sorted = instances.to_vec();
    sorted.sort_by(|a, b| canonical_key(a).cmp(&canonical_key(b)));
    let folds = (0..plan.k)
        .into_par_iter()
        .map(|f| run_fold(f, &sorted, plan, sizes, config))
        .collect::<Result<Vec<_>>>()?;
    let pooled = folds.iter().fold(ConfusionMatrix::default(), |acc, f| acc.merge(&f.cm));
    let pooled_subjects = folds
        .iter()
        .fold(ConfusionMatrix::default(), |acc, f| acc.merge(&f.subject_cm));
    Ok(CvOutcome {
        folds,
        pooled,
        pooled_subjects,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub cm: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReport {
    pub cm: ConfusionMatrix,
    pub metrics: Metrics,
    pub metrics_ppv_convention: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectVoteReport {
    pub cm: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub pooled: PooledReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_vote: Option<SubjectVoteReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl CvReport {
    pub fn from_outcome(outcome: &CvOutcome, subject_vote: bool) -> Self {
        Self {
            folds: outcome
                .folds
                .iter()
                .map(|f| FoldReport {
                    fold: f.fold,
                    test_subjects: f.test_subjects.clone(),
                    cm: f.cm,
                    metrics: compute_metrics(&f.cm),
                })
                .collect(),
            pooled: PooledReport {
                cm: outcome.pooled,
                metrics: compute_metrics(&outcome.pooled),
                metrics_ppv_convention: ppv_convention_metrics(&outcome.pooled),
            },
            subject_vote: subject_vote.then(|| SubjectVoteReport {
                cm: outcome.pooled_subjects,
                metrics: compute_metrics(&outcome.pooled_subjects),
            }),
            config: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Plain-text summary: one metrics row per fold plus the pooled rows,
    /// followed by the pooled confusion matrix.
    pub fn to_text(&self, arch: &str) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("%{:.2}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:>12}{:>12}{:>12}", "DBN layers", "Sensitivity", "Specificity", "Accuracy");
        for f in &self.folds {
            let m = &f.metrics;
            let name = format!("{arch} (fold {})", f.fold + 1);
            let _ = writeln!(out, "{name:<22}{:>12}{:>12}{:>12}", pct(m.sensitivity), pct(m.specificity), pct(m.accuracy));
        }
        let m = &self.pooled.metrics;
        let _ = writeln!(out, "{:<22}{:>12}{:>12}{:>12}", format!("{arch} pooled"), pct(m.sensitivity), pct(m.specificity), pct(m.accuracy));
        let p = &self.pooled.metrics_ppv_convention;
        let _ = writeln!(out, "{:<22}{:>12}{:>12}{:>12}", "  ppv convention", pct(p.sensitivity), pct(p.specificity), pct(p.accuracy));
        if let Some(v) = &self.subject_vote {
            let m = &v.metrics;
            let _ = writeln!(out, "{:<22}{:>12}{:>12}{:>12}", "  subject vote", pct(m.sensitivity), pct(m.specificity), pct(m.accuracy));
        }
        let cm = &self.pooled.cm;
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<10}{:>10}{:>10}", "", "Asthma", "Healthy");
        let _ = writeln!(out, "{:<10}{:>10}{:>10}", "Asthma", cm.tp, cm.fn_);
        let _ = writeln!(out, "{:<10}{:>10}{:>10}", "Healthy", cm.fp, cm.tn);
        out
    }
}
