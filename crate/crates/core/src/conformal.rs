//! Split conformal prediction over softmax classifiers, plus the
//! server-side confidence threshold used to route samples.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Combiner;
use crate::perceiver::{ModalityId, TaskId};
use crate::tensor::argmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("no calibration scores")]
    EmptyScores,
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("percentile must lie in [0, 1], got {0}")]
    Percentile(f64),
    #[error("no correctly classified calibration samples")]
    NoCorrectSamples,
    #[error("calibration artifact: {0}")]
    Artifact(String),
}

/// A calibration example: the classifier's softmax and the true label.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub softmax: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalQuantile {
    pub task: TaskId,
    pub modality: ModalityId,
    pub alpha: f64,
    pub q_hat: f64,
    pub n_cal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub members: BTreeSet<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.contains(&class)
    }
}

/// Confidence threshold for one task and combiner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThreshold {
    pub task: TaskId,
    pub combiner: Combiner,
    pub alpha2: f64,
    pub q_e: f64,
}

/// Nonconformity `1 - softmax[label]`.
pub fn conformal_score(r: &CalibrationRecord) -> Result<f64, ConformalError> {
    let p = r.softmax.get(r.label).ok_or(ConformalError::Label {
        label: r.label,
        classes: r.softmax.len(),
    })?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Rank of the conformal quantile among `n` sorted scores (1-based),
/// `ceil((n + 1)(1 - alpha))` clamped to `n`.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    // absorbs representation error in products such as 10 * 0.9
    let rank = (target - 1e-9).ceil().max(1.0) as usize;
    rank.min(n)
}

pub fn calibrate_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::Alpha(alpha));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_rank(sorted.len(), alpha) - 1])
}

/// Calibrates one `(task, modality)` quantile from labelled softmax outputs.
pub fn calibrate(
    records: &[CalibrationRecord],
    alpha: f64,
    task: TaskId,
    modality: ModalityId,
) -> Result<ConformalQuantile, ConformalError> {
    let scores = records
        .iter()
        .map(conformal_score)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConformalQuantile {
        task,
        modality,
        alpha,
        q_hat: calibrate_quantile(&scores, alpha)?,
        n_cal: scores.len(),
    })
}

/// Classes whose score strictly exceeds `1 - q_hat`; never empty, the
/// argmax stands in when nothing clears the threshold.
pub fn prediction_set(softmax: &[f64], q_hat: f64) -> PredictionSet {
    let threshold = 1.0 - q_hat;
    let mut members: BTreeSet<usize> = softmax
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(k, _)| k)
        .collect();
    if members.is_empty() && !softmax.is_empty() {
        members.insert(argmax(softmax));
    }
    PredictionSet { members }
}

/// Fraction of records whose label lands in its prediction set.
pub fn coverage(test: &[CalibrationRecord], q_hat: f64) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = test
        .iter()
        .filter(|r| prediction_set(&r.softmax, q_hat).contains(r.label))
        .count();
    hits as f64 / test.len() as f64
}

/// Linear-interpolation percentile (`p` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `alpha2`-percentile of the fused confidence over correctly classified
/// calibration samples. `samples` holds `(confidence, correct)` pairs.
pub fn calibrate_adaptive_threshold(
    samples: &[(f64, bool)],
    alpha2: f64,
    task: TaskId,
    combiner: Combiner,
) -> Result<AdaptiveThreshold, ConformalError> {
    if !(0.0..=1.0).contains(&alpha2) {
        return Err(ConformalError::Percentile(alpha2));
    }
    let correct: Vec<f64> = samples
        .iter()
        .filter(|(_, ok)| *ok)
        .map(|(c, _)| *c)
        .collect();
    if correct.is_empty() {
        return Err(ConformalError::NoCorrectSamples);
    }
    Ok(AdaptiveThreshold {
        task,
        combiner,
        alpha2,
        q_e: percentile(&correct, alpha2),
    })
}

/// Everything the server and devices need after calibration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(default)]
    pub quantiles: Vec<ConformalQuantile>,
    #[serde(default)]
    pub thresholds: Vec<AdaptiveThreshold>,
}

impl Calibration {
    pub fn quantile(&self, task: TaskId, modality: ModalityId) -> Option<&ConformalQuantile> {
        self.quantiles
            .iter()
            .find(|q| q.task == task && q.modality == modality)
    }

    pub fn threshold(&self, task: TaskId, combiner: Combiner) -> Option<&AdaptiveThreshold> {
        self.thresholds
            .iter()
            .find(|t| t.task == task && t.combiner == combiner)
    }

    pub fn to_toml(&self) -> Result<String, ConformalError> {
        toml::to_string(self).map_err(|e| ConformalError::Artifact(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, ConformalError> {
        toml::from_str(text).map_err(|e| ConformalError::Artifact(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConformalError> {
        std::fs::write(path, self.to_toml()?).map_err(|e| ConformalError::Artifact(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConformalError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConformalError::Artifact(e.to_string()))?;
        Self::from_toml(&text)
    }
}
