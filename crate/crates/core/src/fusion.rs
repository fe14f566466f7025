//! Server-side combination of per-modality reports.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{AdaptiveThreshold, PredictionSet};
use crate::perceiver::ModalityId;
use crate::tensor::argmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no reports to combine")]
    Empty,
    #[error("report has {got} classes, expected {expected}")]
    ClassCount { expected: usize, got: usize },
    #[error("empty prediction set from modality {0}")]
    EmptySet(ModalityId),
    #[error("beta must be at least 1, got {0}")]
    Beta(f64),
    #[error("threshold calibrated for {threshold:?}, scores fused with {fused:?}")]
    ScopeMismatch {
        threshold: Combiner,
        fused: Combiner,
    },
}

/// How the server weighs modality reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Combiner {
    /// Plain sum of softmax vectors.
    Ewc,
    /// Softmax vectors weighted by `|set|^-beta`, normalised.
    Sssc { beta: f64 },
}

impl Combiner {
    pub fn name(&self) -> &'static str {
        match self {
            Combiner::Ewc => "ewc",
            Combiner::Sssc { .. } => "sssc",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            Combiner::Ewc => None,
            Combiner::Sssc { beta } => Some(*beta),
        }
    }

    pub fn fuse(&self, reports: &[ModalityReport]) -> Result<FusedScore, FusionError> {
        match *self {
            Combiner::Ewc => ewc(reports),
            Combiner::Sssc { beta } => sssc(reports, beta),
        }
    }
}

impl Default for Combiner {
    fn default() -> Self {
        Combiner::Sssc { beta: 1.0 }
    }
}

/// What a device sends: its softmax and its conformal set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityReport {
    pub modality: ModalityId,
    pub softmax: Vec<f64>,
    pub set: PredictionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedScore {
    pub scores: Vec<f64>,
    pub combiner: Combiner,
    /// Number of reports that were combined.
    pub reports: usize,
}

impl FusedScore {
    pub fn prediction(&self) -> usize {
        argmax(&self.scores)
    }

    pub fn max(&self) -> f64 {
        self.scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maximum fused score on a `[0, 1]` scale: EWC sums are divided by the
    /// number of reports, SSSC is already normalised.
    pub fn confidence(&self) -> f64 {
        match self.combiner {
            Combiner::Ewc => self.max() / self.reports as f64,
            Combiner::Sssc { .. } => self.max(),
        }
    }
}

fn class_count(reports: &[ModalityReport]) -> Result<usize, FusionError> {
    let first = reports.first().ok_or(FusionError::Empty)?;
    let n = first.softmax.len();
    for r in reports {
        if r.softmax.len() != n {
            return Err(FusionError::ClassCount {
                expected: n,
                got: r.softmax.len(),
            });
        }
    }
    Ok(n)
}

/// Equal-weight combination: `c_t = Σ c_m`.
pub fn ewc(reports: &[ModalityReport]) -> Result<FusedScore, FusionError> {
    let n = class_count(reports)?;
    let mut scores = vec![0.0; n];
    for r in reports {
        for (s, &p) in scores.iter_mut().zip(&r.softmax) {
            *s += p;
        }
    }
    Ok(FusedScore {
        scores,
        combiner: Combiner::Ewc,
        reports: reports.len(),
    })
}

/// Set-size-scaled combination:
/// `c_t = (Σ c_m / |u_m|^β) / (Σ 1 / |u_m|^β)`.
pub fn sssc(reports: &[ModalityReport], beta: f64) -> Result<FusedScore, FusionError> {
    if beta.is_nan() || beta < 1.0 {
        return Err(FusionError::Beta(beta));
    }
    let n = class_count(reports)?;
    let mut scores = vec![0.0; n];
    let mut norm = 0.0;
    for r in reports {
        if r.set.is_empty() {
            return Err(FusionError::EmptySet(r.modality));
        }
        let w = (r.set.len() as f64).powf(-beta);
        norm += w;
        for (s, &p) in scores.iter_mut().zip(&r.softmax) {
            *s += w * p;
        }
    }
    for s in &mut scores {
        *s /= norm;
    }
    Ok(FusedScore {
        scores,
        combiner: Combiner::Sssc { beta },
        reports: reports.len(),
    })
}

/// Most frequent label; ties are broken uniformly at random.
pub fn majority_vote<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Option<usize> {
    let max_label = *labels.iter().max()?;
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let top = *counts.iter().max()?;
    let tied: Vec<usize> = (0..counts.len()).filter(|&l| counts[l] == top).collect();
    Some(if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// The fused score is trusted; carries the predicted class.
    Simple(usize),
    /// Escalate to cross-modal attention over the latents.
    Complex,
}

pub fn route(fused: &FusedScore, threshold: &AdaptiveThreshold) -> Result<Route, FusionError> {
    if fused.combiner != threshold.combiner {
        return Err(FusionError::ScopeMismatch {
            threshold: threshold.combiner,
            fused: fused.combiner,
        });
    }
    Ok(if fused.confidence() >= threshold.q_e {
        Route::Simple(fused.prediction())
    } else {
        Route::Complex
    })
}
