//! Closed-form latency and energy of the five communication approaches.
//!
//! Work is counted in FLOPs, compute rates in FLOPs/s and efficiency in
//! FLOPs/J.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perceiver::{count_block_multiplies, BlockShape, PerceiverConfig};
use crate::phy::FixedPointCodec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("approach A5 needs the simple-sample fraction p_h")]
    MissingSimpleFraction,
    #[error("p_h must lie in [0, 1], got {0}")]
    SimpleFraction(f64),
    #[error("data rate must be positive, got {0}")]
    Rate(f64),
    #[error("payload lists {got} modalities, task has {expected}")]
    ModalityCount { expected: usize, got: usize },
    #[error("unknown approach `{0}` (expected A1..A5)")]
    UnknownApproach(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    /// Raw sensor data to the server, which runs the whole model.
    A1,
    /// Per-device classification, majority vote at the server.
    A2,
    /// Latents to the server, cross-modal attention there.
    A3,
    /// Softmax scores and conformal sets, set-size-scaled fusion.
    A4,
    /// Like A4, with a latent fallback for low-confidence samples.
    A5,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::A1,
        Approach::A2,
        Approach::A3,
        Approach::A4,
        Approach::A5,
    ];
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Approach {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Ok(Approach::A1),
            "A2" => Ok(Approach::A2),
            "A3" => Ok(Approach::A3),
            "A4" => Ok(Approach::A4),
            "A5" => Ok(Approach::A5),
            _ => Err(MetricsError::UnknownApproach(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// FLOPs per second.
    pub c_iot: f64,
    /// FLOPs per joule.
    pub gamma_iot: f64,
    /// Transmit power in watts.
    pub p_t: f64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            c_iot: 3.62e9,
            gamma_iot: 0.813e9,
            p_t: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerProfile {
    pub c_s: f64,
    pub gamma_s: f64,
}

impl Default for ServerProfile {
    fn default() -> Self {
        Self {
            c_s: 428e9,
            gamma_s: 2.13e9,
        }
    }
}

/// FLOPs of one encoder or cross-attention unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeCost {
    pub t_b: f64,
}

impl Default for ComputeCost {
    fn default() -> Self {
        Self { t_b: 0.5e9 }
    }
}

/// Everything the closed forms need besides the approach.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub device: DeviceProfile,
    pub server: ServerProfile,
    pub compute: ComputeCost,
}

/// Per-modality uplink sizes of one task, in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub raw_bits: Vec<u64>,
    pub latent_bits: Vec<u64>,
    pub result_bits: Vec<u64>,
}

impl TaskPayload {
    /// Two modalities: a 28x28 image and a 112x112 spectrogram, 20x64 latents,
    /// every value one 18-bit word.
    pub fn reference_task() -> Self {
        let word = u64::from(FixedPointCodec::Q9_9.word_bits());
        Self {
            raw_bits: vec![784 * word, 12544 * word],
            latent_bits: vec![20 * 64 * word; 2],
            result_bits: vec![word; 2],
        }
    }

    pub fn modalities(&self) -> usize {
        self.raw_bits.len()
    }

    fn check(&self) -> Result<usize, MetricsError> {
        let n = self.raw_bits.len();
        for got in [self.latent_bits.len(), self.result_bits.len()] {
            if got != n {
                return Err(MetricsError::ModalityCount { expected: n, got });
            }
        }
        Ok(n)
    }

    pub fn total_raw(&self) -> u64 {
        self.raw_bits.iter().sum()
    }

    pub fn total_latent(&self) -> u64 {
        self.latent_bits.iter().sum()
    }

    pub fn total_results(&self) -> u64 {
        self.result_bits.iter().sum()
    }
}

/// Server FLOPs when it runs everything from raw data:
/// `|T|` encoders plus `|T|(|T|-1)` cross-attention units.
pub fn server_work_raw(t_b: f64, modalities: usize) -> f64 {
    let n = modalities as f64;
    t_b * n + t_b * (n - 1.0) * n
}

/// FLOPs of the pairwise cross-modal attention.
pub fn server_work_latent(t_b: f64, modalities: usize) -> f64 {
    let n = modalities as f64;
    (n - 1.0) * n * t_b
}

fn check_inputs(rate_bps: f64, p_h: Option<f64>, approach: Approach) -> Result<f64, MetricsError> {
    if rate_bps.is_nan() || rate_bps <= 0.0 {
        return Err(MetricsError::Rate(rate_bps));
    }
    match (approach, p_h) {
        (Approach::A5, None) => Err(MetricsError::MissingSimpleFraction),
        (Approach::A5, Some(p)) if !(0.0..=1.0).contains(&p) => {
            Err(MetricsError::SimpleFraction(p))
        }
        (_, p) => Ok(p.unwrap_or(1.0)),
    }
}

impl CostModel {
    /// End-to-end latency in seconds.
    pub fn latency(
        &self,
        approach: Approach,
        payload: &TaskPayload,
        rate_bps: f64,
        p_h: Option<f64>,
    ) -> Result<f64, MetricsError> {
        let p_h = check_inputs(rate_bps, p_h, approach)?;
        let n = payload.check()?;
        let t_b = self.compute.t_b;
        let (c_iot, c_s) = (self.device.c_iot, self.server.c_s);
        let local = 2.0 * t_b / c_iot;
        let latent_path =
            payload.total_latent() as f64 / rate_bps + server_work_latent(t_b, n) / c_s;
        Ok(match approach {
            Approach::A1 => payload.total_raw() as f64 / rate_bps + server_work_raw(t_b, n) / c_s,
            Approach::A2 | Approach::A4 => local,
            Approach::A3 => t_b / c_iot + latent_path,
            Approach::A5 => p_h * local + (1.0 - p_h) * (local + latent_path),
        })
    }

    /// Total energy in joules across devices and server.
    pub fn energy(
        &self,
        approach: Approach,
        payload: &TaskPayload,
        rate_bps: f64,
        p_h: Option<f64>,
    ) -> Result<f64, MetricsError> {
        let p_h = check_inputs(rate_bps, p_h, approach)?;
        let n = payload.check()?;
        let t_b = self.compute.t_b;
        let DeviceProfile { gamma_iot, p_t, .. } = self.device;
        let gamma_s = self.server.gamma_s;
        let local = 2.0 * t_b * n as f64 / gamma_iot;
        let latent_path =
            payload.total_latent() as f64 * p_t / rate_bps + server_work_latent(t_b, n) / gamma_s;
        Ok(match approach {
            Approach::A1 => {
                p_t * payload.total_raw() as f64 / rate_bps + server_work_raw(t_b, n) / gamma_s
            }
            Approach::A2 | Approach::A4 => local,
            Approach::A3 => t_b * n as f64 / gamma_iot + latent_path,
            Approach::A5 => p_h * local + (1.0 - p_h) * (local + latent_path),
        })
    }

    /// Approach with the smallest closed-form latency; ties keep the
    /// earlier approach.
    pub fn fastest(
        &self,
        payload: &TaskPayload,
        rate_bps: f64,
        p_h: f64,
    ) -> Result<Approach, MetricsError> {
        let mut best = (Approach::A1, f64::INFINITY);
        for a in Approach::ALL {
            let t = self.latency(a, payload, rate_bps, Some(p_h))?;
            if t < best.1 {
                best = (a, t);
            }
        }
        Ok(best.0)
    }
}

/// Multiply-accumulate count of one encoder unit on an input of the given
/// shape.
pub fn count_flops(cfg: &PerceiverConfig, input_rows: usize, input_cols: usize) -> u64 {
    count_block_multiplies(
        cfg,
        BlockShape {
            input_rows,
            input_cols,
        },
    )
}
