//! Event-driven simulation of one user, one edge server and one device per
//! modality, under each of the five communication approaches.

mod queue;
mod sim;
mod trace;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::Calibration;
use crate::fusion::{Combiner, FusionError};
use crate::metrics::{Approach, CostModel};
use crate::perceiver::{ModalityId, Model, ModelError, Registry, Sample, TaskId};
use crate::phy::{BitPayload, Modulation, PhyError};

pub use queue::EventQueue;
pub use sim::run_sample;
pub use trace::{ComputeUnit, EventTrace, TraceEntry, TraceEvent, TraceViolation};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("sample {sample} lacks modality {modality}, which {approach} cannot do without")]
    MissingModality {
        sample: u64,
        modality: ModalityId,
        approach: Approach,
    },
    #[error("sample {0} carries none of its task's modalities")]
    NoModalities(u64),
    #[error("{0} needs a calibration artifact")]
    NoCalibration(Approach),
    #[error("no conformal quantile for task {task}, modality {modality}")]
    MissingQuantile { task: TaskId, modality: ModalityId },
    #[error("no routing threshold for task {task} with combiner {combiner:?}")]
    MissingThreshold { task: TaskId, combiner: Combiner },
    #[error("data rate must be positive, got {0}")]
    Rate(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("simulation ended without delivering a result")]
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    User,
    Server,
    Device(usize),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::User => write!(f, "user"),
            NodeId::Server => write!(f, "server"),
            NodeId::Device(d) => write!(f, "device{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    TaskRequest,
    SensorRequest,
    SoftmaxAndSet,
    LatentRequest,
    LatentData,
    RawData,
    UnimodalResult,
    TaskResult,
}

impl MessageKind {
    pub fn modulation(self) -> Modulation {
        match self {
            MessageKind::LatentData | MessageKind::RawData => Modulation::Qam64,
            _ => Modulation::Qpsk,
        }
    }

    /// Traffic that the reliable-control setting keeps error-free.
    pub fn is_control_or_score(self) -> bool {
        matches!(
            self,
            MessageKind::TaskRequest
                | MessageKind::SensorRequest
                | MessageKind::LatentRequest
                | MessageKind::SoftmaxAndSet
                | MessageKind::TaskResult
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::TaskRequest => "TaskRequest",
            MessageKind::SensorRequest => "SensorRequest",
            MessageKind::SoftmaxAndSet => "SoftmaxAndSet",
            MessageKind::LatentRequest => "LatentRequest",
            MessageKind::LatentData => "LatentData",
            MessageKind::RawData => "RawData",
            MessageKind::UnimodalResult => "UnimodalResult",
            MessageKind::TaskResult => "TaskResult",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub src: NodeId,
    pub dst: NodeId,
    /// Payload sections, e.g. softmax words followed by a set mask.
    pub payloads: Vec<BitPayload>,
}

impl Message {
    pub fn bits(&self) -> usize {
        self.payloads.iter().map(BitPayload::len).sum()
    }
}

/// One device per task modality, in task order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub task: TaskId,
    pub devices: Vec<ModalityId>,
}

impl Topology {
    pub fn for_task(registry: &Registry, task: TaskId) -> Result<Self, ModelError> {
        Ok(Self {
            task,
            devices: registry.task(task)?.modalities.clone(),
        })
    }

    pub fn device_of(&self, modality: ModalityId) -> Option<usize> {
        self.devices.iter().position(|&m| m == modality)
    }
}

/// Per-modality uplink SNR (Es/N0, dB). Server downlink uses the default.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    pub default_db: f64,
    pub overrides: BTreeMap<ModalityId, f64>,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self::uniform(f64::INFINITY)
    }
}

impl ChannelPlan {
    pub fn uniform(snr_db: f64) -> Self {
        Self {
            default_db: snr_db,
            overrides: BTreeMap::new(),
        }
    }

    pub fn snr_db(&self, modality: ModalityId) -> f64 {
        self.overrides
            .get(&modality)
            .copied()
            .unwrap_or(self.default_db)
    }

    /// Routes everything `modality` transmits through a channel at `snr_db`.
    pub fn degrade_modality(mut self, modality: ModalityId, snr_db: f64) -> Self {
        self.overrides.insert(modality, snr_db);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// Bits are modulated, disturbed by AWGN and hard-demapped.
    #[default]
    Symbol,
    /// Real-valued payloads get Gaussian noise added directly, scaled by
    /// their mean power; set masks pass unchanged.
    Perturb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub rate_bps: f64,
    pub channel: ChannelPlan,
    /// Keep control, score and set traffic error-free.
    pub reliable_control: bool,
    pub noise: NoiseModel,
    pub combiner: Combiner,
    pub costs: CostModel,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rate_bps: 1e6,
            channel: ChannelPlan::default(),
            reliable_control: true,
            noise: NoiseModel::Symbol,
            combiner: Combiner::default(),
            costs: CostModel::default(),
            seed: 0,
        }
    }
}

/// What a simulation needs besides the sample.
#[derive(Debug, Clone, Copy)]
pub struct Simulation<'a> {
    pub model: &'a Model,
    pub calibration: Option<&'a Calibration>,
    pub config: &'a SimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTaken {
    Simple,
    Complex,
}

/// Outcome and cost of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub sample_id: u64,
    pub approach: Approach,
    pub label: usize,
    pub prediction: usize,
    pub route: Option<RouteTaken>,
    pub uplink_bits: usize,
    pub downlink_bits: usize,
    pub latency_s: f64,
    pub compute_energy_j: f64,
    pub transmit_energy_j: f64,
    /// Encoder A executions per device.
    pub encoder_a_runs: Vec<usize>,
}

impl RunLedger {
    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }

    pub fn energy_j(&self) -> f64 {
        self.compute_energy_j + self.transmit_energy_j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub prediction: usize,
    pub trace: EventTrace,
    pub ledger: RunLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLedger {
    pub approach: Approach,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_latency_s: f64,
    pub mean_energy_j: f64,
    pub mean_uplink_bits: f64,
    /// Fraction routed Simple; only meaningful for A5.
    pub p_h: Option<f64>,
    pub ledgers: Vec<RunLedger>,
}

/// Runs every sample independently and aggregates the ledgers. Samples run
/// in parallel; each draws its randomness from its own id, so the result
/// does not depend on scheduling.
pub fn run_dataset(
    approach: Approach,
    samples: &[Sample],
    sim: &Simulation<'_>,
) -> Result<DatasetLedger, ProtocolError> {
    if samples.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let ledgers = samples
        .par_iter()
        .map(|s| run_sample(approach, s, sim).map(|r| r.ledger))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(approach, ledgers))
}

pub fn aggregate(approach: Approach, ledgers: Vec<RunLedger>) -> DatasetLedger {
    let n = ledgers.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RunLedger) -> f64| ledgers.iter().map(f).sum::<f64>() / n;
    let p_h = (approach == Approach::A5)
        .then(|| mean(&|l| f64::from(u8::from(l.route == Some(RouteTaken::Simple)))));
    DatasetLedger {
        approach,
        samples: ledgers.len(),
        accuracy: mean(&|l| f64::from(u8::from(l.correct()))),
        mean_latency_s: mean(&|l| l.latency_s),
        mean_energy_j: mean(&|l| l.energy_j()),
        mean_uplink_bits: mean(&|l| l.uplink_bits as f64),
        p_h,
        ledgers,
    }
}
