//! Task-oriented multimodal edge inference.
//!
//! Sensor devices run a shared latent cross-attention encoder over whatever
//! modality they host. The edge server combines their per-modality softmax
//! scores, weighting each by the size of its conformal prediction set, and
//! falls back to cross-modal attention over the raw latents when the fused
//! score is not confident enough. Every byte that crosses the air is
//! fixed-point encoded and modulated over an AWGN channel, and a closed-form
//! latency/energy model runs alongside the event-driven simulator.

pub mod conformal;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod perceiver;
pub mod phy;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use conformal::{AdaptiveThreshold, CalibrationRecord, ConformalQuantile, PredictionSet};
pub use fusion::{Combiner, FusedScore, ModalityReport, Route};
pub use metrics::{Approach, ComputeCost, DeviceProfile, ServerProfile};
pub use perceiver::{LatentMatrix, ModalityTensor, Model, PerceiverConfig};
pub use phy::{BitPayload, ChannelConfig, FixedPointCodec, Modulation, PayloadKind};
pub use tensor::{Matrix, ParamStore, Tape};
