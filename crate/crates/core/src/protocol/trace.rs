use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{MessageKind, NodeId, RouteTaken};
use crate::phy::Modulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputeUnit {
    EncoderA,
    EncoderB,
    CrossModal,
    /// Encoders and cross-modal attention run together on raw inputs.
    RawPipeline,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Transmit {
        kind: MessageKind,
        dst: NodeId,
        bits: usize,
        modulation: Modulation,
        start: f64,
        end: f64,
    },
    Receive {
        kind: MessageKind,
        src: NodeId,
    },
    Compute {
        unit: ComputeUnit,
        start: f64,
        end: f64,
    },
    Fused {
        confidence: f64,
    },
    Voted {
        prediction: usize,
    },
    Routed(RouteTaken),
    Delivered {
        prediction: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub time: f64,
    pub node: NodeId,
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceViolation {
    #[error("entry {index} at {time}s precedes the entry before it")]
    TimeOrder { index: usize, time: f64 },
    #[error("transmissions of {a} and {b} overlap at {time}s")]
    Overlap { a: NodeId, b: NodeId, time: f64 },
    #[error("{node} sent latent data without a latent request")]
    UnrequestedLatent { node: NodeId },
    #[error("task result sent before the server reached a decision")]
    UnjustifiedResult,
    #[error("{node} ran encoder A {runs} times")]
    RepeatedEncoding { node: NodeId, runs: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTrace {
    pub entries: Vec<TraceEntry>,
}

impl EventTrace {
    pub fn push(&mut self, time: f64, node: NodeId, event: TraceEvent) {
        self.entries.push(TraceEntry { time, node, event });
    }

    pub fn transmissions(&self) -> impl Iterator<Item = (&TraceEntry, MessageKind, usize)> {
        self.entries.iter().filter_map(|e| match e.event {
            TraceEvent::Transmit { kind, bits, .. } => Some((e, kind, bits)),
            _ => None,
        })
    }

    pub fn count_sent(&self, kind: MessageKind) -> usize {
        self.transmissions().filter(|(_, k, _)| *k == kind).count()
    }

    pub fn bits_sent(&self, kind: MessageKind) -> usize {
        self.transmissions()
            .filter(|(_, k, _)| *k == kind)
            .map(|(_, _, b)| b)
            .sum()
    }

    pub fn compute_runs(&self, node: NodeId, unit: ComputeUnit) -> usize {
        self.entries
            .iter()
            .filter(|e| {
                e.node == node
                    && matches!(e.event, TraceEvent::Compute { unit: u, .. } if u == unit)
            })
            .count()
    }

    /// One line per transmission: `time_s,node,msg_kind,bits,modulation`.
    pub fn export(&self) -> String {
        let mut out = String::from("time_s,node,msg_kind,bits,modulation\n");
        for e in &self.entries {
            if let TraceEvent::Transmit {
                kind,
                bits,
                modulation,
                ..
            } = e.event
            {
                let _ = writeln!(
                    out,
                    "{:.9},{},{},{},{}",
                    e.time,
                    e.node,
                    kind.name(),
                    bits,
                    modulation.name()
                );
            }
        }
        out
    }

    pub fn check_time_order(&self) -> Result<(), TraceViolation> {
        for (index, w) in self.entries.windows(2).enumerate() {
            if w[1].time < w[0].time {
                return Err(TraceViolation::TimeOrder {
                    index: index + 1,
                    time: w[1].time,
                });
            }
        }
        Ok(())
    }

    /// Airtime intervals never overlap; zero-length sends are exempt.
    pub fn check_tdma(&self) -> Result<(), TraceViolation> {
        let mut spans: Vec<(f64, f64, NodeId)> = self
            .entries
            .iter()
            .filter_map(|e| match e.event {
                TraceEvent::Transmit { start, end, .. } if end > start => {
                    Some((start, end, e.node))
                }
                _ => None,
            })
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(TraceViolation::Overlap {
                    a: w[0].2,
                    b: w[1].2,
                    time: w[1].0,
                });
            }
        }
        Ok(())
    }

    /// Latent data only follows a latent request to the same device. A task
    /// result needs a prior server decision (vote, fusion, simple route or
    /// cross-modal attention); a complex route withdraws the fused decision.
    pub fn check_causality(&self) -> Result<(), TraceViolation> {
        let mut requested: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut justified = false;
        for e in &self.entries {
            match &e.event {
                TraceEvent::Receive {
                    kind: MessageKind::LatentRequest,
                    ..
                } => *requested.entry(e.node).or_default() += 1,
                TraceEvent::Transmit {
                    kind: MessageKind::LatentData,
                    ..
                } => {
                    let left = requested.entry(e.node).or_default();
                    if *left == 0 {
                        return Err(TraceViolation::UnrequestedLatent { node: e.node });
                    }
                    *left -= 1;
                }
                TraceEvent::Routed(RouteTaken::Complex) => justified = false,
                TraceEvent::Voted { .. }
                | TraceEvent::Fused { .. }
                | TraceEvent::Routed(RouteTaken::Simple)
                | TraceEvent::Compute {
                    unit: ComputeUnit::CrossModal | ComputeUnit::RawPipeline,
                    ..
                } => justified = true,
                TraceEvent::Transmit {
                    kind: MessageKind::TaskResult,
                    ..
                } if !justified => return Err(TraceViolation::UnjustifiedResult),
                _ => {}
            }
        }
        Ok(())
    }

    /// Every device that encoded anything did so exactly once.
    pub fn check_compute_once(&self) -> Result<(), TraceViolation> {
        let mut runs: BTreeMap<NodeId, usize> = BTreeMap::new();
        for e in &self.entries {
            if let (
                NodeId::Device(_),
                TraceEvent::Compute {
                    unit: ComputeUnit::EncoderA,
                    ..
                },
            ) = (e.node, &e.event)
            {
                *runs.entry(e.node).or_default() += 1;
            }
        }
        match runs.into_iter().find(|(_, r)| *r != 1) {
            Some((node, runs)) => Err(TraceViolation::RepeatedEncoding { node, runs }),
            None => Ok(()),
        }
    }

    pub fn check_all(&self) -> Result<(), TraceViolation> {
        self.check_time_order()?;
        self.check_tdma()?;
        self.check_causality()?;
        self.check_compute_once()
    }
}
