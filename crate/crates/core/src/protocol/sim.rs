use super::{
    ComputeUnit, EventQueue, EventTrace, Message, MessageKind, NodeId, NoiseModel, ProtocolError,
    RouteTaken, RunLedger, SampleRun, Simulation, Topology, TraceEvent,
};
use crate::conformal::prediction_set;
use crate::fusion::{majority_vote, route, ModalityReport, Route};
use crate::metrics::{server_work_latent, server_work_raw, Approach};
use crate::perceiver::{LatentMatrix, ModalityTensor, Sample};
use crate::phy::{
    decode_mask, decode_reals, encode_mask, encode_reals, perturb_reals, transmit, BitPayload,
    ChannelConfig, PayloadKind,
};
use crate::rng;
use crate::tensor::{argmax, Matrix};

#[derive(Debug, Clone, Copy)]
enum DeviceJob {
    EncodeA,
    EncodeAB,
}

#[derive(Debug, Clone, Copy)]
enum ServerJob {
    RawPipeline,
    CrossModal,
}

enum Event {
    TxStart {
        kind: MessageKind,
        src: NodeId,
        dst: NodeId,
        bits: usize,
        end: f64,
    },
    Arrive(Message),
    DeviceDone {
        device: usize,
        job: DeviceJob,
        start: f64,
    },
    ServerDone {
        job: ServerJob,
        start: f64,
    },
}

struct Device<'s> {
    modality: usize,
    input: Option<&'s ModalityTensor>,
    latent: Option<LatentMatrix>,
    encoder_a_runs: usize,
    busy_until: f64,
}

struct Sim<'a, 's> {
    approach: Approach,
    sample: &'s Sample,
    ctx: &'a Simulation<'a>,
    classes: usize,
    queue: EventQueue<Event>,
    now: f64,
    channel_free_at: f64,
    server_busy_until: f64,
    trace: EventTrace,
    devices: Vec<Device<'s>>,

    awaiting: usize,
    raw: Vec<ModalityTensor>,
    labels: Vec<usize>,
    reports: Vec<ModalityReport>,
    latents: Vec<(usize, LatentMatrix)>,
    route: Option<RouteTaken>,

    prediction: Option<usize>,
    latency: f64,
    uplink_bits: usize,
    downlink_bits: usize,
    compute_energy: f64,
    transmit_energy: f64,
    sends: u64,
}

/// Simulates one sample end to end under `approach`.
pub fn run_sample(
    approach: Approach,
    sample: &Sample,
    sim: &Simulation<'_>,
) -> Result<SampleRun, ProtocolError> {
    let cfg = sim.config;
    if cfg.rate_bps.is_nan() || cfg.rate_bps <= 0.0 {
        return Err(ProtocolError::Rate(cfg.rate_bps));
    }
    let topology = Topology::for_task(&sim.model.registry, sample.task)?;
    let classes = sim.model.registry.task(sample.task)?.classes;
    if matches!(approach, Approach::A4 | Approach::A5) && sim.calibration.is_none() {
        return Err(ProtocolError::NoCalibration(approach));
    }
    let devices: Vec<Device<'_>> = topology
        .devices
        .iter()
        .map(|&modality| Device {
            modality,
            input: sample.input(modality),
            latent: None,
            encoder_a_runs: 0,
            busy_until: 0.0,
        })
        .collect();
    if let Some(missing) = devices.iter().find(|d| d.input.is_none()) {
        if matches!(approach, Approach::A1 | Approach::A3) {
            return Err(ProtocolError::MissingModality {
                sample: sample.id,
                modality: missing.modality,
                approach,
            });
        }
    }
    if devices.iter().all(|d| d.input.is_none()) {
        return Err(ProtocolError::NoModalities(sample.id));
    }

    let mut s = Sim {
        approach,
        sample,
        ctx: sim,
        classes,
        queue: EventQueue::new(),
        now: 0.0,
        channel_free_at: 0.0,
        server_busy_until: 0.0,
        trace: EventTrace::default(),
        devices,
        awaiting: 0,
        raw: Vec::new(),
        labels: Vec::new(),
        reports: Vec::new(),
        latents: Vec::new(),
        route: None,
        prediction: None,
        latency: 0.0,
        uplink_bits: 0,
        downlink_bits: 0,
        compute_energy: 0.0,
        transmit_energy: 0.0,
        sends: 0,
    };
    s.send(
        MessageKind::TaskRequest,
        NodeId::User,
        NodeId::Server,
        Vec::new(),
    );
    while let Some((time, event)) = s.queue.pop() {
        s.now = time;
        s.handle(event)?;
    }
    let prediction = s.prediction.ok_or(ProtocolError::Stalled)?;
    let ledger = RunLedger {
        sample_id: sample.id,
        approach,
        label: sample.label,
        prediction,
        route: s.route,
        uplink_bits: s.uplink_bits,
        downlink_bits: s.downlink_bits,
        latency_s: s.latency,
        compute_energy_j: s.compute_energy,
        transmit_energy_j: s.transmit_energy,
        encoder_a_runs: s.devices.iter().map(|d| d.encoder_a_runs).collect(),
    };
    Ok(SampleRun {
        prediction,
        trace: s.trace,
        ledger,
    })
}

fn node_code(n: NodeId) -> u64 {
    match n {
        NodeId::User => 0,
        NodeId::Server => 1,
        NodeId::Device(d) => 2 + d as u64,
    }
}

impl Sim<'_, '_> {
    fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| d.input.is_some())
            .map(|(i, _)| i)
    }

    /// Reserves the shared channel and schedules delivery. Empty messages
    /// take no airtime and do not touch the channel.
    fn send(&mut self, kind: MessageKind, src: NodeId, dst: NodeId, payloads: Vec<BitPayload>) {
        let bits: usize = payloads.iter().map(BitPayload::len).sum();
        let (start, end) = if bits == 0 {
            (self.now, self.now)
        } else {
            let start = self.now.max(self.channel_free_at);
            let end = start + bits as f64 / self.ctx.config.rate_bps;
            self.channel_free_at = end;
            (start, end)
        };
        if let NodeId::Device(_) = src {
            self.uplink_bits += bits;
            self.transmit_energy += self.ctx.config.costs.device.p_t * (end - start);
        } else {
            self.downlink_bits += bits;
        }
        let payloads = self.channel(kind, src, payloads);
        self.queue.push(
            start,
            Event::TxStart {
                kind,
                src,
                dst,
                bits,
                end,
            },
        );
        self.queue.push(
            end,
            Event::Arrive(Message {
                kind,
                src,
                dst,
                payloads,
            }),
        );
    }

    fn channel(
        &mut self,
        kind: MessageKind,
        src: NodeId,
        payloads: Vec<BitPayload>,
    ) -> Vec<BitPayload> {
        let cfg = self.ctx.config;
        self.sends += 1;
        if cfg.reliable_control && kind.is_control_or_score() {
            return payloads;
        }
        let snr_db = match src {
            NodeId::Device(d) => cfg.channel.snr_db(self.devices[d].modality),
            _ => cfg.channel.default_db,
        };
        if snr_db == f64::INFINITY {
            return payloads;
        }
        payloads
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let seed = rng::derive(
                    cfg.seed,
                    &[self.sample.id, node_code(src), self.sends, i as u64],
                );
                match cfg.noise {
                    NoiseModel::Symbol => transmit(
                        &p,
                        &ChannelConfig {
                            snr_db,
                            modulation: kind.modulation(),
                            rate_bps: cfg.rate_bps,
                            seed,
                        },
                    ),
                    NoiseModel::Perturb if p.kind.is_real_valued() => {
                        let values = decode_reals(&p).expect("payload built from whole words");
                        encode_reals(&perturb_reals(&values, snr_db, seed), p.kind)
                            .expect("perturbed values are finite")
                    }
                    NoiseModel::Perturb => p,
                }
            })
            .collect()
    }

    fn device_compute(&mut self, device: usize, job: DeviceJob) {
        let costs = &self.ctx.config.costs;
        let units = match job {
            DeviceJob::EncodeA => 1.0,
            DeviceJob::EncodeAB => 2.0,
        };
        let d = &mut self.devices[device];
        let start = self.now.max(d.busy_until);
        let end = start + units * costs.compute.t_b / costs.device.c_iot;
        d.busy_until = end;
        self.compute_energy += units * costs.compute.t_b / costs.device.gamma_iot;
        self.queue
            .push(end, Event::DeviceDone { device, job, start });
    }

    fn server_compute(&mut self, job: ServerJob, flops: f64) {
        let server = self.ctx.config.costs.server;
        let start = self.now.max(self.server_busy_until);
        let end = start + flops / server.c_s;
        self.server_busy_until = end;
        self.compute_energy += flops / server.gamma_s;
        self.queue.push(end, Event::ServerDone { job, start });
    }

    fn send_result(&mut self, prediction: usize) -> Result<(), ProtocolError> {
        let payload = encode_reals(&[prediction as f64], PayloadKind::Result)?;
        self.send(
            MessageKind::TaskResult,
            NodeId::Server,
            NodeId::User,
            vec![payload],
        );
        Ok(())
    }

    fn decode_label(&self, p: Option<&BitPayload>) -> Result<usize, ProtocolError> {
        let value = match p {
            Some(p) => decode_reals(p)?.first().copied().unwrap_or(0.0),
            None => 0.0,
        };
        Ok(value.round().clamp(0.0, (self.classes - 1) as f64) as usize)
    }

    fn handle(&mut self, event: Event) -> Result<(), ProtocolError> {
        match event {
            Event::TxStart {
                kind,
                src,
                dst,
                bits,
                end,
            } => {
                self.trace.push(
                    self.now,
                    src,
                    TraceEvent::Transmit {
                        kind,
                        dst,
                        bits,
                        modulation: kind.modulation(),
                        start: self.now,
                        end,
                    },
                );
                Ok(())
            }
            Event::Arrive(msg) => {
                self.trace.push(
                    self.now,
                    msg.dst,
                    TraceEvent::Receive {
                        kind: msg.kind,
                        src: msg.src,
                    },
                );
                self.on_message(msg)
            }
            Event::DeviceDone { device, job, start } => self.on_device_done(device, job, start),
            Event::ServerDone { job, start } => self.on_server_done(job, start),
        }
    }

    fn on_message(&mut self, msg: Message) -> Result<(), ProtocolError> {
        match (msg.dst, msg.kind) {
            (NodeId::Server, MessageKind::TaskRequest) => {
                let request = match self.approach {
                    Approach::A3 => MessageKind::LatentRequest,
                    _ => MessageKind::SensorRequest,
                };
                let active: Vec<usize> = self.active().collect();
                self.awaiting = active.len();
                for d in active {
                    self.send(request, NodeId::Server, NodeId::Device(d), Vec::new());
                }
                Ok(())
            }
            (NodeId::Device(d), MessageKind::SensorRequest) => match self.approach {
                Approach::A1 => {
                    let input = self.devices[d]
                        .input
                        .expect("requests go to active devices");
                    let payload = encode_reals(input.data.data(), PayloadKind::RawData)?;
                    self.send(
                        MessageKind::RawData,
                        NodeId::Device(d),
                        NodeId::Server,
                        vec![payload],
                    );
                    Ok(())
                }
                _ => {
                    self.device_compute(d, DeviceJob::EncodeAB);
                    Ok(())
                }
            },
            (NodeId::Device(d), MessageKind::LatentRequest) => match &self.devices[d].latent {
                Some(latent) => {
                    let payload = encode_reals(latent.0.data(), PayloadKind::LatentData)?;
                    self.send(
                        MessageKind::LatentData,
                        NodeId::Device(d),
                        NodeId::Server,
                        vec![payload],
                    );
                    Ok(())
                }
                None => {
                    self.device_compute(d, DeviceJob::EncodeA);
                    Ok(())
                }
            },
            (NodeId::Server, MessageKind::RawData) => {
                let NodeId::Device(d) = msg.src else {
                    unreachable!("raw data comes from devices")
                };
                let modality = self.devices[d].modality;
                let spec = self.ctx.model.registry.modality(modality)?;
                let values = decode_reals(&msg.payloads[0])?;
                self.raw.push(ModalityTensor {
                    modality,
                    task: self.sample.task,
                    data: Matrix::new(spec.rows, spec.cols, values)
                        .map_err(crate::perceiver::ModelError::from)?,
                });
                if self.raw.len() == self.awaiting {
                    let flops = server_work_raw(self.ctx.config.costs.compute.t_b, self.raw.len());
                    self.server_compute(ServerJob::RawPipeline, flops);
                }
                Ok(())
            }
            (NodeId::Server, MessageKind::LatentData) => {
                let NodeId::Device(d) = msg.src else {
                    unreachable!("latents come from devices")
                };
                let (rows, cols) = self.ctx.model.config.latent_shape();
                let values = decode_reals(&msg.payloads[0])?;
                let latent = LatentMatrix(
                    Matrix::new(rows, cols, values).map_err(crate::perceiver::ModelError::from)?,
                );
                self.latents.push((self.devices[d].modality, latent));
                if self.latents.len() == self.awaiting {
                    let flops =
                        server_work_latent(self.ctx.config.costs.compute.t_b, self.latents.len());
                    self.server_compute(ServerJob::CrossModal, flops);
                }
                Ok(())
            }
            (NodeId::Server, MessageKind::UnimodalResult) => {
                let label = self.decode_label(msg.payloads.first())?;
                self.labels.push(label);
                if self.labels.len() == self.awaiting {
                    let mut r = rng::stream(self.ctx.config.seed, &[self.sample.id, 0x4d56]);
                    let vote = majority_vote(&self.labels, &mut r).expect("at least one vote");
                    self.trace.push(
                        self.now,
                        NodeId::Server,
                        TraceEvent::Voted { prediction: vote },
                    );
                    self.send_result(vote)?;
                }
                Ok(())
            }
            (NodeId::Server, MessageKind::SoftmaxAndSet) => {
                let NodeId::Device(d) = msg.src else {
                    unreachable!("scores come from devices")
                };
                let softmax: Vec<f64> = decode_reals(&msg.payloads[0])?
                    .into_iter()
                    .map(|p| p.clamp(0.0, 1.0))
                    .collect();
                let mut members = decode_mask(&msg.payloads[1], self.classes)?;
                if members.is_empty() {
                    members.push(argmax(&softmax));
                }
                self.reports.push(ModalityReport {
                    modality: self.devices[d].modality,
                    softmax,
                    set: crate::conformal::PredictionSet {
                        members: members.into_iter().collect(),
                    },
                });
                if self.reports.len() == self.awaiting {
                    self.on_reports_complete()?;
                }
                Ok(())
            }
            (NodeId::User, MessageKind::TaskResult) => {
                let label = self.decode_label(msg.payloads.first())?;
                self.prediction = Some(label);
                self.latency = self.now;
                self.trace.push(
                    self.now,
                    NodeId::User,
                    TraceEvent::Delivered { prediction: label },
                );
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn on_reports_complete(&mut self) -> Result<(), ProtocolError> {
        let combiner = self.ctx.config.combiner;
        self.reports.sort_by_key(|r| r.modality);
        let fused = combiner.fuse(&self.reports)?;
        self.trace.push(
            self.now,
            NodeId::Server,
            TraceEvent::Fused {
                confidence: fused.confidence(),
            },
        );
        if self.approach == Approach::A4 {
            return self.send_result(fused.prediction());
        }
        let task = self.sample.task;
        let threshold = self
            .ctx
            .calibration
            .and_then(|c| c.threshold(task, combiner))
            .ok_or(ProtocolError::MissingThreshold { task, combiner })?;
        let decision = route(&fused, threshold)?;
        // cross-modal attention needs two latents; with one report the
        // fused score is all there is
        let decision = match decision {
            Route::Complex if self.reports.len() < 2 => Route::Simple(fused.prediction()),
            d => d,
        };
        match decision {
            Route::Simple(class) => {
                self.route = Some(RouteTaken::Simple);
                self.trace.push(
                    self.now,
                    NodeId::Server,
                    TraceEvent::Routed(RouteTaken::Simple),
                );
                self.send_result(class)
            }
            Route::Complex => {
                self.route = Some(RouteTaken::Complex);
                self.trace.push(
                    self.now,
                    NodeId::Server,
                    TraceEvent::Routed(RouteTaken::Complex),
                );
                let reporters: Vec<usize> = self.active().collect();
                self.awaiting = reporters.len();
                for d in reporters {
                    self.send(
                        MessageKind::LatentRequest,
                        NodeId::Server,
                        NodeId::Device(d),
                        Vec::new(),
                    );
                }
                Ok(())
            }
        }
    }

    fn on_device_done(
        &mut self,
        device: usize,
        job: DeviceJob,
        start: f64,
    ) -> Result<(), ProtocolError> {
        let model = self.ctx.model;
        let input = self.devices[device]
            .input
            .expect("jobs run on active devices");
        let x = model.pad_and_embed(input)?;
        let latent = model.encode_a(&x)?;
        self.devices[device].encoder_a_runs += 1;
        let node = NodeId::Device(device);
        let unit_time = self.ctx.config.costs.compute.t_b / self.ctx.config.costs.device.c_iot;
        self.trace.push(
            self.now,
            node,
            TraceEvent::Compute {
                unit: ComputeUnit::EncoderA,
                start,
                end: start + unit_time,
            },
        );
        match job {
            DeviceJob::EncodeA => {
                let payload = encode_reals(latent.0.data(), PayloadKind::LatentData)?;
                self.devices[device].latent = Some(latent);
                self.send(MessageKind::LatentData, node, NodeId::Server, vec![payload]);
            }
            DeviceJob::EncodeAB => {
                let lcp = model.encode_b(&x, &latent)?;
                let softmax = model.task_head(&lcp, self.sample.task)?;
                self.devices[device].latent = Some(latent);
                self.trace.push(
                    self.now,
                    node,
                    TraceEvent::Compute {
                        unit: ComputeUnit::EncoderB,
                        start: start + unit_time,
                        end: self.now,
                    },
                );
                if self.approach == Approach::A2 {
                    let payload = encode_reals(&[argmax(&softmax) as f64], PayloadKind::Result)?;
                    self.send(
                        MessageKind::UnimodalResult,
                        node,
                        NodeId::Server,
                        vec![payload],
                    );
                } else {
                    let modality = self.devices[device].modality;
                    let task = self.sample.task;
                    let q = self
                        .ctx
                        .calibration
                        .and_then(|c| c.quantile(task, modality))
                        .ok_or(ProtocolError::MissingQuantile { task, modality })?;
                    let set = prediction_set(&softmax, q.q_hat);
                    let scores = encode_reals(&softmax, PayloadKind::Softmax)?;
                    let mask = encode_mask(set.members.iter().copied(), self.classes);
                    self.send(
                        MessageKind::SoftmaxAndSet,
                        node,
                        NodeId::Server,
                        vec![scores, mask],
                    );
                }
            }
        }
        Ok(())
    }

    fn on_server_done(&mut self, job: ServerJob, start: f64) -> Result<(), ProtocolError> {
        let model = self.ctx.model;
        let task = self.sample.task;
        let (unit, out) = match job {
            ServerJob::RawPipeline => {
                self.raw.sort_by_key(|m| m.modality);
                (
                    ComputeUnit::RawPipeline,
                    model.classify_raw(&self.raw, task)?,
                )
            }
            ServerJob::CrossModal => (
                ComputeUnit::CrossModal,
                model.multimodal_cross_attention(&self.latents, task)?,
            ),
        };
        self.trace.push(
            self.now,
            NodeId::Server,
            TraceEvent::Compute {
                unit,
                start,
                end: self.now,
            },
        );
        self.send_result(argmax(&out.softmax))
    }
}
