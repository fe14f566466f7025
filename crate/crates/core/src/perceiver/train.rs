//! Two-stage training.
//!
//! Stage 1 fits encoder A, its latent array, the cross-modal unit and the
//! fusion heads jointly on the fused cross-entropy. Stage 2 freezes all of
//! that and fits encoder B and the per-task heads on per-modality
//! cross-entropy.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{
    fusion_head_prefix, task_head_prefix, CROSS_MODAL, ENCODER_A, ENCODER_B, LATENT_INIT,
};
use super::{Graph, LatentMatrix, Model, ModelError, Sample};
use crate::rng;
use crate::tensor::{AdamW, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 30,
            batch_size: 16,
            lr: 0.001,
            weight_decay: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean fused cross-entropy per stage-1 epoch.
    pub stage1_loss: Vec<f64>,
    /// Mean per-modality cross-entropy per stage-2 epoch.
    pub stage2_loss: Vec<f64>,
}

/// Fails with [`ModelError::DataLeak`] if any sample id appears in two splits.
pub fn check_disjoint(splits: &[&[Sample]]) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for split in splits {
        let mut local = HashSet::new();
        for s in split.iter() {
            local.insert(s.id);
        }
        for id in local {
            if !seen.insert(id) {
                return Err(ModelError::DataLeak(id));
            }
        }
    }
    Ok(())
}

fn check_labels(model: &Model, samples: &[Sample]) -> Result<(), ModelError> {
    for s in samples {
        let task = model.registry.task(s.task)?;
        if s.label >= task.classes {
            return Err(ModelError::Label {
                task: s.task,
                label: s.label,
            });
        }
    }
    Ok(())
}

/// Trains `model` in place on `train`. `held_out` lists the calibration
/// and test splits, which must not share samples with `train`.
pub fn train(
    model: &mut Model,
    train: &[Sample],
    held_out: &[&[Sample]],
    schedule: &TrainSchedule,
) -> Result<TrainReport, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    let mut splits = vec![train];
    splits.extend_from_slice(held_out);
    check_disjoint(&splits)?;
    check_labels(model, train)?;

    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = schedule.batch_size.max(1);

    let multimodal: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| model.registry.tasks[train[i].task].modalities.len() >= 2)
        .collect();
    let mut fusion_prefixes = vec![
        ENCODER_A.to_string(),
        LATENT_INIT.to_string(),
        CROSS_MODAL.to_string(),
    ];
    for t in 0..model.registry.tasks.len() {
        fusion_prefixes.push(format!("{}.", fusion_head_prefix(t)));
    }
    let stage1: Vec<&str> = fusion_prefixes.iter().map(String::as_str).collect();
    let mut opt = AdamW::new(schedule.lr, schedule.weight_decay);
    let mut shuffle = rng::stream(schedule.seed, &[0x5747, 1]);
    let mut stage1_order = multimodal;
    for _ in 0..schedule.stage1_epochs {
        stage1_order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in stage1_order.chunks(batch) {
            let params = model.params.clone();
            let mut g = Graph::training(&params, &stage1);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                losses.push(fused_loss(model, &mut g, &train[i])?);
            }
            let loss = mean_of(&mut g, &losses)?;
            total += g.value(loss)[(0, 0)];
            batches += 1;
            let grads = g.gradients(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        if batches > 0 {
            report.stage1_loss.push(total / batches as f64);
        }
    }

    // Encoder A is frozen from here on, so its latents can be computed once.
    let mut cache: BTreeMap<(usize, usize), LatentMatrix> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        for m in &s.inputs {
            let x = model.pad_and_embed(m)?;
            cache.insert((i, m.modality), model.encode_a(&x)?);
        }
    }

    let mut head_prefixes = vec![ENCODER_B.to_string()];
    for t in 0..model.registry.tasks.len() {
        head_prefixes.push(format!("{}.", task_head_prefix(t)));
    }
    let stage2: Vec<&str> = head_prefixes.iter().map(String::as_str).collect();
    let mut opt = AdamW::new(schedule.lr, schedule.weight_decay);
    let mut shuffle = rng::stream(schedule.seed, &[0x5747, 2]);
    for _ in 0..schedule.stage2_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let params = model.params.clone();
            let mut g = Graph::training(&params, &stage2);
            let mut losses = Vec::new();
            for &i in chunk {
                let s = &train[i];
                for m in &s.inputs {
                    let x = g.input(model.pad_and_embed(m)?.data);
                    let lu = g.input(cache[&(i, m.modality)].0.clone());
                    let lcp = model.encode_b_node(&mut g, x, lu)?;
                    let logits = model.task_logits_node(&mut g, lcp, s.task)?;
                    losses.push(g.tape.cross_entropy(logits, &[s.label])?);
                }
            }
            if losses.is_empty() {
                continue;
            }
            let loss = mean_of(&mut g, &losses)?;
            total += g.value(loss)[(0, 0)];
            batches += 1;
            let grads = g.gradients(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        if batches > 0 {
            report.stage2_loss.push(total / batches as f64);
        }
    }
    Ok(report)
}

fn fused_loss(model: &Model, g: &mut Graph, s: &Sample) -> Result<NodeId, ModelError> {
    let mut latents = Vec::with_capacity(s.inputs.len());
    for m in &s.inputs {
        let x = g.input(model.pad_and_embed(m)?.data);
        latents.push((m.modality, model.encode_a_node(g, x)?));
    }
    let (logits, _) = model.cross_modal_logits_node(g, &latents, s.task)?;
    Ok(g.tape.cross_entropy(logits, &[s.label])?)
}

fn mean_of(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId, ModelError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.tape.add(acc, n)?;
    }
    Ok(g.tape.scale(acc, 1.0 / nodes.len() as f64))
}
