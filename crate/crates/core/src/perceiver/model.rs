use serde::{Deserialize, Serialize};

use super::block::{forward_block, init_block, init_ffn};
use super::{
    Graph, LatentMatrix, ModalityId, ModalityTensor, ModelError, PaddedInput, PerceiverConfig,
    Registry, TaskId,
};
use crate::rng;
use crate::tensor::{softmax, Matrix, NodeId, ParamStore};

pub(crate) const ENCODER_A: &str = "enc_a";
pub(crate) const ENCODER_B: &str = "enc_b";
pub(crate) const LATENT_INIT: &str = "latent0";
pub(crate) const CROSS_MODAL: &str = "mca";

pub(crate) fn task_head_prefix(task: TaskId) -> String {
    format!("head.t{task}")
}

pub(crate) fn fusion_head_prefix(task: TaskId) -> String {
    format!("mhead.t{task}")
}

/// Parameters and layout of the whole system: encoder A with its trained
/// latent array, encoder B, one classification head per task, the
/// cross-modal unit and one fusion head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: PerceiverConfig,
    pub registry: Registry,
    pub params: ParamStore,
}

/// Everything a device produces for one reading.
#[derive(Debug, Clone)]
pub struct UnimodalOutput {
    pub latent: LatentMatrix,
    pub softmax: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    pub softmax: Vec<f64>,
    /// Ordered `(query, key)` modality pairs the cross-modal unit ran on.
    pub pairs: Vec<(ModalityId, ModalityId)>,
}

impl Model {
    pub fn new(
        config: PerceiverConfig,
        mut registry: Registry,
        seed: u64,
    ) -> Result<Self, ModelError> {
        registry.fourier_bands = config.fourier_bands;
        let mut r = rng::stream(seed, &[0x1a17]);
        let mut params = ParamStore::new();
        let width = registry.padded_width();
        let la = config.latent_dim;

        init_block(&mut params, ENCODER_A, &config, width, &mut r);
        params.insert(
            LATENT_INIT,
            Matrix::standard_normal(config.latents, la, 0.02, &mut r),
        );
        init_block(&mut params, ENCODER_B, &config, width, &mut r);
        init_block(&mut params, CROSS_MODAL, &config, la, &mut r);
        for (t, task) in registry.tasks.iter().enumerate() {
            for &m in &task.modalities {
                registry.modality(m)?;
            }
            init_ffn(
                &mut params,
                &task_head_prefix(t),
                la,
                la,
                task.classes,
                &mut r,
            );
            let n = task.modalities.len();
            if n >= 2 {
                init_ffn(
                    &mut params,
                    &fusion_head_prefix(t),
                    n * (n - 1) * la,
                    la,
                    task.classes,
                    &mut r,
                );
            }
        }
        Ok(Self {
            config,
            registry,
            params,
        })
    }

    pub fn pad_and_embed(&self, m: &ModalityTensor) -> Result<PaddedInput, ModelError> {
        self.registry.pad_and_embed(m)
    }

    fn check_latent(&self, l: &LatentMatrix) -> Result<(), ModelError> {
        if l.shape() != self.config.latent_shape() {
            return Err(ModelError::LatentShape {
                expected: self.config.latent_shape(),
                got: l.shape(),
            });
        }
        Ok(())
    }

    // Graph-level pieces, shared by inference and training.

    pub(crate) fn encode_a_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, ModelError> {
        let l0 = g.param(LATENT_INIT)?;
        Ok(forward_block(g, ENCODER_A, &self.config, l0, x)?.latent)
    }

    /// Encoder B seeded with `latent`; returns the last latent row.
    pub(crate) fn encode_b_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        latent: NodeId,
    ) -> Result<NodeId, ModelError> {
        let out = forward_block(g, ENCODER_B, &self.config, latent, x)?.latent;
        Ok(g.tape.slice_rows(out, self.config.latents - 1, 1)?)
    }

    pub(crate) fn task_logits_node(
        &self,
        g: &mut Graph,
        lcp: NodeId,
        task: TaskId,
    ) -> Result<NodeId, ModelError> {
        self.registry.task(task)?;
        g.ffn(lcp, &task_head_prefix(task))
    }

    /// Runs the cross-modal unit on every ordered pair of distinct
    /// modalities, pools each output to its last latent row and feeds the
    /// concatenation to the task's fusion head.
    pub(crate) fn cross_modal_logits_node(
        &self,
        g: &mut Graph,
        latents: &[(ModalityId, NodeId)],
        task: TaskId,
    ) -> Result<(NodeId, Vec<(ModalityId, ModalityId)>), ModelError> {
        let spec = self.registry.task(task)?;
        if latents.len() < 2 {
            return Err(ModelError::TooFewModalities(latents.len()));
        }
        let mut ordered = latents.to_vec();
        ordered.sort_by_key(|(m, _)| *m);
        let got: Vec<_> = ordered.iter().map(|(m, _)| *m).collect();
        let mut expected = spec.modalities.clone();
        expected.sort_unstable();
        if got != expected {
            return Err(ModelError::ModalitySet {
                task,
                expected,
                got,
            });
        }
        let last = self.config.latents - 1;
        let mut pooled = Vec::new();
        let mut pairs = Vec::new();
        for &(mi, li) in &ordered {
            for &(mj, lj) in &ordered {
                if mi == mj {
                    continue;
                }
                let out = forward_block(g, CROSS_MODAL, &self.config, li, lj)?.latent;
                pooled.push(g.tape.slice_rows(out, last, 1)?);
                pairs.push((mi, mj));
            }
        }
        let joined = g.tape.concat_cols(&pooled)?;
        let logits = g.ffn(joined, &fusion_head_prefix(task))?;
        Ok((logits, pairs))
    }

    // Plain inference.

    pub fn encode_a(&self, x: &PaddedInput) -> Result<LatentMatrix, ModelError> {
        let mut g = Graph::inference(&self.params);
        let xi = g.input(x.data.clone());
        let out = self.encode_a_node(&mut g, xi)?;
        Ok(LatentMatrix(g.value(out).clone()))
    }

    /// Cross-attention probabilities of encoder A for `x`, one matrix per head.
    pub fn encoder_a_attention(&self, x: &PaddedInput) -> Result<Vec<Matrix>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let xi = g.input(x.data.clone());
        let l0 = g.param(LATENT_INIT)?;
        let out = forward_block(&mut g, ENCODER_A, &self.config, l0, xi)?;
        Ok(out
            .cross_attention
            .iter()
            .map(|&p| g.value(p).clone())
            .collect())
    }

    /// Encoder B on `x` starting from encoder A's latent; returns the
    /// conformal latent vector (length `latent_dim`).
    pub fn encode_b(&self, x: &PaddedInput, latent: &LatentMatrix) -> Result<Vec<f64>, ModelError> {
        self.check_latent(latent)?;
        let mut g = Graph::inference(&self.params);
        let xi = g.input(x.data.clone());
        let li = g.input(latent.0.clone());
        let out = self.encode_b_node(&mut g, xi, li)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn task_head(&self, lcp: &[f64], task: TaskId) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::inference(&self.params);
        let v = g.input(Matrix::row_vector(lcp.to_vec())?);
        let logits = self.task_logits_node(&mut g, v, task)?;
        Ok(softmax(g.value(logits).data()))
    }

    /// Device-side pipeline: pad, encoder A, encoder B, task head.
    pub fn unimodal(&self, m: &ModalityTensor) -> Result<UnimodalOutput, ModelError> {
        let x = self.pad_and_embed(m)?;
        let latent = self.encode_a(&x)?;
        let lcp = self.encode_b(&x, &latent)?;
        let softmax = self.task_head(&lcp, m.task)?;
        Ok(UnimodalOutput { latent, softmax })
    }

    pub fn multimodal_cross_attention(
        &self,
        latents: &[(ModalityId, LatentMatrix)],
        task: TaskId,
    ) -> Result<CrossAttentionOutput, ModelError> {
        let mut g = Graph::inference(&self.params);
        let mut nodes = Vec::with_capacity(latents.len());
        for (m, l) in latents {
            self.check_latent(l)?;
            nodes.push((*m, g.input(l.0.clone())));
        }
        let (logits, pairs) = self.cross_modal_logits_node(&mut g, &nodes, task)?;
        Ok(CrossAttentionOutput {
            softmax: softmax(g.value(logits).data()),
            pairs,
        })
    }

    /// Encoder A on every reading followed by the cross-modal unit, as a
    /// server holding the raw data would run it.
    pub fn classify_raw(
        &self,
        inputs: &[ModalityTensor],
        task: TaskId,
    ) -> Result<CrossAttentionOutput, ModelError> {
        let latents = inputs
            .iter()
            .map(|m| Ok((m.modality, self.encode_a(&self.pad_and_embed(m)?)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        self.multimodal_cross_attention(&latents, task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceiver::{ModalitySpec, TaskSpec};

    pub(crate) fn small_registry(n_modalities: usize) -> Registry {
        Registry {
            modalities: (0..n_modalities)
                .map(|i| ModalitySpec {
                    name: format!("m{i}"),
                    rows: 3 + i,
                    cols: 2 + i,
                })
                .collect(),
            tasks: vec![TaskSpec {
                name: "digits".into(),
                classes: 10,
                modalities: (0..n_modalities).collect(),
            }],
            fourier_bands: 2,
        }
    }

    fn reading(model: &Model, modality: usize, seed: u64) -> ModalityTensor {
        let spec = &model.registry.modalities[modality];
        let mut r = rng::stream(seed, &[modality as u64]);
        ModalityTensor {
            modality,
            task: 0,
            data: Matrix::standard_normal(spec.rows, spec.cols, 1.0, &mut r),
        }
    }

    #[test]
    fn latent_shape_is_independent_of_input_rows() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let mut r = rng::stream(9, &[]);
        for rows in [5, 500] {
            let raw = Matrix::standard_normal(rows, 3, 1.0, &mut r);
            let x = model.registry.embed_rows(&raw, 0);
            assert_eq!(model.encode_a(&x).unwrap().shape(), (4, 8));
        }
    }

    #[test]
    fn full_scale_latent_is_20_by_64() {
        let model = Model::new(PerceiverConfig::full_scale(), small_registry(2), 3).unwrap();
        let x = model.pad_and_embed(&reading(&model, 1, 1)).unwrap();
        let latent = model.encode_a(&x).unwrap();
        assert_eq!(latent.shape(), (20, 64));
        assert_eq!(model.encode_b(&x, &latent).unwrap().len(), 64);
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let x = model.pad_and_embed(&reading(&model, 0, 4)).unwrap();
        for p in model.encoder_a_attention(&x).unwrap() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_b_is_deterministic_and_input_sensitive() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let m = reading(&model, 1, 5);
        let x = model.pad_and_embed(&m).unwrap();
        let lu = model.encode_a(&x).unwrap();
        let a = model.encode_b(&x, &lu).unwrap();
        assert_eq!(a, model.encode_b(&x, &lu).unwrap());
        assert_eq!(a.len(), 8);

        let mut perturbed = m.clone();
        let mut r = rng::stream(77, &[]);
        let noise =
            Matrix::standard_normal(perturbed.data.rows(), perturbed.data.cols(), 0.5, &mut r);
        perturbed.data = perturbed.data.add(&noise).unwrap();
        let xp = model.pad_and_embed(&perturbed).unwrap();
        assert_ne!(a, model.encode_b(&xp, &lu).unwrap());
    }

    #[test]
    fn encoder_b_rejects_wrong_latent_shape() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let x = model.pad_and_embed(&reading(&model, 0, 1)).unwrap();
        let bad = LatentMatrix(Matrix::zeros(3, 8));
        assert!(matches!(
            model.encode_b(&x, &bad),
            Err(ModelError::LatentShape { .. })
        ));
    }

    #[test]
    fn task_head_outputs_a_distribution() {
        let mut model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let s = model.task_head(&[0.3; 8], 0).unwrap();
        assert_eq!(s.len(), 10);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|&v| v > 0.0));

        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("head.t0"))
            .map(String::from)
            .collect();
        for n in names {
            model.params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let s = model.task_head(&[1.7; 8], 0).unwrap();
        assert!(s.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(matches!(
            model.task_head(&[0.0; 8], 3),
            Err(ModelError::UnknownTask(3))
        ));
    }

    #[test]
    fn pair_count_is_n_times_n_minus_one() {
        for (n, expected) in [(2, 2), (4, 12)] {
            let model = Model::new(PerceiverConfig::desk(), small_registry(n), 3).unwrap();
            let latents: Vec<_> = (0..n)
                .map(|m| {
                    let x = model.pad_and_embed(&reading(&model, m, 2)).unwrap();
                    (m, model.encode_a(&x).unwrap())
                })
                .collect();
            let out = model.multimodal_cross_attention(&latents, 0).unwrap();
            assert_eq!(out.pairs.len(), expected);
            assert!((out.softmax.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_modal_score_ignores_input_order() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(3), 3).unwrap();
        let mut latents: Vec<_> = (0..3)
            .map(|m| {
                let x = model.pad_and_embed(&reading(&model, m, 8)).unwrap();
                (m, model.encode_a(&x).unwrap())
            })
            .collect();
        let a = model
            .multimodal_cross_attention(&latents, 0)
            .unwrap()
            .softmax;
        latents.reverse();
        let b = model
            .multimodal_cross_attention(&latents, 0)
            .unwrap()
            .softmax;
        assert_eq!(a, b);
    }

    #[test]
    fn cross_modal_needs_two_latents() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(2), 3).unwrap();
        let x = model.pad_and_embed(&reading(&model, 0, 1)).unwrap();
        let one = vec![(0, model.encode_a(&x).unwrap())];
        assert!(matches!(
            model.multimodal_cross_attention(&one, 0),
            Err(ModelError::TooFewModalities(1))
        ));
    }

    #[test]
    fn encoder_weights_are_not_modality_indexed() {
        let model = Model::new(PerceiverConfig::desk(), small_registry(4), 3).unwrap();
        for name in model
            .params
            .names()
            .filter(|n| n.starts_with(ENCODER_A) || n.starts_with(ENCODER_B))
        {
            assert!(!name.contains("m0") && !name.contains("m1"), "{name}");
        }
        // every modality goes through the same encoder A parameters
        for m in 0..4 {
            let x = model.pad_and_embed(&reading(&model, m, 1)).unwrap();
            assert_eq!(model.encode_a(&x).unwrap().shape(), (4, 8));
        }
    }

    #[test]
    fn latent_payload_is_smaller_than_large_image_at_full_scale() {
        let cfg = PerceiverConfig::full_scale();
        assert!(cfg.latents * cfg.latent_dim < 112 * 112);
    }
}
