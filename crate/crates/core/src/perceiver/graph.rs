use std::collections::BTreeMap;

use super::ModelError;
use crate::tensor::{Matrix, NodeId, ParamStore, Tape};

/// A tape bound to a parameter store. Parameters are placed on the tape
/// on first use; only names matching a trainable prefix receive gradients.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    trainable: Vec<String>,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn inference(params: &'a ParamStore) -> Self {
        Self::training(params, &[])
    }

    pub fn training(params: &'a ParamStore, trainable_prefixes: &[&str]) -> Self {
        Self {
            tape: Tape::new(),
            params,
            trainable: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            bound: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?
            .clone();
        let id = if self.trainable.iter().any(|p| name.starts_with(p.as_str())) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.tape.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.tape.value(id)
    }

    /// Gradients of `loss` for every trainable parameter that was used.
    pub fn gradients(&self, loss: NodeId) -> Result<BTreeMap<String, Matrix>, ModelError> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if !self.tape.requires_grad(id) {
                continue;
            }
            let g = grads.take(id).unwrap_or_else(|| {
                let (r, c) = self.tape.value(id).shape();
                Matrix::zeros(r, c)
            });
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    // Small building blocks shared by the encoders and heads.

    /// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(xw, b)?)
    }

    /// `x W` with parameter `{prefix}` and no bias.
    pub fn project(&mut self, x: NodeId, name: &str) -> Result<NodeId, ModelError> {
        let w = self.param(name)?;
        Ok(self.tape.matmul(x, w)?)
    }

    /// Row layer norm with gain `{prefix}.g` and shift `{prefix}.b`.
    pub fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let n = self.tape.layer_norm_rows(x);
        let scaled = self.tape.mul_row(n, g)?;
        Ok(self.tape.add_row(scaled, b)?)
    }

    /// Two linear layers with GELU between them.
    pub fn ffn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let h = self.linear(x, &format!("{prefix}.l1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.l2"))
    }
}
