use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Matrix, TensorError};

/// Named parameter matrices, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Deep copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, m) in &self.params {
            feed(name.as_bytes());
            feed(&(m.rows() as u64).to_le_bytes());
            feed(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Matrix>,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::shape("adamw_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            if m.shape() != g.shape() {
                return Err(TensorError::shape("adamw_state", m.shape(), g.shape()));
            }
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Matrix> {
        BTreeMap::from([("w".to_string(), Matrix::scalar(v))])
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = store(0.7);
        let mut opt = AdamW::new(0.001, 0.0);
        opt.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get("w").unwrap()[(0, 0)], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(0.001, 0.0);
        opt.step(&mut s, &grad(1.0)).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap()[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(0.001, 0.001);
        opt.step(&mut s, &grad(0.0)).unwrap();
        assert!((s.get("w").unwrap()[(0, 0)] - 2.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(0.001, 0.0);
        let g = BTreeMap::from([("w".to_string(), Matrix::zeros(2, 1))]);
        assert!(matches!(
            opt.step(&mut s, &g),
            Err(TensorError::Shape { .. })
        ));
    }
}
