use std::f64::consts::PI;

use super::{ModalityId, ModalityTensor, ModelError, Registry};
use crate::tensor::Matrix;

/// Input laid out as `[raw | one-hot modality | position | zeros]`, padded
/// with zero rows to the registry's common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInput {
    pub data: Matrix,
    pub modality: ModalityId,
    /// Rows carrying real data; the rest are zero padding.
    pub rows_used: usize,
}

/// `2 * bands` columns of sin/cos at frequencies `2^k` over the row index
/// mapped to `[-1, 1]`.
pub fn fourier_features(rows: usize, bands: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|r| {
            let t = if rows > 1 {
                -1.0 + 2.0 * r as f64 / (rows - 1) as f64
            } else {
                0.0
            };
            (0..bands)
                .flat_map(|k| {
                    let w = PI * f64::from(1u32 << k) * t;
                    [w.sin(), w.cos()]
                })
                .collect()
        })
        .collect()
}

impl Registry {
    pub fn pad_and_embed(&self, m: &ModalityTensor) -> Result<PaddedInput, ModelError> {
        let spec = self.modality(m.modality)?;
        if m.data.shape() != (spec.rows, spec.cols) {
            return Err(ModelError::ModalityShape {
                modality: m.modality,
                expected: (spec.rows, spec.cols),
                got: m.data.shape(),
            });
        }
        Ok(self.embed_rows(&m.data, m.modality))
    }

    /// Layout without the registered-shape check; rows beyond the registry
    /// maximum grow the padded height.
    pub(crate) fn embed_rows(&self, data: &Matrix, modality: ModalityId) -> PaddedInput {
        let (rows, cols) = data.shape();
        let n_mod = self.modalities.len();
        let height = self.max_rows().max(rows);
        let width = self
            .padded_width()
            .max(cols + n_mod + 2 * self.fourier_bands);
        let mut out = Matrix::zeros(height, width);
        let pos = fourier_features(rows, self.fourier_bands);
        for (r, pos_row) in pos.iter().enumerate() {
            let row = out.row_mut(r);
            row[..cols].copy_from_slice(data.row(r));
            row[cols + modality] = 1.0;
            row[cols + n_mod..cols + n_mod + pos_row.len()].copy_from_slice(pos_row);
        }
        PaddedInput {
            data: out,
            modality,
            rows_used: rows,
        }
    }
}
