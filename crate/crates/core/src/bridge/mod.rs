//! The trainable linear bridge from visual features into the anchor space,
//! sequence pooling, and the optimizer and training loop around them.

mod optim;
mod train;

pub use optim::{adamw_step, lr_at, AdamState, AdamW};
pub use train::{
    batch_objective, bridge_gradient, metrics_to_jsonl, pooled_text, pooled_visual, read_checkpoint, train,
    write_checkpoint, BatchObjective, CentralSpace, MetricRecord, PairedItem, RowMarginal, TrainConfig, TrainOutcome,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_mismatch, Error, Result};

/// Per-item sequences of feature vectors sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    items: Vec<DMatrix<f64>>,
    dim: usize,
}

impl EmbeddingBatch {
    pub fn new(items: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = items.first().map(|m| m.ncols()).ok_or(Error::Empty("batch"))?;
        if let Some(i) = items.iter().position(|m| m.ncols() != dim) {
            return Err(dim_mismatch(format!("item {i} has {} features, expected {dim}", items[i].ncols())));
        }
        Ok(Self { items, dim })
    }

    pub fn items(&self) -> &[DMatrix<f64>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// One sequence-mean vector per item, stored as a B x d matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledBatch {
    vectors: DMatrix<f64>,
}

impl PooledBatch {
    pub fn new(vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Empty("pooled batch"));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or(Error::Empty("pooled batch"))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(dim_mismatch("pooled rows differ in length"));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    /// B x d.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, n: usize) -> DVector<f64> {
        self.vectors.row(n).transpose()
    }

    pub fn select(&self, idx: &[usize]) -> PooledBatch {
        PooledBatch { vectors: self.vectors.select_rows(idx) }
    }
}

/// Arithmetic mean of every item's sequence.
pub fn pool(batch: &EmbeddingBatch) -> Result<PooledBatch> {
    let mut out = DMatrix::zeros(batch.len(), batch.dim());
    for (n, item) in batch.items().iter().enumerate() {
        if item.nrows() == 0 {
            return Err(Error::Empty("sequence"));
        }
        let mean = item.row_mean();
        out.set_row(n, &mean);
    }
    PooledBatch::new(out)
}

/// The single trainable linear layer `x -> weight * x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBridge {
    /// d x d_v.
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub init_seed: u64,
}

impl LinearBridge {
    /// Weights drawn from `uniform(-1/sqrt(d_v), 1/sqrt(d_v))`; bias starts at zero.
    pub fn new(out_dim: usize, in_dim: usize, with_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = DMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        let bias = with_bias.then(|| DVector::zeros(out_dim));
        Self { weight, bias, init_seed: seed }
    }

    pub fn from_parts(weight: DMatrix<f64>, bias: Option<DVector<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(dim_mismatch(format!("bias of length {} for {} outputs", b.len(), weight.nrows())));
            }
        }
        Ok(Self { weight, bias, init_seed: 0 })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Maps the rows of an N x d_v matrix to an N x d matrix.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(dim_mismatch(format!("{} input features, bridge expects {}", x.ncols(), self.in_dim())));
        }
        let mut out = x * self.weight.transpose();
        if let Some(b) = &self.bias {
            for mut row in out.row_iter_mut() {
                row += b.transpose();
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().all(|v| v.is_finite()) && self.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Applies the bridge to every vector of every item.
pub fn project(bridge: &LinearBridge, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let items = batch.items().iter().map(|x| bridge.apply_rows(x)).collect::<Result<Vec<_>>>()?;
    EmbeddingBatch::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_bridge_is_a_no_op() {
        let x = random_matrix(3, 4, 0);
        let bridge = LinearBridge::from_parts(DMatrix::identity(4, 4), Some(DVector::zeros(4))).unwrap();
        let out = project(&bridge, &EmbeddingBatch::new(vec![x.clone()]).unwrap()).unwrap();
        assert_eq!(out.items()[0], x);
    }

    #[test]
    fn zero_weight_outputs_the_bias() {
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let bridge = LinearBridge::from_parts(DMatrix::zeros(2, 3), Some(b.clone())).unwrap();
        let out = project(&bridge, &EmbeddingBatch::new(vec![random_matrix(5, 3, 1)]).unwrap()).unwrap();
        for row in out.items()[0].row_iter() {
            assert_eq!(row.transpose(), b);
        }
    }

    #[test]
    fn projection_matches_direct_matmul() {
        let bridge =
            LinearBridge::from_parts(random_matrix(3, 5, 1), Some(random_matrix(3, 1, 2).column(0).into())).unwrap();
        let x = random_matrix(4, 5, 3);
        let out = bridge.apply_rows(&x).unwrap();
        for n in 0..4 {
            for i in 0..3 {
                let mut acc = bridge.bias.as_ref().unwrap()[i];
                for j in 0..5 {
                    acc += bridge.weight[(i, j)] * x[(n, j)];
                }
                assert!((out[(n, i)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let bridge = LinearBridge::new(2, 3, false, 0);
        let batch = EmbeddingBatch::new(vec![DMatrix::zeros(1, 4)]).unwrap();
        assert!(matches!(project(&bridge, &batch), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = LinearBridge::new(4, 9, true, 5);
        assert_eq!(a, LinearBridge::new(4, 9, true, 5));
        assert!(a.weight.iter().all(|w| w.abs() <= 1.0 / 3.0));
        assert_eq!(a.bias.unwrap(), DVector::zeros(4));
    }

    #[test]
    fn pooling_is_the_mean() {
        let v = DVector::from_vec(vec![1.0, 2.0, -3.0]);
        let single = DMatrix::from_row_slice(1, 3, v.as_slice());
        let pair = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -3.0, -1.0, -2.0, 3.0]);
        let seq = random_matrix(7, 3, 4);
        let pooled = pool(&EmbeddingBatch::new(vec![single, pair, seq.clone()]).unwrap()).unwrap();
        assert_eq!(pooled.row(0), v);
        assert_eq!(pooled.row(1), DVector::zeros(3));
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..7 {
                s += seq[(i, j)];
            }
            assert!((pooled.vectors()[(2, j)] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_cannot_be_pooled() {
        let batch = EmbeddingBatch::new(vec![DMatrix::zeros(0, 3)]).unwrap();
        assert!(matches!(pool(&batch), Err(Error::Empty("sequence"))));
    }

    #[test]
    fn pooling_commutes_with_projection() {
        let bridge = LinearBridge::new(4, 6, true, 11);
        let mut bridge = bridge;
        bridge.bias = Some(DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]));
        let x = random_matrix(5, 6, 12);
        let batch = EmbeddingBatch::new(vec![x]).unwrap();
        let a = pool(&project(&bridge, &batch).unwrap()).unwrap();
        let b = bridge.apply_rows(pool(&batch).unwrap().vectors()).unwrap();
        assert!((a.vectors() - b).amax() < 1e-12);
    }
}
