//! A single analog crossbar array: a bounded weight matrix mutated only by
//! pulse events, with exact (ideal-I/O) matrix-vector reads.

use crate::device::{DeviceError, DeviceModel};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("column index {col} out of range (cols = {cols})")]
    ColumnOutOfRange { col: usize, cols: usize },
    #[error("initial weights outside device bounds [{lo}, {hi}]")]
    InitOutOfBounds { lo: f64, hi: f64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Initial weight layout for a new tile.
#[derive(Debug, Clone)]
pub enum TileInit {
    /// Exact zero, the symmetric point.
    Zero,
    Uniform { lo: f64, hi: f64 },
    Given(Array2<f64>),
}

/// Weights are stored as logical weights with `kappa` folded in; the
/// conductance view is derived on demand as w / kappa.
#[derive(Debug, Clone)]
pub struct Tile {
    weights: Array2<f64>,
    model: DeviceModel,
    transfer_cursor: usize,
}

impl Tile {
    pub fn new(
        rows: usize,
        cols: usize,
        model: DeviceModel,
        init: TileInit,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, TileError> {
        let weights = match init {
            TileInit::Zero => Array2::zeros((rows, cols)),
            TileInit::Uniform { lo, hi } => {
                if lo < model.tau_min || hi > model.tau_max {
                    return Err(TileError::InitOutOfBounds { lo: model.tau_min, hi: model.tau_max });
                }
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..=hi))
            }
            TileInit::Given(w) => {
                if w.dim() != (rows, cols) {
                    return Err(TileError::DimMismatch { expected: rows * cols, got: w.len() });
                }
                if w.iter().any(|&v| v < model.tau_min || v > model.tau_max) {
                    return Err(TileError::InitOutOfBounds { lo: model.tau_min, hi: model.tau_max });
                }
                w
            }
        };
        Ok(Tile { weights, model, transfer_cursor: 0 })
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn model(&self) -> &DeviceModel {
        &self.model
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutable access for the pulse engine. Callers must preserve the bounds
    /// invariant; `debug_assert_bounds` checks it in debug builds.
    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub(crate) fn debug_assert_bounds(&self) {
        debug_assert!(
            self.weights
                .iter()
                .all(|&w| w >= self.model.tau_min && w <= self.model.tau_max),
            "tile weight escaped device bounds"
        );
    }

    /// Forward read y = x^T W, exact arithmetic (ideal I/O).
    pub fn read_forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, TileError> {
        if x.len() != self.rows() {
            return Err(TileError::DimMismatch { expected: self.rows(), got: x.len() });
        }
        Ok(x.dot(&self.weights))
    }

    /// Backward read W d, exact arithmetic.
    pub fn read_backward(&self, d: ArrayView1<f64>) -> Result<Array1<f64>, TileError> {
        if d.len() != self.cols() {
            return Err(TileError::DimMismatch { expected: self.cols(), got: d.len() });
        }
        Ok(self.weights.dot(&d))
    }

    pub fn read_column(&self, j: usize) -> Result<Array1<f64>, TileError> {
        if j >= self.cols() {
            return Err(TileError::ColumnOutOfRange { col: j, cols: self.cols() });
        }
        Ok(self.weights.column(j).to_owned())
    }

    /// Returns the current cursor, then increments it modulo cols.
    pub fn advance_cursor(&mut self) -> usize {
        let cur = self.transfer_cursor;
        self.transfer_cursor = (self.transfer_cursor + 1) % self.cols().max(1);
        cur
    }

    pub fn cursor(&self) -> usize {
        self.transfer_cursor
    }

    pub fn linf_norm(&self) -> f64 {
        self.weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()))
    }

    /// Conductance-domain view W / kappa.
    pub fn conductances(&self) -> Array2<f64> {
        &self.weights / self.model.kappa
    }

    pub fn to_checkpoint(&self) -> TileCheckpoint {
        TileCheckpoint {
            rows: self.rows(),
            cols: self.cols(),
            device_hash: device_config_hash(&self.model),
            transfer_cursor: self.transfer_cursor,
            weights: self.weights.iter().copied().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &TileCheckpoint, model: DeviceModel) -> Result<Self, TileError> {
        let w = Array2::from_shape_vec((ckpt.rows, ckpt.cols), ckpt.weights.clone())
            .map_err(|_| TileError::DimMismatch { expected: ckpt.rows * ckpt.cols, got: ckpt.weights.len() })?;
        let mut tile = Tile::new(ckpt.rows, ckpt.cols, model, TileInit::Given(w), &mut rand::thread_rng())?;
        tile.transfer_cursor = ckpt.transfer_cursor;
        Ok(tile)
    }
}

/// Flat tile checkpoint: shape, device config hash, row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub device_hash: String,
    pub transfer_cursor: usize,
    pub weights: Vec<f64>,
}

/// FNV-1a over the serialized device config; stable across runs.
pub fn device_config_hash(model: &DeviceModel) -> String {
    let bytes = serde_json::to_vec(model).expect("device model serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DeviceModel {
        DeviceModel::ideal(1.0, 0.1).unwrap()
    }

    #[test]
    fn init_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tile::new(2, 3, model(), TileInit::Zero, &mut rng).unwrap();
        assert!(t.weights().iter().all(|&w| w == 0.0));

        let t = Tile::new(1, 1, model(), TileInit::Given(array![[0.5]]), &mut rng).unwrap();
        assert_eq!(t.weights()[[0, 0]], 0.5);

        assert!(Tile::new(2, 2, model(), TileInit::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).is_err());
        assert!(Tile::new(1, 1, model(), TileInit::Given(array![[1.5]]), &mut rng).is_err());
    }

    #[test]
    fn reads_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tile::new(1, 1, model(), TileInit::Given(array![[0.5]]), &mut rng).unwrap();
        let y = t.read_forward(array![2.0].view()).unwrap();
        assert_relative_eq!(y[0], 1.0);

        let eye = Tile::new(2, 2, model(), TileInit::Given(array![[1.0, 0.0], [0.0, 1.0]]), &mut rng).unwrap();
        let y = eye.read_forward(array![0.3, -0.7].view()).unwrap();
        assert_relative_eq!(y[0], 0.3);
        assert_relative_eq!(y[1], -0.7);
    }

    #[test]
    fn reads_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tile::new(3, 3, model(), TileInit::Uniform { lo: -0.9, hi: 0.9 }, &mut rng).unwrap();
        let x = array![0.2, -0.5, 0.9];
        let y = t.read_forward(x.view()).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += x[i] * t.weights()[[i, j]];
            }
            assert_relative_eq!(y[j], acc, epsilon = 1e-12);
        }
        let d = array![0.1, 0.4, -0.3];
        let b = t.read_backward(d.view()).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += t.weights()[[i, j]] * d[j];
            }
            assert_relative_eq!(b[i], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tile::new(2, 3, model(), TileInit::Zero, &mut rng).unwrap();
        assert!(t.read_forward(array![1.0].view()).is_err());
        assert!(t.read_backward(array![1.0].view()).is_err());
    }

    #[test]
    fn cursor_is_cyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tile::new(1, 2, model(), TileInit::Zero, &mut rng).unwrap();
        assert_eq!(t.advance_cursor(), 0);
        assert_eq!(t.advance_cursor(), 1);
        assert_eq!(t.advance_cursor(), 0);
        assert_eq!(t.advance_cursor(), 1);
    }

    #[test]
    fn read_column_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tile::new(3, 2, model(), TileInit::Uniform { lo: -0.5, hi: 0.5 }, &mut rng).unwrap();
        let c = t.read_column(1).unwrap();
        for i in 0..3 {
            assert_eq!(c[i], t.weights()[[i, 1]]);
        }
        assert!(t.read_column(2).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tile::new(2, 2, model(), TileInit::Uniform { lo: -0.5, hi: 0.5 }, &mut rng).unwrap();
        t.advance_cursor();
        let ckpt = t.to_checkpoint();
        let back = Tile::from_checkpoint(&ckpt, model()).unwrap();
        assert_eq!(back.weights(), t.weights());
        assert_eq!(back.cursor(), 1);
        assert_eq!(ckpt.device_hash, device_config_hash(&model()));
    }
}
