//! Composite weight: an ordered list of tiles combined as W = sum_n g_n W^(n)
//! with geometric scales g_n = gamma^n by default, plus the multi-timescale
//! counter and transfer-schedule machinery.
//!
//! Tile 0 is the coarsest/slowest tile (scale 1), tile N is the fastest
//! gradient-accumulation tile (smallest scale). Reference configs list tiles
//! in the opposite order; the harness maps them onto this orientation.

use crate::tile::{Tile, TileCheckpoint, TileError};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("composite needs at least one tile")]
    Empty,
    #[error("gamma must lie in (0, 1), got {0}")]
    BadGamma(f64),
    #[error("scale vector length {got} does not match tile count {tiles}")]
    ScaleLength { got: usize, tiles: usize },
    #[error("transfer schedule length {got} does not match edge count {edges}")]
    ScheduleLength { got: usize, edges: usize },
    #[error("tile index {0} out of range")]
    TileIndex(usize),
    #[error("tile shapes differ within one composite")]
    ShapeMismatch,
    #[error(transparent)]
    Tile(#[from] TileError),
}

/// W = sum_n scales[n] * tiles[n], with per-edge transfer periods
/// transfer_every[n] = T_{n+1} (period of writes into tile n from tile n+1).
#[derive(Debug, Clone)]
pub struct CompositeWeight {
    tiles: Vec<Tile>,
    scales: Vec<f64>,
    transfer_every: Vec<u64>,
    pub t_global: u64,
}

impl CompositeWeight {
    /// Default construction with exact powers of a single gamma: tile n gets
    /// scale gamma^n.
    pub fn new(tiles: Vec<Tile>, gamma: f64, transfer_every: Vec<u64>) -> Result<Self, CompositeError> {
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(CompositeError::BadGamma(gamma));
        }
        let scales = (0..tiles.len()).map(|n| gamma.powi(n as i32)).collect();
        Self::with_scales(tiles, scales, transfer_every)
    }

    /// Generalized per-tile scale vector (e.g. an explicit gamma_vec from a
    /// reference config, already mapped onto this tile order).
    pub fn with_scales(
        tiles: Vec<Tile>,
        scales: Vec<f64>,
        transfer_every: Vec<u64>,
    ) -> Result<Self, CompositeError> {
        if tiles.is_empty() {
            return Err(CompositeError::Empty);
        }
        if scales.len() != tiles.len() {
            return Err(CompositeError::ScaleLength { got: scales.len(), tiles: tiles.len() });
        }
        if transfer_every.len() != tiles.len() - 1 {
            return Err(CompositeError::ScheduleLength {
                got: transfer_every.len(),
                edges: tiles.len() - 1,
            });
        }
        let shape = (tiles[0].rows(), tiles[0].cols());
        if tiles.iter().any(|t| (t.rows(), t.cols()) != shape) {
            return Err(CompositeError::ShapeMismatch);
        }
        Ok(CompositeWeight { tiles, scales, transfer_every, t_global: 0 })
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// Index of the gradient-accumulation tile (N).
    pub fn gradient_tile(&self) -> usize {
        self.tiles.len() - 1
    }

    pub fn tile(&self, n: usize) -> &Tile {
        &self.tiles[n]
    }

    pub fn tile_mut(&mut self, n: usize) -> &mut Tile {
        &mut self.tiles[n]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn transfer_every(&self) -> &[u64] {
        &self.transfer_every
    }

    pub fn rows(&self) -> usize {
        self.tiles[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.tiles[0].cols()
    }

    /// Forward read sum_n scales[n] * x^T W^(n), exact linear combination.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, CompositeError> {
        let mut acc = Array1::zeros(self.cols());
        for (tile, &s) in self.tiles.iter().zip(&self.scales) {
            acc = acc + tile.read_forward(x)? * s;
        }
        Ok(acc)
    }

    /// Backward read sum_n scales[n] * W^(n) d.
    pub fn backward(&self, d: ArrayView1<f64>) -> Result<Array1<f64>, CompositeError> {
        let mut acc = Array1::zeros(self.rows());
        for (tile, &s) in self.tiles.iter().zip(&self.scales) {
            acc = acc + tile.read_backward(d)? * s;
        }
        Ok(acc)
    }

    /// Partial geometric sum of the first n tiles (exclusive): n = 0 gives
    /// the zero matrix, n = num_tiles gives the full effective weight.
    pub fn partial_sum(&self, n: usize) -> Result<Array2<f64>, CompositeError> {
        if n > self.tiles.len() {
            return Err(CompositeError::TileIndex(n));
        }
        let mut acc = Array2::zeros((self.rows(), self.cols()));
        for (tile, &s) in self.tiles.iter().zip(&self.scales).take(n) {
            acc = acc + tile.weights() * s;
        }
        Ok(acc)
    }

    /// Dense effective weight sum_n scales[n] * W^(n).
    pub fn effective(&self) -> Array2<f64> {
        self.partial_sum(self.tiles.len()).expect("full sum in range")
    }

    pub fn checkpoint(&self) -> CompositeCheckpoint {
        CompositeCheckpoint {
            tiles: self.tiles.iter().map(|t| t.to_checkpoint()).collect(),
            scales: self.scales.clone(),
            transfer_every: self.transfer_every.clone(),
            t_global: self.t_global,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeCheckpoint {
    pub tiles: Vec<TileCheckpoint>,
    pub scales: Vec<f64>,
    pub transfer_every: Vec<u64>,
    pub t_global: u64,
}

/// Local step counter of tile n after global step t:
/// t_n = floor((t + 1) / prod_{n' = n+1..N} T_{n'}); the gradient tile N
/// counts global steps directly (t_N = t).
pub fn local_counter(t: u64, n: usize, transfer_every: &[u64]) -> u64 {
    let num_tiles = transfer_every.len() + 1;
    assert!(n < num_tiles, "tile index out of range");
    if n == num_tiles - 1 {
        return t;
    }
    // transfer_every[m] = T_{m+1}, so the divisor for tile n is
    // prod_{n' = n+1..N} T_{n'} = prod of transfer_every[n..].
    let divisor: u64 = transfer_every[n..].iter().product();
    (t + 1) / divisor
}

/// True exactly when edge n (write into tile n from tile n+1) fires at global
/// step t: the faster tile has just completed an inner loop of T_{n+1} of its
/// own updates. Never fires before the first completion.
pub fn is_transfer_step(t: u64, edge_n: usize, transfer_every: &[u64]) -> bool {
    assert!(edge_n < transfer_every.len(), "edge index out of range");
    let divisor: u64 = transfer_every[edge_n..].iter().product();
    (t + 1) % divisor == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceModel;
    use crate::pulse::stream_rng;
    use crate::tile::TileInit;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn scalar_composite(values: &[f64], gamma: f64) -> CompositeWeight {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let tiles = values
            .iter()
            .map(|&v| {
                Tile::new(1, 1, model.clone(), TileInit::Given(array![[v]]), &mut stream_rng(0, 0, 0)).unwrap()
            })
            .collect::<Vec<_>>();
        let edges = vec![2; values.len() - 1];
        CompositeWeight::new(tiles, gamma, edges).unwrap()
    }

    #[test]
    fn forward_is_scaled_sum() {
        let cw = scalar_composite(&[0.5, 0.25], 0.5);
        let y = cw.forward(array![1.0].view()).unwrap();
        assert_relative_eq!(y[0], 0.625);

        let zero = scalar_composite(&[0.0, 0.0, 0.0], 0.5);
        assert_relative_eq!(zero.forward(array![3.0].view()).unwrap()[0], 0.0);
    }

    #[test]
    fn forward_backward_match_dense_oracle() {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let mut rng = stream_rng(5, 0, 0);
        let tiles = (0..2)
            .map(|_| Tile::new(3, 3, model.clone(), TileInit::Uniform { lo: -0.9, hi: 0.9 }, &mut rng).unwrap())
            .collect::<Vec<_>>();
        let cw = CompositeWeight::new(tiles, 0.5, vec![2]).unwrap();
        let dense = cw.effective();
        let x = array![0.2, -0.7, 0.4];
        let y = cw.forward(x.view()).unwrap();
        let y_dense = x.dot(&dense);
        for j in 0..3 {
            assert_relative_eq!(y[j], y_dense[j], epsilon = 1e-12);
        }
        let d = array![0.3, 0.1, -0.6];
        let b = cw.backward(d.view()).unwrap();
        let b_dense = dense.dot(&d);
        for i in 0..3 {
            assert_relative_eq!(b[i], b_dense[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_linear() {
        let cw = scalar_composite(&[0.5, -0.25, 0.1], 0.3);
        let x = array![0.4];
        let y = array![-1.1];
        let both = cw.forward((&x + &y).view()).unwrap();
        let sum = cw.forward(x.view()).unwrap() + cw.forward(y.view()).unwrap();
        assert_relative_eq!(both[0], sum[0], epsilon = 1e-12);
    }

    #[test]
    fn zero_tile_never_changes_output() {
        let base = scalar_composite(&[0.5, 0.25], 0.5);
        let extended = scalar_composite(&[0.5, 0.25, 0.0], 0.5);
        let x = array![0.73];
        assert_eq!(base.forward(x.view()).unwrap()[0], extended.forward(x.view()).unwrap()[0]);
    }

    #[test]
    fn partial_sums() {
        let cw = scalar_composite(&[0.5, 0.25, -0.4], 0.5);
        assert_eq!(cw.partial_sum(0).unwrap()[[0, 0]], 0.0);
        // hand-summed scalar case
        assert_relative_eq!(cw.partial_sum(2).unwrap()[[0, 0]], 0.5 + 0.5 * 0.25);
        assert_relative_eq!(
            cw.partial_sum(3).unwrap()[[0, 0]],
            0.5 + 0.5 * 0.25 + 0.25 * (-0.4)
        );
        assert_eq!(cw.partial_sum(3).unwrap(), cw.effective());
        assert!(cw.partial_sum(4).is_err());
    }

    #[test]
    fn counter_reproduces_schedule_table() {
        // all T = 2, four tiles: columns (t_N, t_{N-1}, t_{N-2}, t_{N-3})
        let te = [2u64, 2, 2];
        let expected = [
            (0, 0, 0, 0),
            (1, 1, 0, 0),
            (2, 1, 0, 0),
            (3, 2, 1, 0),
            (4, 2, 1, 0),
            (5, 3, 1, 0),
            (6, 3, 1, 0),
            (7, 4, 2, 1),
        ];
        for (t, row) in expected.iter().enumerate() {
            let t = t as u64;
            assert_eq!(local_counter(t, 3, &te), row.0);
            assert_eq!(local_counter(t, 2, &te), row.1);
            assert_eq!(local_counter(t, 1, &te), row.2);
            assert_eq!(local_counter(t, 0, &te), row.3);
        }
    }

    #[test]
    fn counter_app_style_schedule() {
        // T = [5, 25]-style product: divisor 50 for the slowest tile
        let te = [25u64, 2];
        assert_eq!(local_counter(49, 0, &te), 1);
        assert_eq!(local_counter(48, 0, &te), 0);
    }

    #[test]
    fn counters_are_monotone_unit_steps() {
        let te = [3u64, 2, 5];
        for n in 0..4 {
            let mut prev = local_counter(0, n, &te);
            for t in 1..600 {
                let cur = local_counter(t, n, &te);
                assert!(cur >= prev && cur - prev <= 1);
                prev = cur;
            }
        }
    }

    #[test]
    fn transfer_steps_fire_on_inner_loop_completion() {
        let te = [2u64, 2, 2];
        // fastest edge: fires each time tile N completes T_N = 2 updates
        let fired: Vec<u64> = (0..8).filter(|&t| is_transfer_step(t, 2, &te)).collect();
        assert_eq!(fired, vec![1, 3, 5, 7]);
        let fired: Vec<u64> = (0..8).filter(|&t| is_transfer_step(t, 1, &te)).collect();
        assert_eq!(fired, vec![3, 7]);
        let fired: Vec<u64> = (0..8).filter(|&t| is_transfer_step(t, 0, &te)).collect();
        assert_eq!(fired, vec![7]);
        // T = 1 fires every step
        assert!((0..5).all(|t| is_transfer_step(t, 0, &[1])));
    }

    #[test]
    fn fire_count_matches_counter_quotient() {
        let te = [3u64, 2];
        for t_end in [5u64, 17, 40] {
            for edge in 0..2 {
                let fires = (0..=t_end).filter(|&t| is_transfer_step(t, edge, &te)).count() as u64;
                let divisor: u64 = te[edge..].iter().product();
                assert_eq!(fires, (t_end + 1) / divisor);
            }
        }
    }

    #[test]
    fn construction_errors() {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let t = Tile::new(1, 1, model, TileInit::Zero, &mut stream_rng(0, 0, 0)).unwrap();
        assert!(matches!(
            CompositeWeight::new(vec![t.clone()], 1.5, vec![]),
            Err(CompositeError::BadGamma(_))
        ));
        assert!(matches!(
            CompositeWeight::new(vec![t.clone(), t.clone()], 0.5, vec![]),
            Err(CompositeError::ScheduleLength { .. })
        ));
        assert!(matches!(CompositeWeight::new(vec![], 0.5, vec![]), Err(CompositeError::Empty)));
    }
}
