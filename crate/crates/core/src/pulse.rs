//! Stochastic pulse engine: realizes rank-1 weight updates as coincidences of
//! Bernoulli pulse streams on the rows and columns of a tile.
//!
//! The planner splits the outer-product magnitude `alpha * |x_i d_j|` into
//! per-row and per-column firing probabilities over `BL` pulse slots so that
//! the expected realized update equals the ideal one; the residual is
//! zero-mean quantization noise with variance Theta(alpha * dw_min).

use crate::device::DeviceModel;
use crate::tile::Tile;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("pulse probability {p} exceeds 1 (increase BL)")]
    ProbabilityOverflow { p: f64 },
    #[error("plan shape ({rows}, {cols}) does not match tile ({trows}, {tcols})")]
    ShapeMismatch { rows: usize, cols: usize, trows: usize, tcols: usize },
    #[error("column index {col} out of range (cols = {cols})")]
    ColumnOutOfRange { col: usize, cols: usize },
}

/// One planned rank-1 pulse update: firing probabilities and polarities for
/// the row and column streams over `bl` pulse slots.
#[derive(Debug, Clone)]
pub struct PulsePlan {
    pub bl: u32,
    pub p_row: Array1<f64>,
    pub p_col: Array1<f64>,
    pub sign_row: Array1<i8>,
    pub sign_col: Array1<i8>,
    pub alpha: f64,
}

impl PulsePlan {
    pub fn rows(&self) -> usize {
        self.p_row.len()
    }

    pub fn cols(&self) -> usize {
        self.p_col.len()
    }

    /// Expected realized update alpha * x_i * d_j at (i, j), sign included.
    pub fn expected(&self, dw_min: f64) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows(), self.cols()));
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                let sign = (self.sign_row[i] * self.sign_col[j]) as f64;
                out[[i, j]] = sign * self.p_row[i] * self.p_col[j] * self.bl as f64 * dw_min;
            }
        }
        out
    }
}

/// Plans the pulsed realization of the rank-1 update `alpha * x d^T`.
///
/// BL = max(1, ceil(alpha * |x|_inf * |d|_inf / dw_min)) is the minimal bit
/// length keeping every firing probability at or below one. The magnitude is
/// balanced between the two streams with s = sqrt(|x|_inf / |d|_inf).
/// Zero input vectors yield an all-zero (no-op) plan.
pub fn plan_update(x: ArrayView1<f64>, delta: ArrayView1<f64>, alpha: f64, model: &DeviceModel) -> PulsePlan {
    let x_inf = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let d_inf = delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let sign_row = x.map(|&v| if v > 0.0 { 1i8 } else if v < 0.0 { -1 } else { 0 });
    let sign_col = delta.map(|&v| if v > 0.0 { 1i8 } else if v < 0.0 { -1 } else { 0 });
    if x_inf == 0.0 || d_inf == 0.0 || alpha == 0.0 {
        return PulsePlan {
            bl: 1,
            p_row: Array1::zeros(x.len()),
            p_col: Array1::zeros(delta.len()),
            sign_row,
            sign_col,
            alpha,
        };
    }
    let bl = ((alpha * x_inf * d_inf / model.dw_min).ceil() as u32).max(1);
    let scale = (alpha / (bl as f64 * model.dw_min)).sqrt();
    let s = (x_inf / d_inf).sqrt();
    // Guard against round-off pushing the largest probability above one.
    let p_row = x.map(|&v| (v.abs() * scale / s).min(1.0));
    let p_col = delta.map(|&v| (v.abs() * scale * s).min(1.0));
    PulsePlan { bl, p_row, p_col, sign_row, sign_col, alpha }
}

/// Applies a planned rank-1 update to a tile, pulse by pulse.
///
/// For each of the BL slots, row and column lines fire independently; each
/// coincidence at (i, j) moves the weight by `dw_min * q_sign(w)` with the
/// polarity given by the product of line signs, clamped to the device bounds.
/// Returns the total realized change and the number of pulse coincidences.
pub fn apply_rank_update(
    tile: &mut Tile,
    plan: &PulsePlan,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, u64), PulseError> {
    let (rows, cols) = (tile.rows(), tile.cols());
    if plan.rows() != rows || plan.cols() != cols {
        return Err(PulseError::ShapeMismatch { rows: plan.rows(), cols: plan.cols(), trows: rows, tcols: cols });
    }
    let model = tile.model().clone();
    let before = tile.weights().clone();
    let mut pulses = 0u64;
    let mut row_fired = vec![false; rows];
    let mut col_fired = vec![false; cols];
    for _slot in 0..plan.bl {
        for (i, fired) in row_fired.iter_mut().enumerate() {
            *fired = plan.p_row[i] > 0.0 && rng.gen::<f64>() < plan.p_row[i];
        }
        for (j, fired) in col_fired.iter_mut().enumerate() {
            *fired = plan.p_col[j] > 0.0 && rng.gen::<f64>() < plan.p_col[j];
        }
        let w = tile.weights_mut();
        for i in 0..rows {
            if !row_fired[i] {
                continue;
            }
            for j in 0..cols {
                if !col_fired[j] {
                    continue;
                }
                let sign = plan.sign_row[i] * plan.sign_col[j];
                let cur = w[[i, j]];
                let next = match sign {
                    1 => cur + model.dw_min * model.q_plus(cur).expect("in bounds"),
                    -1 => cur - model.dw_min * model.q_minus(cur).expect("in bounds"),
                    _ => cur,
                };
                if sign != 0 {
                    pulses += 1;
                }
                w[[i, j]] = model.clamp(next);
            }
        }
        tile.debug_assert_bounds();
    }
    Ok((tile.weights() - &before, pulses))
}

/// Closed-form mean and variance of the realized per-cell update under the
/// Bernoulli-trial pulse scheme.
pub fn noise_moments_oracle(
    x_i: f64,
    delta_j: f64,
    alpha: f64,
    dw_min: f64,
    bl: u32,
) -> Result<(f64, f64), PulseError> {
    let p = (alpha * x_i * delta_j).abs() / (bl as f64 * dw_min);
    if p > 1.0 + 1e-12 {
        return Err(PulseError::ProbabilityOverflow { p });
    }
    let mean = alpha * x_i * delta_j;
    let var = alpha * (x_i * delta_j).abs() * dw_min * (1.0 - p);
    Ok((mean, var))
}

/// Open-loop transfer: pulse-writes `beta * values` into column `col` of the
/// destination tile. The write goes through the same stochastic, quantized,
/// asymmetric dynamics as a gradient update (x = values over rows, one-hot
/// column selector).
pub fn transfer_write(
    dst: &mut Tile,
    values: ArrayView1<f64>,
    col: usize,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array1<f64>, u64), PulseError> {
    if col >= dst.cols() {
        return Err(PulseError::ColumnOutOfRange { col, cols: dst.cols() });
    }
    let mut selector = Array1::zeros(dst.cols());
    selector[col] = 1.0;
    let plan = plan_update(values, selector.view(), beta, dst.model());
    let (delta, pulses) = apply_rank_update(dst, &plan, rng)?;
    Ok((delta.column(col).to_owned(), pulses))
}

/// Deterministic per-(run, tile, step) RNG stream so that parallel tiles and
/// reordered execution stay reproducible.
pub fn stream_rng(run_seed: u64, tile_index: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(run_seed, 0x9e3779b97f4a7c15), tile_index), step))
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the running combination
    let mut z = a ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
