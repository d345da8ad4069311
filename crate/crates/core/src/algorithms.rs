//! Training algorithms over analog tiles: Analog SGD, Tiki-Taka v1/v2,
//! Mixed Precision, and multi-timescale residual learning with warm start
//! and plateau-triggered switching.
//!
//! All algorithms consume per-sample `(x, delta)` pairs so that every analog
//! write is a rank-1 pulse update; mini-batching is sequential rank-1 updates.
//! Every step function returns the number of realized pulse coincidences so
//! the harness can report hardware activity.

use crate::composite::{is_transfer_step, CompositeError, CompositeWeight};
use crate::pulse::{apply_rank_update, plan_update, stream_rng, transfer_write, PulseError};
use crate::tile::{Tile, TileError};
use ndarray::{Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error("accumulator shape {acc:?} does not match tile ({rows}, {cols})")]
    AccumulatorShape { acc: (usize, usize), rows: usize, cols: usize },
}

/// One Analog SGD step: W <- W - alpha * x delta^T, realized through the
/// stochastic pulse engine (so the asymmetric response and quantization
/// noise are included automatically). Returns the pulse coincidence count.
pub fn analog_sgd_step(
    tile: &mut Tile,
    x: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<u64, AlgoError> {
    let neg_delta = delta.map(|&v| -v);
    let plan = plan_update(x, neg_delta.view(), alpha, tile.model());
    let (_dw, pulses) = apply_rank_update(tile, &plan, rng)?;
    Ok(pulses)
}

/// Plateau detector: aggressive for the first few switches (any single
/// non-decrease), mild afterwards (at least 2 non-decreases over the last
/// 5 transitions). A perfectly flat history counts as a plateau: a stack
/// whose fast tiles are saturated makes no progress at all, and must not
/// wedge the warm start.
pub fn loss_plateau(history: &[f64], k: usize) -> bool {
    if k <= 3 {
        if history.len() < 2 {
            return false;
        }
        history[history.len() - 1] >= history[history.len() - 2]
    } else {
        if history.len() < 6 {
            return false;
        }
        let tail = &history[history.len() - 6..];
        let stalls = tail.windows(2).filter(|w| w[1] >= w[0]).count();
        stalls >= 2
    }
}

/// State for the multi-timescale residual trainer.
#[derive(Debug, Clone)]
pub struct ResidualState {
    pub alpha: f64,
    /// Warm-start transfer learning rate.
    pub beta: f64,
    /// Cascade transfer learning rate per edge n (writing tile n+1 into n).
    pub transfer_lr_vec: Vec<f64>,
    /// Warm-start transfer cadence in steps. Decoupled from the cascade
    /// schedule: seeding the slow tiles must be fast even when the cascade
    /// runs on long periods, otherwise deep stacks starve before the coarse
    /// tiles ever reach the neighborhood of the solution.
    pub warm_transfer_every: u64,
    /// Current warm-start target tile; tiles below it are already seeded.
    pub warm_k: usize,
    pub loss_history: Vec<f64>,
}

impl ResidualState {
    /// `num_tiles` = N+1. The default cascade rates follow beta_n =
    /// 0.1 * 1.2^n unless overridden later.
    pub fn new(alpha: f64, beta: f64, num_tiles: usize) -> Self {
        let edges = num_tiles.saturating_sub(1);
        let transfer_lr_vec = (0..edges).map(|n| 0.1 * 1.2f64.powi(n as i32)).collect();
        ResidualState {
            alpha,
            beta,
            transfer_lr_vec,
            warm_transfer_every: 2,
            warm_k: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn with_transfer_lrs(mut self, lrs: Vec<f64>) -> Self {
        self.transfer_lr_vec = lrs;
        self
    }

    /// True once every slower tile has been warm-started.
    pub fn warm_done(&self, num_tiles: usize) -> bool {
        self.warm_k >= num_tiles.saturating_sub(1)
    }

    /// Records a loss observation (called once per logging interval) and
    /// advances the warm-start pointer when a plateau is detected. warm_k is
    /// monotone nondecreasing and only moves on a plateau trigger.
    pub fn observe_loss(&mut self, loss: f64, num_tiles: usize) {
        self.loss_history.push(loss);
        if !self.warm_done(num_tiles) && loss_plateau(&self.loss_history, self.warm_k) {
            self.warm_k += 1;
        }
    }
}

/// One residual-learning step at global time `cw.t_global`:
///   (a) gradient pulse update on the fastest tile N;
///   (b) warm start (k < N): every `warm_transfer_every` steps, transfer
///       tile N's cursor column into tile k with rate beta;
///   (c) cascade (k = N): for n = N-1 down to 0, when edge n fires, transfer
///       one cursor column of tile n+1 into tile n with transfer_lr_vec[n].
/// RNG streams are keyed by (run_seed, destination tile, step) so that a
/// single-tile composite replays Analog SGD draws exactly.
pub fn residual_step(
    cw: &mut CompositeWeight,
    x: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    state: &mut ResidualState,
    run_seed: u64,
) -> Result<u64, AlgoError> {
    let t = cw.t_global;
    let n_grad = cw.gradient_tile();
    let mut pulses = 0u64;

    let neg_delta = delta.map(|&v| -v);
    let plan = plan_update(x, neg_delta.view(), state.alpha, cw.tile(n_grad).model());
    let mut rng = stream_rng(run_seed, n_grad as u64, t);
    let (_dw, p) = apply_rank_update(cw.tile_mut(n_grad), &plan, &mut rng)?;
    pulses += p;

    if n_grad > 0 {
        if !state.warm_done(cw.num_tiles()) {
            // Warm start: seed tile k from the gradient tile at the fast
            // warm-start cadence.
            if (t + 1) % state.warm_transfer_every.max(1) == 0 {
                let col = cw.tile_mut(n_grad).advance_cursor();
                let values = cw.tile(n_grad).read_column(col)?;
                let dst = state.warm_k;
                let mut rng = stream_rng(run_seed, dst as u64, t);
                let (_dc, p) =
                    transfer_write(cw.tile_mut(dst), values.view(), col, state.beta, &mut rng)?;
                pulses += p;
            }
        } else {
            let transfer_every = cw.transfer_every().to_vec();
            for n in (0..n_grad).rev() {
                if is_transfer_step(t, n, &transfer_every) {
                    let col = cw.tile_mut(n + 1).advance_cursor();
                    let values = cw.tile(n + 1).read_column(col)?;
                    let lr = state.transfer_lr_vec[n];
                    let mut rng = stream_rng(run_seed, n as u64, t);
                    let (_dc, p) =
                        transfer_write(cw.tile_mut(n), values.view(), col, lr, &mut rng)?;
                    pulses += p;
                }
            }
        }
    }

    cw.t_global += 1;
    Ok(pulses)
}

/// Shared state for the Tiki-Taka baselines. `buffer` is present only for
/// TT-v2 (the digital filter between aux reads and core writes).
#[derive(Debug, Clone)]
pub struct TtState {
    pub fast_lr: f64,
    pub transfer_lr: f64,
    /// Transfer period in gradient steps.
    pub n_s: u64,
    /// TT-v2 buffer decay after each write; 0 clears the written column.
    pub decay: f64,
    pub step: u64,
    pub buffer: Option<Array2<f64>>,
}

impl TtState {
    pub fn v1(fast_lr: f64, transfer_lr: f64, n_s: u64) -> Self {
        TtState { fast_lr, transfer_lr, n_s, decay: 0.0, step: 0, buffer: None }
    }

    pub fn v2(fast_lr: f64, transfer_lr: f64, n_s: u64, rows: usize, cols: usize) -> Self {
        TtState { fast_lr, transfer_lr, n_s, decay: 0.0, step: 0, buffer: Some(Array2::zeros((rows, cols))) }
    }
}

/// TT-v1: accumulate gradients on the auxiliary tile, and every n_s steps
/// pulse-write one cyclic aux column into the core tile.
pub fn ttv1_step(
    core: &mut Tile,
    aux: &mut Tile,
    x: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    state: &mut TtState,
    run_seed: u64,
) -> Result<u64, AlgoError> {
    let t = state.step;
    let mut rng = stream_rng(run_seed, 1, t);
    let mut pulses = analog_sgd_step(aux, x, delta, state.fast_lr, &mut rng)?;
    if (t + 1) % state.n_s == 0 {
        let col = aux.advance_cursor();
        let values = aux.read_column(col)?;
        let mut rng = stream_rng(run_seed, 0, t);
        let (_dc, p) = transfer_write(core, values.view(), col, state.transfer_lr, &mut rng)?;
        pulses += p;
    }
    state.step += 1;
    Ok(pulses)
}

/// TT-v2: like TT-v1 but the aux column first lands in a digital buffer
/// (exact accumulation); the buffer column is pulse-written to the core and
/// then decayed (zeroed by default).
pub fn ttv2_step(
    core: &mut Tile,
    aux: &mut Tile,
    x: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    state: &mut TtState,
    run_seed: u64,
) -> Result<u64, AlgoError> {
    let t = state.step;
    let mut rng = stream_rng(run_seed, 1, t);
    let mut pulses = analog_sgd_step(aux, x, delta, state.fast_lr, &mut rng)?;
    if (t + 1) % state.n_s == 0 {
        let col = aux.advance_cursor();
        let values = aux.read_column(col)?;
        let buffer = state.buffer.as_mut().expect("TT-v2 state carries a buffer");
        if buffer.dim() != (core.rows(), core.cols()) {
            return Err(AlgoError::AccumulatorShape {
                acc: buffer.dim(),
                rows: core.rows(),
                cols: core.cols(),
            });
        }
        for i in 0..core.rows() {
            buffer[[i, col]] += values[i];
        }
        let buf_col = buffer.column(col).to_owned();
        let mut rng = stream_rng(run_seed, 0, t);
        let (_dc, p) = transfer_write(core, buf_col.view(), col, state.transfer_lr, &mut rng)?;
        pulses += p;
        let decay = state.decay;
        let buffer = state.buffer.as_mut().expect("buffer present");
        for i in 0..core.rows() {
            buffer[[i, col]] *= decay;
        }
    }
    state.step += 1;
    Ok(pulses)
}

/// State for Mixed Precision: exact digital gradient accumulator plus the
/// per-cell programming threshold (one device step).
#[derive(Debug, Clone)]
pub struct MpState {
    pub alpha: f64,
    pub acc: Array2<f64>,
}

impl MpState {
    pub fn new(alpha: f64, rows: usize, cols: usize) -> Self {
        MpState { alpha, acc: Array2::zeros((rows, cols)) }
    }
}

/// Mixed Precision: acc += -alpha * x delta^T in exact arithmetic; each cell
/// with |acc| >= dw_min emits floor(|acc|/dw_min) deterministic device pulses
/// (with the full state-dependent response); the sub-threshold residual stays
/// in the accumulator. Returns the number of pulses applied.
pub fn mp_step(
    tile: &mut Tile,
    x: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    state: &mut MpState,
) -> Result<u64, AlgoError> {
    let (rows, cols) = (tile.rows(), tile.cols());
    if state.acc.dim() != (rows, cols) {
        return Err(AlgoError::AccumulatorShape { acc: state.acc.dim(), rows, cols });
    }
    if x.len() != rows {
        return Err(TileError::DimMismatch { expected: rows, got: x.len() }.into());
    }
    if delta.len() != cols {
        return Err(TileError::DimMismatch { expected: cols, got: delta.len() }.into());
    }
    for i in 0..rows {
        for j in 0..cols {
            state.acc[[i, j]] -= state.alpha * x[i] * delta[j];
        }
    }
    let model = tile.model().clone();
    let mut total = 0u64;
    let w = tile.weights_mut();
    for i in 0..rows {
        for j in 0..cols {
            let acc = state.acc[[i, j]];
            let n_p = (acc.abs() / model.dw_min).floor() as u64;
            if n_p == 0 {
                continue;
            }
            let sign = acc.signum();
            let mut cur = w[[i, j]];
            for _ in 0..n_p {
                let next = if sign > 0.0 {
                    cur + model.dw_min * model.q_plus(cur).expect("in bounds")
                } else {
                    cur - model.dw_min * model.q_minus(cur).expect("in bounds")
                };
                cur = model.clamp(next);
            }
            w[[i, j]] = cur;
            state.acc[[i, j]] -= sign * n_p as f64 * model.dw_min;
            total += n_p;
        }
    }
    tile.debug_assert_bounds();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceModel;
    use crate::tile::TileInit;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn zero_tile(model: DeviceModel) -> Tile {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Tile::new(1, 1, model, TileInit::Zero, &mut rng).unwrap()
    }

    #[test]
    fn sgd_matches_digital_in_fine_grain_limit() {
        // dw_min = 1e-6 emulates the continuum limit; Analog SGD on the 1-D
        // quadratic (L/2)(w - 0.7)^2 should track the exact digital recursion.
        let model = DeviceModel::ideal(1.0, 1e-6).unwrap();
        let mut tile = zero_tile(model);
        let (l, wstar, alpha) = (1.0, 0.7, 0.05);
        let mut w_digital = 0.0;
        for t in 0..100u64 {
            let w = tile.weights()[[0, 0]];
            let grad = l * (w - wstar);
            let mut rng = stream_rng(7, 0, t);
            analog_sgd_step(&mut tile, array![1.0].view(), array![grad].view(), alpha, &mut rng)
                .unwrap();
            w_digital -= alpha * l * (w_digital - wstar);
        }
        assert!((tile.weights()[[0, 0]] - w_digital).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut tile = zero_tile(DeviceModel::ideal(1.0, 0.1).unwrap());
        let mut rng = stream_rng(0, 0, 0);
        let pulses =
            analog_sgd_step(&mut tile, array![0.0].view(), array![0.0].view(), 0.1, &mut rng)
                .unwrap();
        assert_eq!(pulses, 0);
        assert_eq!(tile.weights()[[0, 0]], 0.0);
    }

    #[test]
    fn plateau_modes() {
        assert!(loss_plateau(&[1.0, 1.1], 0));
        assert!(!loss_plateau(&[1.0], 0));
        assert!(!loss_plateau(&[1.0, 0.9], 2));
        // Mild mode: two increases among the last five transitions.
        assert!(loss_plateau(&[1.0, 0.9, 1.0, 0.8, 0.9, 0.85], 4));
        assert!(!loss_plateau(&[1.0, 0.9, 1.0, 0.8, 0.9], 4));
        assert!(!loss_plateau(&[1.0, 0.9, 0.8, 0.7, 0.75, 0.6], 4));
    }

    fn toy_composite(num_tiles: usize) -> CompositeWeight {
        let model = DeviceModel::ideal(1.0, 0.5).unwrap();
        let tiles: Vec<Tile> = (0..num_tiles).map(|_| zero_tile(model.clone())).collect();
        let transfer_every = vec![2u64; num_tiles - 1];
        CompositeWeight::new(tiles, 0.1, transfer_every).unwrap()
    }

    #[test]
    fn single_tile_residual_degenerates_to_sgd() {
        let mut cw = toy_composite(1);
        let mut lone = zero_tile(DeviceModel::ideal(1.0, 0.5).unwrap());
        let mut state = ResidualState::new(0.3, 0.1, 1);
        for t in 0..200u64 {
            let x = array![((t * 37) % 11) as f64 / 11.0];
            let d = array![((t * 13) % 7) as f64 / 7.0 - 0.5];
            residual_step(&mut cw, x.view(), d.view(), &mut state, 99).unwrap();
            let mut rng = stream_rng(99, 0, t);
            analog_sgd_step(&mut lone, x.view(), d.view(), 0.3, &mut rng).unwrap();
        }
        assert_eq!(cw.tile(0).weights(), lone.weights());
    }

    #[test]
    fn warm_k_moves_only_on_plateau_and_is_monotone() {
        let mut state = ResidualState::new(0.1, 0.1, 4);
        let mut last = state.warm_k;
        for (i, &loss) in [1.0, 0.9, 0.95, 0.8, 0.85, 0.9, 0.7].iter().enumerate() {
            state.observe_loss(loss, 4);
            assert!(state.warm_k >= last, "warm_k decreased at observation {i}");
            last = state.warm_k;
        }
        // Three single-step increases fired the aggressive trigger each time,
        // reaching warm_k = N = 3.
        assert_eq!(state.warm_k, 3);
        state.observe_loss(2.0, 4); // warm phase done: pointer must stay put
        assert_eq!(state.warm_k, 3);
    }

    #[test]
    fn slow_tiles_frozen_between_firings_and_schedule_counts() {
        let mut cw = toy_composite(3);
        let mut state = ResidualState::new(0.3, 0.1, 3);
        state.warm_k = 2; // cascade phase from the start
        let mut writes = vec![0u64; 2];
        let mut prev: Vec<_> = (0..2).map(|n| cw.tile(n).weights().clone()).collect();
        let steps = 64u64;
        for t in 0..steps {
            let x = array![1.0];
            let d = array![-0.4];
            residual_step(&mut cw, x.view(), d.view(), &mut state, 5).unwrap();
            for n in 0..2 {
                let fired = is_transfer_step(t, n, cw.transfer_every());
                if cw.tile(n).weights() != &prev[n] {
                    assert!(fired, "tile {n} changed off-schedule at t={t}");
                }
                if fired {
                    writes[n] += 1;
                    prev[n] = cw.tile(n).weights().clone();
                }
            }
        }
        // Edge n fires floor(t_{n+1} / T_{n+1}) times over the run.
        assert_eq!(writes[1], steps / 2);
        assert_eq!(writes[0], steps / 4);
    }

    #[test]
    fn ttv1_tracks_scaled_sgd_on_quadratic() {
        // Fine-grained ideal devices make the pulse dynamics near-exact, so
        // TT-v1 should match its own digital recursion: aux accumulates the
        // gradient, core receives transfer_lr * aux[col] every n_s steps.
        // The core/aux pair forms a marginally stable oscillator around
        // wstar; wstar = 0.3 keeps the swing well inside the +-1 bounds so
        // analog clamping never bites, and dw_min = 1e-7 keeps the
        // accumulated pulse noise below the 1e-3 tolerance.
        let model = DeviceModel::ideal(1.0, 1e-7).unwrap();
        let mut core = zero_tile(model.clone());
        let mut aux = zero_tile(model);
        let mut state = TtState::v1(0.05, 0.2, 4);
        let (l, wstar) = (1.0, 0.3);
        let (mut core_d, mut aux_d) = (0.0f64, 0.0f64);
        for t in 0..100u64 {
            let w = core.weights()[[0, 0]];
            let grad = l * (w - wstar);
            ttv1_step(&mut core, &mut aux, array![1.0].view(), array![grad].view(), &mut state, 3)
                .unwrap();
            let grad_d = l * (core_d - wstar);
            aux_d -= 0.05 * grad_d;
            if (t + 1) % 4 == 0 {
                core_d += 0.2 * aux_d;
            }
        }
        assert_relative_eq!(core.weights()[[0, 0]], core_d, epsilon = 1e-3);
        assert_relative_eq!(aux.weights()[[0, 0]], aux_d, epsilon = 1e-3);
    }

    #[test]
    fn tt_zero_aux_leaves_core_unchanged() {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let mut core = zero_tile(model.clone());
        let mut aux = zero_tile(model.clone());
        let mut s1 = TtState::v1(0.1, 0.5, 2);
        for _ in 0..10 {
            ttv1_step(&mut core, &mut aux, array![0.0].view(), array![0.0].view(), &mut s1, 1)
                .unwrap();
        }
        assert_eq!(core.weights()[[0, 0]], 0.0);

        let mut core = zero_tile(model.clone());
        let mut aux = zero_tile(model);
        let mut s2 = TtState::v2(0.1, 0.5, 2, 1, 1);
        for _ in 0..10 {
            ttv2_step(&mut core, &mut aux, array![0.0].view(), array![0.0].view(), &mut s2, 1)
                .unwrap();
        }
        assert_eq!(core.weights()[[0, 0]], 0.0);
        assert_eq!(s2.buffer.as_ref().unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn ttv2_buffer_accumulates_and_clears() {
        // One transfer event: buffer takes the aux column exactly, the core
        // write goes through pulses, and the column is zeroed afterwards.
        let model = DeviceModel::ideal(1.0, 1e-6).unwrap();
        let mut core = zero_tile(model.clone());
        let mut aux = zero_tile(model);
        let mut state = TtState::v2(0.05, 0.5, 2, 1, 1);
        for _ in 0..2 {
            ttv2_step(&mut core, &mut aux, array![1.0].view(), array![-1.0].view(), &mut state, 8)
                .unwrap();
        }
        // Two gradient steps of +0.05 each landed on aux; the buffer column
        // was consumed by the transfer.
        assert_relative_eq!(aux.weights()[[0, 0]], 0.1, epsilon = 1e-3);
        assert_eq!(state.buffer.as_ref().unwrap()[[0, 0]], 0.0);
        assert_relative_eq!(core.weights()[[0, 0]], 0.5 * 0.1, epsilon = 1e-3);
    }

    #[test]
    fn mp_threshold_trace() {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let mut tile = zero_tile(model);
        let mut state = MpState::new(1.0, 1, 1);
        // acc = 2.3 * dw_min -> 2 pulses, residual 0.3 * dw_min.
        let pulses = mp_step(&mut tile, array![1.0].view(), array![-0.23].view(), &mut state).unwrap();
        assert_eq!(pulses, 2);
        assert_relative_eq!(tile.weights()[[0, 0]], 0.2, epsilon = 1e-12);
        assert_relative_eq!(state.acc[[0, 0]], 0.03, epsilon = 1e-12);
    }

    #[test]
    fn mp_subthreshold_is_noop() {
        let model = DeviceModel::ideal(1.0, 0.1).unwrap();
        let mut tile = zero_tile(model);
        let mut state = MpState::new(1.0, 1, 1);
        let pulses = mp_step(&mut tile, array![1.0].view(), array![-0.05].view(), &mut state).unwrap();
        assert_eq!(pulses, 0);
        assert_eq!(tile.weights()[[0, 0]], 0.0);
        assert_relative_eq!(state.acc[[0, 0]], 0.05, epsilon = 1e-12);
    }

    #[test]
    fn bounds_preserved_under_all_algorithms() {
        let model = DeviceModel::asymmetric_linear(1.0, 0.1).unwrap();
        let mut tile = zero_tile(model.clone());
        let mut mp = MpState::new(5.0, 1, 1);
        for t in 0..500u64 {
            let d = array![if t % 2 == 0 { -3.0 } else { 3.0 }];
            mp_step(&mut tile, array![1.0].view(), d.view(), &mut mp).unwrap();
            let mut rng = stream_rng(1, 0, t);
            analog_sgd_step(&mut tile, array![1.0].view(), d.view(), 5.0, &mut rng).unwrap();
            let w = tile.weights()[[0, 0]];
            assert!((-1.0..=1.0).contains(&w));
        }
    }
}
