//! Configuration, experiment orchestration, metrics emission, and
//! statistical validators behind the CLI.

use crate::algorithms::{
    analog_sgd_step, mp_step, residual_step, ttv1_step, ttv2_step, AlgoError, MpState,
    ResidualState, TtState,
};
use crate::composite::{CompositeError, CompositeWeight};
use crate::device::{DeviceError, DeviceModel};
use crate::problems::{
    mlp_forward_backward, mlp_predict_dense, quadratic_grad, toy_target_16bit, Dataset, MlpSpec,
    NoiseModel, ProblemError, Target,
};
use crate::pulse::{apply_rank_update, noise_moments_oracle, plan_update, stream_rng, PulseError};
use crate::tile::{Tile, TileError, TileInit};
use ndarray::{array, Array1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("empty tail: record has {len} rows, tail fraction {frac}")]
    EmptyTail { len: usize, frac: f64 },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub problem: ProblemConfig,
    pub device: DeviceConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemConfig {
    /// "quadratic" (optionally with the 16-bit toy target) is the batch
    /// problem family driven by `run`.
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_l")]
    pub l: f64,
    /// Explicit target; mutually exclusive with `wstar_16bit`.
    pub wstar: Option<f64>,
    /// Draw the target from the uniform 16-bit grid per seed.
    #[serde(default)]
    pub wstar_16bit: bool,
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default)]
    pub sigma: f64,
}

fn default_dim() -> usize {
    1
}
fn default_l() -> f64 {
    1.0
}
fn default_noise() -> String {
    "none".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceConfig {
    /// "ideal" or "asymmetric_linear".
    pub kind: String,
    pub tau: f64,
    pub dw_min: f64,
}

impl DeviceConfig {
    pub fn build(&self) -> Result<DeviceModel, HarnessError> {
        match self.kind.as_str() {
            "ideal" => Ok(DeviceModel::ideal(self.tau, self.dw_min)?),
            "asymmetric_linear" => Ok(DeviceModel::asymmetric_linear(self.tau, self.dw_min)?),
            other => Err(HarnessError::Config(format!("unknown device kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    /// "analog_sgd", "residual", "ttv1", "ttv2", or "mp".
    pub kind: String,
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_num_tiles")]
    pub num_tiles: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Per-tile scale overrides, listed coarse-to-fine (scale 1 first).
    pub gamma_vec: Option<Vec<f64>>,
    /// Absolute transfer periods per edge, fastest edge first (e.g. the
    /// geometric family [2, 4, 8, ...]); converted internally to the
    /// per-edge factor form. Each period must divide the next.
    pub transfer_every_vec: Option<Vec<u64>>,
    /// Cascade transfer rates per edge (writing tile n+1 into tile n).
    pub transfer_lr_vec: Option<Vec<f64>>,
    /// Warm-start transfer cadence in steps (residual only).
    #[serde(default = "default_warm_transfer_every")]
    pub warm_transfer_every: u64,
    /// TT transfer period.
    #[serde(default = "default_ns")]
    pub n_s: u64,
    #[serde(default = "default_beta")]
    pub transfer_lr: f64,
}

fn default_beta() -> f64 {
    0.1
}
fn default_num_tiles() -> usize {
    1
}
fn default_gamma() -> f64 {
    0.1
}
fn default_ns() -> u64 {
    2
}
fn default_warm_transfer_every() -> u64 {
    2
}

impl AlgorithmConfig {
    /// Per-edge schedule factors T_{n+1} for the composite, derived from the
    /// absolute periods (fastest first) or defaulting to a uniform factor 2.
    pub fn schedule_factors(&self) -> Result<Vec<u64>, HarnessError> {
        let edges = self.num_tiles.saturating_sub(1);
        match &self.transfer_every_vec {
            None => Ok(vec![2; edges]),
            Some(periods) => {
                if periods.len() != edges {
                    return Err(HarnessError::Config(format!(
                        "transfer_every_vec has {} entries, need {} (num_tiles - 1)",
                        periods.len(),
                        edges
                    )));
                }
                // periods[0] is the fastest edge (gradient tile); internal
                // factor order is slowest edge first.
                let mut factors = Vec::with_capacity(edges);
                for (i, &p) in periods.iter().enumerate() {
                    if p == 0 {
                        return Err(HarnessError::Config("transfer period must be > 0".into()));
                    }
                    let prev = if i == 0 { 1 } else { periods[i - 1] };
                    if p % prev != 0 {
                        return Err(HarnessError::Config(format!(
                            "transfer period {p} is not a multiple of the faster period {prev}"
                        )));
                    }
                    factors.push(p / prev);
                }
                factors.reverse();
                Ok(factors)
            }
        }
    }

    /// Per-tile composite scales, coarse-to-fine.
    pub fn scales(&self) -> Result<Vec<f64>, HarnessError> {
        match &self.gamma_vec {
            Some(v) => {
                if v.len() != self.num_tiles {
                    return Err(HarnessError::Config(format!(
                        "gamma_vec has {} entries, need num_tiles = {}",
                        v.len(),
                        self.num_tiles
                    )));
                }
                Ok(v.clone())
            }
            None => {
                if !(0.0 < self.gamma && self.gamma < 1.0) {
                    return Err(HarnessError::Config(format!(
                        "gamma must lie in (0, 1), got {}",
                        self.gamma
                    )));
                }
                Ok((0..self.num_tiles).map(|n| self.gamma.powi(n as i32)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub steps: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub out_dir: Option<String>,
}

fn default_log_every() -> u64 {
    100
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    let config: ExperimentConfig = toml::from_str(&text)?;
    validate_config(&config)?;
    Ok(config)
}

pub fn validate_config(config: &ExperimentConfig) -> Result<(), HarnessError> {
    if config.config_version != CONFIG_VERSION {
        return Err(HarnessError::Config(format!(
            "unsupported config_version {} (this build expects {CONFIG_VERSION})",
            config.config_version
        )));
    }
    if config.run.seeds.is_empty() {
        return Err(HarnessError::Config("run.seeds must be nonempty".into()));
    }
    if config.run.steps == 0 || config.run.log_every == 0 {
        return Err(HarnessError::Config("run.steps and run.log_every must be > 0".into()));
    }
    if config.algorithm.alpha <= 0.0 || config.algorithm.beta <= 0.0 {
        return Err(HarnessError::Config("alpha and beta must be positive".into()));
    }
    if config.algorithm.num_tiles == 0 {
        return Err(HarnessError::Config("num_tiles must be >= 1".into()));
    }
    match config.problem.kind.as_str() {
        "quadratic" => {}
        other => {
            return Err(HarnessError::Config(format!("unknown problem kind '{other}'")));
        }
    }
    match config.problem.noise.as_str() {
        "none" | "gaussian" | "adversarial" => {}
        other => return Err(HarnessError::Config(format!("unknown noise model '{other}'"))),
    }
    match config.algorithm.kind.as_str() {
        "analog_sgd" | "residual" | "ttv1" | "ttv2" | "mp" => {}
        other => return Err(HarnessError::Config(format!("unknown algorithm '{other}'"))),
    }
    config.device.build()?;
    config.algorithm.schedule_factors()?;
    config.algorithm.scales()?;
    Ok(())
}

/// Applies the SIM_SEED environment override, if set.
pub fn apply_env_seed(config: &mut ExperimentConfig) -> Result<(), HarnessError> {
    if let Ok(v) = std::env::var("SIM_SEED") {
        let seed: u64 = v
            .parse()
            .map_err(|_| HarnessError::Config(format!("SIM_SEED must be an integer, got '{v}'")))?;
        config.run.seeds = vec![seed];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Records and diagnostics
// ---------------------------------------------------------------------------

/// One logged interval of a run.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalRow {
    pub t: u64,
    pub loss: f64,
    pub dist2: f64,
    pub linf: Vec<f64>,
    /// Cumulative realized pulse coincidences up to and including step t.
    pub pulses: u64,
    pub s_t: f64,
    pub r_t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub num_tiles: usize,
    pub rows: Vec<IntervalRow>,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn final_dist2(&self) -> f64 {
        self.rows.last().map(|r| r.dist2).unwrap_or(f64::NAN)
    }

    /// CSV serialization with the stable header
    /// `t,loss,dist2,linf_tile_0..N,pulses,S_T,R_T`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,loss,dist2");
        for n in 0..self.num_tiles {
            let _ = write!(out, ",linf_tile_{n}");
        }
        out.push_str(",pulses,S_T,R_T\n");
        for row in &self.rows {
            let _ = write!(out, "{},{:.12e},{:.12e}", row.t, row.loss, row.dist2);
            for v in &row.linf {
                let _ = write!(out, ",{v:.12e}");
            }
            let _ = writeln!(out, ",{},{:.12e},{:.12e}", row.pulses, row.s_t, row.r_t);
        }
        out
    }
}

/// Trajectory-dependent amplification factors:
/// S_T = (1/T) sum r_t / (1 - r_t) and R_T = (1/T) sum 2L / (1 - r_t) with
/// r_t = |W_t|_inf^2 / tau_max^2. A saturating trajectory (r_t >= 1) yields
/// infinity, flagging the pole.
pub fn diagnostics_sr(linf_trajectory: &[f64], tau_max: f64, l: f64) -> (f64, f64) {
    if linf_trajectory.is_empty() {
        return (0.0, 2.0 * l);
    }
    let mut s = 0.0;
    let mut r = 0.0;
    for &w in linf_trajectory {
        let ratio = (w * w) / (tau_max * tau_max);
        if ratio >= 1.0 {
            return (f64::INFINITY, f64::INFINITY);
        }
        s += ratio / (1.0 - ratio);
        r += 2.0 * l / (1.0 - ratio);
    }
    let t = linf_trajectory.len() as f64;
    (s / t, r / t)
}

/// Mean of a series over its final `tail_fraction` of entries.
pub fn floor_estimate(values: &[f64], tail_fraction: f64) -> Result<f64, HarnessError> {
    let n = ((values.len() as f64) * tail_fraction).ceil() as usize;
    if n == 0 || values.is_empty() {
        return Err(HarnessError::EmptyTail { len: values.len(), frac: tail_fraction });
    }
    let tail = &values[values.len() - n.min(values.len())..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

// ---------------------------------------------------------------------------
// Quadratic / toy runner
// ---------------------------------------------------------------------------

fn noise_model(config: &ExperimentConfig) -> NoiseModel {
    match config.problem.noise.as_str() {
        "gaussian" => NoiseModel::Gaussian { sigma: config.problem.sigma },
        "adversarial" => {
            NoiseModel::Adversarial { sigma: config.problem.sigma, tau_max: config.device.tau }
        }
        _ => NoiseModel::None,
    }
}

/// RNG stream index reserved for gradient-noise draws (tiles use 0..N).
const NOISE_STREAM: u64 = u64::MAX;
/// RNG stream index reserved for problem-instance draws (e.g. the target).
const TARGET_STREAM: u64 = u64::MAX - 1;
/// RNG stream index reserved for weight initialization draws.
const INIT_STREAM: u64 = u64::MAX - 2;

fn resolve_target(config: &ExperimentConfig, seed: u64) -> Array1<f64> {
    let d = config.problem.dim;
    if config.problem.wstar_16bit {
        let mut rng = stream_rng(seed, TARGET_STREAM, 0);
        let b = toy_target_16bit(&mut rng);
        Array1::from_elem(d, b)
    } else {
        Array1::from_elem(d, config.problem.wstar.unwrap_or(0.0))
    }
}

enum Trainer {
    AnalogSgd,
    Residual(ResidualState),
    Tt { aux: Tile, state: TtState, v2: bool },
    Mp(MpState),
}

/// Runs one seed of the configured experiment; deterministic given the seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    let model = config.device.build()?;
    let algo = &config.algorithm;
    let d = config.problem.dim;
    let l = config.problem.l;
    let wstar = resolve_target(config, seed);
    let noise = noise_model(config);

    let num_tiles = if algo.kind == "residual" { algo.num_tiles } else { 1 };
    let tiles: Vec<Tile> = (0..num_tiles)
        .map(|_| Tile::new(1, d, model.clone(), TileInit::Zero, &mut stream_rng(seed, 0, 0)))
        .collect::<Result<_, _>>()?;
    let mut cw =
        CompositeWeight::with_scales(tiles, algo.scales()?, algo.schedule_factors()?)?;

    let mut trainer = match algo.kind.as_str() {
        "analog_sgd" => Trainer::AnalogSgd,
        "residual" => {
            let mut state = ResidualState::new(algo.alpha, algo.beta, num_tiles);
            state.warm_transfer_every = algo.warm_transfer_every;
            if let Some(lrs) = &algo.transfer_lr_vec {
                if lrs.len() != num_tiles.saturating_sub(1) {
                    return Err(HarnessError::Config(format!(
                        "transfer_lr_vec has {} entries, need {}",
                        lrs.len(),
                        num_tiles - 1
                    )));
                }
                state = state.with_transfer_lrs(lrs.clone());
            }
            Trainer::Residual(state)
        }
        "ttv1" | "ttv2" => {
            let aux = Tile::new(1, d, model.clone(), TileInit::Zero, &mut stream_rng(seed, 0, 0))?;
            let v2 = algo.kind == "ttv2";
            let state = if v2 {
                TtState::v2(algo.alpha, algo.transfer_lr, algo.n_s, 1, d)
            } else {
                TtState::v1(algo.alpha, algo.transfer_lr, algo.n_s)
            };
            Trainer::Tt { aux, state, v2 }
        }
        "mp" => Trainer::Mp(MpState::new(algo.alpha, 1, d)),
        other => return Err(HarnessError::Config(format!("unknown algorithm '{other}'"))),
    };

    let x = array![1.0];
    let mut pulses_total = 0u64;
    // Running S_T / R_T accumulators (identical to diagnostics_sr over the
    // per-step |W|_inf trajectory, but updated incrementally so logging stays
    // O(1) per step).
    let mut sr_s = 0.0f64;
    let mut sr_r = 0.0f64;
    let mut sr_n = 0u64;
    let mut sr_pole = false;
    let mut rows = Vec::new();

    let eval = |cw: &CompositeWeight| -> (f64, f64, Vec<f64>) {
        let w = cw.effective().row(0).to_owned();
        let diff = &w - &wstar;
        let dist2 = diff.iter().map(|&v| v * v).sum::<f64>();
        let loss = 0.5 * l * dist2;
        let linf = (0..cw.num_tiles()).map(|n| cw.tile(n).linf_norm()).collect();
        (loss, dist2, linf)
    };

    for t in 0..config.run.steps {
        let eff = cw.effective();
        let w_row = eff.row(0);
        let mut noise_rng = stream_rng(seed, NOISE_STREAM, t);
        let grad = quadratic_grad(w_row, wstar.view(), l, noise, &mut noise_rng)?;

        pulses_total += match &mut trainer {
            Trainer::AnalogSgd => {
                let mut rng = stream_rng(seed, 0, t);
                let p = analog_sgd_step(cw.tile_mut(0), x.view(), grad.view(), algo.alpha, &mut rng)?;
                cw.t_global += 1;
                p
            }
            Trainer::Residual(state) => residual_step(&mut cw, x.view(), grad.view(), state, seed)?,
            Trainer::Tt { aux, state, v2 } => {
                let core = cw.tile_mut(0);
                let p = if *v2 {
                    ttv2_step(core, aux, x.view(), grad.view(), state, seed)?
                } else {
                    ttv1_step(core, aux, x.view(), grad.view(), state, seed)?
                };
                cw.t_global += 1;
                p
            }
            Trainer::Mp(state) => {
                let p = mp_step(cw.tile_mut(0), x.view(), grad.view(), state)?;
                cw.t_global += 1;
                p
            }
        };

        let w_linf = cw.effective().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let ratio = (w_linf * w_linf) / (config.device.tau * config.device.tau);
        if ratio >= 1.0 {
            sr_pole = true;
        } else {
            sr_s += ratio / (1.0 - ratio);
            sr_r += 2.0 * l / (1.0 - ratio);
        }
        sr_n += 1;

        if (t + 1) % config.run.log_every == 0 || t + 1 == config.run.steps {
            let (loss, dist2, linf) = eval(&cw);
            if let Trainer::Residual(state) = &mut trainer {
                state.observe_loss(loss, num_tiles);
            }
            let (s_t, r_t) = if sr_pole {
                (f64::INFINITY, f64::INFINITY)
            } else {
                (sr_s / sr_n as f64, sr_r / sr_n as f64)
            };
            rows.push(IntervalRow { t: t + 1, loss, dist2, linf, pulses: pulses_total, s_t, r_t });
        }
    }

    Ok(RunRecord { seed, num_tiles, rows })
}

#[derive(Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_loss: f64,
    pub final_dist2: f64,
    pub floor: f64,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub config_version: u32,
    pub config_hash: String,
    pub algorithm: String,
    pub seeds: Vec<SeedSummary>,
}

/// FNV-1a over the canonical JSON serialization of the config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Runs all configured seeds (in parallel) and, if `run.out_dir` is set,
/// writes per-seed `metrics.csv`, a shared `summary.json`, and a final
/// composite checkpoint per seed.
pub fn run(config: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    validate_config(config)?;
    let records: Vec<RunRecord> = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Result<_, _>>()?;

    if let Some(dir) = &config.run.out_dir {
        let root = Path::new(dir);
        std::fs::create_dir_all(root)
            .map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        let mut seed_summaries = Vec::new();
        for record in &records {
            let seed_dir = root.join(format!("seed-{}", record.seed));
            std::fs::create_dir_all(&seed_dir)
                .map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
            let csv_path = seed_dir.join("metrics.csv");
            std::fs::write(&csv_path, record.to_csv()).map_err(|source| HarnessError::Io {
                path: csv_path.display().to_string(),
                source,
            })?;
            let losses: Vec<f64> = record.rows.iter().map(|r| r.loss).collect();
            seed_summaries.push(SeedSummary {
                seed: record.seed,
                final_loss: record.final_loss(),
                final_dist2: record.final_dist2(),
                floor: floor_estimate(&losses, 0.2).unwrap_or(f64::NAN),
            });
        }
        let summary = RunSummary {
            config_version: config.config_version,
            config_hash: config_hash(config),
            algorithm: config.algorithm.kind.clone(),
            seeds: seed_summaries,
        };
        let path = root.join("summary.json");
        let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, body)
            .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    }
    Ok(records)
}

/// Sweeps the residual tile count, returning (tiles, median final loss).
pub fn sweep_tiles(
    config: &ExperimentConfig,
    tile_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<(usize, f64)>, HarnessError> {
    let counts: Vec<usize> = tile_range.collect();
    counts
        .par_iter()
        .map(|&n| {
            let mut c = config.clone();
            c.algorithm.num_tiles = n;
            // Trim per-tile/per-edge vectors to the swept tile count.
            if let Some(v) = &mut c.algorithm.gamma_vec {
                v.truncate(n);
            }
            if let Some(v) = &mut c.algorithm.transfer_every_vec {
                v.truncate(n - 1);
            }
            if let Some(v) = &mut c.algorithm.transfer_lr_vec {
                v.truncate(n - 1);
            }
            c.run.out_dir = None;
            let records = run(&c)?;
            let mut finals: Vec<f64> = records.iter().map(|r| r.final_loss()).collect();
            finals.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
            Ok((n, finals[finals.len() / 2]))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lemma-1 validator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub alpha: f64,
    pub dw_min: f64,
    pub bl: u32,
    pub trials: u64,
    pub oracle_mean: f64,
    pub oracle_var: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    /// |empirical - oracle| mean deviation in standard errors.
    pub mean_z: f64,
    /// Relative deviation of the empirical variance from the oracle.
    pub var_rel_err: f64,
    pub pass: bool,
}

/// Monte-Carlo check of the pulse-noise moments on a single ideal cell:
/// empirical mean within 4 standard errors of alpha*x*delta, empirical
/// variance within 5% of the closed form.
pub fn validate_lemma1(
    alpha: f64,
    dw_min: f64,
    bl: u32,
    trials: u64,
    seed: u64,
) -> Result<Lemma1Report, HarnessError> {
    let (oracle_mean, oracle_var) = noise_moments_oracle(1.0, 1.0, alpha, dw_min, bl)?;
    // Bounds wide enough that BL pulses can never clamp.
    let tau = (bl as f64 * dw_min * 2.0).max(1.0);
    let model = DeviceModel::ideal(tau, dw_min)?;
    let base = plan_update(array![1.0].view(), array![1.0].view(), alpha, &model);
    // Spread the base plan's single-slot probability over the requested BL.
    let ratio = (base.bl as f64 / bl as f64).sqrt();
    let plan = crate::pulse::PulsePlan {
        bl,
        p_row: base.p_row.map(|&p| p * ratio),
        p_col: base.p_col.map(|&p| p * ratio),
        ..base
    };
    let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
    for t in 0..trials {
        let mut tile =
            Tile::new(1, 1, model.clone(), TileInit::Zero, &mut stream_rng(seed, 0, 0))?;
        let (dw, _) = apply_rank_update(&mut tile, &plan, &mut stream_rng(seed, 1, t))?;
        sum += dw[[0, 0]];
        sumsq += dw[[0, 0]] * dw[[0, 0]];
    }
    let n = trials as f64;
    let empirical_mean = sum / n;
    let empirical_var = (sumsq / n - empirical_mean * empirical_mean).max(0.0);
    let se = (oracle_var / n).sqrt();
    let mean_z = if se > 0.0 { (empirical_mean - oracle_mean).abs() / se } else { 0.0 };
    let var_rel_err =
        if oracle_var > 0.0 { (empirical_var / oracle_var - 1.0).abs() } else { empirical_var };
    let pass = mean_z < 4.0 && var_rel_err < 0.05;
    Ok(Lemma1Report {
        alpha,
        dw_min,
        bl,
        trials,
        oracle_mean,
        oracle_var,
        empirical_mean,
        empirical_var,
        mean_z,
        var_rel_err,
        pass,
    })
}

// ---------------------------------------------------------------------------
// MNIST-style training
// ---------------------------------------------------------------------------

/// MLP training algorithm selection for image classification runs.
#[derive(Debug, Clone)]
pub enum MlpAlgo {
    Residual { num_tiles: usize, gamma: f64, alpha: f64, beta: f64, transfer_every: u64 },
    TtV1 { fast_lr: f64, transfer_lr: f64, n_s: u64 },
}

/// Trains the analog MLP for `epochs` passes over `train` and returns the
/// test-set accuracy in [0, 1]. Deterministic given the seed.
pub fn train_mlp(
    spec: &MlpSpec,
    model: &DeviceModel,
    algo: &MlpAlgo,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let n_layers = spec.num_analog_layers();
    // Distinct stream seeds per layer keep tile streams collision-free.
    let layer_seed = |l: usize| seed ^ ((l as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    match algo {
        MlpAlgo::Residual { num_tiles, gamma, alpha, beta, transfer_every } => {
            let mut comps = Vec::with_capacity(n_layers);
            let mut states = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let (r, c) = (spec.layers[l], spec.layers[l + 1]);
                // The scale-1 coarse tile starts random (a zero tanh network
                // has identically zero gradients); correction tiles start at
                // the symmetric point.
                let s = (1.0 / (r as f64).sqrt()).min(model.tau_max);
                let tiles: Vec<Tile> = (0..*num_tiles)
                    .map(|n| {
                        let init = if n == 0 {
                            TileInit::Uniform { lo: -s, hi: s }
                        } else {
                            TileInit::Zero
                        };
                        Tile::new(
                            r,
                            c,
                            model.clone(),
                            init,
                            &mut stream_rng(layer_seed(l), INIT_STREAM, n as u64),
                        )
                    })
                    .collect::<Result<_, _>>()?;
                let schedule = vec![*transfer_every; num_tiles.saturating_sub(1)];
                comps.push(CompositeWeight::new(tiles, *gamma, schedule)?);
                states.push(ResidualState::new(*alpha, *beta, *num_tiles));
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            for epoch in 0..epochs {
                shuffle(&mut order, &mut stream_rng(seed, TARGET_STREAM, epoch as u64));
                let mut epoch_loss = 0.0;
                for &i in &order {
                    let (x, label) = train.sample(i);
                    let (loss, pairs) =
                        mlp_forward_backward(spec, &comps, x, Target::Label(label))?;
                    epoch_loss += loss;
                    for (l, (xin, delta)) in pairs.iter().enumerate() {
                        residual_step(
                            &mut comps[l],
                            xin.view(),
                            delta.view(),
                            &mut states[l],
                            layer_seed(l),
                        )?;
                    }
                }
                let mean_loss = epoch_loss / order.len().max(1) as f64;
                for (l, state) in states.iter_mut().enumerate() {
                    state.observe_loss(mean_loss, comps[l].num_tiles());
                }
            }
            let weights: Vec<_> = comps.iter().map(|c| c.effective()).collect();
            accuracy(spec, &weights, test)
        }
        MlpAlgo::TtV1 { fast_lr, transfer_lr, n_s } => {
            let mut cores = Vec::with_capacity(n_layers);
            let mut auxes = Vec::with_capacity(n_layers);
            let mut states = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let (r, c) = (spec.layers[l], spec.layers[l + 1]);
                // Same convention as the residual stack: the forward weight
                // starts random, the auxiliary gradient tile at zero.
                let s = (1.0 / (r as f64).sqrt()).min(model.tau_max);
                cores.push(Tile::new(
                    r,
                    c,
                    model.clone(),
                    TileInit::Uniform { lo: -s, hi: s },
                    &mut stream_rng(layer_seed(l), INIT_STREAM, 0),
                )?);
                auxes.push(Tile::new(r, c, model.clone(), TileInit::Zero, &mut stream_rng(seed, 0, 0))?);
                states.push(TtState::v1(*fast_lr, *transfer_lr, *n_s));
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            for epoch in 0..epochs {
                shuffle(&mut order, &mut stream_rng(seed, TARGET_STREAM, epoch as u64));
                for &i in &order {
                    let (x, label) = train.sample(i);
                    let weights: Vec<_> = cores.iter().map(|t| t.weights().clone()).collect();
                    let (_, pairs) = crate::problems::mlp_forward_backward_dense(
                        spec,
                        &weights,
                        x,
                        Target::Label(label),
                    )?;
                    for (l, (xin, delta)) in pairs.iter().enumerate() {
                        ttv1_step(
                            &mut cores[l],
                            &mut auxes[l],
                            xin.view(),
                            delta.view(),
                            &mut states[l],
                            layer_seed(l),
                        )?;
                    }
                }
            }
            let weights: Vec<_> = cores.iter().map(|t| t.weights().clone()).collect();
            accuracy(spec, &weights, test)
        }
    }
}

fn accuracy(
    spec: &MlpSpec,
    weights: &[ndarray::Array2<f64>],
    test: &Dataset,
) -> Result<f64, HarnessError> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let (x, label) = test.sample(i);
        if mlp_predict_dense(spec, weights, x)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Fisher-Yates shuffle against our seeded stream type.
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
