//! Analytical per-iteration hardware cost model: digital floating-point time
//! plus analog pulse/readout time, and digital storage footprints.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("parameter {name} must be positive (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("transfer period n_s must be at least 2 for {algo:?} (got {n_s})")]
    TransferPeriodTooSmall { algo: CostAlgo, n_s: u64 },
}

/// Algorithms covered by the cost model. Latency is per training sample;
/// the residual algorithm's cost is independent of the number of tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostAlgo {
    AnalogSgd,
    TtV2,
    MixedPrecision,
    Residual,
}

impl CostAlgo {
    pub const ALL: [CostAlgo; 4] =
        [CostAlgo::AnalogSgd, CostAlgo::TtV2, CostAlgo::MixedPrecision, CostAlgo::Residual];

    pub fn label(&self) -> &'static str {
        match self {
            CostAlgo::AnalogSgd => "analog-sgd",
            CostAlgo::TtV2 => "tt-v2",
            CostAlgo::MixedPrecision => "mixed-precision",
            CostAlgo::Residual => "residual",
        }
    }
}

/// Cost-model inputs.
#[derive(Debug, Clone, Copy)]
pub struct CostParams {
    /// Layer dimension (square D x D layer).
    pub d: u64,
    /// Batch size (Mixed Precision programs once per batch).
    pub b: u64,
    /// Transfer period in steps.
    pub n_s: u64,
    /// Average pulses per update per sample.
    pub l_avg: f64,
    /// Nanoseconds per pulse.
    pub t_sp: f64,
    /// Nanoseconds per analog matrix-vector readout.
    pub t_m: f64,
    /// Peak digital throughput in FLOP/s, shared across 4 tiles.
    pub throughput: f64,
}

impl CostParams {
    fn validate(&self) -> Result<(), CostError> {
        let checks: [(&'static str, f64); 6] = [
            ("d", self.d as f64),
            ("b", self.b as f64),
            ("l_avg", self.l_avg),
            ("t_sp", self.t_sp),
            ("t_m", self.t_m),
            ("throughput", self.throughput),
        ];
        for (name, value) in checks {
            if value <= 0.0 {
                return Err(CostError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Effective digital throughput: the peak is shared across 4 tiles.
    fn effective_throughput(&self) -> f64 {
        self.throughput / 4.0
    }

    fn fp_time_ns(&self, ops: f64) -> f64 {
        ops / self.effective_throughput() * 1e9
    }
}

/// Per-sample latency in nanoseconds: digital FP time at the effective
/// throughput plus analog pulse/readout time.
///
/// FP-op counts per algorithm: 2D (Analog SGD, Residual), 2D + 2D/n_s
/// (TT-v2), 2D^2 + D (Mixed Precision). Analog time: l_avg*t_sp for Analog
/// SGD; (l_avg + 1/n_s)*t_sp + t_M/n_s for TT-v2; (D/B)*t_sp for Mixed
/// Precision; l_avg*t_sp*n_s/(n_s-1) + t_M/(n_s-1) for Residual — the last
/// is a closed form independent of the tile count, so deep stacks cost no
/// more than the bound.
pub fn latency_ns(algo: CostAlgo, p: &CostParams) -> Result<f64, CostError> {
    p.validate()?;
    let d = p.d as f64;
    let ns = p.n_s as f64;
    match algo {
        CostAlgo::AnalogSgd => Ok(p.fp_time_ns(2.0 * d) + p.l_avg * p.t_sp),
        CostAlgo::TtV2 => {
            if p.n_s < 2 {
                return Err(CostError::TransferPeriodTooSmall { algo, n_s: p.n_s });
            }
            let fp = p.fp_time_ns(2.0 * d + 2.0 * d / ns);
            let analog = (p.l_avg + 1.0 / ns) * p.t_sp + p.t_m / ns;
            Ok(fp + analog)
        }
        CostAlgo::MixedPrecision => {
            let fp = p.fp_time_ns(2.0 * d * d + d);
            let analog = d / p.b as f64 * p.t_sp;
            Ok(fp + analog)
        }
        CostAlgo::Residual => {
            if p.n_s < 2 {
                return Err(CostError::TransferPeriodTooSmall { algo, n_s: p.n_s });
            }
            let fp = p.fp_time_ns(2.0 * d);
            let analog = p.l_avg * p.t_sp * ns / (ns - 1.0) + p.t_m / (ns - 1.0);
            Ok(fp + analog)
        }
    }
}

/// Digital storage footprint in bytes at 1 byte per element: 2D for Analog
/// SGD and Residual (activations + errors), D^2 + 2D for TT-v2 (filter
/// matrix), D^2 + 2DB for Mixed Precision (accumulator + batch buffers).
pub fn storage_bytes(algo: CostAlgo, d: u64, b: u64) -> u64 {
    match algo {
        CostAlgo::AnalogSgd | CostAlgo::Residual => 2 * d,
        CostAlgo::TtV2 => d * d + 2 * d,
        CostAlgo::MixedPrecision => d * d + 2 * d * b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> CostParams {
        CostParams { d: 512, b: 100, n_s: 2, l_avg: 5.0, t_sp: 5.0, t_m: 40.0, throughput: 0.7e12 }
    }

    #[test]
    fn reference_latencies() {
        let p = reference_params();
        assert!((latency_ns(CostAlgo::AnalogSgd, &p).unwrap() - 30.9).abs() < 0.1);
        assert!((latency_ns(CostAlgo::TtV2, &p).unwrap() - 56.3).abs() < 0.1);
        assert!((latency_ns(CostAlgo::MixedPrecision, &p).unwrap() - 3024.5).abs() < 0.1);
        assert!((latency_ns(CostAlgo::Residual, &p).unwrap() - 95.9).abs() < 0.1);
    }

    #[test]
    fn storage_formulas() {
        assert_eq!(storage_bytes(CostAlgo::Residual, 512, 100), 1024);
        assert_eq!(storage_bytes(CostAlgo::AnalogSgd, 512, 100), 1024);
        assert_eq!(storage_bytes(CostAlgo::TtV2, 512, 100), 262_144 + 1024);
        assert_eq!(storage_bytes(CostAlgo::MixedPrecision, 512, 100), 262_144 + 102_400);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = reference_params();
        p.n_s = 1;
        assert!(matches!(
            latency_ns(CostAlgo::Residual, &p),
            Err(CostError::TransferPeriodTooSmall { .. })
        ));
        assert!(matches!(
            latency_ns(CostAlgo::TtV2, &p),
            Err(CostError::TransferPeriodTooSmall { .. })
        ));
        // Analog SGD does not divide by n_s - 1.
        assert!(latency_ns(CostAlgo::AnalogSgd, &p).is_ok());

        let mut p = reference_params();
        p.t_sp = 0.0;
        assert!(matches!(
            latency_ns(CostAlgo::AnalogSgd, &p),
            Err(CostError::NonPositive { name: "t_sp", .. })
        ));
    }
}
