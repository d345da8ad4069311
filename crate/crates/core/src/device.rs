//! Device response models: pulse response factors `q±`, their symmetric and
//! asymmetric components `F`/`G`, bounds, state granularity, and the
//! logical-weight ↔ conductance mapping constant `kappa`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid density used to validate custom response curves at construction.
const VALIDATION_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid device model: {0}")]
    InvalidModel(String),
    #[error("weight {w} outside device range [{lo}, {hi}]")]
    OutOfRange { w: f64, lo: f64, hi: f64 },
}

/// A monotone piecewise-linear response curve, tabulated as (w, q) knots
/// sorted by w. Evaluation linearly interpolates between knots and clamps
/// at the end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub knots: Vec<(f64, f64)>,
}

impl ResponseTable {
    pub fn eval(&self, w: f64) -> f64 {
        let knots = &self.knots;
        if w <= knots[0].0 {
            return knots[0].1;
        }
        if w >= knots[knots.len() - 1].0 {
            return knots[knots.len() - 1].1;
        }
        let idx = knots.partition_point(|&(x, _)| x <= w);
        let (x0, y0) = knots[idx - 1];
        let (x1, y1) = knots[idx];
        let t = (w - x0) / (x1 - x0);
        y0 + t * (y1 - y0)
    }
}

/// Response kind. `Custom` holds tabulated curves for positive and negative
/// pulses; the symmetric point is fixed at w = 0 in all models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeviceKind {
    /// Unit response, no asymmetry: q+ = q- = 1 everywhere.
    Ideal,
    /// Asymmetric linear device: q+(w) = 1 - w/tau_max, q-(w) = 1 - w/tau_min.
    AsymmetricLinear,
    /// Tabulated q+ and q- curves with linear interpolation.
    Custom {
        q_plus: ResponseTable,
        q_minus: ResponseTable,
    },
}

/// Immutable description of a memristive device: saturation bounds, minimal
/// per-pulse increment at the symmetric point, response kind, and mapping
/// constant `kappa` (logical weight = kappa * conductance difference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub tau_min: f64,
    pub tau_max: f64,
    pub dw_min: f64,
    pub kind: DeviceKind,
    pub kappa: f64,
}

impl DeviceModel {
    pub fn new(
        tau_min: f64,
        tau_max: f64,
        dw_min: f64,
        kind: DeviceKind,
        kappa: f64,
    ) -> Result<Self, DeviceError> {
        if !(tau_min < 0.0 && 0.0 < tau_max) {
            return Err(DeviceError::InvalidModel(format!(
                "bounds must straddle zero: tau_min={tau_min}, tau_max={tau_max}"
            )));
        }
        if !(dw_min > 0.0) || dw_min > tau_max - tau_min {
            return Err(DeviceError::InvalidModel(format!(
                "dw_min={dw_min} must be in (0, tau_max - tau_min]"
            )));
        }
        if !(kappa > 0.0) {
            return Err(DeviceError::InvalidModel(format!("kappa={kappa} must be positive")));
        }
        let model = DeviceModel { tau_min, tau_max, dw_min, kind, kappa };
        if let DeviceKind::Custom { .. } = model.kind {
            model.validate_custom()?;
        }
        Ok(model)
    }

    /// Ideal device with symmetric bounds +-tau.
    pub fn ideal(tau: f64, dw_min: f64) -> Result<Self, DeviceError> {
        Self::new(-tau, tau, dw_min, DeviceKind::Ideal, 1.0)
    }

    /// Asymmetric linear device with symmetric bounds +-tau.
    pub fn asymmetric_linear(tau: f64, dw_min: f64) -> Result<Self, DeviceError> {
        Self::new(-tau, tau, dw_min, DeviceKind::AsymmetricLinear, 1.0)
    }

    /// Checks the saturation, positive-definiteness, and symmetric-point
    /// clauses on a sampling grid. Tabulated curves only approximate the
    /// end-point conditions, so saturation is checked up to grid resolution.
    fn validate_custom(&self) -> Result<(), DeviceError> {
        let (qp, qm) = match &self.kind {
            DeviceKind::Custom { q_plus, q_minus } => (q_plus, q_minus),
            _ => unreachable!(),
        };
        if qp.knots.len() < 2 || qm.knots.len() < 2 {
            return Err(DeviceError::InvalidModel("custom curve needs >= 2 knots".into()));
        }
        for t in [qp, qm] {
            if t.knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(DeviceError::InvalidModel("curve knots must be strictly increasing in w".into()));
            }
        }
        if qp.eval(self.tau_max).abs() > 1e-9 || qm.eval(self.tau_min).abs() > 1e-9 {
            return Err(DeviceError::InvalidModel(
                "saturation violated: q+(tau_max) and q-(tau_min) must be 0".into(),
            ));
        }
        if (qp.eval(0.0) - qm.eval(0.0)).abs() > 1e-9 {
            return Err(DeviceError::InvalidModel("symmetric point violated: q+(0) must equal q-(0)".into()));
        }
        for i in 0..=VALIDATION_SAMPLES {
            let w = self.tau_min + (self.tau_max - self.tau_min) * i as f64 / VALIDATION_SAMPLES as f64;
            if w < self.tau_max - 1e-12 && qp.eval(w) <= 0.0 {
                return Err(DeviceError::InvalidModel(format!("q+({w}) not positive below tau_max")));
            }
            if w > self.tau_min + 1e-12 && qm.eval(w) <= 0.0 {
                return Err(DeviceError::InvalidModel(format!("q-({w}) not positive above tau_min")));
            }
        }
        Ok(())
    }

    fn check_range(&self, w: f64) -> Result<(), DeviceError> {
        if w < self.tau_min - 1e-12 || w > self.tau_max + 1e-12 {
            return Err(DeviceError::OutOfRange { w, lo: self.tau_min, hi: self.tau_max });
        }
        Ok(())
    }

    /// Response factor to a positive pulse at weight `w`.
    pub fn q_plus(&self, w: f64) -> Result<f64, DeviceError> {
        self.check_range(w)?;
        Ok(match &self.kind {
            DeviceKind::Ideal => 1.0,
            DeviceKind::AsymmetricLinear => 1.0 - w / self.tau_max,
            DeviceKind::Custom { q_plus, .. } => q_plus.eval(w),
        })
    }

    /// Response factor to a negative pulse at weight `w`.
    pub fn q_minus(&self, w: f64) -> Result<f64, DeviceError> {
        self.check_range(w)?;
        Ok(match &self.kind {
            DeviceKind::Ideal => 1.0,
            DeviceKind::AsymmetricLinear => 1.0 - w / self.tau_min,
            DeviceKind::Custom { q_minus, .. } => q_minus.eval(w),
        })
    }

    /// Symmetric component F(w) = (q-(w) + q+(w)) / 2.
    pub fn symmetric_f(&self, w: f64) -> Result<f64, DeviceError> {
        Ok(0.5 * (self.q_minus(w)? + self.q_plus(w)?))
    }

    /// Asymmetric component G(w) = (q-(w) - q+(w)) / 2.
    ///
    /// The elementwise update consumes G with |dW|, so positive G at positive
    /// w (and negative G at negative w) drifts weights toward zero.
    pub fn asymmetric_g(&self, w: f64) -> Result<f64, DeviceError> {
        Ok(0.5 * (self.q_minus(w)? - self.q_plus(w)?))
    }

    /// Saturation factor H(w) = q+(w) * q-(w) = F(w)^2 - G(w)^2.
    pub fn saturation_h(&self, w: f64) -> Result<f64, DeviceError> {
        Ok(self.q_plus(w)? * self.q_minus(w)?)
    }

    /// Number of distinct stable states: floor((tau_max - tau_min) / dw_min).
    pub fn n_states(&self) -> u64 {
        ((self.tau_max - self.tau_min) / self.dw_min).floor() as u64
    }

    /// Conductance-domain view of a logical weight.
    pub fn conductance(&self, w: f64) -> f64 {
        w / self.kappa
    }

    pub fn clamp(&self, w: f64) -> f64 {
        w.clamp(self.tau_min, self.tau_max)
    }
}

/// Mapping-constant helper kappa = (sigma * l_g * w_max)^(1/2) * (gamma^N * dw_min)^(-1/4).
///
/// Never applied automatically: the analysis constants `l_g` and `w_max` are
/// not observable by the simulator and must come from the caller.
pub fn kappa_schedule(sigma: f64, l_g: f64, w_max: f64, gamma: f64, num_extra_tiles: u32, dw_min: f64) -> f64 {
    (sigma * l_g * w_max).sqrt() * (gamma.powi(num_extra_tiles as i32) * dw_min).powf(-0.25)
}
