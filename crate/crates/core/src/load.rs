//! Voltage-dependent load models.
//!
//! The ZIP model mixes constant-impedance, constant-current and constant-power
//! behaviour: `P = P0 (Z V² + I V + P)`. It is not convex in `V²`, so the
//! optimization uses the ZP form, which replaces `V` by its first-order
//! expansion `1 + (V² - 1)/2` around nominal voltage and is affine in `V²`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LoadModelError {
    #[error("{channel} ZIP weights sum to {sum}, expected 1")]
    BadSum { channel: &'static str, sum: f64 },
    #[error("{channel} ZIP weights must be finite")]
    NonFinite { channel: &'static str },
    #[error("voltage magnitude must be positive, got {0}")]
    BadVoltage(f64),
}

/// Weights of one channel (active or reactive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipWeights {
    pub z: f64,
    pub i: f64,
    pub p: f64,
}

impl ZipWeights {
    fn check(&self, channel: &'static str) -> Result<(), LoadModelError> {
        if !(self.z.is_finite() && self.i.is_finite() && self.p.is_finite()) {
            return Err(LoadModelError::NonFinite { channel });
        }
        let sum = self.z + self.i + self.p;
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(LoadModelError::BadSum { channel, sum });
        }
        Ok(())
    }

    /// Demand multiplier at voltage magnitude `v`.
    pub fn factor(&self, v: f64) -> f64 {
        self.z * v * v + self.i * v + self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipCoefficients {
    pub z_p: f64,
    pub i_p: f64,
    pub p_p: f64,
    pub z_q: f64,
    pub i_q: f64,
    pub p_q: f64,
}

impl Default for ZipCoefficients {
    /// (0.4, 0.3, 0.3) on both channels.
    fn default() -> Self {
        Self::uniform(0.4, 0.3, 0.3)
    }
}

impl ZipCoefficients {
    /// Same weights on the active and reactive channels.
    pub const fn uniform(z: f64, i: f64, p: f64) -> Self {
        Self {
            z_p: z,
            i_p: i,
            p_p: p,
            z_q: z,
            i_q: i,
            p_q: p,
        }
    }

    /// Pure constant-power load.
    pub const fn constant_power() -> Self {
        Self::uniform(0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), LoadModelError> {
        self.active().check("active")?;
        self.reactive().check("reactive")
    }

    pub fn active(&self) -> ZipWeights {
        ZipWeights {
            z: self.z_p,
            i: self.i_p,
            p: self.p_p,
        }
    }

    pub fn reactive(&self) -> ZipWeights {
        ZipWeights {
            z: self.z_q,
            i: self.i_q,
            p: self.p_q,
        }
    }

    /// Active demand at voltage `v` for base demand `p0`.
    pub fn active_power(&self, p0: f64, v: f64) -> f64 {
        p0 * self.active().factor(v)
    }

    /// Reactive demand at voltage `v` for base demand `q0`.
    pub fn reactive_power(&self, q0: f64, v: f64) -> f64 {
        q0 * self.reactive().factor(v)
    }
}

/// `p0 (Z v² + I v + P)` with input validation.
pub fn zip_power(p0: f64, weights: ZipWeights, v: f64) -> Result<f64, LoadModelError> {
    weights.check("load")?;
    if !(v > 0.0) {
        return Err(LoadModelError::BadVoltage(v));
    }
    Ok(p0 * weights.factor(v))
}

/// Linearized coefficients: demand is `p0 (alpha v² + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZpCoefficients {
    pub alpha_p: f64,
    pub beta_p: f64,
    pub alpha_q: f64,
    pub beta_q: f64,
}

impl ZpCoefficients {
    pub fn active_power(&self, p0: f64, v_sq: f64) -> f64 {
        zp_power(p0, self.alpha_p, self.beta_p, v_sq)
    }

    pub fn reactive_power(&self, q0: f64, v_sq: f64) -> f64 {
        zp_power(q0, self.alpha_q, self.beta_q, v_sq)
    }
}

/// Folds the constant-current share half into the impedance term and half
/// into the constant-power term.
pub fn linearize_to_zp(coeffs: &ZipCoefficients) -> Result<ZpCoefficients, LoadModelError> {
    coeffs.validate()?;
    Ok(ZpCoefficients {
        alpha_p: coeffs.z_p + coeffs.i_p / 2.0,
        beta_p: coeffs.p_p + coeffs.i_p / 2.0,
        alpha_q: coeffs.z_q + coeffs.i_q / 2.0,
        beta_q: coeffs.p_q + coeffs.i_q / 2.0,
    })
}

/// `p0 (alpha v_sq + beta)`; affine in the squared voltage.
pub fn zp_power(p0: f64, alpha: f64, beta: f64, v_sq: f64) -> f64 {
    p0 * (alpha * v_sq + beta)
}
