//! The forgetting schedule: a non-increasing map from elapsed time to a
//! weight in [0, 1] that gates how much the recurrent state (versus the
//! group bias) drives the next prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the power-law schedule rho(dt) = (t0 + dt)^(-kappa).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    /// Offset in days. Must be >= 1 so that rho stays in [0, 1].
    pub t0: f64,
    /// Decay exponent. kappa = 0 gives rho = 1 on every non-first step.
    pub kappa: f64,
}

impl DecaySpec {
    pub fn new(t0: f64, kappa: f64) -> Result<Self> {
        if !(t0 >= 1.0) {
            return Err(Error::Config(format!(
                "t0 must be >= 1 (got {t0}); smaller values would allow rho > 1"
            )));
        }
        if !(kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be >= 0, got {kappa}")));
        }
        Ok(DecaySpec { t0, kappa })
    }
}

/// Any non-increasing map from a gap (in days) to a weight in [0, 1].
/// The first step of a sequence always gets weight 0.
pub trait DecaySchedule {
    fn rho(&self, delta_t: f64, is_first_step: bool) -> Result<f64>;
}

impl DecaySchedule for DecaySpec {
    fn rho(&self, delta_t: f64, is_first_step: bool) -> Result<f64> {
        rho(self, delta_t, is_first_step)
    }
}

/// Evaluate the power-law schedule. The first step is pinned to exactly 0
/// regardless of the gap.
pub fn rho(spec: &DecaySpec, delta_t: f64, is_first_step: bool) -> Result<f64> {
    if is_first_step {
        return Ok(0.0);
    }
    if !(delta_t >= 0.0) {
        return Err(Error::Data {
            row: None,
            msg: format!("negative time gap {delta_t}"),
        });
    }
    Ok((spec.t0 + delta_t).powf(-spec.kappa))
}

/// The schedule actually carried by a model configuration: either the
/// power law, or the forced-zero schedule of the exchangeable reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    PowerLaw(DecaySpec),
    /// rho = 0 on every step; each order is an independent draw around phi.
    Zero,
}

impl DecaySchedule for ScheduleKind {
    fn rho(&self, delta_t: f64, is_first_step: bool) -> Result<f64> {
        match self {
            ScheduleKind::PowerLaw(spec) => rho(spec, delta_t, is_first_step),
            ScheduleKind::Zero => {
                if !is_first_step && !(delta_t >= 0.0) {
                    return Err(Error::Data {
                        row: None,
                        msg: format!("negative time gap {delta_t}"),
                    });
                }
                Ok(0.0)
            }
        }
    }
}
