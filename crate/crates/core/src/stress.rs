//! Residual-stress proxy.
//!
//! This is not a mechanical solve. Each grid cell gets the thermal stress of
//! a fully constrained element heated from the preheat temperature to its
//! peak temperature, scaled by a constraint factor and capped at the yield
//! strength (elastic–perfectly-plastic). The result plays the role of the
//! von Mises residual-stress field on the 32×14 midplane grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thermal::{ModelParams, RandomInputs, TemperatureSnapshot, GRID_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StressConfig {
    /// Fraction of the fully constrained thermal stress retained, in (0, 1].
    /// The default keeps the 0.95-superquantile of `sigma_max` just under the
    /// nominal yield strength on designs that barely reach the liquidus.
    pub constraint_factor: f64,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            constraint_factor: 0.65,
        }
    }
}

/// Von Mises residual stress on the 32×14 grid, MPa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressField {
    pub grid: Vec<f64>,
    pub sigma_max: f64,
}

pub fn residual_stress(
    snapshot: &TemperatureSnapshot,
    z: &RandomInputs,
    p: &ModelParams,
    cfg: &StressConfig,
) -> Result<StressField> {
    if snapshot.peak_field.len() != GRID_LEN {
        return Err(Error::shape(GRID_LEN, snapshot.peak_field.len()));
    }
    if z.y < 0.0 || z.e < 0.0 {
        return Err(Error::invalid(
            "yield strength and elastic modulus must be non-negative",
        ));
    }
    let c_r = cfg.constraint_factor;
    if !(c_r > 0.0 && c_r <= 1.0) {
        return Err(Error::invalid(format!(
            "constraint factor must lie in (0, 1], got {c_r}"
        )));
    }
    let modulus_mpa = z.e * 1000.0;
    let grid: Vec<f64> = snapshot
        .peak_field
        .iter()
        .map(|&t_peak| {
            let rise = (t_peak - z.t0).max(0.0);
            (c_r * modulus_mpa * p.thermal_expansion * rise).min(z.y)
        })
        .collect();
    let sigma_max = max_stress(&grid)?;
    Ok(StressField { grid, sigma_max })
}

pub fn max_stress(grid: &[f64]) -> Result<f64> {
    grid.iter().copied().reduce(f64::max).ok_or(Error::EmptySamples)
}
