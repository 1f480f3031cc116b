use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};

/// Grams of CO₂-equivalent per kWh used when no factor is given.
pub const DEFAULT_GRID_FACTOR: f64 = 370.0;
/// Assumed draw of a single busy desktop core package, in watts.
pub const DEFAULT_WATTS: f64 = 65.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub wall_seconds: f64,
    pub watts: f64,
    pub kwh: f64,
    /// g CO₂-eq per kWh.
    pub grid_factor: f64,
    pub grams_co2: f64,
}

/// `kWh = seconds · watts / 3.6e6`, `grams = kWh · factor`.
pub fn energy_report(wall_seconds: f64, watts: f64, grid_factor: f64) -> Result<EnergyReport> {
    for (name, v) in [("wall_seconds", wall_seconds), ("watts", watts), ("grid_factor", grid_factor)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(FvitError::param(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let kwh = wall_seconds * watts / 3.6e6;
    Ok(EnergyReport {
        wall_seconds,
        watts,
        kwh,
        grid_factor,
        grams_co2: kwh * grid_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        let r = energy_report(3600.0, 1000.0, DEFAULT_GRID_FACTOR).unwrap();
        assert_eq!(r.kwh, 1.0);
        assert_eq!(r.grams_co2, 370.0);
        assert_eq!(energy_report(0.0, 65.0, 370.0).unwrap().grams_co2, 0.0);
        assert_eq!(energy_report(100.0, 65.0, 0.0).unwrap().grams_co2, 0.0);
        assert!(energy_report(-1.0, 65.0, 370.0).is_err());
    }
}
