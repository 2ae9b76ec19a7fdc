//! Controller parameters and the bounded search box.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Camera scale: one pixel of the tracking frame in micrometers.
pub const UM_PER_PX: f64 = 1.29;

pub const WAVELENGTH_MIN_UM: f64 = 258.0;
pub const WAVELENGTH_MAX_UM: f64 = 1032.0;
pub const DUTY_MIN_PCT: f64 = 20.0;
pub const DUTY_MAX_PCT: f64 = 50.0;

/// Best controller known before learning: 645 µm wavelength at 30% duty.
pub const INITIAL_CONTROLLER: ControllerParams = ControllerParams {
    wavelength_um: 645.0,
    duty_cycle_pct: 30.0,
};

/// A point in the (wavelength, duty cycle) search box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub wavelength_um: f64,
    pub duty_cycle_pct: f64,
}

impl ControllerParams {
    pub fn new(wavelength_um: f64, duty_cycle_pct: f64) -> Result<Self> {
        let p = Self {
            wavelength_um,
            duty_cycle_pct,
        };
        if p.in_box() {
            Ok(p)
        } else {
            Err(Error::Domain(format!(
                "controller ({wavelength_um}, {duty_cycle_pct}) outside the box \
                 [{WAVELENGTH_MIN_UM}, {WAVELENGTH_MAX_UM}] um x [{DUTY_MIN_PCT}, {DUTY_MAX_PCT}] %"
            )))
        }
    }

    pub fn in_box(&self) -> bool {
        (WAVELENGTH_MIN_UM..=WAVELENGTH_MAX_UM).contains(&self.wavelength_um)
            && (DUTY_MIN_PCT..=DUTY_MAX_PCT).contains(&self.duty_cycle_pct)
    }

    /// Coordinates normalised to the unit square.
    pub fn to_unit(&self) -> [f64; 2] {
        [
            (self.wavelength_um - WAVELENGTH_MIN_UM) / (WAVELENGTH_MAX_UM - WAVELENGTH_MIN_UM),
            (self.duty_cycle_pct - DUTY_MIN_PCT) / (DUTY_MAX_PCT - DUTY_MIN_PCT),
        ]
    }

    /// Inverse of [`to_unit`](Self::to_unit); inputs are clamped to `[0, 1]`.
    pub fn from_unit(u: [f64; 2]) -> Self {
        let a = u[0].clamp(0.0, 1.0);
        let b = u[1].clamp(0.0, 1.0);
        Self {
            wavelength_um: (WAVELENGTH_MIN_UM + a * (WAVELENGTH_MAX_UM - WAVELENGTH_MIN_UM))
                .clamp(WAVELENGTH_MIN_UM, WAVELENGTH_MAX_UM),
            duty_cycle_pct: (DUTY_MIN_PCT + b * (DUTY_MAX_PCT - DUTY_MIN_PCT))
                .clamp(DUTY_MIN_PCT, DUTY_MAX_PCT),
        }
    }

    pub fn wavelength_px(&self) -> f64 {
        self.wavelength_um / UM_PER_PX
    }

    /// Parses `"<wavelength_um>,<duty_pct>"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut it = s.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse(format!("expected '<wavelength_um>,<duty_pct>', got '{s}'")));
        };
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number '{v}': {e}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl std::fmt::Display for ControllerParams {
    /// Round-trip exact; integers keep a trailing `.0`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?},{:?}", self.wavelength_um, self.duty_cycle_pct)
    }
}
