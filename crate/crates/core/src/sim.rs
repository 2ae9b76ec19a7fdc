//! Striped light pattern rendering and a simulated microrobot plant.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::params::ControllerParams;
use crate::search::BoxSearch;
use crate::velocity::TrackingTrace;
use crate::{seed, Error, Result};

pub const DEFAULT_FRAME_WIDTH: usize = 1024;
pub const DEFAULT_FRAME_HEIGHT: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightPattern {
    pub wavelength_px: f64,
    pub duty_cycle_frac: f64,
    pub frequency_hz: f64,
    pub width: usize,
    pub height: usize,
}

impl LightPattern {
    pub fn new(wavelength_px: f64, duty_cycle_frac: f64, frequency_hz: f64) -> Result<Self> {
        let p = Self {
            wavelength_px,
            duty_cycle_frac,
            frequency_hz,
            width: DEFAULT_FRAME_WIDTH,
            height: DEFAULT_FRAME_HEIGHT,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_frame(mut self, width: usize, height: usize) -> Result<Self> {
        self.width = width;
        self.height = height;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_px > 0.0 && self.wavelength_px.is_finite()) {
            return Err(Error::Domain(format!("wavelength must be positive, got {}", self.wavelength_px)));
        }
        if !(self.duty_cycle_frac > 0.0 && self.duty_cycle_frac < 1.0) {
            return Err(Error::Domain(format!("duty cycle must lie in (0, 1), got {}", self.duty_cycle_frac)));
        }
        if !(self.frequency_hz >= 0.0 && self.frequency_hz.is_finite()) {
            return Err(Error::Domain(format!("frequency must be non-negative, got {}", self.frequency_hz)));
        }
        if self.width == 0 || self.height == 0 || self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::Domain(format!("invalid frame size {}x{}", self.width, self.height)));
        }
        Ok(())
    }

    /// Whether column `x` is lit at time `t`. The lit band is centred on
    /// phase zero.
    pub fn lit(&self, x: usize, t: f64) -> bool {
        // Reduce the temporal phase first so t and t + 1/f agree exactly.
        let mut phase = (self.frequency_hz * t).rem_euclid(1.0);
        phase = (phase * 1e12).round() / 1e12;
        if phase >= 1.0 {
            phase = 0.0;
        }
        let u = x as f64 / self.wavelength_px - phase;
        let m = u - (u + 0.5).floor();
        m.abs() <= self.duty_cycle_frac / 2.0 + 1e-12
    }

    pub fn render(&self, t: f64) -> Bitmap {
        let columns: Vec<bool> = (0..self.width).map(|x| self.lit(x, t)).collect();
        let mut bits = Vec::with_capacity(self.width * self.height);
        for _ in 0..self.height {
            bits.extend_from_slice(&columns);
        }
        Bitmap {
            width: self.width,
            height: self.height,
            bits,
        }
    }
}

/// Binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn lit_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// 8-byte header (width, height as little-endian u32), then the pixels
    /// as one MSB-first bitstream, zero padded to a whole byte.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)));
            out.push(byte);
        }
        out
    }

    pub fn from_packed(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse("packed bitmap shorter than its header".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = width * height;
        let body = &bytes[8..];
        if body.len() != n.div_ceil(8) {
            return Err(Error::Parse(format!(
                "packed bitmap body has {} bytes, expected {}",
                body.len(),
                n.div_ceil(8)
            )));
        }
        let bits = (0..n).map(|i| body[i / 8] & (1 << (7 - i % 8)) != 0).collect();
        Ok(Self { width, height, bits })
    }

    /// Plain-text PGM (P2), lit pixels at 255.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.bits.chunks(self.width) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "255" } else { "0" }).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }
}

/// A Gaussian bump of the speed map, centred in physical units with
/// widths in normalised box units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedBump {
    pub center: ControllerParams,
    pub width_unit: [f64; 2],
    pub height: f64,
}

impl SpeedBump {
    fn shape(&self, u: [f64; 2]) -> f64 {
        let c = self.center.to_unit();
        let z0 = (u[0] - c[0]) / self.width_unit[0];
        let z1 = (u[1] - c[1]) / self.width_unit[1];
        (-0.5 * (z0 * z0 + z1 * z1)).exp()
    }
}

/// Simulated robot: speed and oscillation amplitude as functions of the
/// controller, plus tracking noise and a start-up transient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub base_speed: f64,
    pub bumps: Vec<SpeedBump>,
    pub amplitude_base_um: f64,
    pub amplitude_per_speed_um: f64,
    pub noise_std_um: f64,
    pub bodylength_um: f64,
    /// Time constant of the start-up ramp; zero disables it.
    pub transient_tau_s: f64,
    pub frequency_hz: f64,
    pub frame_rate_hz: f64,
}

pub const PLANT_OPTIMUM: (f64, f64) = (380.0, 43.0);
pub const PLANT_PEAK_SPEED: f64 = 2.2;
pub const PLANT_SECONDARY: (f64, f64) = (645.0, 30.0);
pub const PLANT_SECONDARY_SPEED: f64 = 1.05;

impl Default for PlantSpec {
    fn default() -> Self {
        Self::two_bump(0.3, [[0.11, 0.18], [0.25, 0.3]])
    }
}

impl PlantSpec {
    /// Plant with a global bump at [`PLANT_OPTIMUM`] and a secondary one
    /// at [`PLANT_SECONDARY`]; heights are solved so the speeds at both
    /// centres hit their targets exactly.
    pub fn two_bump(base_speed: f64, widths: [[f64; 2]; 2]) -> Self {
        let centers = [
            ControllerParams::new(PLANT_OPTIMUM.0, PLANT_OPTIMUM.1).unwrap(),
            ControllerParams::new(PLANT_SECONDARY.0, PLANT_SECONDARY.1).unwrap(),
        ];
        let unit = |k: usize| SpeedBump {
            center: centers[k],
            width_unit: widths[k],
            height: 1.0,
        };
        let a = [
            [unit(0).shape(centers[0].to_unit()), unit(1).shape(centers[0].to_unit())],
            [unit(0).shape(centers[1].to_unit()), unit(1).shape(centers[1].to_unit())],
        ];
        let r = [PLANT_PEAK_SPEED - base_speed, PLANT_SECONDARY_SPEED - base_speed];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let h0 = (r[0] * a[1][1] - a[0][1] * r[1]) / det;
        let h1 = (a[0][0] * r[1] - a[1][0] * r[0]) / det;
        Self {
            base_speed,
            bumps: vec![SpeedBump { height: h0, ..unit(0) }, SpeedBump { height: h1, ..unit(1) }],
            amplitude_base_um: 8.0,
            amplitude_per_speed_um: 4.0,
            noise_std_um: 2.0,
            bodylength_um: 300.0,
            transient_tau_s: 1.0,
            frequency_hz: 1.0,
            frame_rate_hz: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.bodylength_um, self.frequency_hz, self.frame_rate_hz];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("bodylength, frequency and frame rate must be positive".into()));
        }
        let non_negative = [self.noise_std_um, self.transient_tau_s];
        if non_negative.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("noise std and transient time constant must be non-negative".into()));
        }
        for b in &self.bumps {
            if !(b.width_unit[0] > 0.0 && b.width_unit[1] > 0.0 && b.height.is_finite()) {
                return Err(Error::Domain(format!("invalid speed bump {b:?}")));
            }
        }
        Ok(())
    }

    /// True mean speed (%BL/s).
    pub fn speed(&self, theta: &ControllerParams) -> Result<f64> {
        if !theta.in_box() {
            return Err(Error::Domain(format!("controller {theta} outside the box")));
        }
        Ok(self.speed_unit(theta.to_unit()))
    }

    fn speed_unit(&self, u: [f64; 2]) -> f64 {
        self.base_speed + self.bumps.iter().map(|b| b.height * b.shape(u)).sum::<f64>()
    }

    pub fn amplitude_um(&self, theta: &ControllerParams) -> Result<f64> {
        Ok(self.amplitude_base_um + self.amplitude_per_speed_um * self.speed(theta)?.max(0.0))
    }

    /// Fastest controller and its speed.
    pub fn optimum(&self) -> (ControllerParams, f64) {
        let (u, v) = BoxSearch::fine().maximize(|u| self.speed_unit(u));
        (ControllerParams::from_unit(u), v)
    }

    /// Start-up ramp: zero slope at t = 0, slope one once settled.
    pub fn ramp(&self, t: f64) -> f64 {
        let tau = self.transient_tau_s;
        if tau == 0.0 {
            t
        } else {
            t - tau * (1.0 - (-t / tau).exp())
        }
    }

    /// Samples a position trace at the plant frame rate over
    /// `[0, duration_s]`.
    pub fn simulate_trace(&self, theta: &ControllerParams, duration_s: f64, seed: u64) -> Result<TrackingTrace> {
        self.validate()?;
        if !(duration_s >= 4.0 && duration_s.is_finite()) {
            return Err(Error::Domain(format!("trace duration must be at least 4 s, got {duration_s}")));
        }
        let speed_um = self.speed(theta)? * self.bodylength_um / 100.0;
        let amp = self.amplitude_um(theta)?;
        let mut rng = seed::rng(seed, &[seed::stream::PLANT]);
        let phi0: f64 = rng.random_range(-PI..PI);
        let noise = Normal::new(0.0, self.noise_std_um).map_err(|e| Error::Domain(e.to_string()))?;
        let n = (duration_s * self.frame_rate_hz).floor() as usize + 1;
        let mut t_s = Vec::with_capacity(n);
        let mut x_um = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / self.frame_rate_hz;
            let eps = if self.noise_std_um > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            t_s.push(t);
            x_um.push(speed_um * self.ramp(t) + amp * (2.0 * PI * self.frequency_hz * t + phi0).sin() + eps);
        }
        TrackingTrace::new(t_s, x_um, self.frame_rate_hz, self.bodylength_um)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{fit_movement, DEFAULT_T_CUT_S};

    #[test]
    fn duty_fraction_per_period() {
        let p = LightPattern::new(300.0, 0.40, 1.0).unwrap().with_frame(300, 1).unwrap();
        let frac = p.render(0.0).lit_fraction();
        assert!((frac - 0.40).abs() <= 1.0 / 300.0, "{frac}");
    }

    #[test]
    fn full_duty_is_nearly_all_lit() {
        let p = LightPattern::new(300.0, 0.999, 1.0).unwrap().with_frame(900, 2).unwrap();
        assert!(p.render(0.3).lit_fraction() > 0.99);
    }

    #[test]
    fn temporal_and_spatial_periodicity() {
        let p = LightPattern::new(128.0, 0.3, 0.7).unwrap().with_frame(512, 4).unwrap();
        for &t in &[0.0, 0.1, 0.37] {
            assert_eq!(p.render(t), p.render(t + 1.0 / 0.7));
            let img = p.render(t);
            for x in 0..(512 - 128) {
                assert_eq!(img.get(x, 0), img.get(x + 128, 0));
                assert_eq!(img.get(x, 0), img.get(x, 3));
            }
        }
    }

    #[test]
    fn pattern_translates_by_lambda_f_dt() {
        // λ·f·Δt = 100·0.5·0.2 = 10 px.
        let p = LightPattern::new(100.0, 0.35, 0.5).unwrap().with_frame(400, 1).unwrap();
        let a = p.render(0.0);
        let b = p.render(0.2);
        for x in 0..390 {
            assert_eq!(a.get(x, 0), b.get(x + 10, 0));
        }
    }

    #[test]
    fn packed_and_pgm_exports() {
        let img = LightPattern::new(10.0, 0.5, 1.0).unwrap().with_frame(13, 3).unwrap().render(0.0);
        let packed = img.to_packed();
        assert_eq!(&packed[..8], &[13, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(packed.len(), 8 + 5);
        assert_eq!(Bitmap::from_packed(&packed).unwrap(), img);
        // Columns 0..=2 and 8..=12 lit: 1110_0000 1111_1...
        assert_eq!(packed[8], 0b1110_0000);
        assert_eq!(packed[9], 0b1111_1111);
        let pgm = img.to_pgm();
        assert!(pgm.starts_with("P2\n13 3\n255\n255 255 255 0"));
        assert!(Bitmap::from_packed(&packed[..10]).is_err());
    }

    #[test]
    fn invalid_patterns() {
        assert!(LightPattern::new(0.0, 0.4, 1.0).is_err());
        assert!(LightPattern::new(100.0, 1.0, 1.0).is_err());
        assert!(LightPattern::new(100.0, 0.4, -1.0).is_err());
    }

    #[test]
    fn default_plant_shape() {
        let plant = PlantSpec::default();
        let peak = plant.speed(&ControllerParams::new(PLANT_OPTIMUM.0, PLANT_OPTIMUM.1).unwrap()).unwrap();
        assert!((peak - PLANT_PEAK_SPEED).abs() < 1e-12);
        let secondary = plant.speed(&ControllerParams::new(PLANT_SECONDARY.0, PLANT_SECONDARY.1).unwrap()).unwrap();
        assert!((secondary - PLANT_SECONDARY_SPEED).abs() < 1e-12);
        let (theta, v) = plant.optimum();
        assert!(v >= peak && v < peak + 0.01);
        assert!((theta.wavelength_um - PLANT_OPTIMUM.0).abs() < 20.0);
        assert!((theta.duty_cycle_pct - PLANT_OPTIMUM.1).abs() < 2.0);
    }

    #[test]
    fn degenerate_plant_gives_linear_trace() {
        let plant = PlantSpec {
            noise_std_um: 0.0,
            amplitude_base_um: 0.0,
            amplitude_per_speed_um: 0.0,
            transient_tau_s: 0.0,
            ..PlantSpec::default()
        };
        let theta = ControllerParams::new(500.0, 35.0).unwrap();
        let tr = plant.simulate_trace(&theta, 12.0, 3).unwrap();
        let fit = fit_movement(&tr, 1.0, DEFAULT_T_CUT_S).unwrap();
        assert!((fit.v_m - plant.speed(&theta).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn seeded_determinism_and_domain() {
        let plant = PlantSpec::default();
        let theta = ControllerParams::new(500.0, 35.0).unwrap();
        assert_eq!(plant.simulate_trace(&theta, 10.0, 1).unwrap(), plant.simulate_trace(&theta, 10.0, 1).unwrap());
        assert_ne!(plant.simulate_trace(&theta, 10.0, 1).unwrap(), plant.simulate_trace(&theta, 10.0, 2).unwrap());
        let outside = ControllerParams {
            wavelength_um: 100.0,
            duty_cycle_pct: 30.0,
        };
        assert!(matches!(plant.simulate_trace(&outside, 10.0, 1), Err(Error::Domain(_))));
        assert!(plant.simulate_trace(&theta, 3.0, 1).is_err());
    }
}
