//! Locomotion speed from a tracked 1-D position trace.
//!
//! The trace after the transient cutoff is modelled as
//! `x(t) = V·t + b + a·sin(2πft + φ)`. With `f` known the model is linear
//! in `(V, b, a·cos φ, a·sin φ)` and is solved by least squares.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_FREQUENCY_HZ: f64 = 1.0;
pub const DEFAULT_T_CUT_S: f64 = 2.0;
pub const DEFAULT_V_STAR: f64 = 6.0;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 10.0;
pub const DEFAULT_BODYLENGTH_UM: f64 = 300.0;

const MIN_SAMPLES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingTrace {
    pub t_s: Vec<f64>,
    pub x_um: Vec<f64>,
    pub frame_rate_hz: f64,
    pub bodylength_um: f64,
}

impl TrackingTrace {
    pub fn new(t_s: Vec<f64>, x_um: Vec<f64>, frame_rate_hz: f64, bodylength_um: f64) -> Result<Self> {
        let trace = Self {
            t_s,
            x_um,
            frame_rate_hz,
            bodylength_um,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_s.len() != self.x_um.len() {
            return Err(Error::Parse("time and position columns differ in length".into()));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(Error::Domain(format!("frame rate must be positive, got {}", self.frame_rate_hz)));
        }
        if !(self.bodylength_um > 0.0 && self.bodylength_um.is_finite()) {
            return Err(Error::Domain(format!("bodylength must be positive, got {}", self.bodylength_um)));
        }
        if self.t_s.iter().chain(&self.x_um).any(|v| !v.is_finite()) {
            return Err(Error::Parse("trace contains non-finite values".into()));
        }
        if self.t_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse("timestamps must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Parses `t_s,x_um` CSV with optional `# key: value` metadata lines.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut frame_rate_hz = DEFAULT_FRAME_RATE_HZ;
        let mut bodylength_um = DEFAULT_BODYLENGTH_UM;
        let mut header_seen = false;
        let (mut t_s, mut x_um) = (Vec::new(), Vec::new());
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((k, v)) = meta.split_once([':', '=']) else {
                    continue;
                };
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
                };
                match k.trim() {
                    "bodylength_um" => bodylength_um = parse(v)?,
                    "frame_rate_hz" => frame_rate_hz = parse(v)?,
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["t_s", "x_um"] {
                    return Err(Error::Parse(format!("expected header 't_s,x_um', found '{line}'")));
                }
                header_seen = true;
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(t), Some(x), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse(format!("line {}: expected two columns", n + 1)));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)));
            t_s.push(num(t)?);
            x_um.push(num(x)?);
        }
        if !header_seen {
            return Err(Error::Parse("missing 't_s,x_um' header".into()));
        }
        Self::new(t_s, x_um, frame_rate_hz, bodylength_um)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# bodylength_um: {}", self.bodylength_um).unwrap();
        writeln!(out, "# frame_rate_hz: {}", self.frame_rate_hz).unwrap();
        out.push_str("t_s,x_um\n");
        for (t, x) in self.t_s.iter().zip(&self.x_um) {
            writeln!(out, "{t},{x}").unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Speed in bodylength percent per second.
    pub v_m: f64,
    pub offset_b: f64,
    pub amplitude_a: f64,
    pub phase_phi: f64,
    pub residual_rms: f64,
    pub slope_um_per_s: f64,
    pub samples_used: usize,
    /// Least-squares covariance of `(slope, b, a·cos φ, a·sin φ)`.
    pub covariance: [[f64; 4]; 4],
}

/// Fits the trend-plus-sinusoid model to samples with `t ≥ t_cut`.
pub fn fit_movement(trace: &TrackingTrace, f_hz: f64, t_cut: f64) -> Result<FitResult> {
    trace.validate()?;
    if !(f_hz > 0.0 && f_hz.is_finite()) {
        return Err(Error::Domain(format!("oscillation frequency must be positive, got {f_hz}")));
    }
    if !t_cut.is_finite() {
        return Err(Error::Domain("cutoff time must be finite".into()));
    }
    let kept: Vec<(f64, f64)> = trace
        .t_s
        .iter()
        .zip(&trace.x_um)
        .filter(|(t, _)| **t >= t_cut)
        .map(|(&t, &x)| (t, x))
        .collect();
    let n = kept.len();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{n} samples after t = {t_cut} s, need at least {MIN_SAMPLES}"
        )));
    }

    let w = 2.0 * PI * f_hz;
    let design = DMatrix::from_fn(n, 4, |i, j| {
        let t = kept[i].0;
        match j {
            0 => t,
            1 => 1.0,
            2 => (w * t).sin(),
            _ => (w * t).cos(),
        }
    });
    let y = DVector::from_iterator(n, kept.iter().map(|p| p.1));

    // Column scaling keeps the rank test independent of units.
    let scales: Vec<f64> = (0..4).map(|j| design.column(j).norm()).collect();
    let max_scale = scales.iter().cloned().fold(0.0, f64::max);
    if scales.iter().any(|&s| s <= 1e-10 * max_scale) {
        return Err(Error::DegenerateFit(format!(
            "design column vanishes on the sample grid (f = {f_hz} Hz)"
        )));
    }
    let scaled = DMatrix::from_fn(n, 4, |i, j| design[(i, j)] / scales[j]);
    let svd = scaled.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_min <= 1e-9 * s_max {
        return Err(Error::DegenerateFit(format!(
            "design matrix is rank deficient (f = {f_hz} Hz against the sample grid)"
        )));
    }
    let coef_scaled = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::DegenerateFit(e.to_string()))?;
    let coef: Vec<f64> = (0..4).map(|j| coef_scaled[j] / scales[j]).collect();

    let resid = &y - &design * DVector::from_column_slice(&coef);
    let rss = resid.norm_squared();
    let residual_rms = (rss / n as f64).sqrt();
    let sigma2 = if n > 4 { rss / (n - 4) as f64 } else { 0.0 };
    let v = svd.v_t.as_ref().expect("requested V").transpose();
    let mut covariance = [[0.0; 4]; 4];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            let s: f64 = (0..4)
                .map(|k| v[(i, k)] * v[(j, k)] / svd.singular_values[k].powi(2))
                .sum();
            *c = sigma2 * s / (scales[i] * scales[j]);
        }
    }

    let (c1, c2) = (coef[2], coef[3]);
    let amplitude_a = c1.hypot(c2);
    let mut phase_phi = c2.atan2(c1);
    if phase_phi >= PI {
        phase_phi -= 2.0 * PI;
    }
    Ok(FitResult {
        v_m: 100.0 * coef[0] / trace.bodylength_um,
        offset_b: coef[1],
        amplitude_a,
        phase_phi,
        residual_rms,
        slope_um_per_s: coef[0],
        samples_used: n,
        covariance,
    })
}

/// Deviation of the measured speed from the desired one.
pub fn cost_from_speed(v_m: f64, v_star: f64) -> f64 {
    (v_star - v_m).abs()
}
