//! Stationary ARD kernels on the unit-normalised search box.
//!
//! All kernels are functions of the scaled squared distance
//! `r² = Σ_c ((a_c − b_c) / l_c)²`:
//!
//! | kind | k(r) / σ_f²                              |
//! |------|------------------------------------------|
//! | SE   | `exp(−r²/2)`                             |
//! | RQ   | `(1 + r²/(2α))^(−α)`                     |
//! | M32  | `(1 + √3 r) exp(−√3 r)`                  |
//! | M52  | `(1 + √5 r + 5r²/3) exp(−√5 r)`          |
//! | 2Mat | `k_M52 + k_M32`, independent parameters  |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KvDoc;
use crate::params::ControllerParams;
use crate::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "RQ")]
    Rq,
    #[serde(rename = "M32")]
    M32,
    #[serde(rename = "M52")]
    M52,
    #[serde(rename = "2Mat")]
    TwoMat,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [Self::Se, Self::Rq, Self::M32, Self::M52, Self::TwoMat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Se => "SE",
            Self::Rq => "RQ",
            Self::M32 => "M32",
            Self::M52 => "M52",
            Self::TwoMat => "2Mat",
        }
    }

    /// Shapes of the summands, in the order of [`Hyperparams::components`].
    fn shapes(self) -> &'static [Shape] {
        match self {
            Self::Se => &[Shape::Se],
            Self::Rq => &[Shape::Rq],
            Self::M32 => &[Shape::M32],
            Self::M52 => &[Shape::M52],
            Self::TwoMat => &[Shape::M52, Shape::M32],
        }
    }

    pub fn component_count(self) -> usize {
        self.shapes().len()
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "se" => Ok(Self::Se),
            "rq" => Ok(Self::Rq),
            "m32" => Ok(Self::M32),
            "m52" => Ok(Self::M52),
            "2mat" | "twomat" => Ok(Self::TwoMat),
            other => Err(Error::Parse(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Se,
    Rq,
    M32,
    M52,
}

impl Shape {
    fn suffix(self) -> &'static str {
        match self {
            Shape::M32 => "m32",
            Shape::M52 => "m52",
            Shape::Se => "se",
            Shape::Rq => "rq",
        }
    }

    /// Unit-variance correlation at scaled squared distance `r2`.
    #[inline]
    fn corr(self, r2: f64, alpha: f64) -> f64 {
        match self {
            Shape::Se => (-0.5 * r2).exp(),
            Shape::Rq => (1.0 + r2 / (2.0 * alpha)).powf(-alpha),
            Shape::M32 => {
                let r = SQRT3 * r2.sqrt();
                (1.0 + r) * (-r).exp()
            }
            Shape::M52 => {
                let r = r2.sqrt();
                let s = SQRT5 * r;
                (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
        }
    }

    /// `−2 ∂corr/∂(r²)`, so that `∂k/∂log l_c = σ² · s_c · dcorr` with
    /// `s_c = ((a_c − b_c)/l_c)²`.
    #[inline]
    fn neg2_dcorr_dr2(self, r2: f64, alpha: f64) -> f64 {
        match self {
            Shape::Se => (-0.5 * r2).exp(),
            Shape::Rq => (1.0 + r2 / (2.0 * alpha)).powf(-alpha - 1.0),
            Shape::M32 => 3.0 * (-SQRT3 * r2.sqrt()).exp(),
            Shape::M52 => {
                let s = SQRT5 * r2.sqrt();
                5.0 / 3.0 * (1.0 + s) * (-s).exp()
            }
        }
    }
}

/// Length scales (normalised box units) and signal std of one summand.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub length_scales: [f64; 2],
    pub signal_std: f64,
}

/// GP hyperparameters.
///
/// `components` holds one entry for the single kernels and `[m52, m32]`
/// for [`KernelKind::TwoMat`]. Length scales are expressed on inputs
/// normalised to the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub kernel: KernelKind,
    pub components: Vec<Component>,
    pub rq_alpha: f64,
    pub noise_std: f64,
    pub mean_const: f64,
}

pub const DEFAULT_LENGTH_SCALE: f64 = 0.25;
pub const DEFAULT_SHORT_LENGTH_SCALE: f64 = 0.125;
pub const DEFAULT_RQ_ALPHA: f64 = 2.0;

const AXES: [&str; 2] = ["wavelength", "duty_cycle"];

impl Hyperparams {
    /// Default hyperparameters for `kernel` with total signal std
    /// `signal_std`. For 2Mat the variance is split evenly between a long
    /// (M52, 0.25) and a short (M32, 0.125) summand.
    pub fn new(kernel: KernelKind, signal_std: f64, noise_std: f64, mean_const: f64) -> Self {
        let components = match kernel {
            KernelKind::TwoMat => {
                let s = signal_std / std::f64::consts::SQRT_2;
                vec![
                    Component {
                        length_scales: [DEFAULT_LENGTH_SCALE; 2],
                        signal_std: s,
                    },
                    Component {
                        length_scales: [DEFAULT_SHORT_LENGTH_SCALE; 2],
                        signal_std: s,
                    },
                ]
            }
            _ => vec![Component {
                length_scales: [DEFAULT_LENGTH_SCALE; 2],
                signal_std,
            }],
        };
        Self {
            kernel,
            components,
            rq_alpha: DEFAULT_RQ_ALPHA,
            noise_std,
            mean_const,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Domain(format!("{what} must be positive and finite, got {v}")));
        if self.components.len() != self.kernel.component_count() {
            return Err(Error::Domain(format!(
                "{} kernel needs {} component(s), got {}",
                self.kernel,
                self.kernel.component_count(),
                self.components.len()
            )));
        }
        for c in &self.components {
            for &l in &c.length_scales {
                if !(l > 0.0 && l.is_finite()) {
                    return bad("length scale", l);
                }
            }
            if !(c.signal_std > 0.0 && c.signal_std.is_finite()) {
                return bad("signal std", c.signal_std);
            }
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise std", self.noise_std);
        }
        if self.kernel == KernelKind::Rq && !(self.rq_alpha > 0.0 && self.rq_alpha.is_finite()) {
            return bad("rq alpha", self.rq_alpha);
        }
        if !(self.mean_const >= 0.0 && self.mean_const.is_finite()) {
            return Err(Error::Domain(format!(
                "mean constant must be non-negative, got {}",
                self.mean_const
            )));
        }
        Ok(())
    }

    /// `k(θ, θ)`: the sum of all summand variances.
    pub fn total_variance(&self) -> f64 {
        self.components.iter().map(|c| c.signal_std * c.signal_std).sum()
    }

    /// Kernel on unit-square coordinates. Does not validate.
    #[inline]
    pub fn k_unit(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let shapes = self.kernel.shapes();
        let mut k = 0.0;
        for (shape, c) in shapes.iter().zip(&self.components) {
            let d0 = (a[0] - b[0]) / c.length_scales[0];
            let d1 = (a[1] - b[1]) / c.length_scales[1];
            k += c.signal_std * c.signal_std * shape.corr(d0 * d0 + d1 * d1, self.rq_alpha);
        }
        k
    }

    /// Number of free (log-parameterised) kernel hyperparameters.
    pub fn free_count(&self) -> usize {
        3 * self.components.len() + usize::from(self.kernel == KernelKind::Rq)
    }

    /// Free kernel hyperparameters on the natural scale, ordered as
    /// `[l_wavelength, l_duty, σ_f]` per component, then `α` for RQ.
    pub fn free_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.free_count());
        for c in &self.components {
            v.extend_from_slice(&[c.length_scales[0], c.length_scales[1], c.signal_std]);
        }
        if self.kernel == KernelKind::Rq {
            v.push(self.rq_alpha);
        }
        v
    }

    pub fn with_free_values(&self, values: &[f64]) -> Self {
        debug_assert_eq!(values.len(), self.free_count());
        let mut hp = self.clone();
        for (i, c) in hp.components.iter_mut().enumerate() {
            c.length_scales = [values[3 * i], values[3 * i + 1]];
            c.signal_std = values[3 * i + 2];
        }
        if hp.kernel == KernelKind::Rq {
            hp.rq_alpha = values[3 * hp.components.len()];
        }
        hp
    }

    /// Kernel value and its gradient with respect to the logarithm of each
    /// free hyperparameter (same order as [`free_values`](Self::free_values)).
    pub fn k_unit_grad(&self, a: [f64; 2], b: [f64; 2], grad: &mut [f64]) -> f64 {
        let shapes = self.kernel.shapes();
        let mut k = 0.0;
        for (i, (shape, c)) in shapes.iter().zip(&self.components).enumerate() {
            let d0 = (a[0] - b[0]) / c.length_scales[0];
            let d1 = (a[1] - b[1]) / c.length_scales[1];
            let (s0, s1) = (d0 * d0, d1 * d1);
            let r2 = s0 + s1;
            let var = c.signal_std * c.signal_std;
            let kc = var * shape.corr(r2, self.rq_alpha);
            let dk = var * shape.neg2_dcorr_dr2(r2, self.rq_alpha);
            grad[3 * i] = dk * s0;
            grad[3 * i + 1] = dk * s1;
            grad[3 * i + 2] = 2.0 * kc;
            if *shape == Shape::Rq {
                let alpha = self.rq_alpha;
                let q = r2 / (2.0 * alpha);
                grad[3 * shapes.len()] = kc * alpha * (q / (1.0 + q) - q.ln_1p());
            }
            k += kc;
        }
        k
    }

    /// Serialises to the flat key-value layout.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("kernel", self.kernel.name());
        let shapes = self.kernel.shapes();
        let multi = shapes.len() > 1;
        for (shape, c) in shapes.iter().zip(&self.components) {
            let sfx = if multi { format!(".{}", shape.suffix()) } else { String::new() };
            for (axis, l) in AXES.iter().zip(c.length_scales) {
                doc.set_f64(format!("length_scale.{axis}{sfx}"), l);
            }
            doc.set_f64(format!("signal_std{sfx}"), c.signal_std);
        }
        doc.set_f64("noise_std", self.noise_std);
        doc.set_f64("mean_const", self.mean_const);
        doc.set_f64("rq_alpha", self.rq_alpha);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let kernel: KernelKind = doc.require("kernel")?.parse()?;
        let shapes = kernel.shapes();
        let multi = shapes.len() > 1;
        let mut components = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let sfx = if multi { format!(".{}", shape.suffix()) } else { String::new() };
            components.push(Component {
                length_scales: [
                    doc.parse_req(&format!("length_scale.{}{sfx}", AXES[0]))?,
                    doc.parse_req(&format!("length_scale.{}{sfx}", AXES[1]))?,
                ],
                signal_std: doc.parse_req(&format!("signal_std{sfx}"))?,
            });
        }
        let hp = Self {
            kernel,
            components,
            rq_alpha: doc.parse_opt("rq_alpha")?.unwrap_or(DEFAULT_RQ_ALPHA),
            noise_std: doc.parse_req("noise_std")?,
            mean_const: doc.parse_req("mean_const")?,
        };
        hp.validate()?;
        Ok(hp)
    }
}

/// Covariance between two controllers.
pub fn kernel_eval(hp: &Hyperparams, a: &ControllerParams, b: &ControllerParams) -> Result<f64> {
    hp.validate()?;
    for p in [a, b] {
        if !p.in_box() {
            return Err(Error::Domain(format!("controller {p} outside the search box")));
        }
    }
    Ok(hp.k_unit(a.to_unit(), b.to_unit()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_hp(kind: KernelKind) -> Hyperparams {
        let mut hp = Hyperparams::new(kind, 1.0, 0.1, 1.0);
        for c in &mut hp.components {
            c.length_scales = [1.0, 1.0];
        }
        hp
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let a = [0.3, 0.7];
        let hp = Hyperparams::new(KernelKind::Se, 2.0, 0.1, 2.0);
        assert_eq!(hp.k_unit(a, a), 4.0);
        let mut two = Hyperparams::new(KernelKind::TwoMat, 2.0, 0.1, 2.0);
        two.components[0].signal_std = 1.3;
        two.components[1].signal_std = 0.4;
        assert_eq!(two.k_unit(a, a), 1.3 * 1.3 + 0.4 * 0.4);
    }

    #[test]
    fn unit_distance_closed_forms() {
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        // exp(-1/2)
        assert!((unit_hp(KernelKind::Se).k_unit(a, b) - 0.606_530_659_712_633_4).abs() < 1e-15);
        // (1 + √3) exp(−√3)
        assert!((unit_hp(KernelKind::M32).k_unit(a, b) - 0.483_357_724_596_507_7).abs() < 1e-15);
        // (1 + √5 + 5/3) exp(−√5)
        assert!((unit_hp(KernelKind::M52).k_unit(a, b) - 0.523_994_108_831_820_3).abs() < 1e-15);
        // RQ with α = 2: (1 + 1/4)^−2
        assert!((unit_hp(KernelKind::Rq).k_unit(a, b) - 0.64).abs() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters_are_domain_errors() {
        let mut hp = Hyperparams::new(KernelKind::M32, 1.0, 0.1, 1.0);
        hp.components[0].length_scales[1] = 0.0;
        let p = crate::params::INITIAL_CONTROLLER;
        assert!(matches!(kernel_eval(&hp, &p, &p), Err(Error::Domain(_))));
        let mut hp = Hyperparams::new(KernelKind::Se, 1.0, 0.1, 1.0);
        hp.components[0].signal_std = -1.0;
        assert!(matches!(kernel_eval(&hp, &p, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = [0.2, 0.9];
        let b = [0.55, 0.4];
        for kind in KernelKind::ALL {
            let mut hp = Hyperparams::new(kind, 1.7, 0.1, 2.0);
            hp.rq_alpha = 1.3;
            let n = hp.free_count();
            let mut g = vec![0.0; n];
            hp.k_unit_grad(a, b, &mut g);
            let base = hp.free_values();
            for j in 0..n {
                let h: f64 = 1e-6;
                let mut up = base.clone();
                let mut dn = base.clone();
                up[j] *= h.exp();
                dn[j] *= (-h).exp();
                let fd = (hp.with_free_values(&up).k_unit(a, b) - hp.with_free_values(&dn).k_unit(a, b)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-7, "{kind} param {j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        for kind in KernelKind::ALL {
            let mut hp = Hyperparams::new(kind, 1.5, 0.1, 2.0);
            hp.components[0].length_scales[0] = 0.123_456_789_012_345;
            let back = Hyperparams::from_kv(&KvDoc::parse(&hp.to_kv().to_string()).unwrap()).unwrap();
            assert_eq!(back, hp);
        }
        let two = Hyperparams::new(KernelKind::TwoMat, 1.5, 0.1, 2.0).to_kv();
        assert!(two.get("length_scale.wavelength.m32").is_some());
        assert!(two.get("signal_std.m52").is_some());
    }
}
