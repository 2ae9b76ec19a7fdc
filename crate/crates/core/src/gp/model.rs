use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::Hyperparams;
use crate::params::ControllerParams;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter ladder, in units of the total signal variance.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Append-only list of evaluated controllers and their observed cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<(ControllerParams, f64)>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, theta: ControllerParams, cost: f64) -> Result<()> {
        if !theta.in_box() {
            return Err(Error::Domain(format!("controller {theta} outside the search box")));
        }
        if !cost.is_finite() {
            return Err(Error::Domain(format!("observed cost must be finite, got {cost}")));
        }
        self.points.push((theta, cost));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(ControllerParams, f64)] {
        &self.points
    }

    /// Checks the box invariant after deserialisation.
    pub fn validate(&self) -> Result<()> {
        for (theta, cost) in &self.points {
            if !theta.in_box() || !cost.is_finite() {
                return Err(Error::Domain(format!("invalid data point ({theta}, {cost})")));
            }
        }
        Ok(())
    }
}

impl FromIterator<(ControllerParams, f64)> for Dataset {
    fn from_iter<I: IntoIterator<Item = (ControllerParams, f64)>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStats {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorStats {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A GP prior: kernel hyperparameters, constant mean and noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: Hyperparams,
}

impl GpModel {
    pub fn new(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { hyper })
    }

    /// Conditions the prior on `data`.
    pub fn condition(&self, data: &Dataset) -> Result<Posterior> {
        Posterior::new(self.hyper.clone(), data)
    }

    pub fn log_marginal_likelihood(&self, data: &Dataset) -> Result<f64> {
        Ok(self.condition(data)?.log_marginal_likelihood())
    }
}

/// Cholesky-factored GP posterior.
#[derive(Clone, Debug)]
pub struct Posterior {
    hyper: Hyperparams,
    x: Vec<[f64; 2]>,
    /// Residuals `y_i − μ`.
    resid: DVector<f64>,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    chol: DMatrix<f64>,
    /// `K⁻¹ y`.
    alpha: DVector<f64>,
    jitter: f64,
}

impl Posterior {
    pub fn new(hyper: Hyperparams, data: &Dataset) -> Result<Self> {
        hyper.validate()?;
        let x: Vec<[f64; 2]> = data.points().iter().map(|(t, _)| t.to_unit()).collect();
        let resid = DVector::from_iterator(
            data.len(),
            data.points().iter().map(|(_, y)| y - hyper.mean_const),
        );
        let n = x.len();
        let noise = hyper.noise_std * hyper.noise_std;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = hyper.k_unit(x[i], x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += noise;
        }
        let (chol, jitter) = factor(k, hyper.total_variance())?;
        let alpha = chol_solve(&chol, &resid);
        Ok(Self {
            hyper,
            x,
            resid,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    /// Training inputs on the unit square.
    pub fn inputs(&self) -> &[[f64; 2]] {
        &self.x
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Diagonal jitter that was needed for the factorisation (absolute).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn predict(&self, theta: &ControllerParams) -> PosteriorStats {
        self.predict_unit(theta.to_unit())
    }

    pub fn predict_unit(&self, u: [f64; 2]) -> PosteriorStats {
        let prior_var = self.hyper.k_unit(u, u);
        if self.x.is_empty() {
            return PosteriorStats {
                mean: self.hyper.mean_const,
                variance: prior_var,
            };
        }
        let kx = self.cross(u);
        let mean = self.hyper.mean_const + kx.dot(&self.alpha);
        let v = forward_sub(&self.chol, &kx);
        PosteriorStats {
            mean,
            variance: (prior_var - v.dot(&v)).max(0.0),
        }
    }

    /// Posterior mean only; skips the triangular solve.
    pub fn mean_unit(&self, u: [f64; 2]) -> f64 {
        if self.x.is_empty() {
            return self.hyper.mean_const;
        }
        self.hyper.mean_const + self.cross(u).dot(&self.alpha)
    }

    /// `k(u, X)` against the training inputs.
    pub fn cross(&self, u: [f64; 2]) -> DVector<f64> {
        DVector::from_iterator(self.x.len(), self.x.iter().map(|&xi| self.hyper.k_unit(u, xi)))
    }

    /// `L⁻¹ k(u, X)`; posterior covariances follow as
    /// `k(a, b) − whiten(a)·whiten(b)`.
    pub fn whiten(&self, u: [f64; 2]) -> DVector<f64> {
        forward_sub(&self.chol, &self.cross(u))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len() as f64;
        let log_det_half: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.resid.dot(&self.alpha) - log_det_half - 0.5 * n * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to the log of
    /// each free kernel hyperparameter.
    pub fn log_marginal_likelihood_grad(&self) -> Vec<f64> {
        let n = self.x.len();
        let p = self.hyper.free_count();
        let mut grad = vec![0.0; p];
        if n == 0 {
            return grad;
        }
        let kinv = chol_inverse(&self.chol);
        let mut g = vec![0.0; p];
        for i in 0..n {
            for j in 0..=i {
                let w = self.alpha[i] * self.alpha[j] - kinv[(i, j)];
                let factor = if i == j { 0.5 } else { 1.0 };
                self.hyper.k_unit_grad(self.x[i], self.x[j], &mut g);
                for (acc, gk) in grad.iter_mut().zip(&g) {
                    *acc += factor * w * gk;
                }
            }
        }
        grad
    }
}

/// Posterior mean and variance at one controller.
pub fn posterior(model: &GpModel, data: &Dataset, theta: &ControllerParams) -> Result<PosteriorStats> {
    Ok(model.condition(data)?.predict(theta))
}

/// Cholesky with an escalating diagonal jitter. Returns the lower factor
/// and the absolute jitter added.
pub(crate) fn factor(k: DMatrix<f64>, signal_var: f64) -> Result<(DMatrix<f64>, f64)> {
    if k.nrows() == 0 {
        return Ok((k, 0.0));
    }
    if let Some(c) = k.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * signal_var;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "Gram matrix of size {} not positive definite with jitter {:e}",
        k.nrows(),
        JITTER_MAX * signal_var
    )))
}

pub(crate) fn forward_sub(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[(i, j)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

fn back_sub_t(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    back_sub_t(l, &forward_sub(l, b))
}

fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &chol_solve(l, &e));
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel::KernelKind;
    use crate::params::INITIAL_CONTROLLER;

    fn model(sigma_f: f64, noise: f64, mean: f64) -> GpModel {
        GpModel::new(Hyperparams::new(KernelKind::Se, sigma_f, noise, mean)).unwrap()
    }

    #[test]
    fn empty_data_returns_prior() {
        let s = posterior(&model(2.0, 0.1, 2.0), &Dataset::new(), &INITIAL_CONTROLLER).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.variance, 4.0);
    }

    #[test]
    fn single_observation_by_hand() {
        let mut d = Dataset::new();
        d.push(INITIAL_CONTROLLER, 0.0).unwrap();
        let s = posterior(&model(2.0, 0.1, 2.0), &d, &INITIAL_CONTROLLER).unwrap();
        assert!((s.mean - (2.0 - 2.0 * 4.0 / 4.01)).abs() < 1e-12);
        assert!((s.variance - (4.0 - 16.0 / 4.01)).abs() < 1e-12);
        assert!((s.mean - 0.004_987_531_172_069_737).abs() < 1e-12);
    }

    #[test]
    fn single_point_likelihood_has_no_quadratic_term() {
        let mut d = Dataset::new();
        d.push(INITIAL_CONTROLLER, 2.0).unwrap();
        let v: f64 = 4.0 + 0.01;
        let lml = model(2.0, 0.1, 2.0).log_marginal_likelihood(&d).unwrap();
        assert!((lml - (-0.5 * v.ln() - 0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_points_escalate_jitter_then_fail() {
        let mut d = Dataset::new();
        for _ in 0..3 {
            d.push(INITIAL_CONTROLLER, 1.0).unwrap();
        }
        let hp = Hyperparams::new(KernelKind::Se, 1.0, 1e-9, 1.0);
        let post = Posterior::new(hp, &d).unwrap();
        assert!(post.jitter() > 0.0);
        // An indefinite matrix cannot be rescued by jitter.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factor(bad, 1.0), Err(Error::Conditioning(_))));
    }

    #[test]
    fn dataset_rejects_out_of_box() {
        let mut d = Dataset::new();
        let p = ControllerParams {
            wavelength_um: 2000.0,
            duty_cycle_pct: 30.0,
        };
        assert!(d.push(p, 1.0).is_err());
        assert!(d.push(INITIAL_CONTROLLER, f64::NAN).is_err());
        assert!(d.is_empty());
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let d: Dataset = [(0.1, 0.2, 1.4), (0.5, 0.5, 2.5), (0.9, 0.3, 0.7), (0.4, 0.8, 1.9)]
            .iter()
            .map(|&(a, b, y)| (ControllerParams::from_unit([a, b]), y))
            .collect();
        for kind in KernelKind::ALL {
            let hp = Hyperparams::new(kind, 1.5, 0.1, 2.0);
            let g = Posterior::new(hp.clone(), &d).unwrap().log_marginal_likelihood_grad();
            let base = hp.free_values();
            for j in 0..base.len() {
                let h: f64 = 1e-6;
                let mut up = base.clone();
                let mut dn = base.clone();
                up[j] *= h.exp();
                dn[j] *= (-h).exp();
                let f = |v: &[f64]| Posterior::new(hp.with_free_values(v), &d).unwrap().log_marginal_likelihood();
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind} {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
