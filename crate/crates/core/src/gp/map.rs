//! MAP estimation of kernel hyperparameters under Gaussian hyperpriors.
//!
//! The search runs over log-hyperparameters so positivity holds by
//! construction; the priors themselves are Gaussian densities on the
//! natural scale. Noise level and mean constant stay fixed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kernel::Hyperparams;
use super::model::{Dataset, GpModel, Posterior};
use crate::search::bfgs_minimize;
use crate::{seed, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Natural-scale bounds outside which the objective is treated as
/// undefined.
const MIN_VALUE: f64 = 1e-4;
const MAX_VALUE: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * LN_2PI
    }

    /// `d log p / dx`.
    fn dlog_pdf(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.std * self.std)
    }
}

/// One Gaussian prior per free kernel hyperparameter, in the order of
/// [`Hyperparams::free_values`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub entries: Vec<Gaussian>,
}

impl HyperPrior {
    /// Priors centred on an estimate with one fourth of it as std.
    pub fn from_estimate(hp: &Hyperparams) -> Self {
        Self::with_relative_std(hp, 0.25)
    }

    pub fn with_relative_std(hp: &Hyperparams, rel: f64) -> Self {
        Self {
            entries: hp
                .free_values()
                .into_iter()
                .map(|m| Gaussian { mean: m, std: rel * m })
                .collect(),
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.entries.iter().map(|g| g.mean).collect()
    }

    fn log_density(&self, values: &[f64]) -> f64 {
        self.entries.iter().zip(values).map(|(g, &v)| g.log_pdf(v)).sum()
    }

    pub fn validate(&self, hp: &Hyperparams) -> Result<()> {
        if self.entries.len() != hp.free_count() {
            return Err(Error::Domain(format!(
                "{} kernel has {} free hyperparameters but {} priors were given",
                hp.kernel,
                hp.free_count(),
                self.entries.len()
            )));
        }
        for g in &self.entries {
            if !(g.mean > 0.0 && g.std > 0.0 && g.mean.is_finite() && g.std.is_finite()) {
                return Err(Error::Domain(format!("invalid hyperprior {g:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapOptions {
    pub restarts: usize,
    /// Std of the log-normal perturbation applied to the prior means for
    /// restarts after the first.
    pub perturbation: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            perturbation: 0.5,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapFit {
    pub hyper: Hyperparams,
    /// Log marginal likelihood plus log hyperprior at `hyper`.
    pub objective: f64,
    pub start_objective: f64,
    /// Every restart failed its line search; `hyper` is the start point.
    pub warning: bool,
}

/// Log marginal likelihood plus log hyperprior density.
pub fn map_objective(hp: &Hyperparams, data: &Dataset, prior: &HyperPrior) -> Result<f64> {
    let post = Posterior::new(hp.clone(), data)?;
    Ok(post.log_marginal_likelihood() + prior.log_density(&hp.free_values()))
}

/// Objective and gradient in log space.
fn objective_and_grad(base: &Hyperparams, data: &Dataset, prior: &HyperPrior, logs: &[f64]) -> Option<(f64, Vec<f64>)> {
    let values: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    if values.iter().any(|&v| !(MIN_VALUE..=MAX_VALUE).contains(&v)) {
        return None;
    }
    let hp = base.with_free_values(&values);
    let post = Posterior::new(hp, data).ok()?;
    let mut grad = post.log_marginal_likelihood_grad();
    let mut value = post.log_marginal_likelihood();
    for ((g, prior), &v) in grad.iter_mut().zip(&prior.entries).zip(&values) {
        value += prior.log_pdf(v);
        *g += prior.dlog_pdf(v) * v;
    }
    value.is_finite().then_some((value, grad))
}

/// Multi-start MAP fit. The first restart begins at the prior means, the
/// others at seeded log-normal perturbations of them. The returned
/// hyperparameters are never worse (in MAP objective) than `model.hyper`.
pub fn map_fit(model: &GpModel, data: &Dataset, prior: &HyperPrior, opts: &MapOptions) -> Result<MapFit> {
    let start = &model.hyper;
    start.validate()?;
    prior.validate(start)?;
    if data.is_empty() {
        return Err(Error::InsufficientData("MAP fit needs at least one observation".into()));
    }

    let start_objective = map_objective(start, data, prior).unwrap_or(f64::NEG_INFINITY);
    let mut best = (start.clone(), start_objective);
    let mut rng = seed::rng(opts.seed, &[seed::stream::MAP]);
    let mean_logs: Vec<f64> = prior.means().iter().map(|m| m.ln()).collect();
    let mut failures = 0;

    for restart in 0..opts.restarts.max(1) {
        let x0: Vec<f64> = if restart == 0 {
            mean_logs.clone()
        } else {
            mean_logs
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + opts.perturbation * z
                })
                .collect()
        };
        let result = bfgs_minimize(
            |logs| objective_and_grad(start, data, prior, logs).map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect())),
            &x0,
            opts.max_iters,
            1.0,
        );
        match result {
            Some(r) => {
                // A stalled run still reports its (finite) start point.
                if r.stalled {
                    failures += 1;
                }
                let value = -r.value;
                if value > best.1 {
                    let values: Vec<f64> = r.x.iter().map(|l| l.exp()).collect();
                    best = (start.with_free_values(&values), value);
                }
            }
            None => failures += 1,
        }
    }

    let warning = failures == opts.restarts.max(1);
    if warning {
        return Ok(MapFit {
            hyper: start.clone(),
            objective: start_objective,
            start_objective,
            warning,
        });
    }
    Ok(MapFit {
        hyper: best.0,
        objective: best.1,
        start_objective,
        warning,
    })
}
