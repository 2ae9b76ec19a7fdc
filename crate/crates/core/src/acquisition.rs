//! Acquisition functions and their maximisation over the search box.
//!
//! PI and EI measure improvement over `γ·μ*`, where `μ*` is the minimum of
//! the posterior mean over the box (not the best observation). ES is a
//! representer-point approximation of the expected reduction in entropy of
//! the minimum location.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::config::KvDoc;
use crate::gp::model::{factor, forward_sub};
use crate::gp::{Dataset, GpModel, Posterior, PosteriorStats};
use crate::params::ControllerParams;
use crate::search::BoxSearch;
use crate::{seed, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MIN_REPRESENTERS: usize = 20;
const HERMITE_NODES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AcqKind {
    #[serde(rename = "PI")]
    Pi,
    #[serde(rename = "EI")]
    Ei,
    #[serde(rename = "ES")]
    Es,
}

impl AcqKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pi => "PI",
            Self::Ei => "EI",
            Self::Es => "ES",
        }
    }
}

impl fmt::Display for AcqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcqKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PI" => Ok(Self::Pi),
            "EI" => Ok(Self::Ei),
            "ES" => Ok(Self::Es),
            other => Err(Error::Parse(format!("unknown acquisition '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub kind: AcqKind,
    pub gamma: f64,
    /// Representer points; rounded up to a full square lattice.
    pub es_representers: usize,
    pub es_mc_samples: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kind: AcqKind::Ei,
            gamma: 0.9,
            es_representers: 36,
            es_mc_samples: 128,
        }
    }
}

impl AcquisitionConfig {
    pub fn with_kind(kind: AcqKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Domain(format!("acq.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.kind == AcqKind::Es {
            if self.es_representers < MIN_REPRESENTERS {
                return Err(Error::Domain(format!(
                    "acq.es.representers must be at least {MIN_REPRESENTERS}, got {}",
                    self.es_representers
                )));
            }
            if self.es_mc_samples == 0 {
                return Err(Error::Domain("acq.es.mc_samples must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("acq.kind", self.kind);
        doc.set_f64("acq.gamma", self.gamma);
        doc.set("acq.es.representers", self.es_representers);
        doc.set("acq.es.mc_samples", self.es_mc_samples);
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            kind: doc.parse_opt("acq.kind")?.unwrap_or(d.kind),
            gamma: doc.parse_opt("acq.gamma")?.unwrap_or(d.gamma),
            es_representers: doc.parse_opt("acq.es.representers")?.unwrap_or(d.es_representers),
            es_mc_samples: doc.parse_opt("acq.es.mc_samples")?.unwrap_or(d.es_mc_samples),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Current best guess: the minimiser of the posterior mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub mu_star: f64,
    pub theta_star: ControllerParams,
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `P(X < threshold)` for `X ~ N(mean, variance)`.
pub fn probability_of_improvement(mean: f64, variance: f64, threshold: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return if mean < threshold { 1.0 } else { 0.0 };
    }
    normal_cdf((threshold - mean) / sigma)
}

/// `E[max(threshold − X, 0)]` for `X ~ N(mean, variance)`.
pub fn expected_improvement(mean: f64, variance: f64, threshold: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (threshold - mean).max(0.0);
    }
    let z = (threshold - mean) / sigma;
    (sigma * (z * normal_cdf(z) + normal_pdf(z))).max(0.0)
}

/// PI or EI at one posterior marginal. ES needs the joint posterior and
/// goes through [`es_score`] / [`Acquisition`].
pub fn acq_value(cfg: &AcquisitionConfig, post: &PosteriorStats, inc: &Incumbent) -> Result<f64> {
    let threshold = cfg.gamma * inc.mu_star;
    match cfg.kind {
        AcqKind::Pi => Ok(probability_of_improvement(post.mean, post.variance, threshold)),
        AcqKind::Ei => Ok(expected_improvement(post.mean, post.variance, threshold)),
        AcqKind::Es => Err(Error::Unsupported(
            "entropy search depends on the joint posterior; use es_score".into(),
        )),
    }
}

/// Minimum of the posterior mean over the box. Training inputs join the
/// lattice as candidates.
pub fn find_incumbent(post: &Posterior) -> Incumbent {
    let (u, v) = BoxSearch::default().minimize_with(|u| post.mean_unit(u), post.inputs());
    Incumbent {
        mu_star: v,
        theta_star: ControllerParams::from_unit(u),
    }
}

/// Gauss-Hermite nodes and weights (physicists' convention, weights
/// summing to √π) via the Golub-Welsch eigenproblem.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut nodes: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], sqrt_pi * v0 * v0)
        })
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    nodes
}

fn entropy_of_counts(counts: &[u32], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Representer lattice of at least `count` points at cell centres of the
/// unit square.
pub fn representer_points(count: usize) -> Vec<[f64; 2]> {
    let side = (count as f64).sqrt().ceil() as usize;
    let mut pts = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            pts.push([(i as f64 + 0.5) / side as f64, (j as f64 + 0.5) / side as f64]);
        }
    }
    pts
}

/// Precomputed state for representer-point entropy search.
///
/// The minimum-location distribution `p_min` is estimated by counting the
/// argmin of joint posterior draws at the representers. For a candidate,
/// the draws are conditioned on a hypothetical noisy observation with the
/// pathwise update `f' = f + Σ_rc/(σ_c² + σ_n²) (y − ŷ)`, the outcome `y`
/// is integrated with Gauss-Hermite quadrature, and the same normal draws
/// are reused across candidates.
pub struct EntropySearch<'a> {
    post: &'a Posterior,
    reps: Vec<[f64; 2]>,
    rep_whitened: Vec<DVector<f64>>,
    chol: DMatrix<f64>,
    /// Base normal draws, `S × R`, row-major.
    z: Vec<f64>,
    z_cand: Vec<f64>,
    eps: Vec<f64>,
    /// Posterior draws at the representers, `S × R`.
    draws: Vec<f64>,
    base_entropy: f64,
    nodes: Vec<(f64, f64)>,
    degenerate: bool,
}

impl<'a> EntropySearch<'a> {
    pub fn new(post: &'a Posterior, cfg: &AcquisitionConfig, seed: u64) -> Result<Self> {
        if cfg.es_representers < MIN_REPRESENTERS {
            return Err(Error::Domain(format!(
                "entropy search needs at least {MIN_REPRESENTERS} representers"
            )));
        }
        let reps = representer_points(cfg.es_representers);
        let r = reps.len();
        let s = cfg.es_mc_samples.max(1);
        let hyper = post.hyper();
        let rep_whitened: Vec<DVector<f64>> = reps.iter().map(|&u| post.whiten(u)).collect();
        let mut cov = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..=i {
                let v = hyper.k_unit(reps[i], reps[j]) - rep_whitened[i].dot(&rep_whitened[j]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let max_var = (0..r).map(|i| cov[(i, i)]).fold(0.0, f64::max);
        let degenerate = max_var <= 1e-12 * hyper.total_variance();
        let chol = if degenerate {
            DMatrix::zeros(r, r)
        } else {
            factor(cov, hyper.total_variance())?.0
        };

        let mut rng = seed::rng(seed, &[seed::stream::ES]);
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let z = normals(s * r);
        let z_cand = normals(s);
        let eps = normals(s);

        let means: Vec<f64> = reps.iter().map(|&u| post.mean_unit(u)).collect();
        let mut draws = vec![0.0; s * r];
        for k in 0..s {
            let zk = &z[k * r..(k + 1) * r];
            for i in 0..r {
                let mut v = means[i];
                for j in 0..=i {
                    v += chol[(i, j)] * zk[j];
                }
                draws[k * r + i] = v;
            }
        }
        let mut counts = vec![0u32; r];
        for k in 0..s {
            counts[argmin(&draws[k * r..(k + 1) * r])] += 1;
        }
        let base_entropy = entropy_of_counts(&counts, s as f64);

        Ok(Self {
            post,
            reps,
            rep_whitened,
            chol,
            z,
            z_cand,
            eps,
            draws,
            base_entropy,
            nodes: gauss_hermite(HERMITE_NODES),
            degenerate,
        })
    }

    pub fn base_entropy(&self) -> f64 {
        self.base_entropy
    }

    pub fn representers(&self) -> &[[f64; 2]] {
        &self.reps
    }

    /// Expected entropy reduction (nats) from observing at `u`.
    pub fn score_unit(&self, u: [f64; 2]) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let r = self.reps.len();
        let s = self.eps.len();
        let hyper = self.post.hyper();
        let stats = self.post.predict_unit(u);
        let noise_var = hyper.noise_std * hyper.noise_std;
        let denom = stats.variance + noise_var;
        let wc = self.post.whiten(u);
        let cross = DVector::from_iterator(
            r,
            self.reps
                .iter()
                .zip(&self.rep_whitened)
                .map(|(&rep, w)| hyper.k_unit(rep, u) - w.dot(&wc)),
        );
        let a = forward_sub(&self.chol, &cross);
        let resid_var = (stats.variance - a.dot(&a)).max(0.0);
        let gain: Vec<f64> = cross.iter().map(|c| c / denom).collect();

        // Hypothetical noisy observation along each draw.
        let y_hat: Vec<f64> = (0..s)
            .map(|k| {
                let zk = &self.z[k * r..(k + 1) * r];
                let f_c = stats.mean + a.iter().zip(zk).map(|(x, y)| x * y).sum::<f64>() + resid_var.sqrt() * self.z_cand[k];
                f_c + hyper.noise_std * self.eps[k]
            })
            .collect();

        let scale = (2.0 * denom).sqrt();
        let mut expected = 0.0;
        let mut counts = vec![0u32; r];
        let mut row = vec![0.0; r];
        for &(x, w) in &self.nodes {
            let y = stats.mean + scale * x;
            counts.iter_mut().for_each(|c| *c = 0);
            for k in 0..s {
                let shift = y - y_hat[k];
                let base = &self.draws[k * r..(k + 1) * r];
                for ((o, b), g) in row.iter_mut().zip(base).zip(&gain) {
                    *o = b + g * shift;
                }
                counts[argmin(&row)] += 1;
            }
            expected += w * entropy_of_counts(&counts, s as f64);
        }
        self.base_entropy - expected / std::f64::consts::PI.sqrt()
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Expected entropy reduction at one candidate.
pub fn es_score(
    model: &GpModel,
    data: &Dataset,
    candidate: &ControllerParams,
    cfg: &AcquisitionConfig,
    seed: u64,
) -> Result<f64> {
    let post = model.condition(data)?;
    Ok(EntropySearch::new(&post, cfg, seed)?.score_unit(candidate.to_unit()))
}

/// An acquisition function bound to a posterior.
pub struct Acquisition<'a> {
    cfg: AcquisitionConfig,
    post: &'a Posterior,
    incumbent: Incumbent,
    es: Option<EntropySearch<'a>>,
}

impl<'a> Acquisition<'a> {
    pub fn new(cfg: &AcquisitionConfig, post: &'a Posterior, incumbent: Incumbent, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let es = match cfg.kind {
            AcqKind::Es => Some(EntropySearch::new(post, cfg, seed)?),
            _ => None,
        };
        Ok(Self {
            cfg: *cfg,
            post,
            incumbent,
            es,
        })
    }

    pub fn incumbent(&self) -> &Incumbent {
        &self.incumbent
    }

    pub fn value_unit(&self, u: [f64; 2]) -> f64 {
        match &self.es {
            Some(es) => es.score_unit(u),
            None => {
                let threshold = self.cfg.gamma * self.incumbent.mu_star;
                let s = self.post.predict_unit(u);
                match self.cfg.kind {
                    AcqKind::Pi => probability_of_improvement(s.mean, s.variance, threshold),
                    _ => expected_improvement(s.mean, s.variance, threshold),
                }
            }
        }
    }

    pub fn value(&self, theta: &ControllerParams) -> f64 {
        self.value_unit(theta.to_unit())
    }

    /// Lattice scan plus simplex refinement.
    pub fn maximize(&self) -> (ControllerParams, f64) {
        let (u, v) = BoxSearch::default().maximize(|u| self.value_unit(u));
        (ControllerParams::from_unit(u), v)
    }
}

/// Next controller to evaluate.
pub fn maximize_acq(model: &GpModel, data: &Dataset, cfg: &AcquisitionConfig, seed: u64) -> Result<ControllerParams> {
    let post = model.condition(data)?;
    let inc = find_incumbent(&post);
    Ok(Acquisition::new(cfg, &post, inc, seed)?.maximize().0)
}
