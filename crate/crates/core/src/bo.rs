//! Ask/tell Bayesian optimisation driver.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{find_incumbent, AcqKind, Acquisition, AcquisitionConfig, Incumbent};
use crate::config::KvDoc;
use crate::gp::{map_fit, Dataset, GpModel, HyperPrior, Hyperparams, KernelKind, MapOptions};
use crate::params::{ControllerParams, INITIAL_CONTROLLER};
use crate::{seed, Error, Result};

/// Prior mean and signal std estimate, %BL/s.
pub const DEFAULT_MEAN_CONST: f64 = 2.0;
pub const DEFAULT_NOISE_STD: f64 = 0.1;
/// Optimistic signal std: zero cost lies inside the prior 95% band.
pub const DEFAULT_SIGMA_F1: f64 = 1.5;
/// Pessimistic signal std: zero cost lies outside the prior 95% band.
pub const DEFAULT_SIGMA_F2: f64 = 0.75;
pub const DEFAULT_BUDGET: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalVariance {
    Optimistic,
    Pessimistic,
}

impl SignalVariance {
    pub fn short(self) -> &'static str {
        match self {
            Self::Optimistic => "sf1",
            Self::Pessimistic => "sf2",
        }
    }
}

impl FromStr for SignalVariance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "optimistic" | "sf1" => Ok(Self::Optimistic),
            "pessimistic" | "sf2" => Ok(Self::Pessimistic),
            other => Err(Error::Parse(format!("unknown signal variance setting '{other}'"))),
        }
    }
}

impl fmt::Display for SignalVariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Optimistic => "optimistic",
            Self::Pessimistic => "pessimistic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperMode {
    Fixed,
    Learned,
}

impl FromStr for HyperMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" => Ok(Self::Fixed),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Parse(format!("unknown hyper mode '{other}'"))),
        }
    }
}

impl fmt::Display for HyperMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Learned => "learned",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub kernel: KernelKind,
    pub acq: AcquisitionConfig,
    pub variance: SignalVariance,
    pub hyper_mode: HyperMode,
    /// Total evaluations, including the initial controller.
    pub budget: usize,
    pub initial: ControllerParams,
    pub seed: u64,
    pub mean_const: f64,
    pub noise_std: f64,
    pub sigma_f1: f64,
    pub sigma_f2: f64,
    /// Store per-iteration wall time in the run log. Off by default so
    /// logs are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::TwoMat,
            acq: AcquisitionConfig::default(),
            variance: SignalVariance::Optimistic,
            hyper_mode: HyperMode::Learned,
            budget: DEFAULT_BUDGET,
            initial: INITIAL_CONTROLLER,
            seed: 0,
            mean_const: DEFAULT_MEAN_CONST,
            noise_std: DEFAULT_NOISE_STD,
            sigma_f1: DEFAULT_SIGMA_F1,
            sigma_f2: DEFAULT_SIGMA_F2,
            record_wall_time: false,
        }
    }
}

impl BoConfig {
    pub fn new(kernel: KernelKind, acq: AcqKind, variance: SignalVariance, hyper_mode: HyperMode) -> Self {
        Self {
            kernel,
            acq: AcquisitionConfig::with_kind(acq),
            variance,
            hyper_mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.acq.validate()?;
        if self.budget < 1 {
            return Err(Error::Domain("budget must be at least 1".into()));
        }
        if !self.initial.in_box() {
            return Err(Error::Domain(format!("initial controller {} outside the box", self.initial)));
        }
        if !(self.mean_const >= 0.0 && self.noise_std > 0.0) {
            return Err(Error::Domain("mean_const must be >= 0 and noise_std > 0".into()));
        }
        if !(self.sigma_f1 > self.mean_const / 2.0) {
            return Err(Error::Domain(format!(
                "optimistic sigma_f1 = {} must exceed mean_const/2 = {}",
                self.sigma_f1,
                self.mean_const / 2.0
            )));
        }
        if !(self.sigma_f2 < self.mean_const / 2.0 && self.sigma_f2 > 0.0) {
            return Err(Error::Domain(format!(
                "pessimistic sigma_f2 = {} must lie in (0, mean_const/2 = {})",
                self.sigma_f2,
                self.mean_const / 2.0
            )));
        }
        if self.acq.kind == AcqKind::Es && self.hyper_mode == HyperMode::Learned {
            return Err(Error::Unsupported(
                "entropy search with learned hyperparameters is not supported".into(),
            ));
        }
        Ok(())
    }

    pub fn signal_std(&self) -> f64 {
        match self.variance {
            SignalVariance::Optimistic => self.sigma_f1,
            SignalVariance::Pessimistic => self.sigma_f2,
        }
    }

    pub fn initial_hyper(&self) -> Hyperparams {
        Hyperparams::new(self.kernel, self.signal_std(), self.noise_std, self.mean_const)
    }

    /// Short identifier, e.g. `2Mat-EI-sf1-learned`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}-{}", self.kernel, self.acq.kind, self.variance.short(), self.hyper_mode)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("kernel", self.kernel);
        self.acq.write_kv(&mut doc);
        doc.set("signal_variance", self.variance);
        doc.set("hyper_mode", self.hyper_mode);
        doc.set("budget", self.budget);
        doc.set_f64("initial.wavelength_um", self.initial.wavelength_um);
        doc.set_f64("initial.duty_cycle_pct", self.initial.duty_cycle_pct);
        doc.set("seed", self.seed);
        doc.set_f64("mean_const", self.mean_const);
        doc.set_f64("noise_std", self.noise_std);
        doc.set_f64("sigma_f1", self.sigma_f1);
        doc.set_f64("sigma_f2", self.sigma_f2);
        doc.set("log.wall_time", self.record_wall_time);
        doc
    }

    /// Reads a configuration; missing keys take their defaults.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let initial = ControllerParams::new(
            doc.parse_opt("initial.wavelength_um")?.unwrap_or(d.initial.wavelength_um),
            doc.parse_opt("initial.duty_cycle_pct")?.unwrap_or(d.initial.duty_cycle_pct),
        )?;
        let cfg = Self {
            kernel: doc.parse_opt("kernel")?.unwrap_or(d.kernel),
            acq: AcquisitionConfig::from_kv(doc)?,
            variance: doc.parse_opt("signal_variance")?.unwrap_or(d.variance),
            hyper_mode: doc.parse_opt("hyper_mode")?.unwrap_or(d.hyper_mode),
            budget: doc.parse_opt("budget")?.unwrap_or(d.budget),
            initial,
            seed: doc.parse_opt("seed")?.unwrap_or(d.seed),
            mean_const: doc.parse_opt("mean_const")?.unwrap_or(d.mean_const),
            noise_std: doc.parse_opt("noise_std")?.unwrap_or(d.noise_std),
            sigma_f1: doc.parse_opt("sigma_f1")?.unwrap_or(d.sigma_f1),
            sigma_f2: doc.parse_opt("sigma_f2")?.unwrap_or(d.sigma_f2),
            record_wall_time: doc.parse_opt("log.wall_time")?.unwrap_or(d.record_wall_time),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One completed iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub theta: ControllerParams,
    pub cost: f64,
    pub hyper: Hyperparams,
    pub incumbent_theta: ControllerParams,
    pub incumbent_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Writes records as line-delimited JSON.
pub fn write_run_log<W: Write>(mut w: W, records: &[RunRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run_log(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Optimiser state; single writer, strictly alternating ask/tell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    config: BoConfig,
    data: Dataset,
    hyper: Hyperparams,
    prior: HyperPrior,
    pending: Option<ControllerParams>,
    incumbent: Option<Incumbent>,
    log: Vec<RunRecord>,
}

impl BoState {
    pub fn new(config: BoConfig) -> Result<Self> {
        config.validate()?;
        let hyper = config.initial_hyper();
        let prior = HyperPrior::from_estimate(&hyper);
        Ok(Self {
            config,
            data: Dataset::new(),
            hyper,
            prior,
            pending: None,
            incumbent: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &BoConfig {
        &self.config
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn log(&self) -> &[RunRecord] {
        &self.log
    }

    pub fn pending(&self) -> Option<ControllerParams> {
        self.pending
    }

    pub fn evaluations(&self) -> usize {
        self.data.len()
    }

    pub fn is_finished(&self) -> bool {
        self.data.len() >= self.config.budget
    }

    /// Checks internal consistency after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::State(m.to_string()));
        self.config.validate()?;
        self.data.validate()?;
        self.hyper.validate()?;
        self.prior.validate(&self.hyper)?;
        if self.hyper.kernel != self.config.kernel {
            return bad("hyperparameter kernel does not match the configuration");
        }
        if self.data.len() > self.config.budget {
            return bad("more observations than budget");
        }
        if self.log.len() != self.data.len() {
            return bad("run log and dataset lengths differ");
        }
        for (i, r) in self.log.iter().enumerate() {
            if r.iteration != i + 1 {
                return bad("run log iterations are not contiguous");
            }
        }
        if let Some(p) = self.pending {
            if !p.in_box() {
                return bad("pending controller outside the box");
            }
        }
        if self.incumbent.is_some() != !self.data.is_empty() {
            return bad("incumbent inconsistent with dataset");
        }
        Ok(())
    }

    fn check_can_ask(&self) -> Result<()> {
        if let Some(p) = self.pending {
            return Err(Error::Protocol(format!("ask called twice; {p} is still awaiting tell")));
        }
        if self.is_finished() {
            return Err(Error::Budget(self.config.budget));
        }
        Ok(())
    }

    /// Proposes the next controller. The first proposal is the configured
    /// initial controller.
    pub fn ask(&mut self) -> Result<ControllerParams> {
        self.check_can_ask()?;
        let theta = match self.incumbent {
            None => self.config.initial,
            Some(inc) => {
                let post = GpModel::new(self.hyper.clone())?.condition(&self.data)?;
                let iteration = self.data.len() as u64 + 1;
                let es_seed = seed::derive(self.config.seed, &[seed::stream::ES, iteration]);
                Acquisition::new(&self.config.acq, &post, inc, es_seed)?.maximize().0
            }
        };
        self.pending = Some(theta);
        Ok(theta)
    }

    /// Replaces the acquisition step with an externally chosen controller.
    pub fn ask_override(&mut self, theta: ControllerParams) -> Result<ControllerParams> {
        self.check_can_ask()?;
        if !theta.in_box() {
            return Err(Error::Domain(format!("controller {theta} outside the box")));
        }
        self.pending = Some(theta);
        Ok(theta)
    }

    /// Records the observed cost of the pending controller. Leaves the
    /// state untouched on error.
    pub fn tell(&mut self, theta: ControllerParams, cost: f64) -> Result<&RunRecord> {
        let started = Instant::now();
        let Some(pending) = self.pending else {
            return Err(Error::Protocol("tell without a preceding ask".into()));
        };
        if !same_controller(&pending, &theta) {
            return Err(Error::Protocol(format!("told {theta} but the pending controller is {pending}")));
        }
        let mut data = self.data.clone();
        data.push(pending, cost)?;
        let iteration = data.len();

        let hyper = match self.config.hyper_mode {
            HyperMode::Fixed => self.hyper.clone(),
            HyperMode::Learned => {
                let opts = MapOptions {
                    seed: seed::derive(self.config.seed, &[seed::stream::MAP, iteration as u64]),
                    ..MapOptions::default()
                };
                map_fit(&GpModel::new(self.hyper.clone())?, &data, &self.prior, &opts)?.hyper
            }
        };
        let post = GpModel::new(hyper.clone())?.condition(&data)?;
        let inc = find_incumbent(&post);

        let record = RunRecord {
            iteration,
            theta: pending,
            cost,
            hyper: hyper.clone(),
            incumbent_theta: inc.theta_star,
            incumbent_mean: inc.mu_star,
            wall_time_s: self.config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        self.data = data;
        self.hyper = hyper;
        self.incumbent = Some(inc);
        self.pending = None;
        self.log.push(record);
        Ok(self.log.last().expect("just pushed"))
    }

    /// Posterior-mean minimiser and its mean.
    pub fn incumbent(&self) -> Result<(ControllerParams, f64)> {
        self.incumbent
            .map(|i| (i.theta_star, i.mu_star))
            .ok_or_else(|| Error::State("no observations yet".into()))
    }
}

fn same_controller(a: &ControllerParams, b: &ControllerParams) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
    close(a.wavelength_um, b.wavelength_um) && close(a.duty_cycle_pct, b.duty_cycle_pct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(theta: &ControllerParams) -> f64 {
        let u = theta.to_unit();
        1.0 + 3.0 * ((u[0] - 0.2).powi(2) + (u[1] - 0.8).powi(2))
    }

    #[test]
    fn first_ask_is_initial_controller() {
        for kernel in KernelKind::ALL {
            let mut s = BoState::new(BoConfig::new(kernel, AcqKind::Pi, SignalVariance::Optimistic, HyperMode::Fixed)).unwrap();
            assert_eq!(s.ask().unwrap(), INITIAL_CONTROLLER);
        }
    }

    #[test]
    fn protocol_violations_are_rejected_without_mutation() {
        let mut s = BoState::new(BoConfig::default()).unwrap();
        assert!(matches!(s.tell(INITIAL_CONTROLLER, 1.0), Err(Error::Protocol(_))));
        let theta = s.ask().unwrap();
        assert!(matches!(s.ask(), Err(Error::Protocol(_))));
        let before = s.clone();
        let other = ControllerParams::new(300.0, 25.0).unwrap();
        assert!(matches!(s.tell(other, 1.0), Err(Error::Protocol(_))));
        assert!(s.tell(theta, f64::NAN).is_err());
        assert_eq!(s, before);
        s.tell(theta, 1.0).unwrap();
        assert!(s.incumbent().is_ok());
    }

    #[test]
    fn budget_is_enforced() {
        let mut cfg = BoConfig::new(KernelKind::Se, AcqKind::Ei, SignalVariance::Optimistic, HyperMode::Fixed);
        cfg.budget = 2;
        let mut s = BoState::new(cfg).unwrap();
        for _ in 0..2 {
            let t = s.ask().unwrap();
            s.tell(t, bowl(&t)).unwrap();
        }
        assert!(matches!(s.ask(), Err(Error::Budget(2))));
        assert_eq!(s.log().len(), 2);
    }

    #[test]
    fn second_ask_moves_away_from_first_point() {
        let mut s = BoState::new(BoConfig::new(KernelKind::M52, AcqKind::Ei, SignalVariance::Optimistic, HyperMode::Fixed)).unwrap();
        let t1 = s.ask().unwrap();
        s.tell(t1, 1.0).unwrap();
        let t2 = s.ask().unwrap();
        assert!(t2.in_box());
        assert_ne!(t1, t2);
    }

    #[test]
    fn config_validation() {
        let es_learned = BoConfig::new(KernelKind::Se, AcqKind::Es, SignalVariance::Optimistic, HyperMode::Learned);
        assert!(matches!(es_learned.validate(), Err(Error::Unsupported(_))));
        let bad = BoConfig { sigma_f1: 0.9, ..BoConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BoConfig { sigma_f2: 1.1, ..BoConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BoConfig { budget: 0, ..BoConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = BoConfig::new(KernelKind::Rq, AcqKind::Es, SignalVariance::Pessimistic, HyperMode::Fixed);
        cfg.seed = 77;
        cfg.initial = ControllerParams::new(400.5, 44.25).unwrap();
        let back = BoConfig::from_kv(&KvDoc::parse(&cfg.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn state_json_round_trip_and_validate() {
        let mut s = BoState::new(BoConfig::default()).unwrap();
        let t = s.ask().unwrap();
        s.tell(t, 1.4).unwrap();
        s.ask().unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: BoState = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn run_log_round_trip() {
        let mut s = BoState::new(BoConfig::new(KernelKind::M32, AcqKind::Ei, SignalVariance::Optimistic, HyperMode::Fixed)).unwrap();
        for _ in 0..3 {
            let t = s.ask().unwrap();
            s.tell(t, bowl(&t)).unwrap();
        }
        let mut buf = Vec::new();
        write_run_log(&mut buf, s.log()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_run_log(&text).unwrap(), s.log());
    }
}
