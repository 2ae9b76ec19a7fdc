//! Regret benchmark over semi-synthetic surfaces, report writers, and a
//! closed-loop driver against the simulated plant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::AcqKind;
use crate::benchgen::{
    build_surface_resampling, default_duty_axis, default_wavelength_axis, fill_missing, normalized_regret,
    plant_source_grid, smooth, CompleteGrid, CostSurface, GridData, DEFAULT_OBSERVED_CELLS, DEFAULT_SURFACE_NOISE,
};
use crate::bo::{BoConfig, BoState, HyperMode, SignalVariance};
use crate::config::KvDoc;
use crate::gp::{Hyperparams, KernelKind};
use crate::params::ControllerParams;
use crate::sim::PlantSpec;
use crate::velocity::{cost_from_speed, fit_movement, DEFAULT_FREQUENCY_HZ, DEFAULT_T_CUT_S};
use crate::{seed, Error, Result};

/// Target speed used to turn plant speeds into benchmark costs.
pub const DEFAULT_BENCH_V_STAR: f64 = 3.0;
pub const DEFAULT_RUNS: usize = 200;
const SURFACE_ATTEMPTS: usize = 16;

/// Something that proposes controllers and recommends one.
pub trait SearchStrategy {
    fn ask(&mut self) -> Result<ControllerParams>;
    fn tell(&mut self, theta: ControllerParams, cost: f64) -> Result<()>;
    /// Current recommendation.
    fn recommend(&self) -> Result<ControllerParams>;
    fn hyper(&self) -> Option<&Hyperparams> {
        None
    }
}

impl SearchStrategy for BoState {
    fn ask(&mut self) -> Result<ControllerParams> {
        BoState::ask(self)
    }

    fn tell(&mut self, theta: ControllerParams, cost: f64) -> Result<()> {
        BoState::tell(self, theta, cost).map(|_| ())
    }

    fn recommend(&self) -> Result<ControllerParams> {
        self.incumbent().map(|i| i.0)
    }

    fn hyper(&self) -> Option<&Hyperparams> {
        Some(BoState::hyper(self))
    }
}

/// Uniform random search; recommends the best noisy observation.
#[derive(Clone, Debug)]
pub struct RandomSearch {
    rng: ChaCha8Rng,
    best: Option<(ControllerParams, f64)>,
    pending: Option<ControllerParams>,
}

impl RandomSearch {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seed::rng(seed, &[seed::stream::RANDOM_SEARCH]),
            best: None,
            pending: None,
        }
    }
}

impl SearchStrategy for RandomSearch {
    fn ask(&mut self) -> Result<ControllerParams> {
        if self.pending.is_some() {
            return Err(Error::Protocol("ask called twice".into()));
        }
        let u = [self.rng.random::<f64>(), self.rng.random::<f64>()];
        let theta = ControllerParams::from_unit(u);
        self.pending = Some(theta);
        Ok(theta)
    }

    fn tell(&mut self, theta: ControllerParams, cost: f64) -> Result<()> {
        if self.pending != Some(theta) {
            return Err(Error::Protocol("tell does not match the pending ask".into()));
        }
        self.pending = None;
        if self.best.is_none_or(|b| cost < b.1) {
            self.best = Some((theta, cost));
        }
        Ok(())
    }

    fn recommend(&self) -> Result<ControllerParams> {
        self.best.map(|b| b.0).ok_or_else(|| Error::State("no observations yet".into()))
    }
}

/// A benchmark entry: a BO configuration or the random baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StrategySpec {
    Bo(BoConfig),
    Random,
}

impl StrategySpec {
    pub fn label(&self) -> String {
        match self {
            Self::Bo(c) => c.label(),
            Self::Random => "random".into(),
        }
    }
}

/// Parses labels such as `2Mat-EI-sf1-learned`.
pub fn parse_label(label: &str, base: &BoConfig) -> Result<StrategySpec> {
    if label.eq_ignore_ascii_case("random") {
        return Ok(StrategySpec::Random);
    }
    let parts: Vec<&str> = label.split('-').collect();
    let [k, a, v, m] = parts.as_slice() else {
        return Err(Error::Parse(format!(
            "configuration label '{label}' should look like <kernel>-<acq>-<sf1|sf2>-<fixed|learned>"
        )));
    };
    let mut cfg = base.clone();
    cfg.kernel = k.parse()?;
    cfg.acq.kind = a.parse()?;
    cfg.variance = v.parse()?;
    cfg.hyper_mode = m.parse()?;
    cfg.validate()?;
    Ok(StrategySpec::Bo(cfg))
}

/// The Table I layout: column order and membership.
pub const TABLE_COLUMNS: [(AcqKind, SignalVariance, HyperMode); 7] = [
    (AcqKind::Ei, SignalVariance::Optimistic, HyperMode::Fixed),
    (AcqKind::Ei, SignalVariance::Optimistic, HyperMode::Learned),
    (AcqKind::Ei, SignalVariance::Pessimistic, HyperMode::Fixed),
    (AcqKind::Ei, SignalVariance::Pessimistic, HyperMode::Learned),
    (AcqKind::Pi, SignalVariance::Optimistic, HyperMode::Fixed),
    (AcqKind::Pi, SignalVariance::Optimistic, HyperMode::Learned),
    (AcqKind::Es, SignalVariance::Optimistic, HyperMode::Fixed),
];

/// Every filled Table I cell: all kernels and columns except 2Mat with ES.
pub fn default_strategies(base: &BoConfig) -> Vec<StrategySpec> {
    let mut out = Vec::new();
    for kernel in KernelKind::ALL {
        for (acq, variance, mode) in TABLE_COLUMNS {
            if kernel == KernelKind::TwoMat && acq == AcqKind::Es {
                continue;
            }
            let mut cfg = base.clone();
            cfg.kernel = kernel;
            cfg.acq.kind = acq;
            cfg.variance = variance;
            cfg.hyper_mode = mode;
            out.push(StrategySpec::Bo(cfg));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub strategies: Vec<StrategySpec>,
    pub runs: usize,
    pub budget: usize,
    pub seed: u64,
    /// Noise added to the grid when resampling each surface.
    pub surface_noise: f64,
    /// Noise added to every benchmark observation.
    pub obs_noise: f64,
    pub v_star: f64,
    pub grid_file: Option<PathBuf>,
    pub observed_cells: usize,
    pub mask_seed: u64,
    pub threads: Option<usize>,
}

const SUITE_KEYS: &[&str] = &[
    "suite",
    "random_baseline",
    "runs",
    "budget",
    "seed",
    "surface.noise_std",
    "obs.noise_std",
    "v_star",
    "grid.file",
    "grid.observed",
    "grid.mask_seed",
    "threads",
    "mean_const",
    "noise_std",
    "sigma_f1",
    "sigma_f2",
    "initial.wavelength_um",
    "initial.duty_cycle_pct",
    "acq.gamma",
    "acq.es.representers",
    "acq.es.mc_samples",
];

impl Default for BenchmarkSuite {
    fn default() -> Self {
        let mut strategies = default_strategies(&BoConfig::default());
        strategies.push(StrategySpec::Random);
        Self {
            strategies,
            runs: DEFAULT_RUNS,
            budget: crate::bo::DEFAULT_BUDGET,
            seed: 0,
            surface_noise: DEFAULT_SURFACE_NOISE,
            obs_noise: DEFAULT_SURFACE_NOISE,
            v_star: DEFAULT_BENCH_V_STAR,
            grid_file: None,
            observed_cells: DEFAULT_OBSERVED_CELLS,
            mask_seed: 0,
            threads: None,
        }
    }
}

impl BenchmarkSuite {
    /// Reads a suite from key-value text. Relative `grid.file` paths are
    /// resolved against `base_dir`.
    pub fn from_kv(doc: &KvDoc, base_dir: &Path) -> Result<Self> {
        if let Some(k) = doc.keys().find(|k| !SUITE_KEYS.contains(k)) {
            return Err(Error::Parse(format!("unknown configuration key '{k}'")));
        }
        let d = Self::default();
        let budget = doc.parse_opt("budget")?.unwrap_or(d.budget);
        let seed = doc.parse_opt("seed")?.unwrap_or(d.seed);
        let mut base_doc = doc.clone();
        base_doc.set("budget", budget);
        base_doc.set("seed", seed);
        let base = BoConfig::from_kv(&base_doc)?;
        let mut strategies = match doc.get("suite").map(str::trim) {
            None | Some("default") => default_strategies(&base),
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_label(s, &base))
                .collect::<Result<_>>()?,
        };
        if doc.parse_opt("random_baseline")?.unwrap_or(true) && !strategies.contains(&StrategySpec::Random) {
            strategies.push(StrategySpec::Random);
        }
        let suite = Self {
            strategies,
            runs: doc.parse_opt("runs")?.unwrap_or(d.runs),
            budget,
            seed,
            surface_noise: doc.parse_opt("surface.noise_std")?.unwrap_or(d.surface_noise),
            obs_noise: doc.parse_opt("obs.noise_std")?.unwrap_or(d.obs_noise),
            v_star: doc.parse_opt("v_star")?.unwrap_or(d.v_star),
            grid_file: doc.get("grid.file").map(|p| base_dir.join(p)),
            observed_cells: doc.parse_opt("grid.observed")?.unwrap_or(d.observed_cells),
            mask_seed: doc.parse_opt("grid.mask_seed")?.unwrap_or(d.mask_seed),
            threads: doc.parse_opt("threads")?,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.budget == 0 {
            return Err(Error::Domain("runs and budget must be positive".into()));
        }
        if !(self.surface_noise >= 0.0 && self.obs_noise >= 0.0) {
            return Err(Error::Domain("noise levels must be non-negative".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for s in &self.strategies {
            if let StrategySpec::Bo(c) = s {
                c.validate()?;
                if c.budget != self.budget {
                    return Err(Error::Domain(format!("{} has budget {} but the suite uses {}", c.label(), c.budget, self.budget)));
                }
            }
            if !labels.insert(s.label()) {
                return Err(Error::Domain(format!("configuration {} listed twice", s.label())));
            }
        }
        Ok(())
    }

    pub fn source_grid(&self) -> Result<GridData> {
        match &self.grid_file {
            Some(p) => GridData::from_csv(&fs::read_to_string(p)?, default_wavelength_axis(), default_duty_axis()),
            None => plant_source_grid(&PlantSpec::default(), self.v_star, self.observed_cells, self.mask_seed),
        }
    }

    pub fn smoothed_grid(&self) -> Result<CompleteGrid> {
        Ok(smooth(&fill_missing(&self.source_grid()?)?))
    }

    fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("suite serialises")))
    }
}

/// Surface for benchmark run `run`, shared by every strategy.
pub fn run_surface(smoothed: &CompleteGrid, suite: &BenchmarkSuite, run: usize) -> Result<(CostSurface, Vec<u64>)> {
    let s = seed::derive(suite.seed, &[seed::stream::SURFACE, run as u64]);
    build_surface_resampling(smoothed, suite.surface_noise, s, SURFACE_ATTEMPTS)
}

/// One line of a per-run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub iteration: usize,
    pub theta: ControllerParams,
    pub observed_cost: f64,
    pub incumbent_theta: ControllerParams,
    pub regret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyperparams>,
}

/// Runs one strategy on one surface; observation noise comes from
/// `obs_seed`, shared across strategies.
pub fn run_strategy<S: SearchStrategy + ?Sized>(
    strategy: &mut S,
    surface: &CostSurface,
    budget: usize,
    obs_noise: f64,
    obs_seed: u64,
) -> Result<Vec<BenchRecord>> {
    let mut rng = seed::rng(obs_seed, &[seed::stream::OBS_NOISE]);
    let noise = Normal::new(0.0, obs_noise).map_err(|e| Error::Domain(e.to_string()))?;
    let mut out = Vec::with_capacity(budget);
    for iteration in 1..=budget {
        let theta = strategy.ask()?;
        let eps = noise.sample(&mut rng);
        let observed_cost = surface.eval(&theta)? + eps;
        strategy.tell(theta, observed_cost)?;
        let incumbent_theta = strategy.recommend()?;
        out.push(BenchRecord {
            iteration,
            theta,
            observed_cost,
            incumbent_theta,
            regret: normalized_regret(surface, &incumbent_theta)?,
            hyper: strategy.hyper().cloned(),
        });
    }
    Ok(out)
}

fn run_spec(spec: &StrategySpec, suite: &BenchmarkSuite, surface: &CostSurface, run: usize) -> Result<Vec<BenchRecord>> {
    let obs_seed = seed::derive(suite.seed, &[run as u64]);
    match spec {
        StrategySpec::Bo(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = seed::derive(suite.seed, &[run as u64, 1]);
            run_strategy(&mut BoState::new(cfg)?, surface, suite.budget, suite.obs_noise, obs_seed)
        }
        StrategySpec::Random => {
            let mut rs = RandomSearch::new(seed::derive(suite.seed, &[run as u64, 2]));
            run_strategy(&mut rs, surface, suite.budget, suite.obs_noise, obs_seed)
        }
    }
}

/// Nearest-rank percentile of an ascending slice, `p` in (0, 1].
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub label: String,
    pub spec: StrategySpec,
    pub runs: usize,
    pub median: f64,
    pub p95: f64,
    /// Per-iteration median and 95-percentile regret.
    pub curve_median: Vec<f64>,
    pub curve_p95: Vec<f64>,
    /// Final regret per run index.
    pub final_regrets: Vec<f64>,
}

impl ConfigSummary {
    pub fn from_runs(spec: StrategySpec, regrets: &[Vec<f64>]) -> Self {
        let iters = regrets.iter().map(Vec::len).min().unwrap_or(0);
        let column = |k: usize| {
            let mut v: Vec<f64> = regrets.iter().map(|r| r[k]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let curve_median = (0..iters).map(|k| nearest_rank(&column(k), 0.5)).collect::<Vec<_>>();
        let curve_p95 = (0..iters).map(|k| nearest_rank(&column(k), 0.95)).collect::<Vec<_>>();
        Self {
            label: spec.label(),
            spec,
            runs: regrets.len(),
            median: curve_median.last().copied().unwrap_or(f64::NAN),
            p95: curve_p95.last().copied().unwrap_or(f64::NAN),
            curve_median,
            curve_p95,
            final_regrets: regrets.iter().map(|r| r.last().copied().unwrap_or(f64::NAN)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub configs: Vec<ConfigSummary>,
    /// `(run, seed)` of resampled degenerate surfaces.
    pub excluded_surfaces: Vec<(usize, u64)>,
    pub surface_hashes: Vec<String>,
}

impl BenchmarkReport {
    pub fn get(&self, label: &str) -> Option<&ConfigSummary> {
        self.configs.iter().find(|c| c.label == label)
    }

    /// SE versus Matérn-family medians under EI, optimistic variance,
    /// fixed hyperparameters. Returns one line per comparison.
    pub fn ordering_check(&self) -> Vec<String> {
        let label = |k: KernelKind| format!("{k}-EI-sf1-fixed");
        let Some(se) = self.get(&label(KernelKind::Se)) else {
            return Vec::new();
        };
        [KernelKind::M32, KernelKind::M52, KernelKind::TwoMat, KernelKind::Rq]
            .into_iter()
            .filter_map(|k| self.get(&label(k)))
            .map(|c| {
                let status = if se.median >= c.median { "ok" } else { "deviation" };
                format!("{}: SE median {} vs {} median {}", status, pct(se.median), c.label, pct(c.median))
            })
            .collect()
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// `"median (95-pct)"` in percent with one decimal.
pub fn format_cell(median: f64, p95: f64) -> String {
    format!("{} ({})", pct(median), pct(p95))
}

pub const REPORT_CSV_HEADER: &str = "config,kernel,acquisition,signal_variance,hyper_mode,runs,median_regret,p95_regret";

pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for c in &report.configs {
        let (k, a, v, m) = match &c.spec {
            StrategySpec::Bo(b) => (b.kernel.to_string(), b.acq.kind.to_string(), b.variance.to_string(), b.hyper_mode.to_string()),
            StrategySpec::Random => ("-".into(), "random".into(), "-".into(), "-".into()),
        };
        writeln!(out, "{},{k},{a},{v},{m},{},{:?},{:?}", c.label, c.runs, c.median, c.p95).unwrap();
    }
    out
}

/// Parses `report.csv` back into `(label, runs, median, p95)` rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::Parse("unexpected report header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 8 {
                return Err(Error::Parse(format!("bad report row '{l}'")));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
            let runs = cols[5].parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?;
            Ok((cols[0].to_string(), runs, f(cols[6])?, f(cols[7])?))
        })
        .collect()
}

pub fn curves_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("config,iteration,median_regret,p95_regret\n");
    for c in &report.configs {
        for (k, (m, p)) in c.curve_median.iter().zip(&c.curve_p95).enumerate() {
            writeln!(out, "{},{},{m:?},{p:?}", c.label, k + 1).unwrap();
        }
    }
    out
}

/// Aligned text table: kernels by Table I columns, then any other
/// configurations, the random baseline, and the ordering check.
pub fn report_table(report: &BenchmarkReport) -> String {
    let headers = [
        "EI sf1 fixed",
        "EI sf1 learned",
        "EI sf2 fixed",
        "EI sf2 learned",
        "PI fixed",
        "PI learned",
        "ES fixed",
    ];
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut placed = std::collections::BTreeSet::new();
    for kernel in KernelKind::ALL {
        let mut row = vec![kernel.to_string()];
        let mut any = false;
        for (acq, variance, mode) in TABLE_COLUMNS {
            let hit = report.configs.iter().find(|c| {
                matches!(&c.spec, StrategySpec::Bo(b) if b.kernel == kernel && b.acq.kind == acq && b.variance == variance && b.hyper_mode == mode)
            });
            match hit {
                Some(c) => {
                    any = true;
                    placed.insert(c.label.clone());
                    row.push(format_cell(c.median, c.p95));
                }
                None => row.push("-".into()),
            }
        }
        if any {
            rows.push(row);
        }
    }
    let mut table = vec![std::iter::once("kernel".to_string()).chain(headers.iter().map(|h| h.to_string())).collect::<Vec<_>>()];
    table.extend(rows);
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("Normalized regret (%) after the final iteration: median (95-percentile)\n\n");
    for (n, r) in table.iter().enumerate() {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
        if n == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("-+-")).unwrap();
        }
    }
    let others: Vec<&ConfigSummary> = report.configs.iter().filter(|c| !placed.contains(&c.label)).collect();
    if !others.is_empty() {
        out.push('\n');
        for c in others {
            let name = if c.spec == StrategySpec::Random { "random search".to_string() } else { c.label.clone() };
            writeln!(out, "{name}: {}", format_cell(c.median, c.p95)).unwrap();
        }
    }
    let check = report.ordering_check();
    if !check.is_empty() {
        out.push_str("\nKernel ordering (EI sf1 fixed):\n");
        for line in check {
            writeln!(out, "  {line}").unwrap();
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    crate_version: String,
    suite_fingerprint: String,
    suite: BenchmarkSuite,
    source_grid_hash: String,
    surface_hashes: Vec<String>,
    excluded_surfaces: Vec<(usize, u64)>,
    decisions: BTreeMap<String, String>,
}

fn decisions() -> BTreeMap<String, String> {
    [
        ("incumbent", "posterior mean minimiser (grid + Nelder-Mead)"),
        ("percentile", "nearest rank"),
        ("observation_noise", "fresh Gaussian noise per evaluation, shared per run index"),
        ("surface", "fill, 3x3 mean filter, seeded noise, natural bicubic spline, floor 1e-3"),
        ("budget", "includes the initial controller"),
        ("random_baseline", "uniform in the box, recommends the best observation"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Domain(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn run_log_path(out: &Path, label: &str, run: usize) -> PathBuf {
    out.join("runs").join(format!("runlog-{label}-{run:03}.jsonl"))
}

fn read_complete_log(path: &Path, budget: usize) -> Option<Vec<BenchRecord>> {
    let text = fs::read_to_string(path).ok()?;
    let recs: Vec<BenchRecord> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    (recs.len() == budget && recs.iter().enumerate().all(|(i, r)| r.iteration == i + 1)).then_some(recs)
}

/// Runs the suite in memory without touching disk.
pub fn run_benchmark(suite: &BenchmarkSuite) -> Result<BenchmarkReport> {
    execute(suite, None)
}

/// Runs the suite, writing run logs and reports into `out`. Complete run
/// logs already present are reused.
pub fn run_benchmark_to_dir(suite: &BenchmarkSuite, out: &Path) -> Result<BenchmarkReport> {
    fs::create_dir_all(out.join("runs"))?;
    let manifest_path = out.join("manifest.json");
    if let Ok(text) = fs::read_to_string(&manifest_path) {
        let old: Manifest = serde_json::from_str(&text)?;
        if old.suite_fingerprint != suite.fingerprint() {
            return Err(Error::State(format!(
                "{} holds results of a different suite; use a fresh output directory",
                out.display()
            )));
        }
    }
    execute(suite, Some(out))
}

fn execute(suite: &BenchmarkSuite, out: Option<&Path>) -> Result<BenchmarkReport> {
    suite.validate()?;
    let source = suite.source_grid()?;
    let smoothed = smooth(&fill_missing(&source)?);
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = suite.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::Domain(e.to_string()))?
    };
    pool.install(|| -> Result<BenchmarkReport> {
        let surfaces: Vec<(CostSurface, Vec<u64>)> = (0..suite.runs)
            .into_par_iter()
            .map(|r| run_surface(&smoothed, suite, r))
            .collect::<Result<_>>()?;
        let excluded_surfaces: Vec<(usize, u64)> = surfaces
            .iter()
            .enumerate()
            .flat_map(|(r, (_, ex))| ex.iter().map(move |&s| (r, s)))
            .collect();
        let surface_hashes: Vec<String> = surfaces.iter().map(|s| s.0.surface_hash.clone()).collect();

        if let Some(out) = out {
            let manifest = Manifest {
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                suite_fingerprint: suite.fingerprint(),
                suite: suite.clone(),
                source_grid_hash: source.hash(),
                surface_hashes: surface_hashes.clone(),
                excluded_surfaces: excluded_surfaces.clone(),
                decisions: decisions(),
            };
            write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        }

        let jobs: Vec<(usize, usize)> = (0..suite.strategies.len())
            .flat_map(|c| (0..suite.runs).map(move |r| (c, r)))
            .collect();
        let regrets: Vec<Vec<f64>> = jobs
            .par_iter()
            .map(|&(c, r)| -> Result<Vec<f64>> {
                let spec = &suite.strategies[c];
                let surface = &surfaces[r].0;
                let path = out.map(|o| run_log_path(o, &spec.label(), r));
                if let Some(recs) = path.as_deref().and_then(|p| read_complete_log(p, suite.budget)) {
                    return recs.iter().map(|rec| normalized_regret(surface, &rec.incumbent_theta)).collect();
                }
                let recs = run_spec(spec, suite, surface, r)?;
                if let Some(p) = path {
                    let mut buf = Vec::new();
                    for rec in &recs {
                        serde_json::to_writer(&mut buf, rec)?;
                        buf.push(b'\n');
                    }
                    write_atomic(&p, &buf)?;
                }
                Ok(recs.iter().map(|r| r.regret).collect())
            })
            .collect::<Result<_>>()?;

        let configs = suite
            .strategies
            .iter()
            .enumerate()
            .map(|(c, spec)| ConfigSummary::from_runs(spec.clone(), &regrets[c * suite.runs..(c + 1) * suite.runs]))
            .collect();
        let report = BenchmarkReport {
            configs,
            excluded_surfaces,
            surface_hashes,
        };
        if let Some(out) = out {
            write_atomic(&out.join("report.csv"), report_csv(&report).as_bytes())?;
            write_atomic(&out.join("report.txt"), report_table(&report).as_bytes())?;
            write_atomic(&out.join("curves.csv"), curves_csv(&report).as_bytes())?;
        }
        Ok(report)
    })
}

/// Outcome of optimising the simulated plant through ask/tell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopOutcome {
    pub initial_speed: f64,
    pub final_theta: ControllerParams,
    pub final_speed: f64,
    pub optimum_theta: ControllerParams,
    pub optimum_speed: f64,
    pub measured_speeds: Vec<f64>,
}

impl ClosedLoopOutcome {
    pub fn fraction_of_optimum(&self) -> f64 {
        self.final_speed / self.optimum_speed
    }
}

/// Drives a [`BoState`] with traces simulated from `plant`: each
/// evaluation simulates a trace, fits its speed, and reports
/// `|v_star − v_m|` as the cost.
pub fn run_closed_loop(plant: &PlantSpec, cfg: BoConfig, v_star: f64, duration_s: f64) -> Result<ClosedLoopOutcome> {
    let trace_seed = cfg.seed;
    let mut state = BoState::new(cfg)?;
    let mut measured = Vec::new();
    while !state.is_finished() {
        let theta = state.ask()?;
        let k = state.evaluations() as u64 + 1;
        let trace = plant.simulate_trace(&theta, duration_s, seed::derive(trace_seed, &[seed::stream::PLANT, k]))?;
        let fit = fit_movement(&trace, DEFAULT_FREQUENCY_HZ, DEFAULT_T_CUT_S)?;
        measured.push(fit.v_m);
        state.tell(theta, cost_from_speed(fit.v_m, v_star))?;
    }
    let (final_theta, _) = state.incumbent()?;
    let (optimum_theta, optimum_speed) = plant.optimum();
    Ok(ClosedLoopOutcome {
        initial_speed: plant.speed(&state.config().initial)?,
        final_theta,
        final_speed: plant.speed(&final_theta)?,
        optimum_theta,
        optimum_speed,
        measured_speeds: measured,
    })
}
