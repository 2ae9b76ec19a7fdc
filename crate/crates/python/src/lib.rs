//! Python bindings for the microgait optimiser, velocity estimator,
//! light pattern renderer, simulated plant and benchmark surfaces.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use microgait::acquisition::{expected_improvement as ei, probability_of_improvement as pi, AcqKind};
use microgait::benchgen::{normalized_regret, CostSurface as RsSurface};
use microgait::bo::{BoConfig, BoState, HyperMode, SignalVariance};
use microgait::gp::{Dataset, GpModel, Hyperparams, KernelKind, Posterior};
use microgait::harness::{parse_label, run_benchmark, run_surface, BenchmarkSuite, DEFAULT_BENCH_V_STAR};
use microgait::sim::{LightPattern, PlantSpec};
use microgait::velocity::{self, TrackingTrace};
use microgait::{ControllerParams, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Protocol(_) | Error::Budget(_) | Error::State(_) | Error::Conditioning(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn theta(wavelength_um: f64, duty_pct: f64) -> PyResult<ControllerParams> {
    ControllerParams::new(wavelength_um, duty_pct).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Ask/tell Bayesian optimiser over (wavelength µm, duty cycle %).
#[pyclass(module = "microgait_py")]
struct Optimizer {
    state: BoState,
}

#[pymethods]
impl Optimizer {
    #[new]
    #[pyo3(signature = (kernel = "2Mat", acquisition = "EI", signal_variance = "optimistic", hyper_mode = "learned", budget = 20, seed = 0))]
    fn new(kernel: &str, acquisition: &str, signal_variance: &str, hyper_mode: &str, budget: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = BoConfig::new(
            parse::<KernelKind>(kernel)?,
            parse::<AcqKind>(acquisition)?,
            parse::<SignalVariance>(signal_variance)?,
            parse::<HyperMode>(hyper_mode)?,
        );
        cfg.budget = budget;
        cfg.seed = seed;
        Ok(Self {
            state: BoState::new(cfg).map_err(to_py)?,
        })
    }

    /// Restores an optimiser from its JSON state.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let state: BoState = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        state.validate().map_err(to_py)?;
        Ok(Self { state })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn ask(&mut self) -> PyResult<(f64, f64)> {
        let t = self.state.ask().map_err(to_py)?;
        Ok((t.wavelength_um, t.duty_cycle_pct))
    }

    fn tell(&mut self, wavelength_um: f64, duty_pct: f64, cost: f64) -> PyResult<()> {
        self.state.tell(theta(wavelength_um, duty_pct)?, cost).map_err(to_py)?;
        Ok(())
    }

    /// `(wavelength_um, duty_pct, posterior_mean)` of the incumbent.
    fn incumbent(&self) -> PyResult<(f64, f64, f64)> {
        let (t, m) = self.state.incumbent().map_err(to_py)?;
        Ok((t.wavelength_um, t.duty_cycle_pct, m))
    }

    #[getter]
    fn evaluations(&self) -> usize {
        self.state.evaluations()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.state.is_finished()
    }

    /// Run log as JSON lines.
    fn log_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        microgait::bo::write_run_log(&mut buf, self.state.log()).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Gaussian process with a constant mean and fixed hyperparameters.
#[pyclass(module = "microgait_py")]
struct GaussianProcess {
    hyper: Hyperparams,
    posterior: Posterior,
}

#[pymethods]
impl GaussianProcess {
    #[new]
    #[pyo3(signature = (kernel = "SE", signal_std = 1.5, noise_std = 0.1, mean_const = 2.0))]
    fn new(kernel: &str, signal_std: f64, noise_std: f64, mean_const: f64) -> PyResult<Self> {
        let hyper = Hyperparams::new(parse(kernel)?, signal_std, noise_std, mean_const);
        let posterior = GpModel::new(hyper.clone())
            .and_then(|m| m.condition(&Dataset::new()))
            .map_err(to_py)?;
        Ok(Self { hyper, posterior })
    }

    /// Conditions on `points = [(wavelength_um, duty_pct), ...]`.
    fn fit(&mut self, points: Vec<(f64, f64)>, costs: Vec<f64>) -> PyResult<()> {
        if points.len() != costs.len() {
            return Err(PyValueError::new_err("points and costs differ in length"));
        }
        let mut data = Dataset::new();
        for ((w, d), c) in points.into_iter().zip(costs) {
            data.push(theta(w, d)?, c).map_err(to_py)?;
        }
        self.posterior = GpModel::new(self.hyper.clone())
            .and_then(|m| m.condition(&data))
            .map_err(to_py)?;
        Ok(())
    }

    /// `(mean, variance)` of the latent cost.
    fn predict(&self, wavelength_um: f64, duty_pct: f64) -> PyResult<(f64, f64)> {
        let s = self.posterior.predict(&theta(wavelength_um, duty_pct)?);
        Ok((s.mean, s.variance))
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.posterior.log_marginal_likelihood()
    }
}

#[pyfunction]
fn expected_improvement(mean: f64, variance: f64, threshold: f64) -> f64 {
    ei(mean, variance, threshold)
}

#[pyfunction]
fn probability_of_improvement(mean: f64, variance: f64, threshold: f64) -> f64 {
    pi(mean, variance, threshold)
}

#[pyfunction]
fn cost_from_speed(v_m: f64, v_star: f64) -> f64 {
    velocity::cost_from_speed(v_m, v_star)
}

/// Fits trend plus sinusoid to a position trace; returns a dict.
#[pyfunction]
#[pyo3(signature = (t_s, x_um, f_hz = 1.0, t_cut = 2.0, bodylength_um = 300.0, frame_rate_hz = 10.0))]
fn fit_movement<'py>(
    py: Python<'py>,
    t_s: Vec<f64>,
    x_um: Vec<f64>,
    f_hz: f64,
    t_cut: f64,
    bodylength_um: f64,
    frame_rate_hz: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let trace = TrackingTrace::new(t_s, x_um, frame_rate_hz, bodylength_um).map_err(to_py)?;
    let fit = velocity::fit_movement(&trace, f_hz, t_cut).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("v_m", fit.v_m)?;
    d.set_item("offset_b", fit.offset_b)?;
    d.set_item("amplitude_a", fit.amplitude_a)?;
    d.set_item("phase_phi", fit.phase_phi)?;
    d.set_item("residual_rms", fit.residual_rms)?;
    d.set_item("samples_used", fit.samples_used)?;
    Ok(d)
}

/// Packed bitmap (8-byte header, MSB-first bits) of one pattern frame.
#[pyfunction]
#[pyo3(signature = (wavelength_px, duty_pct, freq_hz, t = 0.0, width = 1024, height = 768))]
fn render_pattern<'py>(
    py: Python<'py>,
    wavelength_px: f64,
    duty_pct: f64,
    freq_hz: f64,
    t: f64,
    width: usize,
    height: usize,
) -> PyResult<Bound<'py, PyBytes>> {
    let img = LightPattern::new(wavelength_px, duty_pct / 100.0, freq_hz)
        .and_then(|p| p.with_frame(width, height))
        .map_err(to_py)?
        .render(t);
    Ok(PyBytes::new(py, &img.to_packed()))
}

/// The default simulated microrobot.
#[pyclass(module = "microgait_py")]
struct Plant {
    spec: PlantSpec,
}

#[pymethods]
impl Plant {
    #[new]
    fn new() -> Self {
        Self {
            spec: PlantSpec::default(),
        }
    }

    fn speed(&self, wavelength_um: f64, duty_pct: f64) -> PyResult<f64> {
        self.spec.speed(&theta(wavelength_um, duty_pct)?).map_err(to_py)
    }

    /// `(wavelength_um, duty_pct, speed)` of the fastest controller.
    fn optimum(&self) -> (f64, f64, f64) {
        let (t, v) = self.spec.optimum();
        (t.wavelength_um, t.duty_cycle_pct, v)
    }

    /// `(t_s, x_um)` sampled at the plant frame rate.
    #[pyo3(signature = (wavelength_um, duty_pct, duration_s = 20.0, seed = 0))]
    fn simulate_trace(&self, wavelength_um: f64, duty_pct: f64, duration_s: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let tr = self
            .spec
            .simulate_trace(&theta(wavelength_um, duty_pct)?, duration_s, seed)
            .map_err(to_py)?;
        Ok((tr.t_s, tr.x_um))
    }
}

/// A semi-synthetic benchmark cost surface.
#[pyclass(module = "microgait_py")]
struct CostSurface {
    inner: RsSurface,
}

#[pymethods]
impl CostSurface {
    /// Surface `run` of the default benchmark suite with master `seed`.
    #[new]
    #[pyo3(signature = (run = 0, seed = 0, v_star = DEFAULT_BENCH_V_STAR))]
    fn new(run: usize, seed: u64, v_star: f64) -> PyResult<Self> {
        let suite = BenchmarkSuite {
            seed,
            v_star,
            ..BenchmarkSuite::default()
        };
        let smoothed = suite.smoothed_grid().map_err(to_py)?;
        let (inner, _) = run_surface(&smoothed, &suite, run).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn eval(&self, wavelength_um: f64, duty_pct: f64) -> PyResult<f64> {
        self.inner.eval(&theta(wavelength_um, duty_pct)?).map_err(to_py)
    }

    /// `(wavelength_um, duty_pct, cost)` of the surface minimum.
    fn optimum(&self) -> (f64, f64, f64) {
        let t = self.inner.theta_opt;
        (t.wavelength_um, t.duty_cycle_pct, self.inner.j_opt)
    }

    fn regret(&self, wavelength_um: f64, duty_pct: f64) -> PyResult<f64> {
        normalized_regret(&self.inner, &theta(wavelength_um, duty_pct)?).map_err(to_py)
    }

    #[getter]
    fn surface_hash(&self) -> String {
        self.inner.surface_hash.clone()
    }
}

/// Runs configurations such as `"2Mat-EI-sf1-learned"` or `"random"`;
/// returns `[(label, median_regret, p95_regret), ...]`.
#[pyfunction]
#[pyo3(signature = (labels, runs = 200, budget = 20, seed = 0))]
fn benchmark(py: Python<'_>, labels: Vec<String>, runs: usize, budget: usize, seed: u64) -> PyResult<Vec<(String, f64, f64)>> {
    let base = BoConfig {
        budget,
        ..BoConfig::default()
    };
    let strategies = labels.iter().map(|l| parse_label(l, &base)).collect::<Result<_, _>>().map_err(to_py)?;
    let suite = BenchmarkSuite {
        strategies,
        runs,
        budget,
        seed,
        ..BenchmarkSuite::default()
    };
    let report = py.detach(|| run_benchmark(&suite)).map_err(to_py)?;
    Ok(report.configs.into_iter().map(|c| (c.label, c.median, c.p95)).collect())
}

#[pymodule]
fn microgait_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Optimizer>()?;
    m.add_class::<GaussianProcess>()?;
    m.add_class::<Plant>()?;
    m.add_class::<CostSurface>()?;
    m.add_function(wrap_pyfunction!(expected_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(probability_of_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(cost_from_speed, m)?)?;
    m.add_function(wrap_pyfunction!(fit_movement, m)?)?;
    m.add_function(wrap_pyfunction!(render_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    Ok(())
}
