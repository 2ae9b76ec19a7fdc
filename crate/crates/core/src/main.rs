use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use microgait::bo::{write_run_log, BoConfig, BoState};
use microgait::config::KvDoc;
use microgait::harness::{report_table, run_benchmark_to_dir, write_atomic, BenchmarkSuite};
use microgait::sim::{LightPattern, PlantSpec};
use microgait::velocity::{
    cost_from_speed, fit_movement, TrackingTrace, DEFAULT_FREQUENCY_HZ, DEFAULT_T_CUT_S, DEFAULT_V_STAR,
};
use microgait::{ControllerParams, Error, Result};

/// Bayesian optimisation of light-field gait controllers.
#[derive(Parser)]
#[command(name = "microgait", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a regret benchmark suite.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate locomotion speed from a tracking trace CSV.
    FitVelocity {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FREQUENCY_HZ)]
        f_hz: f64,
        #[arg(long, default_value_t = DEFAULT_T_CUT_S)]
        t_cut: f64,
        #[arg(long, default_value_t = DEFAULT_V_STAR)]
        v_star: f64,
    },
    /// Propose the next controller; creates the state file if missing.
    Ask {
        #[arg(long)]
        state: PathBuf,
        /// Optimiser configuration used when creating a new state.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report the measured cost of the last proposed controller.
    Tell {
        #[arg(long)]
        state: PathBuf,
        /// Controller as `<wavelength_um>,<duty_pct>`.
        #[arg(long)]
        theta: String,
        #[arg(long, allow_hyphen_values = true)]
        cost: f64,
    },
    /// Print the current incumbent and progress.
    Status {
        #[arg(long)]
        state: PathBuf,
        /// Also write the run log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one light pattern frame.
    Pattern {
        #[arg(long)]
        wavelength_px: f64,
        #[arg(long)]
        duty_pct: f64,
        #[arg(long)]
        freq_hz: f64,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// Packed bitmap output.
        #[arg(long)]
        out: PathBuf,
        /// Optional PGM text export.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long, default_value_t = microgait::sim::DEFAULT_FRAME_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = microgait::sim::DEFAULT_FRAME_HEIGHT)]
        height: usize,
    },
    /// Simulate a tracking trace from the default plant.
    Simulate {
        #[arg(long)]
        theta: String,
        #[arg(long, default_value_t = 20.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Bench { config, out } => {
            let doc = KvDoc::parse(&fs::read_to_string(&config)?)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let suite = BenchmarkSuite::from_kv(&doc, base)?;
            let report = run_benchmark_to_dir(&suite, &out)?;
            print!("{}", report_table(&report));
        }
        Command::FitVelocity { trace, f_hz, t_cut, v_star } => {
            let tr = TrackingTrace::from_csv(&fs::read_to_string(&trace)?)?;
            let fit = fit_movement(&tr, f_hz, t_cut)?;
            let mut doc = serde_json::to_value(&fit)?;
            doc["v_star"] = json!(v_star);
            doc["cost"] = json!(cost_from_speed(fit.v_m, v_star));
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::Ask { state, config } => {
            let _lock = lock(&state)?;
            let mut s = if state.exists() {
                load_state(&state)?
            } else {
                let cfg = match config {
                    Some(p) => BoConfig::from_kv(&KvDoc::parse(&fs::read_to_string(p)?)?)?,
                    None => BoConfig::default(),
                };
                BoState::new(cfg)?
            };
            let theta = s.ask()?;
            save_state(&state, &s)?;
            println!("{theta}");
        }
        Command::Tell { state, theta, cost } => {
            let _lock = lock(&state)?;
            let mut s = load_state(&state)?;
            let theta = ControllerParams::parse(&theta)?;
            let rec = s.tell(theta, cost)?.clone();
            save_state(&state, &s)?;
            println!("{}", serde_json::to_string(&rec)?);
        }
        Command::Status { state, log } => {
            let s = load_state(&state)?;
            if let Some(p) = log {
                let mut buf = Vec::new();
                write_run_log(&mut buf, s.log())?;
                write_atomic(&p, &buf)?;
            }
            let inc = s.incumbent().ok();
            let doc = json!({
                "evaluations": s.evaluations(),
                "budget": s.config().budget,
                "pending": s.pending(),
                "incumbent_theta": inc.map(|i| i.0),
                "incumbent_mean": inc.map(|i| i.1),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::Pattern {
            wavelength_px,
            duty_pct,
            freq_hz,
            t,
            out,
            pgm,
            width,
            height,
        } => {
            let img = LightPattern::new(wavelength_px, duty_pct / 100.0, freq_hz)?
                .with_frame(width, height)?
                .render(t);
            write_atomic(&out, &img.to_packed())?;
            if let Some(p) = pgm {
                write_atomic(&p, img.to_pgm().as_bytes())?;
            }
        }
        Command::Simulate { theta, duration, seed, out } => {
            let theta = ControllerParams::parse(&theta)?;
            let trace = PlantSpec::default().simulate_trace(&theta, duration, seed)?;
            write_atomic(&out, trace.to_csv().as_bytes())?;
        }
    }
    Ok(())
}

/// Advisory exclusive lock on a sibling `.lock` file.
fn lock(state: &Path) -> Result<File> {
    let mut name = state.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    let path = state.with_file_name(name);
    let f = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
    f.try_lock().map_err(|e| Error::State(format!("state file is in use: {e}")))?;
    Ok(f)
}

fn load_state(path: &Path) -> Result<BoState> {
    let s: BoState = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::State(format!("malformed state file {}: {e}", path.display())))?;
    s.validate()?;
    Ok(s)
}

fn save_state(path: &Path, s: &BoState) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(s)?)
}
