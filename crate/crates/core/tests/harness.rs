use std::fs;

use microgait::benchgen::CostSurface;
use microgait::bo::{BoConfig, BoState};
use microgait::harness::{
    curves_csv, parse_label, parse_report_csv, report_csv, report_table, run_benchmark, run_benchmark_to_dir,
    run_strategy, run_surface, BenchmarkSuite, SearchStrategy, StrategySpec,
};
use microgait::{ControllerParams, Error, Result};

fn suite(labels: &[&str], runs: usize, budget: usize) -> BenchmarkSuite {
    let base = BoConfig {
        budget,
        ..BoConfig::default()
    };
    BenchmarkSuite {
        strategies: labels.iter().map(|l| parse_label(l, &base).unwrap()).collect(),
        runs,
        budget,
        seed: 99,
        ..BenchmarkSuite::default()
    }
}

/// Optimiser whose second proposal is the known surface optimum.
struct Oracle {
    state: BoState,
    target: ControllerParams,
}

impl SearchStrategy for Oracle {
    fn ask(&mut self) -> Result<ControllerParams> {
        if self.state.evaluations() == 1 {
            self.state.ask_override(self.target)
        } else {
            self.state.ask()
        }
    }

    fn tell(&mut self, theta: ControllerParams, cost: f64) -> Result<()> {
        self.state.tell(theta, cost).map(|_| ())
    }

    fn recommend(&self) -> Result<ControllerParams> {
        self.state.incumbent().map(|i| i.0)
    }
}

#[test]
fn oracle_proposal_drives_regret_to_zero() {
    let s = suite(&["M52-EI-sf1-fixed"], 25, 2);
    let smoothed = s.smoothed_grid().unwrap();
    let mut finals: Vec<f64> = (0..s.runs)
        .map(|r| {
            let (surface, _) = run_surface(&smoothed, &s, r).unwrap();
            let mut o = Oracle {
                state: BoState::new(BoConfig {
                    budget: 2,
                    ..BoConfig::default()
                })
                .unwrap(),
                target: surface.theta_opt,
            };
            run_strategy(&mut o, &surface, 2, s.obs_noise, r as u64).unwrap()[1].regret
        })
        .collect();
    finals.sort_by(f64::total_cmp);
    let median = finals[finals.len().div_ceil(2) - 1];
    assert!(median < 1e-3, "median regret {median}");
}

#[test]
fn strategies_share_surfaces_and_noise() {
    let a = run_benchmark(&suite(&["SE-EI-sf1-fixed", "random"], 4, 3)).unwrap();
    let b = run_benchmark(&suite(&["M32-PI-sf2-learned"], 4, 3)).unwrap();
    assert_eq!(a.surface_hashes, b.surface_hashes);
    assert_eq!(a.surface_hashes.len(), 4);

    let s = suite(&["SE-EI-sf1-fixed"], 1, 1);
    let (surface, _) = run_surface(&s.smoothed_grid().unwrap(), &s, 0).unwrap();
    let observe = |cfg: &str| {
        let StrategySpec::Bo(c) = parse_label(cfg, &BoConfig::default()).unwrap() else { unreachable!() };
        run_strategy(&mut BoState::new(c).unwrap(), &surface, 1, 0.1, 7).unwrap()[0].observed_cost
    };
    assert_eq!(observe("SE-EI-sf1-fixed"), observe("2Mat-PI-sf2-learned"));
}

#[test]
fn report_csv_round_trips_at_full_precision() {
    let report = run_benchmark(&suite(&["RQ-EI-sf1-fixed", "random"], 5, 4)).unwrap();
    let parsed = parse_report_csv(&report_csv(&report)).unwrap();
    assert_eq!(parsed.len(), report.configs.len());
    for (row, cfg) in parsed.iter().zip(&report.configs) {
        assert_eq!(row.0, cfg.label);
        assert_eq!(row.1, cfg.runs);
        assert_eq!(row.2.to_bits(), cfg.median.to_bits());
        assert_eq!(row.3.to_bits(), cfg.p95.to_bits());
    }
    let curves = curves_csv(&report);
    assert_eq!(curves.lines().count(), 1 + 2 * 4);
    assert!(report_table(&report).contains("random"));
}

#[test]
fn results_directory_resumes_and_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let s = suite(&["M52-EI-sf1-fixed", "random"], 3, 4);
    let first = run_benchmark_to_dir(&s, dir.path()).unwrap();
    assert_eq!(first, run_benchmark(&s).unwrap());

    let runs = dir.path().join("runs");
    let mut logs: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).collect();
    logs.sort();
    assert_eq!(logs.len(), 6);
    let csv = fs::read(dir.path().join("report.csv")).unwrap();
    let kept = fs::read(&logs[1]).unwrap();

    fs::remove_file(&logs[0]).unwrap();
    fs::write(&logs[2], b"{\"truncated\":").unwrap();
    let second = run_benchmark_to_dir(&s, dir.path()).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.path().join("report.csv")).unwrap(), csv);
    assert_eq!(fs::read(&logs[1]).unwrap(), kept);
    for name in ["manifest.json", "report.txt", "curves.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["surface_hashes"].as_array().unwrap().len(), 3);

    let other = suite(&["SE-EI-sf1-fixed"], 3, 4);
    assert!(matches!(run_benchmark_to_dir(&other, dir.path()), Err(Error::State(_))));
}

#[test]
fn run_logs_hold_every_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let s = suite(&["SE-PI-sf1-learned"], 1, 5);
    run_benchmark_to_dir(&s, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("runs/runlog-SE-PI-sf1-learned-000.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["iteration"], i + 1);
        assert!(r["hyper"].is_object());
        assert!(r["regret"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn regret_is_measured_on_the_clean_surface() {
    let s = suite(&["SE-EI-sf1-fixed"], 1, 3);
    let (surface, _): (CostSurface, _) = run_surface(&s.smoothed_grid().unwrap(), &s, 0).unwrap();
    let StrategySpec::Bo(c) = &s.strategies[0] else { unreachable!() };
    let recs = run_strategy(&mut BoState::new(c.clone()).unwrap(), &surface, 3, 0.1, 1).unwrap();
    for r in recs {
        let clean = (surface.eval(&r.incumbent_theta).unwrap() - surface.j_opt) / surface.j_opt;
        assert_eq!(r.regret, clean);
    }
}
