use microgait::acquisition::AcqKind;
use microgait::bo::{BoConfig, BoState, HyperMode, RunRecord, SignalVariance};
use microgait::gp::{GpModel, KernelKind};
use microgait::ControllerParams;
use proptest::prelude::*;

fn bowl(theta: &ControllerParams) -> f64 {
    let u = theta.to_unit();
    0.5 + 3.0 * ((u[0] - 0.3).powi(2) + 0.5 * (u[1] - 0.7).powi(2))
}

fn drive(cfg: BoConfig, steps: usize) -> (Vec<ControllerParams>, Vec<RunRecord>) {
    let mut s = BoState::new(cfg).unwrap();
    let mut asked = Vec::new();
    for _ in 0..steps {
        let t = s.ask().unwrap();
        asked.push(t);
        s.tell(t, bowl(&t)).unwrap();
    }
    (asked, s.log().to_vec())
}

fn cfg(kernel: KernelKind, acq: AcqKind, mode: HyperMode) -> BoConfig {
    BoConfig {
        budget: 20,
        seed: 17,
        ..BoConfig::new(kernel, acq, SignalVariance::Optimistic, mode)
    }
}

#[test]
fn identical_seeds_replay_identically() {
    for c in [
        cfg(KernelKind::TwoMat, AcqKind::Ei, HyperMode::Learned),
        cfg(KernelKind::M52, AcqKind::Es, HyperMode::Fixed),
    ] {
        let a = drive(c.clone(), 6);
        let b = drive(c, 6);
        assert_eq!(a, b);
    }
}

#[test]
fn twenty_tells_give_twenty_contiguous_records() {
    let (asked, log) = drive(cfg(KernelKind::Se, AcqKind::Pi, HyperMode::Learned), 20);
    assert_eq!(log.len(), 20);
    assert_eq!(asked[0], ControllerParams::new(645.0, 30.0).unwrap());
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert!(r.theta.in_box() && r.incumbent_theta.in_box());
    }
}

#[test]
fn earlier_records_are_stable_as_the_run_extends() {
    let c = cfg(KernelKind::Rq, AcqKind::Ei, HyperMode::Learned);
    let (_, short) = drive(c.clone(), 5);
    let (_, long) = drive(c, 10);
    assert_eq!(short[..], long[..5]);
}

#[test]
fn fixed_mode_keeps_hyperparameters() {
    let (_, log) = drive(cfg(KernelKind::M32, AcqKind::Ei, HyperMode::Fixed), 8);
    assert!(log.windows(2).all(|w| w[0].hyper == w[1].hyper));
}

#[test]
fn first_proposal_ignores_kernel_and_acquisition() {
    for k in KernelKind::ALL {
        for a in [AcqKind::Pi, AcqKind::Ei, AcqKind::Es] {
            let mut s = BoState::new(cfg(k, a, HyperMode::Fixed)).unwrap();
            assert_eq!(s.ask().unwrap().to_string(), "645.0,30.0");
        }
    }
}

fn single_tell(u: [f64; 2], cost: f64) -> BoState {
    let mut s = BoState::new(cfg(KernelKind::M52, AcqKind::Ei, HyperMode::Fixed)).unwrap();
    let t = s.ask_override(ControllerParams::from_unit(u)).unwrap();
    s.tell(t, cost).unwrap();
    s
}

#[test]
fn single_low_observation_pulls_incumbent_to_it() {
    let u = [0.62, 0.41];
    let s = single_tell(u, 0.3);
    let (inc, _) = s.incumbent().unwrap();
    let post = GpModel::new(s.hyper().clone()).unwrap().condition(s.data()).unwrap();
    let (mut best, mut best_u) = (f64::INFINITY, [0.0; 2]);
    for i in 0..=400 {
        for j in 0..=300 {
            let q = [i as f64 / 400.0, j as f64 / 300.0];
            let m = post.mean_unit(q);
            if m < best {
                best = m;
                best_u = q;
            }
        }
    }
    let ls = s.hyper().components[0].length_scales;
    let r = |a: [f64; 2], b: [f64; 2]| (((a[0] - b[0]) / ls[0]).powi(2) + ((a[1] - b[1]) / ls[1]).powi(2)).sqrt();
    let x = ControllerParams::from_unit(u).to_unit();
    assert!(r(inc.to_unit(), x) <= 1.0);
    assert!(r(best_u, x) <= 1.0);
}

#[test]
fn prior_level_observations_keep_a_flat_mean() {
    let mut s = BoState::new(cfg(KernelKind::Se, AcqKind::Ei, HyperMode::Fixed)).unwrap();
    for u in [[0.1, 0.2], [0.8, 0.5], [0.4, 0.9]] {
        let t = s.ask_override(ControllerParams::from_unit(u)).unwrap();
        s.tell(t, 2.0).unwrap();
    }
    let (_, m) = s.incumbent().unwrap();
    assert!((m - 2.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incumbent_bounds(obs in prop::collection::vec(((0.0..=1.0f64, 0.0..=1.0f64), 0.0..4.0f64), 1..6)) {
        let mut s = BoState::new(cfg(KernelKind::TwoMat, AcqKind::Ei, HyperMode::Fixed)).unwrap();
        for ((a, b), y) in &obs {
            let t = s.ask_override(ControllerParams::from_unit([*a, *b])).unwrap();
            s.tell(t, *y).unwrap();
        }
        let (_, m) = s.incumbent().unwrap();
        let post = GpModel::new(s.hyper().clone()).unwrap().condition(s.data()).unwrap();
        let at_train = s.data().points().iter().map(|(t, _)| post.predict(t).mean).fold(f64::INFINITY, f64::min);
        prop_assert!(m <= at_train + 1e-12);

        let t = s.ask_override(ControllerParams::from_unit([0.5, 0.5])).unwrap();
        s.tell(t, 2.0).unwrap();
        prop_assert!(s.incumbent().unwrap().1 <= 2.0 + 1e-12);
    }

    #[test]
    fn protocol_violations_never_mutate(cost in -1.0..5.0f64) {
        let mut s = BoState::new(BoConfig::default()).unwrap();
        let before = serde_json::to_string(&s).unwrap();
        prop_assert!(s.tell(ControllerParams::new(645.0, 30.0).unwrap(), cost).is_err());
        prop_assert_eq!(&serde_json::to_string(&s).unwrap(), &before);
        let t = s.ask().unwrap();
        let pending = serde_json::to_string(&s).unwrap();
        prop_assert!(s.ask().is_err());
        prop_assert!(s.tell(ControllerParams::new(700.0, 30.0).unwrap(), cost).is_err());
        prop_assert_eq!(serde_json::to_string(&s).unwrap(), pending);
        prop_assert!(s.tell(t, cost).is_ok());
    }
}
