use plumeseek::runner::bench::{bench_latency, BenchMode};
use plumeseek::runner::metrics::{compute_metrics, localization_error};
use plumeseek::runner::record::{read_jsonl, to_json_line, write_jsonl};
use plumeseek::runner::train::new_learner;
use plumeseek::runner::*;
use plumeseek::stopping::BeliefSource;
use plumeseek::student::GaussianBelief;

const LN_2PI: f64 = 1.8378770664093453;

fn record(theta: Vec<f64>, estimate: Vec<f64>, cause: StopCause) -> EpisodeRecord {
    let d = theta.len();
    EpisodeRecord {
        index: 0,
        seed: 0,
        kind: EpisodeKind::Deployment,
        ablation: "full".into(),
        terminal_belief: GaussianBelief { mu: theta.clone(), log_var: vec![0.0; d] },
        theta_true: theta,
        steps: vec![StepRecord {
            pose: vec![0.0, 0.0],
            z: 0.25,
            action: None,
            reward: None,
            teacher_spread: None,
            student_spread: Some(0.01),
            degenerate: false,
        }],
        stop_step: 1,
        stop_cause: cause,
        estimate,
        belief_source: BeliefSource::Student,
        initial_spread: 10.0,
    }
}

#[test]
fn metric_hand_examples() {
    let cfg = ScenarioConfig::default();
    let loc = cfg.location();
    let theta = vec![10.0, 5.0, 1.0, 2.0, 0.5, 0.3, 0.1];
    let mut est = theta.clone();
    est[loc[0]] += 3.0;
    est[loc[1]] += 4.0;
    let r = record(theta.clone(), est, StopCause::Certificate);
    assert_eq!(localization_error(&r, loc), 5.0);
    let m = compute_metrics(&[r], loc).unwrap();
    assert_eq!(m.sle_mean, 5.0);
    assert_eq!(m.sle_std, 0.0);
    assert_eq!(m.sr, 1.0);
    assert_eq!(m.te, 1.0);
    // Unit-variance Gaussian at the truth: seven halves of ln 2π.
    assert!((m.uq_nll - 3.5 * LN_2PI).abs() < 1e-12);
    assert!((m.uq_nll - 6.432570).abs() < 5e-6);
    assert!((m.fpe_rmse - (25.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert!((m.fpe_mae - 1.0).abs() < 1e-12);

    let fail = record(theta.clone(), theta, StopCause::Horizon);
    let m2 = compute_metrics(&[fail.clone(), fail], loc).unwrap();
    assert_eq!(m2.sr, 0.0);
    assert_eq!(m2.sle_mean, 0.0);
    assert!(compute_metrics(&[], loc).is_none());
}

#[test]
fn records_roundtrip_through_jsonl() {
    let theta = vec![0.1, 1.0 / 3.0, 1e-300, 6.02214076e23, -2.5, 0.0, 7.0];
    let r = record(theta.clone(), theta, StopCause::Horizon);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    write_jsonl(&p, &[r.clone(), r.clone()]).unwrap();
    let back = read_jsonl(&p).unwrap();
    assert_eq!(back, vec![r.clone(), r.clone()]);
    assert_eq!(to_json_line(&back[0]), to_json_line(&r));
}

#[test]
fn config_roundtrips_and_rejects_bad_values() {
    let mut cfg = ScenarioConfig::default();
    cfg.seed = 42;
    cfg.zeta = 0.25;
    cfg.ablation.no_mh = true;
    let s = cfg.to_toml_string();
    let back = ScenarioConfig::from_toml_str(&s).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.ablation.label(), "no_mh");

    for (src, field) in [
        ("tau_ess = 1.5", "tau_ess"),
        ("zeta = -1.0", "zeta"),
        ("n_particles = 1", "n_particles"),
        ("horizon = 0", "horizon"),
        ("[sensor]\np_d = 1.5", "sensor.p_d"),
        ("[sensor]\nsigma_rel = -0.1", "sensor.sigma_rel"),
    ] {
        let e = ScenarioConfig::from_toml_str(src).unwrap_err();
        assert_eq!(e.field, field, "{src}");
    }
    assert_eq!(ScenarioConfig::from_toml_str("no_such_key = 1").unwrap_err().field, "no_such_key");

    // Partial tables keep the scenario defaults of their other keys.
    let part = ScenarioConfig::from_toml_str("[sensor]\np_d = 0.8\n[mh]\nstep_scale = 0.3\n").unwrap();
    let d = ScenarioConfig::default();
    assert_eq!(part.sensor.p_d, 0.8);
    assert_eq!(part.sensor.sigma_rel, d.sensor.sigma_rel);
    assert_eq!(part.mh.n_moves, d.mh.n_moves);
    assert_eq!(part.mh.step_scale, 0.3);
}

#[test]
fn env_seed_overrides_config() {
    assert_eq!(effective_seed(5, None).unwrap(), 5);
    assert_eq!(effective_seed(5, Some("17")).unwrap(), 17);
    assert_eq!(effective_seed(5, Some("x")).unwrap_err().field, "SEED");
}

#[test]
fn bench_with_zero_steps_is_empty() {
    let cfg = ScenarioConfig { horizon: 10, ..ScenarioConfig::default() };
    let l = new_learner(&cfg, 0).unwrap();
    for mode in [BenchMode::Student, BenchMode::PfAtTest] {
        assert!(bench_latency(&cfg, &l.student, &l.policy, mode, &[50, 200], 0).unwrap().is_empty());
        let rows = bench_latency(&cfg, &l.student, &l.policy, mode, &[20, 40], 15).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.steps == 15 && r.median_us > 0.0));
    }
}
