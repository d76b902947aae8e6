use plumeseek::reward::{clip_reward, terminal_reward, RewardState};
use plumeseek::runner::episode::{
    episode_rngs, run_deployment_episode, run_pf_episode, sample_scenario, stream_rng, PfAgent, Snapshot, Tracer,
    DOMAIN_EVAL, DOMAIN_TRAIN,
};
use plumeseek::runner::record::to_json_line;
use plumeseek::runner::teacher::Teacher;
use plumeseek::runner::train::{new_learner, train, TrainOptions};
use plumeseek::runner::*;

fn small_cfg() -> ScenarioConfig {
    ScenarioConfig { horizon: 20, n_particles: 64, ..ScenarioConfig::default() }
}

#[test]
fn scenarios_stay_in_their_boxes_and_center_on_midpoints() {
    let cfg = ScenarioConfig::default();
    let prior = cfg.prior();
    let (slo, shi) = cfg.start_box();
    let mut rng = stream_rng(7, DOMAIN_EVAL, 0);
    let n = 20_000;
    let mut sum = vec![0.0; prior.dim()];
    for _ in 0..n {
        let sc = sample_scenario(&cfg, &mut rng);
        assert!(prior.contains(&sc.theta));
        for (j, (p, (l, h))) in sc.start.iter().zip(slo.iter().zip(&shi)).enumerate() {
            assert!(l <= p && p <= h, "start axis {j} = {p}");
        }
        for (s, t) in sum.iter_mut().zip(&sc.theta) {
            *s += t;
        }
    }
    for j in 0..prior.dim() {
        let mean = sum[j] / n as f64;
        let se = prior.width(j) / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - prior.midpoint(j)).abs() < 4.0 * se.max(1e-12), "param {j}: {mean}");
    }
}

#[test]
fn degenerate_boxes_pin_the_draw() {
    let mut cfg = ScenarioConfig::default();
    let lo = cfg.prior().lo;
    cfg.prior_hi = Some(lo.clone());
    cfg.start_lo = Some(vec![2.0, 3.0]);
    cfg.start_hi = Some(vec![2.0, 3.0]);
    cfg.validate().unwrap();
    let mut rng = stream_rng(1, DOMAIN_EVAL, 0);
    for _ in 0..10 {
        let sc = sample_scenario(&cfg, &mut rng);
        assert_eq!(sc.theta, lo);
        assert_eq!(sc.start, vec![2.0, 3.0]);
    }
}

#[test]
fn zero_zeta_runs_to_horizon_and_huge_zeta_stops_at_once() {
    let mut cfg = small_cfg();
    cfg.zeta = 0.0;
    for agent in [PfAgent::Random, PfAgent::Greedy] {
        let r = run_pf_episode(&cfg, agent, 64, 0, 3, None).unwrap();
        assert_eq!(r.stop_step, cfg.horizon);
        assert_eq!(r.stop_cause, StopCause::Horizon);
        assert!(r.steps.last().unwrap().action.is_none());
    }
    cfg.zeta = 1e9;
    let r = run_pf_episode(&cfg, PfAgent::Random, 64, 0, 3, None).unwrap();
    assert_eq!(r.stop_step, 1);
    assert!(r.success());
}

#[test]
fn no_spread_stop_ablation_ignores_certificate() {
    let mut cfg = small_cfg();
    cfg.zeta = 1e9;
    cfg.ablation.no_spread_stop = true;
    let r = run_pf_episode(&cfg, PfAgent::Random, 64, 0, 3, None).unwrap();
    assert_eq!(r.stop_step, cfg.horizon);
}

#[test]
fn pf_records_are_byte_identical_across_runs() {
    let cfg = small_cfg();
    for agent in [PfAgent::Random, PfAgent::Greedy] {
        let a: Vec<String> = (0..3).map(|i| to_json_line(&run_pf_episode(&cfg, agent, 64, i, 11, None).unwrap())).collect();
        let b: Vec<String> = (0..3).map(|i| to_json_line(&run_pf_episode(&cfg, agent, 64, i, 11, None).unwrap())).collect();
        assert_eq!(a, b);
        let c = to_json_line(&run_pf_episode(&cfg, agent, 64, 0, 12, None).unwrap());
        assert_ne!(a[0], c, "seed must matter");
    }
}

#[test]
fn agents_share_scenarios_for_the_same_index() {
    let cfg = small_cfg();
    let g = run_pf_episode(&cfg, PfAgent::Greedy, 64, 4, 5, None).unwrap();
    let r = run_pf_episode(&cfg, PfAgent::Random, 64, 4, 5, None).unwrap();
    assert_eq!(g.theta_true, r.theta_true);
    assert_eq!(g.steps[0].pose, r.steps[0].pose);
    assert_eq!(g.steps[0].z, r.steps[0].z);
}

#[test]
fn training_is_deterministic() {
    let cfg = ScenarioConfig { train_steps: 300, ..small_cfg() };
    let a = train(&cfg, 9, TrainOptions::default()).unwrap();
    let b = train(&cfg, 9, TrainOptions::default()).unwrap();
    let la: Vec<String> = a.records.iter().map(to_json_line).collect();
    let lb: Vec<String> = b.records.iter().map(to_json_line).collect();
    assert_eq!(la, lb);
    assert!(a.env_steps >= cfg.train_steps);
    assert_eq!(a.env_steps, a.records.iter().map(|r| r.stop_step).sum::<usize>());
}

#[test]
fn stopping_early_reproduces_a_prefix() {
    let cfg = ScenarioConfig { train_steps: 300, ..small_cfg() };
    let full = train(&cfg, 9, TrainOptions::default()).unwrap();
    let k = (full.records.len() as u64 - 1).min(3);
    let part = train(&cfg, 9, TrainOptions { stop_after_episode: Some(k), ..TrainOptions::default() }).unwrap();
    assert_eq!(part.records.len() as u64, k + 1);
    assert_eq!(to_json_line(&part.records[k as usize]), to_json_line(&full.records[k as usize]));
}

#[test]
fn deployment_builds_no_particle_set_and_is_deterministic() {
    let cfg = small_cfg();
    let l = new_learner(&cfg, 2).unwrap();
    let before = plumeseek::pf::sets_constructed_on_thread();
    let a = run_deployment_episode(&cfg, &l.student, &l.policy, 0, 8).unwrap();
    assert_eq!(plumeseek::pf::sets_constructed_on_thread(), before);
    let b = run_deployment_episode(&cfg, &l.student, &l.policy, 0, 8).unwrap();
    assert_eq!(to_json_line(&a), to_json_line(&b));
    assert_eq!(a.kind, EpisodeKind::Deployment);
    assert!(a.steps.iter().all(|s| s.teacher_spread.is_none() && s.student_spread.is_some()));
    // A PF episode does build sets, so the counter is live.
    run_pf_episode(&cfg, PfAgent::Random, 16, 0, 8, None).unwrap();
    assert!(plumeseek::pf::sets_constructed_on_thread() > before);
}

#[test]
fn training_rewards_come_from_teacher_weights() {
    let cfg = ScenarioConfig { train_steps: 1, ..small_cfg() };
    let out = train(&cfg, 4, TrainOptions::default()).unwrap();
    let rec = &out.records[0];
    assert!(rec.stop_step >= 2, "need at least one transition");

    let mut rng = episode_rngs(4, DOMAIN_TRAIN, 0).teacher;
    let mut teacher = Teacher::new(&cfg, cfg.n_particles, &mut rng).unwrap();
    let mut state = RewardState::new(cfg.reward_clip_window, cfg.reward_clip_quantile).unwrap();
    let mut expected = Vec::new();
    for (t, s) in rec.steps.iter().enumerate() {
        let kl = teacher.assimilate(s.z, &s.pose, t + 1, &mut rng).kl;
        if t > 0 {
            expected.push(clip_reward(kl, &mut state));
        }
        assert_eq!(teacher.spread(cfg.location()).to_bits(), s.teacher_spread.unwrap().to_bits());
    }
    let last = expected.len() - 1;
    expected[last] += terminal_reward(rec.success(), cfg.reward_mode, 0.0);
    let got: Vec<f64> = rec.steps[..rec.stop_step - 1].iter().map(|s| s.reward.unwrap()).collect();
    assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), expected.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert!(rec.steps.last().unwrap().reward.is_none());
}

#[test]
fn tracer_sees_every_kth_step_and_the_last() {
    let mut cfg = small_cfg();
    cfg.zeta = 0.0;
    let mut seen = Vec::new();
    let mut sink = |s: &Snapshot| seen.push((s.step, s.weights.len(), s.thetas.len() / s.dim));
    let mut tr = Tracer { every: 6, sink: &mut sink };
    run_pf_episode(&cfg, PfAgent::Random, 32, 0, 1, Some(&mut tr)).unwrap();
    let steps: Vec<usize> = seen.iter().map(|s| s.0).collect();
    assert_eq!(steps, vec![6, 12, 18, 20]);
    assert!(seen.iter().all(|s| s.1 == 32 && s.2 == 32));
}

#[test]
fn three_dimensional_episodes_run() {
    let cfg = ScenarioConfig { model: FieldKind::Halfspace3d, horizon: 8, n_particles: 32, ..ScenarioConfig::default() };
    cfg.validate().unwrap();
    let r = run_pf_episode(&cfg, PfAgent::Greedy, 32, 0, 1, None).unwrap();
    assert_eq!(r.steps[0].pose.len(), 3);
    assert_eq!(r.theta_true.len(), cfg.prior().dim());
}
