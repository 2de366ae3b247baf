use super::*;
use crate::policy::{Action, PolicyConfig, PolicyParams};
use crate::regions::RegionConfig;

fn env(seed: u64) -> Environment {
    Environment::new(EnvConfig::default(), seed).unwrap()
}

fn options<'a>(env: &'a Environment, params: &'a PolicyParams, cfg: &'a PolicyConfig) -> RolloutOptions<'a> {
    RolloutOptions {
        params,
        policy: cfg,
        reasoner: &env.reasoner,
        weights: RewardWeights::default(),
        cap: 8,
        fixed_k: None,
    }
}

#[test]
fn reasoner_fixed_point_and_range() {
    let e = env(0);
    let d_l = e.config.d_l;
    let zero = e.reasoner.step(&vec![0.0; d_l], &vec![0.0; e.config.d_v]);
    assert!(zero.iter().all(|&v| v == 0.0));
    let mut rng = RngStream::new(1, 1);
    for scale in [0.1, 1.0, 10.0] {
        let h: Vec<f64> = (0..d_l).map(|_| scale * rng.normal()).collect();
        let x: Vec<f64> = (0..e.config.d_v).map(|_| scale * rng.normal()).collect();
        let out = e.reasoner.step(&h, &x);
        // tanh rounds to exactly 1 in floating point once saturated.
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        if scale < 1.0 {
            assert!(out.iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn recurrent_matrix_is_contractive() {
    let e = env(3);
    let a = &e.reasoner.a;
    // Independent estimate: power iteration on A^T A with many restarts.
    let mut rng = RngStream::new(5, 5);
    let mut best: f64 = 0.0;
    for _ in 0..5 {
        let mut x: Vec<f64> = (0..a.cols()).map(|_| rng.normal()).collect();
        for _ in 0..2000 {
            let y = a.matvec_t(&a.matvec(&x));
            let n = y.norm();
            x = y.iter().map(|v| v / n).collect();
        }
        best = best.max(a.matvec(&x).norm());
    }
    assert!(best <= 0.9 + 1e-9, "spectral norm {best}");
    assert!(best > 0.89);
}

#[test]
fn repeated_injection_converges() {
    let e = env(2);
    let mut rng = RngStream::new(2, 2);
    let x = Vector::new((0..e.config.d_v).map(|_| rng.normal()).collect()).unwrap();
    let mut h = e.reasoner.h0.clone();
    let mut converged = false;
    for _ in 0..200 {
        let next = e.reasoner.step(&h, &x);
        let diff: f64 = next.iter().zip(h.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        h = next;
        if diff < 1e-6 {
            converged = true;
            break;
        }
    }
    assert!(converged);
}

#[test]
fn difficulty_one_needs_one_block() {
    let e = env(4);
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&e, &rc, 50, &[1], 4, 1).unwrap();
    let r = &e.reasoner;
    for t in &tasks {
        let bank = t.build_bank(&rc).unwrap();
        let actions = t.oracle_actions(&bank).unwrap();
        assert_eq!(actions.len(), 2);
        let Action::Select(k) = actions[0] else { panic!() };
        assert_eq!(r.answer(&r.run(&r.h0, [bank.slot_embedding(k)])), t.gold_answer);
    }
}

#[test]
fn order_matters_on_difficulty_two() {
    let e = env(0);
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&e, &rc, 500, &[2], 0, 2).unwrap();
    let r = &e.reasoner;
    let mut rng = RngStream::new(0, 3);
    let (mut swapped_wrong, mut random_right) = (0, 0);
    for t in &tasks {
        let bank = t.build_bank(&rc).unwrap();
        let (a, b) = (bank.slot_embedding(0), bank.slot_embedding(1));
        if r.answer(&r.run(&r.h0, [b, a])) != t.gold_answer {
            swapped_wrong += 1;
        }
        let order = if rng.bernoulli(0.5) { [a, b] } else { [b, a] };
        if r.answer(&r.run(&r.h0, order)) == t.gold_answer {
            random_right += 1;
        }
    }
    assert!(swapped_wrong as f64 / 500.0 > 0.5, "{swapped_wrong}");
    // The oracle order is always right, so random order must trail it by 20 points.
    assert!(random_right as f64 / 500.0 <= 0.8, "{random_right}");
}

#[test]
fn generation_is_deterministic() {
    let e = env(9);
    let rc = RegionConfig::default();
    let a = generate_dataset(&e, &rc, 3, &[1, 2, 3], 9, 0).unwrap();
    let b = generate_dataset(&e, &rc, 3, &[1, 2, 3], 9, 0).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = generate_dataset(&e, &rc, 1, &[1], 10, 0).unwrap();
    assert_ne!(serde_json::to_string(&a[0]).unwrap(), serde_json::to_string(&c[0]).unwrap());
    assert_eq!(Environment::new(EnvConfig::default(), 9).unwrap(), e);
}

#[test]
fn planted_blocks_become_ranked_regions() {
    let e = env(6);
    let rc = RegionConfig::default();
    for t in generate_dataset(&e, &rc, 20, &[1, 2, 3], 6, 0).unwrap() {
        let bank = t.build_bank(&rc).unwrap();
        bank.validate().unwrap();
        assert_eq!(bank.regions.len(), 4);
        for (region, block) in bank.regions.iter().zip(&t.planted) {
            assert_eq!(region.patches, block.patches());
        }
        assert_eq!(t.planted.iter().filter(|b| b.required).count(), t.difficulty);
    }
}

#[test]
fn infeasible_placement_is_a_generation_error() {
    let cfg = EnvConfig {
        height: 6,
        width: 6,
        blocks: 2,
        block_min: 3,
        block_max: 3,
        calibration_tasks: 0,
        max_attempts: 5,
        ..EnvConfig::default()
    };
    let e = Environment::new(cfg, 0).unwrap();
    let err = generate_task(&e, &RegionConfig::default(), 1, 0, &mut RngStream::new(0, 0));
    assert!(matches!(err, Err(Error::Generation(_))));
    assert!(generate_task(&e, &RegionConfig::default(), 3, 0, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn oracle_and_stop_rollouts() {
    let e = env(1);
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&e, &rc, 10, &[2], 1, 0).unwrap();
    let params = PolicyParams::init(e.config.d_l, e.config.d_v, &mut RngStream::new(0, 0));
    let pcfg = PolicyConfig::default();
    let opts = options(&e, &params, &pcfg);
    let mut rng = RngStream::new(0, 1);
    for t in &tasks {
        let bank = t.build_bank(&rc).unwrap();
        let script = t.oracle_actions(&bank).unwrap();
        let traj = rollout(&opts, &bank, t.gold_answer, RolloutMode::Script(&script), &mut rng).unwrap();
        assert_eq!(traj.predicted_answer, t.gold_answer);
        assert_eq!(traj.reward.vision_steps, 2);
        assert_eq!(traj.reward.length_tokens, 3);
        assert!(traj.steps.iter().all(|s| s.log_prob.is_finite()));

        let stop = rollout(&opts, &bank, t.gold_answer, RolloutMode::Script(&[]), &mut rng).unwrap();
        assert_eq!(stop.steps.len(), 1);
        assert_eq!(stop.predicted_answer, e.reasoner.answer(&e.reasoner.h0));
        assert_eq!(stop.reward.vision_steps, 0);
    }
}

#[test]
fn vision_steps_count_selections() {
    let e = env(1);
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&e, &rc, 10, &[1, 2, 3], 1, 5).unwrap();
    let params = PolicyParams::init(e.config.d_l, e.config.d_v, &mut RngStream::new(0, 0));
    let pcfg = PolicyConfig::default();
    let mut rng = RngStream::new(7, 1);
    for t in &tasks {
        let bank = t.build_bank(&rc).unwrap();
        for mode in [RolloutMode::Sample, RolloutMode::Random, RolloutMode::Greedy] {
            for fixed_k in [None, Some(2), Some(4)] {
                let opts = RolloutOptions {
                    fixed_k,
                    ..options(&e, &params, &pcfg)
                };
                let traj = rollout(&opts, &bank, t.gold_answer, mode, &mut rng).unwrap();
                let selects = traj.steps.iter().filter(|s| matches!(s.action, Action::Select(_))).count();
                assert_eq!(traj.reward.vision_steps, selects);
                assert_eq!(traj.reward, compute_reward(&traj, t, &RewardWeights::default()));
                if let Some(k) = fixed_k {
                    assert_eq!(selects, k);
                }
                let mut seen = traj.selected();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), selects, "no slot is visited twice");
            }
        }
    }
}

#[test]
fn cap_forces_a_stop() {
    let e = env(1);
    let rc = RegionConfig::default();
    let t = &generate_dataset(&e, &rc, 1, &[2], 1, 0).unwrap()[0];
    let bank = t.build_bank(&rc).unwrap();
    let params = PolicyParams::init(e.config.d_l, e.config.d_v, &mut RngStream::new(0, 0));
    let pcfg = PolicyConfig {
        allow_revisit: true,
        ..PolicyConfig::default()
    };
    let opts = RolloutOptions {
        cap: 3,
        ..options(&e, &params, &pcfg)
    };
    let script = [Action::Select(0); 5];
    let traj = rollout(&opts, &bank, t.gold_answer, RolloutMode::Script(&script), &mut RngStream::new(0, 0)).unwrap();
    assert!(traj.forced_stop);
    assert_eq!(traj.steps.len(), 3);
    assert_eq!(traj.reward.vision_steps, 2);
    assert_eq!(traj.reward.r_format, 0.0);
}

#[test]
fn reward_examples() {
    let w = RewardWeights::default();
    let r = RewardBreakdown::new(true, true, 3, 2, &w);
    assert!((r.total - 1.07).abs() < 1e-12);
    let r = RewardBreakdown::new(false, false, 8, 8, &w);
    assert!((r.total + 0.48).abs() < 1e-12);
    let r = RewardBreakdown::new(true, true, 1, 0, &w);
    assert!((r.total - 1.19).abs() < 1e-12);
}

#[test]
fn jsonl_round_trip_and_errors() {
    let e = env(0);
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&e, &rc, 3, &[1, 2], 0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tasks.jsonl");
    write_tasks_jsonl(&path, &tasks).unwrap();
    assert!(read_tasks_jsonl(&path).unwrap() == tasks);
    std::fs::write(&path, "{\"id\": 1}\n").unwrap();
    match read_tasks_jsonl(&path) {
        Err(Error::Data(m)) => assert!(m.contains(":1:")),
        other => panic!("{other:?}"),
    }
}
