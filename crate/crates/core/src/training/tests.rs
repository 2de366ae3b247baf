use super::*;
use crate::envsim::{generate_dataset, prepare_tasks, EnvConfig, Environment, PreparedTask};
use crate::numerics::{Matrix, Similarity, Vector};
use proptest::prelude::*;

fn dist(p: &[f64]) -> ActionDistribution {
    ActionDistribution {
        scores: p.iter().map(|x| x.ln()).collect(),
        probs: Vector::from_raw(p.to_vec()),
    }
}

fn random_dist(n: usize, rng: &mut RngStream) -> ActionDistribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let z: f64 = raw.iter().sum();
    dist(&raw.iter().map(|x| x / z).collect::<Vec<_>>())
}

fn small_env() -> (Environment, Vec<PreparedTask>) {
    let env = Environment::new(EnvConfig::default(), 3).unwrap();
    let rc = RegionConfig::default();
    let tasks = generate_dataset(&env, &rc, 12, &[1, 2, 3], 3, 9).unwrap();
    (env, prepare_tasks(tasks, &rc).unwrap())
}

fn sharp() -> PolicyConfig {
    PolicyConfig {
        logit_scale: 10.0,
        ..PolicyConfig::default()
    }
}

#[test]
fn curriculum_schedule() {
    let got: Vec<f64> = [(0, 4), (2, 4), (4, 4), (9, 4)]
        .iter()
        .map(|&(e, w)| curriculum_lambda(e, w))
        .collect();
    assert_eq!(got, vec![0.0, 0.5, 1.0, 1.0]);
    assert_eq!(curriculum_lambda(0, 0), 1.0);
    let mut prev = 0.0;
    for e in 0..20 {
        let l = curriculum_lambda(e, 7);
        assert!(l >= prev);
        prev = l;
    }
}

#[test]
fn expert_branch_frequencies() {
    let (_, tasks) = small_env();
    let t = &tasks[1];
    let rc = RegionConfig::default();
    let mut rng = RngStream::new(1, 2);
    for _ in 0..50 {
        let d = pseudo_expert_order(&t.task.grid, &t.bank, 1.0, 4, &rc, &mut rng).unwrap();
        assert_eq!(d.branch, ExpertBranch::Saliency);
        let mut want: Vec<Action> = (0..t.bank.regions.len()).map(Action::Select).collect();
        want.push(Action::Stop);
        assert_eq!(d.actions, want);
    }
    for _ in 0..10_000 {
        let d = pseudo_expert_order(&t.task.grid, &t.bank, 0.0, 4, &rc, &mut rng).unwrap();
        assert_eq!(d.branch, ExpertBranch::Random);
        assert_eq!(d.actions.last(), Some(&Action::Stop));
        assert!(d.actions.len() >= 2 && d.actions.len() <= d.bank.regions.len() + 1);
    }
}

#[test]
fn expert_branch_frequency_at_half() {
    let (_, tasks) = small_env();
    let t = &tasks[0];
    let rc = RegionConfig::default();
    let mut rng = RngStream::new(5, 5);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            pseudo_expert_order(&t.task.grid, &t.bank, 0.5, 4, &rc, &mut rng).unwrap().branch
                == ExpertBranch::Saliency
        })
        .count();
    let f = hits as f64 / n as f64;
    assert!((0.48..=0.52).contains(&f), "saliency branch frequency {f}");
}

#[test]
fn random_demos_use_contiguous_tiles() {
    let (_, tasks) = small_env();
    let t = &tasks[2];
    let rc = RegionConfig::default();
    let mut rng = RngStream::new(8, 0);
    let d = pseudo_expert_order(&t.task.grid, &t.bank, 0.0, 4, &rc, &mut rng).unwrap();
    for r in &d.bank.regions {
        let b = r.bbox;
        assert_eq!((b.max_row - b.min_row + 1) * (b.max_col - b.min_col + 1), r.patches.len());
        assert_eq!(r.patches.len(), 16);
    }
}

fn uniform_setup() -> (PolicyParams, PolicyConfig, RegionBank) {
    let d = 3;
    let params = PolicyParams {
        w_sig: Matrix::zeros(d, d),
        w_vis: Matrix::zeros(d, d),
        stop: Vector::zeros(d),
    };
    let cfg = PolicyConfig {
        similarity: Similarity::Dot,
        allow_revisit: true,
        ..PolicyConfig::default()
    };
    let e = |i: usize| {
        let mut v = vec![0.1; d];
        v[i % d] = 1.0;
        Vector::from_raw(v)
    };
    let bank = RegionBank::from_slots((0..3).map(e).collect(), e(1));
    (params, cfg, bank)
}

#[test]
fn uniform_policy_cross_entropy() {
    let (mut params, cfg, bank) = uniform_setup();
    let reasoner = ToyReasoner {
        a: Matrix::zeros(3, 3),
        b: Matrix::identity(3),
        w_env: Matrix::identity(3),
        readout: Matrix::identity(3),
        h0: Vector::from_raw(vec![0.5, -0.5, 0.2]),
    };
    let demo = ExpertDemo {
        branch: ExpertBranch::Saliency,
        bank,
        actions: vec![Action::Select(0), Action::Select(1), Action::Stop],
    };
    let r = sft_step(&mut params, &cfg, &reasoner, &[demo], 0.0).unwrap();
    assert!((r.loss - 3.0 * 5f64.ln()).abs() < 1e-12, "loss {}", r.loss);
    assert_eq!((r.steps, r.skipped), (3, 0));
}

#[test]
fn revisits_are_skipped_and_counted() {
    let (env, tasks) = small_env();
    let t = &tasks[0];
    let mut params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(0, 0));
    let demo = ExpertDemo {
        branch: ExpertBranch::Saliency,
        bank: t.bank.clone(),
        actions: vec![Action::Select(0), Action::Select(0), Action::Stop],
    };
    let r = sft_step(&mut params, &sharp(), &env.reasoner, &[demo], 0.1).unwrap();
    assert_eq!((r.steps, r.skipped), (2, 1));
    assert!(r.loss.is_finite());
}

#[test]
fn overfitting_one_batch_lowers_the_loss() {
    let (env, tasks) = small_env();
    let rc = RegionConfig::default();
    let mut rng = RngStream::new(4, 4);
    let batch: Vec<ExpertDemo> = tasks
        .iter()
        .take(8)
        .map(|t| pseudo_expert_order(&t.task.grid, &t.bank, 0.5, 4, &rc, &mut rng).unwrap())
        .collect();
    let cfg = sharp();
    let mut params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(1, 1));
    let mut prev = f64::INFINITY;
    for i in 0..100 {
        let r = sft_step(&mut params, &cfg, &env.reasoner, &batch, 0.01).unwrap();
        assert!(r.loss < prev, "step {i}: {} >= {prev}", r.loss);
        prev = r.loss;
    }
}

#[test]
fn a_confident_expert_has_near_zero_loss() {
    let (mut params, cfg, bank) = uniform_setup();
    params.stop = Vector::from_raw(vec![1.0, 0.0, 0.0]);
    params.w_sig = Matrix::identity(3);
    let cfg = PolicyConfig {
        similarity: Similarity::Cosine,
        logit_scale: 200.0,
        ..cfg
    };
    let reasoner = ToyReasoner {
        a: Matrix::zeros(3, 3),
        b: Matrix::identity(3),
        w_env: Matrix::identity(3),
        readout: Matrix::identity(3),
        h0: Vector::from_raw(vec![1.0, 0.0, 0.0]),
    };
    let demo = ExpertDemo {
        branch: ExpertBranch::Saliency,
        bank,
        actions: vec![Action::Stop],
    };
    let r = sft_step(&mut params, &cfg, &reasoner, &[demo], 0.0).unwrap();
    assert!(r.loss < 1e-9, "loss {}", r.loss);
}

#[test]
fn advantage_examples() {
    assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]), vec![0.5, -0.5, -0.5, 0.5]);
    assert_eq!(group_advantages(&[0.3; 4]), vec![0.0; 4]);
    assert!(group_advantages(&[]).is_empty());
}

#[test]
fn kl_examples() {
    let p = dist(&[0.2, 0.3, 0.5]);
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let one = ActionDistribution {
        scores: vec![0.0, f64::NEG_INFINITY],
        probs: Vector::from_raw(vec![1.0, 0.0]),
    };
    let half = dist(&[0.5, 0.5]);
    assert!((kl_divergence(&one, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(kl_divergence(&half, &one), Err(Error::Divergent(1))));
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = RngStream::new(12, 0);
    for _ in 0..1000 {
        let n = 2 + rng.below(6);
        let (p, q) = (random_dist(n, &mut rng), random_dist(n, &mut rng));
        let direct: f64 = p.probs.iter().zip(q.probs.iter()).map(|(a, b)| a * (a / b).ln()).sum();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(kl >= 0.0);
        assert!((kl - direct.max(0.0)).abs() < 1e-12);
    }
}

fn sampled_groups<'a>(
    env: &'a Environment,
    params: &'a PolicyParams,
    cfg: &'a PolicyConfig,
    tasks: &'a [PreparedTask],
    seed: u64,
) -> Vec<TrajectoryGroup<'a>> {
    let opts = RolloutOptions {
        params,
        policy: cfg,
        reasoner: &env.reasoner,
        weights: RewardWeights::default(),
        cap: env.config.cap,
        fixed_k: None,
    };
    let mut rng = RngStream::new(seed, 0);
    tasks
        .iter()
        .map(|t| {
            let trajs = (0..4)
                .map(|_| rollout(&opts, &t.bank, t.task.gold_answer, RolloutMode::Sample, &mut rng).unwrap())
                .collect();
            TrajectoryGroup::new(&t.bank, trajs)
        })
        .collect()
}

#[test]
fn identical_policies_have_zero_kl() {
    let (env, tasks) = small_env();
    let cfg = sharp();
    let params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(2, 0));
    let groups = sampled_groups(&env, &params, &cfg, &tasks, 1);
    let (loss, _) = grpo_loss_and_grad(&params, &params, &cfg, &groups, 0.02).unwrap();
    assert!(loss.mean_kl.abs() < 1e-9);
    assert!(loss.states > 0);
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let (env, tasks) = small_env();
    let cfg = sharp();
    let mut rng = RngStream::new(6, 0);
    let params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut rng);
    let reference = PolicyParams::init(env.config.d_l, env.config.d_v, &mut rng);
    let groups: Vec<TrajectoryGroup> = sampled_groups(&env, &params, &cfg, &tasks[..3], 2)
        .into_iter()
        .map(|mut g| {
            g.advantages = vec![0.0; g.advantages.len()];
            g
        })
        .collect();
    let (_, grad) = grpo_loss_and_grad(&params, &reference, &cfg, &groups, 1.0).unwrap();
    let eps = 1e-6;
    let stop_grad = grad.stop.as_slice().to_vec();
    for (i, &g) in stop_grad.iter().enumerate() {
        let mut plus = params.clone();
        plus.stop.as_mut_slice()[i] += eps;
        let mut minus = params.clone();
        minus.stop.as_mut_slice()[i] -= eps;
        let lp = grpo_loss_and_grad(&plus, &reference, &cfg, &groups, 1.0).unwrap().0.loss;
        let lm = grpo_loss_and_grad(&minus, &reference, &cfg, &groups, 1.0).unwrap().0.loss;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {g}");
    }
}

#[test]
fn positive_advantages_raise_their_log_probs() {
    let (env, tasks) = small_env();
    let cfg = sharp();
    let params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(3, 0));
    let groups: Vec<TrajectoryGroup> = sampled_groups(&env, &params, &cfg, &tasks[..4], 3)
        .into_iter()
        .map(|mut g| {
            g.advantages = (0..g.trajectories.len()).map(|i| 0.25 + 0.5 * i as f64).collect();
            g
        })
        .collect();
    let objective = |p: &PolicyParams| -> f64 {
        let mut total = 0.0;
        for g in &groups {
            for (t, a) in g.trajectories.iter().zip(&g.advantages) {
                for s in &t.steps {
                    let d = score_actions_cached(p, &cfg, &s.state, g.bank).unwrap().dist;
                    total += a * d.probs[s.action.index(d.slots())].ln();
                }
            }
        }
        total
    };
    let (_, grad) = grpo_loss_and_grad(&params, &params, &cfg, &groups, 0.0).unwrap();
    let mut updated = params.clone();
    updated.axpy(-1e-3, &grad);
    assert!(objective(&updated) > objective(&params));
}

#[test]
fn shifting_rewards_leaves_the_gradient_unchanged() {
    let (env, tasks) = small_env();
    let cfg = sharp();
    let params = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(4, 0));
    let base = sampled_groups(&env, &params, &cfg, &tasks[..4], 4);
    let shifted: Vec<TrajectoryGroup> = base
        .iter()
        .cloned()
        .map(|mut g| {
            g.rewards.iter_mut().for_each(|r| *r += 7.5);
            g.advantages = group_advantages(&g.rewards);
            g
        })
        .collect();
    let (_, g0) = grpo_loss_and_grad(&params, &params, &cfg, &base, 0.0).unwrap();
    let (_, g1) = grpo_loss_and_grad(&params, &params, &cfg, &shifted, 0.0).unwrap();
    for (a, b) in g0.flat().iter().zip(g1.flat()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn grpo_step_smoke() {
    let (env, tasks) = small_env();
    let cfg = sharp();
    let train = TrainConfig::default();
    let reference = PolicyParams::init(env.config.d_l, env.config.d_v, &mut RngStream::new(5, 0));
    let ctx = RlContext {
        reference: &reference,
        policy: &cfg,
        reasoner: &env.reasoner,
        cap: env.config.cap,
        train: &train,
    };
    let batch: Vec<RlTask> = tasks
        .iter()
        .map(|t| RlTask {
            bank: &t.bank,
            gold: t.task.gold_answer,
        })
        .collect();
    let mut rng = RngStream::new(5, 1);
    let mut params = reference.clone();
    let m0 = grpo_step(&mut params, &ctx, &batch, 0.0, &mut rng).unwrap();
    assert_eq!(m0.policy_trajectories, 0);
    assert!(m0.mean_kl.abs() < 1e-9, "first step starts at the reference");
    let m1 = grpo_step(&mut params, &ctx, &batch, 1.0, &mut rng).unwrap();
    assert_eq!(m1.policy_trajectories, tasks.len() * train.group_size);
    for m in [&m0, &m1] {
        assert!(m.loss.is_finite() && m.mean_kl >= 0.0);
        assert!(m.max_abs_advantage_sum < 1e-9);
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert!(m.mean_vision_steps <= env.config.cap as f64);
    }
    let bad = TrainConfig {
        group_size: 1,
        ..TrainConfig::default()
    };
    let ctx = RlContext { train: &bad, ..ctx };
    assert!(grpo_step(&mut params, &ctx, &batch, 1.0, &mut rng).is_err());
}

fn smoke_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.data.train_tasks = 100;
    cfg.data.eval_tasks = 30;
    cfg.data.ablation_tasks = 20;
    cfg.train.warm_epochs = 1;
    cfg.train.sft_epochs = 2;
    cfg.train.rl_steps = 2;
    cfg.train.rl_warm_steps = 1;
    cfg.train.eval_every = 1;
    cfg
}

#[test]
fn smoke_experiment_replays_bitwise() {
    let cfg = smoke_config(21);
    let a = execute(&cfg).unwrap();
    let b = execute(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.sft.len(), 2);
    assert_eq!(a.log.rl.len(), 2);
    assert_eq!(a.report.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(a.report.final_eval.summary.tasks, 30);
    let table = a.report.final_eval.ablation.as_ref().unwrap();
    assert_eq!((table.tasks, table.cells.len()), (20, 4));
    let budget: Vec<Option<usize>> = a.report.final_eval.budget.iter().map(|r| r.fixed_k).collect();
    assert_eq!(budget, vec![Some(2), Some(3), Some(4), None]);
}

#[test]
fn run_experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(22);
    let report = run_experiment(&cfg, dir.path()).unwrap();
    for f in ["sft.json", "sft.bin", "policy.json", "policy.bin", "log.jsonl", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: ExperimentReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    let lines = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2 + 2 + 3);
    let (header, params) =
        crate::policy::load_checkpoint(&dir.path().join("policy.json"), Some((cfg.env.d_l, cfg.env.d_v))).unwrap();
    assert_eq!(header.config_hash, config_hash(&cfg));
    assert_eq!(header.step, 2);
    assert_eq!(params.d_l(), cfg.env.d_l);
}

#[test]
fn config_validation() {
    let mut cfg = ExperimentConfig::with_seed(0);
    assert!(cfg.validate().is_ok());
    cfg.data.difficulties = vec![9];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ExperimentConfig::with_seed(0);
    cfg.train.group_size = 1;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let json = r#"{"seed": 1, "train": {"bogus": 2}}"#;
    assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    let json = r#"{"seed": 1}"#;
    let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.policy.logit_scale, 10.0);
    assert_ne!(config_hash(&cfg), config_hash(&ExperimentConfig::with_seed(2)));
}

proptest! {
    #[test]
    fn advantages_sum_to_zero_and_ignore_shifts(
        rewards in prop::collection::vec(-2.0f64..2.0, 2..9),
        c in -50.0f64..50.0,
    ) {
        let a = group_advantages(&rewards);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        for (x, y) in a.iter().zip(group_advantages(&shifted)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
