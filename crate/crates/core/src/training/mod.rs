//! Stage I curriculum behavior cloning and Stage II group-relative policy
//! optimization with a KL anchor to the Stage I policy.

mod experiment;

pub use experiment::{
    config_hash, execute, experiment_policy, run_experiment, run_rl, run_sft, write_json,
    DataConfig, EvalPoint, ExperimentConfig, ExperimentReport, ExperimentRun, RlOutcome, RlStep,
    SftEpoch, SftOutcome, Split, TrainingLog,
};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsim::{rollout, RewardWeights, RolloutMode, RolloutOptions, ToyReasoner, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::policy::{
    backprop_scores, score_actions_cached, score_grad_log_prob, Action, ActionDistribution,
    PolicyConfig, PolicyGrad, PolicyParams, ReasoningState,
};
use crate::regions::{tiling_bank, RegionBank, RegionConfig};
use crate::saliency::PatchGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sft_lr: f64,
    pub rl_lr: f64,
    /// Trajectories per task in a group.
    pub group_size: usize,
    /// KL weight toward the Stage I policy.
    pub kl_beta: f64,
    pub reward: RewardWeights,
    /// Epochs until the curriculum reaches the saliency expert only.
    pub warm_epochs: usize,
    pub sft_epochs: usize,
    pub sft_batch_size: usize,
    pub rl_steps: usize,
    /// Tasks per Stage II step.
    pub rl_batch_tasks: usize,
    /// Steps until Stage II samples from the learned policy only.
    pub rl_warm_steps: usize,
    /// Tile side of the question-independent bank behind random demonstrations.
    pub random_tile: usize,
    /// Evaluate every this many Stage II steps (0 disables intermediate evals).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft_lr: 0.1,
            rl_lr: 0.05,
            group_size: 4,
            kl_beta: 0.02,
            reward: RewardWeights::default(),
            warm_epochs: 10,
            sft_epochs: 30,
            sft_batch_size: 32,
            rl_steps: 700,
            rl_batch_tasks: 16,
            rl_warm_steps: 50,
            random_tile: 4,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.sft_lr,
            self.rl_lr,
            self.kl_beta,
            self.reward.format,
            self.reward.length,
            self.reward.vision,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("learning rates and weights must be finite and >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.sft_batch_size == 0 || self.rl_batch_tasks == 0 || self.random_tile == 0 {
            return Err(Error::Config("batch sizes and random_tile must be >= 1".into()));
        }
        Ok(())
    }
}

/// `min(1, epoch / warm)`; a zero warm-up means the schedule starts saturated.
pub fn curriculum_lambda(epoch: usize, warm: usize) -> f64 {
    if warm == 0 {
        return 1.0;
    }
    (epoch as f64 / warm as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertBranch {
    Saliency,
    Random,
}

/// A demonstration: the bank it acts on and the action sequence, Stop last.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDemo {
    pub branch: ExpertBranch,
    pub bank: RegionBank,
    pub actions: Vec<Action>,
}

/// Draws a demonstration from the curriculum mixture.
///
/// With probability `lambda` the saliency expert visits every local region in
/// bank order. Otherwise a random-length run of distinct tiles from a
/// question-independent tiling of the grid is visited in random order.
pub fn pseudo_expert_order(
    grid: &PatchGrid,
    bank: &RegionBank,
    lambda: f64,
    tile: usize,
    region_cfg: &RegionConfig,
    rng: &mut RngStream,
) -> Result<ExpertDemo> {
    if rng.bernoulli(lambda) {
        let mut actions: Vec<Action> = (0..bank.regions.len()).map(Action::Select).collect();
        actions.push(Action::Stop);
        return Ok(ExpertDemo {
            branch: ExpertBranch::Saliency,
            bank: bank.clone(),
            actions,
        });
    }
    let tiles = region_cfg.max_regions.saturating_sub(1);
    let mut tile_rng = rng.child(0);
    let random_bank = tiling_bank(grid, tile, tiles, region_cfg, &mut tile_rng)?;
    let k = random_bank.regions.len();
    let mut actions = Vec::new();
    if k > 0 {
        let len = 1 + rng.below(k);
        actions.extend(rng.choose_distinct(k, len).into_iter().map(Action::Select));
    }
    actions.push(Action::Stop);
    Ok(ExpertDemo {
        branch: ExpertBranch::Random,
        bank: random_bank,
        actions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStepResult {
    /// `-sum log pi(expert action)` over the batch, before the update.
    pub loss: f64,
    pub steps: usize,
    /// Expert actions the policy masks (revisits), left out of the loss.
    pub skipped: usize,
}

/// Loss and gradient of one teacher-forced demonstration.
fn demo_grad(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    reasoner: &ToyReasoner,
    demo: &ExpertDemo,
) -> Result<(f64, PolicyGrad, usize, usize)> {
    let mut grad = params.zeros_like();
    let mut state = ReasoningState::initial(reasoner.h0.clone());
    let (mut loss, mut steps, mut skipped) = (0.0, 0, 0);
    for &a in &demo.actions {
        let cache = score_actions_cached(params, cfg, &state, &demo.bank)?;
        match score_grad_log_prob(&cache.dist, a) {
            Ok(ds) => {
                loss -= cache.dist.probs[a.index(cache.dist.slots())].ln();
                let neg: Vec<f64> = ds.iter().map(|d| -d).collect();
                backprop_scores(params, cfg, &cache, &neg, &mut grad);
                steps += 1;
            }
            Err(Error::Masked(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
        match a {
            Action::Stop => break,
            Action::Select(k) => {
                let h = reasoner.step(&state.h, demo.bank.slot_embedding(k));
                state.visited.push(k);
                state = ReasoningState {
                    h,
                    step: state.step + 1,
                    visited: state.visited,
                };
            }
        }
    }
    Ok((loss, grad, steps, skipped))
}

/// One gradient step of behavior cloning on `batch`.
///
/// The reported loss is summed over the batch; the update uses the batch-mean
/// gradient so `lr` does not depend on the batch size.
pub fn sft_step(
    params: &mut PolicyParams,
    cfg: &PolicyConfig,
    reasoner: &ToyReasoner,
    batch: &[ExpertDemo],
    lr: f64,
) -> Result<SftStepResult> {
    if batch.is_empty() {
        return Ok(SftStepResult {
            loss: 0.0,
            steps: 0,
            skipped: 0,
        });
    }
    let snapshot = &*params;
    let parts: Vec<_> = batch
        .par_iter()
        .map(|d| demo_grad(snapshot, cfg, reasoner, d))
        .collect::<Result<_>>()?;
    let mut grad = params.zeros_like();
    let mut result = SftStepResult {
        loss: 0.0,
        steps: 0,
        skipped: 0,
    };
    for (loss, g, steps, skipped) in parts {
        result.loss += loss;
        result.steps += steps;
        result.skipped += skipped;
        grad.axpy(1.0, &g);
    }
    params.axpy(-lr / batch.len() as f64, &grad);
    Ok(result)
}

/// `sum p ln(p / q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("KL between distributions of different length"));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(q.probs.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Divergent(i));
        }
        kl += pi * (pi.ln() - qi.ln());
    }
    Ok(kl.max(0.0))
}

/// `d KL(p || q) / d scores_of_p`.
fn kl_score_grad(p: &ActionDistribution, q: &ActionDistribution, kl: f64) -> Vec<f64> {
    p.probs
        .iter()
        .zip(q.probs.iter())
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi.ln() - qi.ln() - kl) })
        .collect()
}

/// Rewards minus their mean.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// G trajectories sampled on one task.
#[derive(Clone, Debug)]
pub struct TrajectoryGroup<'a> {
    pub bank: &'a RegionBank,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl<'a> TrajectoryGroup<'a> {
    pub fn new(bank: &'a RegionBank, trajectories: Vec<Trajectory>) -> Self {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward.total).collect();
        let advantages = group_advantages(&rewards);
        TrajectoryGroup {
            bank,
            trajectories,
            rewards,
            advantages,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoLoss {
    /// Policy-gradient term plus `beta` times the mean KL.
    pub loss: f64,
    /// Mean KL to the reference over every visited state.
    pub mean_kl: f64,
    pub states: usize,
}

struct GroupParts {
    pg_loss: f64,
    pg_grad: PolicyGrad,
    kl_sum: f64,
    kl_grad: PolicyGrad,
    states: usize,
}

fn group_parts(
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &PolicyConfig,
    group: &TrajectoryGroup,
) -> Result<GroupParts> {
    let mut parts = GroupParts {
        pg_loss: 0.0,
        pg_grad: params.zeros_like(),
        kl_sum: 0.0,
        kl_grad: params.zeros_like(),
        states: 0,
    };
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        for step in &traj.steps {
            let cache = score_actions_cached(params, cfg, &step.state, group.bank)?;
            let ds = score_grad_log_prob(&cache.dist, step.action)?;
            let lp = cache.dist.probs[step.action.index(cache.dist.slots())].ln();
            parts.pg_loss -= adv * lp;
            if adv != 0.0 {
                let d: Vec<f64> = ds.iter().map(|x| -adv * x).collect();
                backprop_scores(params, cfg, &cache, &d, &mut parts.pg_grad);
            }
            let q = score_actions_cached(reference, cfg, &step.state, group.bank)?.dist;
            let kl = kl_divergence(&cache.dist, &q)?;
            parts.kl_sum += kl;
            let dk = kl_score_grad(&cache.dist, &q, kl);
            backprop_scores(params, cfg, &cache, &dk, &mut parts.kl_grad);
            parts.states += 1;
        }
    }
    Ok(parts)
}

/// Loss and gradient of the Stage II objective over fixed groups.
///
/// The policy-gradient term `-sum A log pi` is divided by the number of
/// trajectories; the KL term is the mean over every visited state.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &PolicyConfig,
    groups: &[TrajectoryGroup],
    beta: f64,
) -> Result<(GrpoLoss, PolicyGrad)> {
    let parts: Vec<GroupParts> = groups
        .par_iter()
        .map(|g| group_parts(params, reference, cfg, g))
        .collect::<Result<_>>()?;
    let n_traj: usize = groups.iter().map(|g| g.trajectories.len()).sum::<usize>().max(1);
    let states: usize = parts.iter().map(|p| p.states).sum();
    let mut grad = params.zeros_like();
    let (mut pg, mut kl) = (0.0, 0.0);
    for p in &parts {
        pg += p.pg_loss;
        kl += p.kl_sum;
        grad.axpy(1.0 / n_traj as f64, &p.pg_grad);
        if states > 0 && beta > 0.0 {
            grad.axpy(beta / states as f64, &p.kl_grad);
        }
    }
    let mean_kl = if states > 0 { kl / states as f64 } else { 0.0 };
    Ok((
        GrpoLoss {
            loss: pg / n_traj as f64 + beta * mean_kl,
            mean_kl,
            states,
        },
        grad,
    ))
}

/// One task's bank and gold answer.
#[derive(Clone, Copy, Debug)]
pub struct RlTask<'a> {
    pub bank: &'a RegionBank,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_vision_steps: f64,
    pub accuracy: f64,
    /// Largest |sum of advantages| over the step's groups.
    pub max_abs_advantage_sum: f64,
    /// Groups whose rewards were all equal.
    pub flat_groups: usize,
    /// Trajectories generated by the learned policy rather than at random.
    pub policy_trajectories: usize,
}

/// The frozen pieces of a Stage II run.
#[derive(Clone, Copy, Debug)]
pub struct RlContext<'a> {
    pub reference: &'a PolicyParams,
    pub policy: &'a PolicyConfig,
    pub reasoner: &'a ToyReasoner,
    pub cap: usize,
    pub train: &'a TrainConfig,
}

/// Samples a group per task from the mixed policy and takes one update.
///
/// Each trajectory flips a `lambda`-coin: heads samples from the learned
/// policy, tails picks uniformly among the unmasked actions.
pub fn grpo_step(
    params: &mut PolicyParams,
    ctx: &RlContext,
    batch: &[RlTask],
    lambda: f64,
    rng: &mut RngStream,
) -> Result<GrpoMetrics> {
    let (cfg, train) = (ctx.policy, ctx.train);
    if train.group_size < 2 {
        return Err(Error::invalid("group size must be >= 2"));
    }
    let step_seed = rng.next_u64();
    let opts = RolloutOptions {
        params,
        policy: cfg,
        reasoner: ctx.reasoner,
        weights: train.reward,
        cap: ctx.cap,
        fixed_k: None,
    };
    let sampled: Vec<(Vec<Trajectory>, usize)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, task)| {
            let mut trng = RngStream::new(step_seed, b as u64);
            let mut trajs = Vec::with_capacity(train.group_size);
            let mut from_policy = 0;
            for _ in 0..train.group_size {
                let mode = if trng.bernoulli(lambda) {
                    from_policy += 1;
                    RolloutMode::Sample
                } else {
                    RolloutMode::Random
                };
                trajs.push(rollout(&opts, task.bank, task.gold, mode, &mut trng)?);
            }
            Ok((trajs, from_policy))
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(batch.len());
    let mut policy_trajectories = 0;
    for (task, (trajs, from_policy)) in batch.iter().zip(sampled) {
        policy_trajectories += from_policy;
        groups.push(TrajectoryGroup::new(task.bank, trajs));
    }
    let (loss, grad) = grpo_loss_and_grad(params, ctx.reference, cfg, &groups, train.kl_beta)?;
    params.axpy(-train.rl_lr, &grad);

    let n = groups.iter().map(|g| g.trajectories.len()).sum::<usize>().max(1) as f64;
    let all = || groups.iter().flat_map(|g| g.trajectories.iter());
    Ok(GrpoMetrics {
        loss: loss.loss,
        mean_reward: all().map(|t| t.reward.total).sum::<f64>() / n,
        mean_kl: loss.mean_kl,
        mean_vision_steps: all().map(|t| t.reward.vision_steps as f64).sum::<f64>() / n,
        accuracy: all().map(|t| t.reward.r_task).sum::<f64>() / n,
        max_abs_advantage_sum: groups
            .iter()
            .map(|g| g.advantages.iter().sum::<f64>().abs())
            .fold(0.0, f64::max),
        flat_groups: groups
            .iter()
            .filter(|g| g.rewards.iter().all(|&r| r == g.rewards[0]))
            .count(),
        policy_trajectories,
    })
}

#[cfg(test)]
mod tests;
