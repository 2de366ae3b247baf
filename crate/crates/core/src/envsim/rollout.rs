use serde::{Deserialize, Serialize};

use super::{TaskInstance, ToyReasoner};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::policy::{
    greedy_action, log_prob, sample_action, score_actions, Action, ActionDistribution, PolicyConfig,
    PolicyParams, ReasoningState,
};
use crate::regions::RegionBank;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    /// Bonus for stopping explicitly before the cap.
    pub format: f64,
    /// Penalty per step.
    pub length: f64,
    /// Penalty per region injection.
    pub vision: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            format: 0.2,
            length: 0.01,
            vision: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub r_format: f64,
    pub length_tokens: usize,
    pub vision_steps: usize,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(correct: bool, clean_stop: bool, length_tokens: usize, vision_steps: usize, w: &RewardWeights) -> Self {
        let r_task = if correct { 1.0 } else { 0.0 };
        let r_format = if clean_stop { 1.0 } else { 0.0 };
        let total = r_task + w.format * r_format
            - w.length * length_tokens as f64
            - w.vision * vision_steps as f64;
        RewardBreakdown {
            r_task,
            r_format,
            length_tokens,
            vision_steps,
            total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: ReasoningState,
    pub action: Action,
    /// Log-probability of `action` under the unrestricted policy.
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub predicted_answer: usize,
    /// The cap ended the episode rather than an explicit Stop.
    pub forced_stop: bool,
    pub final_state: Vector,
    pub reward: RewardBreakdown,
}

impl Trajectory {
    pub fn vision_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.action, Action::Select(_)))
            .count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s.action {
                Action::Select(k) => Some(k),
                Action::Stop => None,
            })
            .collect()
    }
}

pub fn compute_reward(traj: &Trajectory, task: &TaskInstance, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown::new(
        traj.predicted_answer == task.gold_answer,
        !traj.forced_stop,
        traj.steps.len(),
        traj.vision_steps(),
        w,
    )
}

/// How actions are chosen during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum RolloutMode<'a> {
    Sample,
    Greedy,
    /// Uniform over the actions the policy leaves unmasked.
    Random,
    /// Replays the given actions, then stops.
    Script(&'a [Action]),
}

/// Everything a rollout needs besides the bank and the mode.
#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions<'a> {
    pub params: &'a PolicyParams,
    pub policy: &'a PolicyConfig,
    pub reasoner: &'a ToyReasoner,
    pub weights: RewardWeights,
    pub cap: usize,
    /// Force exactly `k` selections (fewer if the bank runs out), then Stop.
    pub fixed_k: Option<usize>,
}

fn budget_restrict(dist: &ActionDistribution, selects: usize, k: usize) -> Result<ActionDistribution> {
    let stop = dist.slots();
    let open_slots = (0..stop).any(|i| !dist.is_masked(i));
    if selects < k && open_slots {
        dist.restrict(|i| i != stop)
    } else {
        dist.restrict(|i| i == stop)
    }
}

/// Runs one episode from the reasoner's initial state.
pub fn rollout(
    opts: &RolloutOptions,
    bank: &RegionBank,
    gold: usize,
    mode: RolloutMode,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    if opts.cap == 0 {
        return Err(Error::invalid("rollout cap must be >= 1"));
    }
    let reasoner = opts.reasoner;
    let mut state = ReasoningState::initial(reasoner.h0.clone());
    let mut steps = Vec::new();
    let mut forced_stop = false;
    let mut selects = 0;
    for t in 0..opts.cap {
        let dist = score_actions(opts.params, opts.policy, &state, bank)?;
        let choose_from = match opts.fixed_k {
            Some(k) => budget_restrict(&dist, selects, k)?,
            None => dist.clone(),
        };
        let mut action = match mode {
            RolloutMode::Sample => sample_action(&choose_from, rng)?,
            RolloutMode::Greedy => greedy_action(&choose_from),
            RolloutMode::Random => sample_action(&choose_from.uniform_over_support(), rng)?,
            RolloutMode::Script(actions) => actions.get(t).copied().unwrap_or(Action::Stop),
        };
        if t + 1 == opts.cap && action != Action::Stop {
            action = Action::Stop;
            forced_stop = true;
        }
        let lp = log_prob(&dist, action)?;
        steps.push(Step {
            state: state.clone(),
            action,
            log_prob: lp,
        });
        match action {
            Action::Stop => break,
            Action::Select(k) => {
                state = ReasoningState {
                    h: reasoner.step(&state.h, bank.slot_embedding(k)),
                    step: state.step + 1,
                    visited: {
                        let mut v = state.visited.clone();
                        v.push(k);
                        v
                    },
                };
                selects += 1;
            }
        }
    }
    let predicted_answer = reasoner.answer(&state.h);
    let vision = selects;
    let reward = RewardBreakdown::new(
        predicted_answer == gold,
        !forced_stop,
        steps.len(),
        vision,
        &opts.weights,
    );
    Ok(Trajectory {
        steps,
        predicted_answer,
        forced_stop,
        final_state: state.h,
        reward,
    })
}
