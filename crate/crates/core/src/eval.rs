//! Held-out evaluation: greedy accuracy and visual budget, plus the
//! structure x order ablation and the fixed-budget comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envsim::{rollout, Environment, PreparedTask, RewardWeights, RolloutMode, RolloutOptions, Trajectory};
use crate::error::Result;
use crate::numerics::RngStream;
use crate::policy::{score_actions, Action, PolicyConfig, PolicyParams};
use crate::regions::{patch_subset_bank, RegionBank, RegionConfig};
use crate::saliency::compute_saliency;
use crate::training::kl_divergence;

const STREAM_EVAL: u64 = 0x4556_414c;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// The policy chooses which slot to visit next.
    #[default]
    Cognition,
    /// As many visits as the policy would make, to uniformly random slots.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    #[default]
    SaliencyRegions,
    /// Random patch sets with the saliency regions' sizes.
    PatchSubset,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub order: OrderMode,
    pub structure: StructureMode,
    /// `None` lets the policy stop on its own.
    pub fixed_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: usize,
    pub accuracy: f64,
    pub mean_vision_steps: f64,
    pub mean_reward: f64,
    pub mean_length: f64,
    /// Mean KL to the reference policy over visited states, when one is given.
    pub mean_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub difficulty: usize,
    pub tasks: usize,
    pub accuracy: f64,
    pub mean_vision_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub structure: StructureMode,
    pub order: OrderMode,
    pub accuracy: f64,
    pub mean_vision_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn accuracy(&self, structure: StructureMode, order: OrderMode) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.structure == structure && c.order == order)
            .map(|c| c.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    /// `None` is the adaptive policy.
    pub fixed_k: Option<usize>,
    pub accuracy: f64,
    pub mean_vision_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub per_difficulty: Vec<DifficultyRow>,
    pub ablation: Option<AblationTable>,
    pub budget: Vec<BudgetRow>,
}

/// A frozen policy plus everything needed to roll it out.
#[derive(Clone, Copy, Debug)]
pub struct Evaluator<'a> {
    pub params: &'a PolicyParams,
    pub policy: &'a PolicyConfig,
    pub env: &'a Environment,
    pub regions: &'a RegionConfig,
    pub weights: RewardWeights,
    /// KL is reported against this policy when set.
    pub reference: Option<&'a PolicyParams>,
    pub seed: u64,
}

struct Episode {
    difficulty: usize,
    traj: Trajectory,
    kl_sum: f64,
    states: usize,
}

impl Evaluator<'_> {
    fn options(&self, fixed_k: Option<usize>) -> RolloutOptions<'_> {
        RolloutOptions {
            params: self.params,
            policy: self.policy,
            reasoner: &self.env.reasoner,
            weights: self.weights,
            cap: self.env.config.cap,
            fixed_k,
        }
    }

    fn episode(&self, index: usize, prepared: &PreparedTask, opts: &EvalOptions) -> Result<Episode> {
        let mut rng = RngStream::new(self.seed, STREAM_EVAL).child(index as u64);
        let task = &prepared.task;
        let subset;
        let bank: &RegionBank = match opts.structure {
            StructureMode::SaliencyRegions => &prepared.bank,
            StructureMode::PatchSubset => {
                let sal = compute_saliency(&task.grid, self.regions.similarity)?;
                let sizes: Vec<usize> = prepared.bank.regions.iter().map(|r| r.patches.len()).collect();
                subset = patch_subset_bank(&task.grid, &sal, &sizes, self.regions, &mut rng)?;
                &subset
            }
        };
        let ro = self.options(opts.fixed_k);
        let greedy = rollout(&ro, bank, task.gold_answer, RolloutMode::Greedy, &mut rng)?;
        let traj = match opts.order {
            OrderMode::Cognition => greedy,
            OrderMode::Random => {
                let n = greedy.reward.vision_steps.min(bank.slot_count());
                let mut script: Vec<Action> = rng
                    .choose_distinct(bank.slot_count(), n)
                    .into_iter()
                    .map(Action::Select)
                    .collect();
                script.push(Action::Stop);
                let free = RolloutOptions { fixed_k: None, ..ro };
                rollout(&free, bank, task.gold_answer, RolloutMode::Script(&script), &mut rng)?
            }
        };
        let (mut kl_sum, mut states) = (0.0, 0);
        if let Some(reference) = self.reference {
            for step in &traj.steps {
                let p = score_actions(self.params, self.policy, &step.state, bank)?;
                let q = score_actions(reference, self.policy, &step.state, bank)?;
                kl_sum += kl_divergence(&p, &q)?;
                states += 1;
            }
        }
        Ok(Episode {
            difficulty: task.difficulty,
            traj,
            kl_sum,
            states,
        })
    }

    fn episodes(&self, tasks: &[PreparedTask], opts: &EvalOptions) -> Result<Vec<Episode>> {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| self.episode(i, t, opts))
            .collect()
    }

    fn summarize(&self, eps: &[Episode]) -> EvalSummary {
        let n = eps.len();
        let mean = |f: &dyn Fn(&Episode) -> f64| {
            if n == 0 {
                0.0
            } else {
                eps.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let states: usize = eps.iter().map(|e| e.states).sum();
        EvalSummary {
            tasks: n,
            accuracy: mean(&|e| e.traj.reward.r_task),
            mean_vision_steps: mean(&|e| e.traj.reward.vision_steps as f64),
            mean_reward: mean(&|e| e.traj.reward.total),
            mean_length: mean(&|e| e.traj.reward.length_tokens as f64),
            mean_kl: self.reference.map(|_| {
                if states == 0 {
                    0.0
                } else {
                    eps.iter().map(|e| e.kl_sum).sum::<f64>() / states as f64
                }
            }),
        }
    }

    pub fn evaluate(&self, tasks: &[PreparedTask], opts: &EvalOptions) -> Result<EvalSummary> {
        Ok(self.summarize(&self.episodes(tasks, opts)?))
    }

    /// Adaptive greedy summary with a per-difficulty breakdown, the budget
    /// table over `budgets`, and the 2x2 ablation on `ablation_tasks`.
    pub fn report(
        &self,
        tasks: &[PreparedTask],
        ablation_tasks: Option<&[PreparedTask]>,
        budgets: &[usize],
    ) -> Result<EvalReport> {
        let eps = self.episodes(tasks, &EvalOptions::default())?;
        let summary = self.summarize(&eps);
        let mut difficulties: Vec<usize> = eps.iter().map(|e| e.difficulty).collect();
        difficulties.sort_unstable();
        difficulties.dedup();
        let per_difficulty = difficulties
            .into_iter()
            .map(|d| {
                let sub: Vec<&Episode> = eps.iter().filter(|e| e.difficulty == d).collect();
                let n = sub.len() as f64;
                DifficultyRow {
                    difficulty: d,
                    tasks: sub.len(),
                    accuracy: sub.iter().map(|e| e.traj.reward.r_task).sum::<f64>() / n,
                    mean_vision_steps: sub.iter().map(|e| e.traj.reward.vision_steps as f64).sum::<f64>() / n,
                }
            })
            .collect();

        let mut budget = Vec::with_capacity(budgets.len() + 1);
        for &k in budgets {
            let s = self.evaluate(tasks, &EvalOptions {
                fixed_k: Some(k),
                ..EvalOptions::default()
            })?;
            budget.push(BudgetRow {
                fixed_k: Some(k),
                accuracy: s.accuracy,
                mean_vision_steps: s.mean_vision_steps,
            });
        }
        budget.push(BudgetRow {
            fixed_k: None,
            accuracy: summary.accuracy,
            mean_vision_steps: summary.mean_vision_steps,
        });

        let ablation = match ablation_tasks {
            None => None,
            Some(at) => {
                let mut cells = Vec::with_capacity(4);
                for structure in [StructureMode::SaliencyRegions, StructureMode::PatchSubset] {
                    for order in [OrderMode::Cognition, OrderMode::Random] {
                        let s = self.evaluate(at, &EvalOptions {
                            order,
                            structure,
                            fixed_k: None,
                        })?;
                        cells.push(AblationCell {
                            structure,
                            order,
                            accuracy: s.accuracy,
                            mean_vision_steps: s.mean_vision_steps,
                        });
                    }
                }
                Some(AblationTable { tasks: at.len(), cells })
            }
        };

        Ok(EvalReport {
            summary,
            per_difficulty,
            ablation,
            budget,
        })
    }
}
