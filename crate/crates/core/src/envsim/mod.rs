//! Synthetic stand-in for a multimodal backbone.
//!
//! Tasks plant rectangular blocks on a patch grid whose similarity to the
//! query decreases with relevance rank. A frozen recurrent [`ToyReasoner`]
//! absorbs injected region embeddings one at a time; the gold answer is its
//! readout after the `difficulty` most relevant blocks were injected in rank
//! order, so the order of access matters.

mod reasoner;
mod rollout;
mod task;

pub use reasoner::ToyReasoner;
pub use rollout::{
    compute_reward, rollout, RewardBreakdown, RewardWeights, RolloutMode, RolloutOptions, Step,
    Trajectory,
};
pub use task::{
    generate_dataset, generate_task, prepare_tasks, read_tasks_jsonl, write_tasks_jsonl,
    PlantedBlock, PreparedTask, TaskInstance,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};

/// Stream ids that keep the environment's random draws apart.
pub(crate) const STREAM_REASONER: u64 = 0x5245_4153;
pub(crate) const STREAM_BANK: u64 = 0x4241_4e4b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    /// Patch embedding dimension.
    pub d_v: usize,
    /// Reasoning state dimension.
    pub d_l: usize,
    pub classes: usize,
    /// Planted blocks per task.
    pub blocks: usize,
    /// Hard cap on steps per rollout.
    pub cap: usize,
    /// Block sides are drawn from `block_min..=block_max`.
    pub block_min: usize,
    pub block_max: usize,
    /// Spread of a task's query around the shared query prior.
    pub query_noise: f64,
    /// Cosine to the query of required blocks, drawn from this range.
    pub required_sim: [f64; 2],
    /// Cosine to the query of distractor blocks.
    pub distractor_sim: [f64; 2],
    /// Cosine to the query of background patches.
    pub background_sim: [f64; 2],
    /// Minimum gap between the cosines of adjacent blocks.
    pub min_gap: f64,
    /// Norm of the per-patch perturbation of block and background features.
    pub patch_noise: f64,
    /// Norm of the extra perturbation separating fused from patch embeddings.
    pub fused_noise: f64,
    /// Scale of the reasoner's input map relative to a unit-variance init.
    pub input_gain: f64,
    /// Spectral norm of the reasoner's recurrent matrix.
    pub spectral_cap: f64,
    /// Latent tasks used to center the readout.
    pub calibration_tasks: usize,
    pub max_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            height: 16,
            width: 16,
            d_v: 32,
            d_l: 64,
            classes: 4,
            blocks: 4,
            cap: 8,
            block_min: 2,
            block_max: 4,
            query_noise: 0.3,
            required_sim: [0.6, 0.95],
            distractor_sim: [0.15, 0.35],
            background_sim: [-0.4, -0.2],
            min_gap: 0.05,
            patch_noise: 0.1,
            fused_noise: 0.05,
            input_gain: 3.0,
            spectral_cap: 0.9,
            calibration_tasks: 400,
            max_attempts: 200,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("env config: {m}")));
        if self.height == 0 || self.width == 0 || self.d_v == 0 || self.d_l == 0 {
            return bad("dimensions must be positive");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.cap < 1 {
            return bad("cap must be >= 1");
        }
        if self.block_min < 1 || self.block_min > self.block_max {
            return bad("block sides need 1 <= block_min <= block_max");
        }
        let area = (self.block_max + 1) * (self.block_max + 1);
        if self.blocks * area > self.height * self.width {
            return bad("blocks do not fit on the grid");
        }
        for (name, r) in [
            ("required_sim", self.required_sim),
            ("distractor_sim", self.distractor_sim),
            ("background_sim", self.background_sim),
        ] {
            if !(r[0] <= r[1] && r[0] > -1.0 && r[1] < 1.0) {
                return bad(&format!("{name} must be an ordered range inside (-1, 1)"));
            }
        }
        if self.d_v < 3 {
            return bad("d_v must be >= 3");
        }
        if !(self.spectral_cap > 0.0 && self.spectral_cap < 1.0) {
            return bad("spectral_cap must lie in (0, 1)");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be >= 1");
        }
        Ok(())
    }
}

/// Everything frozen for one experiment seed: the reasoner and the query prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: EnvConfig,
    pub reasoner: ToyReasoner,
    /// Unit direction every task query scatters around.
    pub query_prior: Vector,
}

impl Environment {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, STREAM_REASONER);
        let prior = Vector::from_raw((0..config.d_v).map(|_| rng.normal()).collect()).normalized();
        let mut reasoner = ToyReasoner::init(&config, &mut rng);
        let mut calib = rng.child(1);
        let mut finals = Vec::with_capacity(config.calibration_tasks);
        for i in 0..config.calibration_tasks {
            let difficulty = 1 + i % config.blocks.clamp(1, 3);
            let q = task::sample_query(&prior, &config, &mut calib);
            let levels = task::sample_levels(&config, difficulty, &mut calib)?;
            let feats: Vec<Vector> = levels[..difficulty]
                .iter()
                .map(|&c| task::feature_with_cosine(c, &q, &prior, &mut calib))
                .collect();
            finals.push(reasoner.run(&reasoner.h0, feats.iter()));
        }
        if !finals.is_empty() {
            reasoner.center_readout(&Vector::mean(&finals));
        }
        Ok(Environment {
            config,
            reasoner,
            query_prior: prior,
        })
    }
}

#[cfg(test)]
mod tests;
