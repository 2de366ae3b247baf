//! End-to-end driver: data, Stage I, Stage II, periodic evaluation and
//! artifacts. Every random draw comes from a stream keyed by the config seed,
//! so a run is replayable bit for bit regardless of the thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    curriculum_lambda, grpo_step, pseudo_expert_order, sft_step, ExpertBranch, GrpoMetrics,
    RlContext, RlTask, TrainConfig,
};
use crate::envsim::{generate_dataset, prepare_tasks, EnvConfig, Environment, PreparedTask};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, EvalReport, EvalSummary, Evaluator};
use crate::numerics::RngStream;
use crate::policy::{save_checkpoint, PolicyConfig, PolicyParams};
use crate::regions::RegionConfig;

const STREAM_TRAIN_DATA: u64 = 0x5452_4e44;
const STREAM_EVAL_DATA: u64 = 0x4556_4c44;
const STREAM_ABLATION_DATA: u64 = 0x4142_4c44;
const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_SFT: u64 = 0x5346_5400;
const STREAM_RL: u64 = 0x524c_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Ablation,
}

impl Split {
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => STREAM_TRAIN_DATA,
            Split::Eval => STREAM_EVAL_DATA,
            Split::Ablation => STREAM_ABLATION_DATA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub ablation_tasks: usize,
    pub ablation_difficulty: usize,
    /// Difficulty mix of the train and eval splits, cycled per task.
    pub difficulties: Vec<usize>,
    /// Fixed budgets compared against the adaptive policy.
    pub budgets: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_tasks: 600,
            eval_tasks: 600,
            ablation_tasks: 500,
            ablation_difficulty: 2,
            difficulties: vec![1, 2, 3],
            budgets: vec![2, 3, 4],
        }
    }
}

impl DataConfig {
    pub fn split(&self, split: Split) -> (usize, Vec<usize>) {
        match split {
            Split::Train => (self.train_tasks, self.difficulties.clone()),
            Split::Eval => (self.eval_tasks, self.difficulties.clone()),
            Split::Ablation => (self.ablation_tasks, vec![self.ablation_difficulty]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub regions: RegionConfig,
    #[serde(default = "experiment_policy")]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

/// Policy defaults for training runs: a sharper softmax than the library default.
pub fn experiment_policy() -> PolicyConfig {
    PolicyConfig {
        logit_scale: 10.0,
        ..PolicyConfig::default()
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            env: EnvConfig::default(),
            regions: RegionConfig::default(),
            policy: experiment_policy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.env.validate().map_err(cfg)?;
        self.regions.validate().map_err(cfg)?;
        self.policy.validate().map_err(cfg)?;
        self.train.validate()?;
        let d = &self.data;
        if d.difficulties.is_empty() {
            return Err(Error::Config("data.difficulties is empty".into()));
        }
        let blocks = self.env.blocks;
        if d
            .difficulties
            .iter()
            .chain([&d.ablation_difficulty])
            .any(|&x| x < 1 || x > blocks)
        {
            return Err(Error::Config(format!("difficulties must lie in 1..={blocks}")));
        }
        if d.budgets.iter().any(|&k| k == 0 || k >= self.env.cap) {
            return Err(Error::Config("budgets must lie in 1..cap".into()));
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(self.env.clone(), self.seed)
    }

    pub fn generate(&self, env: &Environment, split: Split) -> Result<Vec<PreparedTask>> {
        let (n, mix) = self.data.split(split);
        let tasks = generate_dataset(env, &self.regions, n, &mix, self.seed, split.stream())?;
        prepare_tasks(tasks, &self.regions)
    }

    pub fn init_params(&self) -> PolicyParams {
        let mut rng = RngStream::new(self.seed, STREAM_INIT);
        PolicyParams::init(self.env.d_l, self.env.d_v, &mut rng)
    }

    pub fn evaluator<'a>(
        &'a self,
        env: &'a Environment,
        params: &'a PolicyParams,
        reference: Option<&'a PolicyParams>,
    ) -> Evaluator<'a> {
        Evaluator {
            params,
            policy: &self.policy,
            env,
            regions: &self.regions,
            weights: self.train.reward,
            reference,
            seed: self.seed,
        }
    }
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean negative log-likelihood per demonstration.
    pub loss: f64,
    pub steps: usize,
    pub skipped: usize,
    pub saliency_demos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub epochs: Vec<SftEpoch>,
}

/// Stage I: `sft_epochs` passes of curriculum behavior cloning over `tasks`.
pub fn run_sft(
    params: &mut PolicyParams,
    cfg: &ExperimentConfig,
    env: &Environment,
    tasks: &[PreparedTask],
) -> Result<SftOutcome> {
    let train = &cfg.train;
    let base = RngStream::new(cfg.seed, STREAM_SFT);
    let mut epochs = Vec::with_capacity(train.sft_epochs);
    for e in 0..train.sft_epochs {
        let lambda = curriculum_lambda(e, train.warm_epochs);
        let mut erng = base.child(e as u64);
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        erng.shuffle(&mut order);
        let demos = order
            .par_iter()
            .map(|&i| {
                let mut rng = erng.child(1 + i as u64);
                let t = &tasks[i];
                pseudo_expert_order(&t.task.grid, &t.bank, lambda, train.random_tile, &cfg.regions, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row = SftEpoch {
            epoch: e,
            lambda,
            loss: 0.0,
            steps: 0,
            skipped: 0,
            saliency_demos: demos.iter().filter(|d| d.branch == ExpertBranch::Saliency).count(),
        };
        for batch in demos.chunks(train.sft_batch_size) {
            let r = sft_step(params, &cfg.policy, &env.reasoner, batch, train.sft_lr)?;
            row.loss += r.loss;
            row.steps += r.steps;
            row.skipped += r.skipped;
        }
        row.loss /= demos.len().max(1) as f64;
        epochs.push(row);
    }
    Ok(SftOutcome { epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub greedy_accuracy: f64,
    pub mean_vision_steps: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub lambda: f64,
}

impl EvalPoint {
    fn from_summary(step: usize, lambda: f64, s: &EvalSummary) -> Self {
        EvalPoint {
            step,
            greedy_accuracy: s.accuracy,
            mean_vision_steps: s.mean_vision_steps,
            mean_reward: s.mean_reward,
            mean_kl: s.mean_kl.unwrap_or(0.0),
            lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlStep {
    pub step: usize,
    pub lambda: f64,
    #[serde(flatten)]
    pub metrics: GrpoMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub steps: Vec<RlStep>,
    pub evals: Vec<EvalPoint>,
    /// Largest |sum of advantages| over every group of the run.
    pub max_abs_advantage_sum: f64,
}

/// Stage II: `rl_steps` GRPO updates anchored to `reference`, with greedy
/// evaluation on `eval_tasks` every `eval_every` steps and at the end.
pub fn run_rl(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    cfg: &ExperimentConfig,
    env: &Environment,
    tasks: &[PreparedTask],
    eval_tasks: &[PreparedTask],
) -> Result<RlOutcome> {
    let train = &cfg.train;
    if tasks.is_empty() && train.rl_steps > 0 {
        return Err(Error::invalid("Stage II needs at least one training task"));
    }
    let ctx = RlContext {
        reference,
        policy: &cfg.policy,
        reasoner: &env.reasoner,
        cap: env.config.cap,
        train,
    };
    let mut rng = RngStream::new(cfg.seed, STREAM_RL);
    let mut out = RlOutcome {
        steps: Vec::with_capacity(train.rl_steps),
        evals: Vec::new(),
        max_abs_advantage_sum: 0.0,
    };
    let evaluate = |params: &PolicyParams, step: usize, lambda: f64| -> Result<EvalPoint> {
        let s = cfg
            .evaluator(env, params, Some(reference))
            .evaluate(eval_tasks, &EvalOptions::default())?;
        Ok(EvalPoint::from_summary(step, lambda, &s))
    };
    out.evals.push(evaluate(params, 0, curriculum_lambda(0, train.rl_warm_steps))?);
    for step in 0..train.rl_steps {
        let lambda = curriculum_lambda(step, train.rl_warm_steps);
        let batch: Vec<RlTask> = (0..train.rl_batch_tasks)
            .map(|_| {
                let t = &tasks[rng.below(tasks.len())];
                RlTask {
                    bank: &t.bank,
                    gold: t.task.gold_answer,
                }
            })
            .collect();
        let metrics = grpo_step(params, &ctx, &batch, lambda, &mut rng)?;
        out.max_abs_advantage_sum = out.max_abs_advantage_sum.max(metrics.max_abs_advantage_sum);
        out.steps.push(RlStep { step, lambda, metrics });
        let done = step + 1;
        if done == train.rl_steps || (train.eval_every > 0 && done % train.eval_every == 0) {
            out.evals.push(evaluate(params, done, curriculum_lambda(done, train.rl_warm_steps))?);
        }
    }
    Ok(out)
}

/// Everything a run records, one JSON object per line when written.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub sft: Vec<SftEpoch>,
    pub rl: Vec<RlStep>,
    pub evals: Vec<EvalPoint>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    SftEpoch(&'a SftEpoch),
    RlStep(&'a RlStep),
    Eval(&'a EvalPoint),
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let lines = self
            .sft
            .iter()
            .map(LogLine::SftEpoch)
            .chain(self.rl.iter().map(LogLine::RlStep))
            .chain(self.evals.iter().map(LogLine::Eval));
        for line in lines {
            let text = serde_json::to_string(&line).map_err(|e| Error::json(path, e))?;
            writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_hash: String,
    pub sft_final_loss: f64,
    /// The frozen Stage I policy on the eval split.
    pub sft_eval: EvalSummary,
    pub evals: Vec<EvalPoint>,
    /// The final policy on the eval split, with budget and ablation tables.
    pub final_eval: EvalReport,
    pub max_abs_advantage_sum: f64,
}

/// A finished run held in memory.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub log: TrainingLog,
    pub sft_params: PolicyParams,
    pub params: PolicyParams,
}

/// Runs both stages and the final evaluation without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let train = cfg.generate(&env, Split::Train)?;
    let eval = cfg.generate(&env, Split::Eval)?;
    let ablation = cfg.generate(&env, Split::Ablation)?;

    let mut params = cfg.init_params();
    let sft = run_sft(&mut params, cfg, &env, &train)?;
    let sft_params = params.clone();
    let sft_eval = cfg
        .evaluator(&env, &sft_params, None)
        .evaluate(&eval, &EvalOptions::default())?;
    let rl = run_rl(&mut params, &sft_params, cfg, &env, &train, &eval)?;
    let final_eval = cfg
        .evaluator(&env, &params, Some(&sft_params))
        .report(&eval, Some(&ablation), &cfg.data.budgets)?;

    let report = ExperimentReport {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        sft_final_loss: sft.epochs.last().map_or(0.0, |e| e.loss),
        sft_eval,
        evals: rl.evals.clone(),
        final_eval,
        max_abs_advantage_sum: rl.max_abs_advantage_sum,
    };
    Ok(ExperimentRun {
        report,
        log: TrainingLog {
            sft: sft.epochs,
            rl: rl.steps,
            evals: rl.evals,
        },
        sft_params,
        params,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// [`execute`], then writes `sft.json`, `policy.json` (with `.bin` data),
/// `log.jsonl` and `report.json` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let run = execute(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = &run.report.config_hash;
    save_checkpoint(&out_dir.join("sft.json"), &run.sft_params, hash, cfg.train.sft_epochs)?;
    save_checkpoint(&out_dir.join("policy.json"), &run.params, hash, cfg.train.rl_steps)?;
    run.log.write_jsonl(&out_dir.join("log.jsonl"))?;
    write_json(&out_dir.join("report.json"), &run.report)?;
    Ok(run.report)
}
