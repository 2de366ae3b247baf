//! The `ssv` command line: dataset generation, segmentation, training,
//! evaluation and rendering.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envsim::{
    generate_dataset, prepare_tasks, read_tasks_jsonl, rollout, write_tasks_jsonl, PreparedTask,
    RolloutMode, RolloutOptions, TaskInstance,
};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, EvalReport, EvalSummary, OrderMode, StructureMode};
use crate::netpbm::{decode_pgm, encode_pgm, encode_ppm, GrayImage};
use crate::numerics::{RngStream, Vector};
use crate::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use crate::regions::render::{render_overlay, DEFAULT_SCALE};
use crate::regions::{segment, RegionBank, Segmentation};
use crate::saliency::PatchGrid;
use crate::training::{
    config_hash, run_experiment, run_rl, run_sft, write_json, ExperimentConfig, Split, TrainingLog,
};

/// Stream for compressing regions of a PGM input.
const STREAM_PGM: u64 = 0x5047_4d00;

#[derive(Parser, Debug)]
#[command(name = "ssv", version, about = "Structured sequential visual access toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config layered over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.rl_steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: u64,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        config::load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    Ablation,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
            SplitArg::Ablation => Split::Ablation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Cognition,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    SaliencyRegions,
    PatchSubset,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a task split as JSON lines plus a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Task count; defaults to the split's size in the config.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one task, or a PGM image against a 2-d query, into a region bank.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "pgm")]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, requires = "query")]
        pgm: Option<PathBuf>,
        /// JSON array with the query vector for a PGM input.
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage I only: writes `sft.json` and `sft_log.jsonl`.
    TrainSft {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage II from a Stage I checkpoint: writes `policy.json`,
    /// `rl_log.jsonl` and `rl_report.json`.
    TrainRl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Both stages plus the final evaluation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint on a task file.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Reference checkpoint for the KL column.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Task file for the structure x order table; defaults to `--tasks`.
        #[arg(long)]
        ablation_tasks: Option<PathBuf>,
        /// A number or `adaptive`.
        #[arg(long, default_value = "adaptive")]
        fixed_k: String,
        #[arg(long, value_enum, default_value = "cognition")]
        order_mode: OrderArg,
        #[arg(long, value_enum, default_value = "saliency-regions")]
        structure_mode: StructureArg,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay and greedy visit order for one task.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub split: Split,
    pub tasks: usize,
    pub difficulties: Vec<usize>,
    /// SHA-256 of the task file.
    pub data_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub checkpoint_config_hash: String,
    pub tasks_sha256: String,
    pub options: EvalOptions,
    /// The policy under the requested flags.
    pub selected: EvalSummary,
    /// Adaptive evaluation with the budget and ablation tables.
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenderTrace {
    pub task_id: u64,
    pub gold_answer: usize,
    pub predicted_answer: Option<usize>,
    /// Greedy visit order, slot indices into the bank.
    pub visits: Vec<usize>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `tasks.jsonl` gets `tasks.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn cmd_gen_data(cfg: &ExperimentConfig, split: Split, n: Option<usize>, out: &Path) -> Result<Manifest> {
    let env = cfg.environment()?;
    let (default_n, mix) = cfg.data.split(split);
    let n = n.unwrap_or(default_n);
    let tasks = generate_dataset(&env, &cfg.regions, n, &mix, cfg.seed, split.stream())?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_tasks_jsonl(out, &tasks)?;
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        split,
        tasks: n,
        difficulties: mix,
        data_sha256: sha256_file(out)?,
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok(manifest)
}

fn pick_task(path: &Path, index: usize) -> Result<TaskInstance> {
    let mut tasks = read_tasks_jsonl(path)?;
    if index >= tasks.len() {
        return Err(Error::Data(format!(
            "{}: task index {index} out of range ({} tasks)",
            path.display(),
            tasks.len()
        )));
    }
    Ok(tasks.swap_remove(index))
}

/// Each pixel becomes a unit 2-d embedding at angle `(pi / 2) * value / 255`,
/// used for both the patch and the fused features.
pub fn grid_from_pgm(img: &GrayImage, query: Vector) -> Result<PatchGrid> {
    if query.len() != 2 {
        return Err(Error::Data(format!("PGM queries are 2-d, got {} values", query.len())));
    }
    let feats: Vec<Vector> = img
        .pixels
        .iter()
        .map(|&p| {
            let theta = std::f64::consts::FRAC_PI_2 * p as f64 / 255.0;
            Vector::from_raw(vec![theta.cos(), theta.sin()])
        })
        .collect();
    PatchGrid::new(img.height, img.width, feats.clone(), feats, query)
}

fn read_query(path: &Path) -> Result<Vector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    Vector::new(values).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_segmentation(seg: &Segmentation, scale: usize, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("bank.json"), &seg.bank)?;
    write_json(&out.join("saliency.json"), &seg.saliency)?;
    write_bytes(&out.join("saliency.pgm"), &encode_pgm(&seg.saliency.to_pgm()))?;
    let (img, legend) = render_overlay(&seg.saliency, &seg.bank, scale)?;
    write_bytes(&out.join("overlay.ppm"), &encode_ppm(&img))?;
    write_json(&out.join("legend.json"), &legend)
}

fn cmd_segment(
    cfg: &ExperimentConfig,
    tasks: Option<&Path>,
    index: usize,
    pgm: Option<(&Path, &Path)>,
    scale: usize,
    out: &Path,
) -> Result<RegionBank> {
    let seg = match (tasks, pgm) {
        (Some(path), None) => pick_task(path, index)?.segment(&cfg.regions)?,
        (None, Some((img_path, query_path))) => {
            let bytes = fs::read(img_path).map_err(|e| Error::io(img_path, e))?;
            let img = decode_pgm(&bytes)?;
            let grid = grid_from_pgm(&img, read_query(query_path)?)?;
            segment(&grid, &cfg.regions, &mut RngStream::new(cfg.seed, STREAM_PGM))?
        }
        _ => return Err(Error::Config("segment needs --tasks or --pgm with --query".into())),
    };
    write_segmentation(&seg, scale, out)?;
    Ok(seg.bank)
}

fn load_params(cfg: &ExperimentConfig, path: &Path) -> Result<(String, PolicyParams)> {
    let (header, params) = load_checkpoint(path, Some((cfg.env.d_l, cfg.env.d_v)))?;
    Ok((header.config_hash, params))
}

fn cmd_train_sft(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let env = cfg.environment()?;
    let train = cfg.generate(&env, Split::Train)?;
    let mut params = cfg.init_params();
    let sft = run_sft(&mut params, cfg, &env, &train)?;
    create_dir(out)?;
    save_checkpoint(&out.join("sft.json"), &params, &config_hash(cfg), cfg.train.sft_epochs)?;
    TrainingLog {
        sft: sft.epochs,
        ..TrainingLog::default()
    }
    .write_jsonl(&out.join("sft_log.jsonl"))
}

fn cmd_train_rl(cfg: &ExperimentConfig, sft: &Path, out: &Path) -> Result<()> {
    let env = cfg.environment()?;
    let (_, reference) = load_params(cfg, sft)?;
    let train = cfg.generate(&env, Split::Train)?;
    let eval = cfg.generate(&env, Split::Eval)?;
    let mut params = reference.clone();
    let rl = run_rl(&mut params, &reference, cfg, &env, &train, &eval)?;
    create_dir(out)?;
    save_checkpoint(&out.join("policy.json"), &params, &config_hash(cfg), cfg.train.rl_steps)?;
    TrainingLog {
        rl: rl.steps.clone(),
        evals: rl.evals.clone(),
        ..TrainingLog::default()
    }
    .write_jsonl(&out.join("rl_log.jsonl"))?;
    write_json(&out.join("rl_report.json"), &rl)
}

/// Parses `--fixed-k`.
pub fn parse_fixed_k(text: &str) -> Result<Option<usize>> {
    if text == "adaptive" {
        return Ok(None);
    }
    match text.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(Some(k)),
        _ => Err(Error::Config(format!("--fixed-k must be a positive integer or `adaptive`, got `{text}`"))),
    }
}

fn load_prepared(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<PreparedTask>> {
    prepare_tasks(read_tasks_jsonl(path)?, &cfg.regions)
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub tasks: &'a Path,
    pub reference: Option<&'a Path>,
    pub ablation_tasks: Option<&'a Path>,
    pub options: EvalOptions,
}

pub fn cmd_eval(cfg: &ExperimentConfig, req: &EvalRequest) -> Result<EvalOutput> {
    let env = cfg.environment()?;
    let (ckpt_hash, params) = load_params(cfg, req.checkpoint)?;
    let reference = match req.reference {
        Some(p) => Some(load_params(cfg, p)?.1),
        None => None,
    };
    let tasks = load_prepared(cfg, req.tasks)?;
    let ablation = match req.ablation_tasks {
        Some(p) => load_prepared(cfg, p)?,
        None => tasks.clone(),
    };
    let evaluator = cfg.evaluator(&env, &params, reference.as_ref());
    let selected = evaluator.evaluate(&tasks, &req.options)?;
    let report = evaluator.report(&tasks, Some(&ablation), &cfg.data.budgets)?;
    Ok(EvalOutput {
        config_hash: config_hash(cfg),
        checkpoint_config_hash: ckpt_hash,
        tasks_sha256: sha256_file(req.tasks)?,
        options: req.options,
        selected,
        report,
    })
}

fn cmd_render(
    cfg: &ExperimentConfig,
    tasks: &Path,
    index: usize,
    checkpoint: Option<&Path>,
    scale: usize,
    out: &Path,
) -> Result<RenderTrace> {
    let task = pick_task(tasks, index)?;
    let seg = task.segment(&cfg.regions)?;
    write_segmentation(&seg, scale, out)?;
    let mut trace = RenderTrace {
        task_id: task.id,
        gold_answer: task.gold_answer,
        predicted_answer: None,
        visits: Vec::new(),
    };
    if let Some(path) = checkpoint {
        let env = cfg.environment()?;
        let (_, params) = load_params(cfg, path)?;
        let opts = RolloutOptions {
            params: &params,
            policy: &cfg.policy,
            reasoner: &env.reasoner,
            weights: cfg.train.reward,
            cap: env.config.cap,
            fixed_k: None,
        };
        let traj = rollout(&opts, &seg.bank, task.gold_answer, RolloutMode::Greedy, &mut RngStream::new(cfg.seed, 0))?;
        trace.predicted_answer = Some(traj.predicted_answer);
        trace.visits = traj.selected();
    }
    write_json(&out.join("trace.json"), &trace)?;
    Ok(trace)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Runs a parsed command; returns what should go to stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { cfg, split, tasks, out } => {
            let m = cmd_gen_data(&cfg.load()?, split.into(), tasks, &out)?;
            to_json(&m)
        }
        Command::Segment {
            cfg,
            tasks,
            index,
            pgm,
            query,
            scale,
            out,
        } => {
            let pair = match (&pgm, &query) {
                (Some(p), Some(q)) => Some((p.as_path(), q.as_path())),
                _ => None,
            };
            let bank = cmd_segment(&cfg.load()?, tasks.as_deref(), index, pair, scale, &out)?;
            Ok(format!("{} local regions, {} global patches\n", bank.regions.len(), bank.global_patches.len()))
        }
        Command::TrainSft { cfg, out } => {
            cmd_train_sft(&cfg.load()?, &out)?;
            Ok(String::new())
        }
        Command::TrainRl { cfg, sft, out } => {
            cmd_train_rl(&cfg.load()?, &sft, &out)?;
            Ok(String::new())
        }
        Command::Train { cfg, out } => {
            let report = run_experiment(&cfg.load()?, &out)?;
            to_json(&report.final_eval.summary)
        }
        Command::Eval {
            cfg,
            checkpoint,
            tasks,
            reference,
            ablation_tasks,
            fixed_k,
            order_mode,
            structure_mode,
            out,
        } => {
            let cfg = cfg.load()?;
            let options = EvalOptions {
                order: match order_mode {
                    OrderArg::Cognition => OrderMode::Cognition,
                    OrderArg::Random => OrderMode::Random,
                },
                structure: match structure_mode {
                    StructureArg::SaliencyRegions => StructureMode::SaliencyRegions,
                    StructureArg::PatchSubset => StructureMode::PatchSubset,
                },
                fixed_k: parse_fixed_k(&fixed_k)?,
            };
            let req = EvalRequest {
                checkpoint: &checkpoint,
                tasks: &tasks,
                reference: reference.as_deref(),
                ablation_tasks: ablation_tasks.as_deref(),
                options,
            };
            let output = cmd_eval(&cfg, &req)?;
            match out {
                Some(path) => {
                    write_json(&path, &output)?;
                    Ok(String::new())
                }
                None => to_json(&output),
            }
        }
        Command::Render {
            cfg,
            tasks,
            index,
            checkpoint,
            scale,
            out,
        } => {
            let trace = cmd_render(&cfg.load()?, &tasks, index, checkpoint.as_deref(), scale, &out)?;
            to_json(&trace)
        }
    }
}

/// Caps rayon's pool at `SSV_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SSV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("SSV_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| execute(cli));
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("ssv: {e}");
            e.exit_code()
        }
    }
}
