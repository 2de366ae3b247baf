use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Environment, EnvConfig, STREAM_BANK};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::policy::Action;
use crate::regions::{segment, Patch, RegionBank, RegionConfig, Segmentation};
use crate::saliency::PatchGrid;

/// A rectangle of patches sharing one feature direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedBlock {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub feature: Vector,
    /// Cosine between `feature` and the query.
    pub cosine: f64,
    /// 0 is the most relevant block.
    pub rank: usize,
    /// Whether the block's evidence is needed for the answer.
    pub required: bool,
}

impl PlantedBlock {
    /// Footprint in row-major order.
    pub fn patches(&self) -> Vec<Patch> {
        (self.row..self.row + self.height)
            .flat_map(|r| (self.col..self.col + self.width).map(move |c| (r, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    /// Seed that regenerates this task and its region bank.
    pub seed: u64,
    /// Number of blocks whose evidence the answer depends on.
    pub difficulty: usize,
    pub gold_answer: usize,
    pub grid: PatchGrid,
    /// Sorted by rank.
    pub planted: Vec<PlantedBlock>,
}

impl TaskInstance {
    pub fn query(&self) -> &Vector {
        &self.grid.query
    }

    pub fn segment(&self, cfg: &RegionConfig) -> Result<Segmentation> {
        segment(&self.grid, cfg, &mut RngStream::new(self.seed, STREAM_BANK))
    }

    pub fn build_bank(&self, cfg: &RegionConfig) -> Result<RegionBank> {
        Ok(self.segment(cfg)?.bank)
    }

    /// The required blocks' slots in rank order, then Stop. `None` when some
    /// required block is not a bank region.
    pub fn oracle_actions(&self, bank: &RegionBank) -> Option<Vec<Action>> {
        let mut actions = Vec::with_capacity(self.difficulty + 1);
        for block in self.planted.iter().filter(|b| b.required) {
            let footprint = block.patches();
            let slot = bank.regions.iter().position(|r| r.patches == footprint)?;
            actions.push(Action::Select(slot));
        }
        actions.push(Action::Stop);
        Some(actions)
    }
}

fn noise(dim: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * rng.normal()).collect()
}

fn remove_component(u: &mut [f64], dir: &[f64]) {
    let dd: f64 = dir.iter().map(|x| x * x).sum();
    if dd == 0.0 {
        return;
    }
    let c = u.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>() / dd;
    for (x, d) in u.iter_mut().zip(dir) {
        *x -= c * d;
    }
}

fn unit_orthogonal(dim: usize, against: &[&[f64]], rng: &mut RngStream) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for d in against {
            remove_component(&mut u, d);
        }
        // A second pass keeps the result orthogonal to non-orthogonal pairs.
        for d in against {
            remove_component(&mut u, d);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            u.iter_mut().for_each(|x| *x /= n);
            return u;
        }
    }
}

/// A task query: the prior plus isotropic noise, normalized.
pub(crate) fn sample_query(prior: &Vector, cfg: &EnvConfig, rng: &mut RngStream) -> Vector {
    let mut q = prior.clone();
    q.axpy(1.0, &noise(prior.len(), cfg.query_noise, rng));
    q.normalized()
}

fn sorted_desc_with_gap(n: usize, range: [f64; 2], gap: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    for _ in 0..10_000 {
        let mut xs: Vec<f64> = (0..n).map(|_| rng.uniform_range(range[0], range[1])).collect();
        xs.sort_by(|a, b| b.total_cmp(a));
        if xs.windows(2).all(|w| w[0] - w[1] >= gap) {
            return Ok(xs);
        }
    }
    Err(Error::Generation(format!(
        "cannot draw {n} values in {range:?} separated by {gap}"
    )))
}

/// Query cosines for every block: required ones first, each group descending.
pub(crate) fn sample_levels(cfg: &EnvConfig, difficulty: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut levels = sorted_desc_with_gap(difficulty, cfg.required_sim, cfg.min_gap, rng)?;
    levels.extend(sorted_desc_with_gap(
        cfg.blocks - difficulty,
        cfg.distractor_sim,
        cfg.min_gap,
        rng,
    )?);
    Ok(levels)
}

/// A unit vector with cosine `c` to `q`, otherwise orthogonal to `q` and `prior`.
pub(crate) fn feature_with_cosine(c: f64, q: &Vector, prior: &Vector, rng: &mut RngStream) -> Vector {
    let u = unit_orthogonal(q.len(), &[q, prior], rng);
    let s = (1.0 - c * c).max(0.0).sqrt();
    Vector::from_raw(q.iter().zip(&u).map(|(a, b)| c * a + s * b).collect())
}

/// Non-overlapping rectangles with at least one free patch between any two.
fn place_blocks(cfg: &EnvConfig, rng: &mut RngStream) -> Option<Vec<(usize, usize, usize, usize)>> {
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        let mut ok = false;
        for _ in 0..100 {
            let h = cfg.block_min + rng.below(cfg.block_max - cfg.block_min + 1);
            let w = cfg.block_min + rng.below(cfg.block_max - cfg.block_min + 1);
            if h > cfg.height || w > cfg.width {
                continue;
            }
            let r = rng.below(cfg.height - h + 1);
            let c = rng.below(cfg.width - w + 1);
            // Separated when the gap along either axis is at least one patch.
            let clear = placed.iter().all(|&(pr, pc, ph, pw)| {
                r > pr + ph || pr > r + h || c > pc + pw || pc > c + w
            });
            if clear {
                placed.push((r, c, h, w));
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// One attempt at building a task from `seed`; `None` if it fails a check.
fn attempt(
    env: &Environment,
    region_cfg: &RegionConfig,
    difficulty: usize,
    id: u64,
    seed: u64,
) -> Result<Option<TaskInstance>> {
    let cfg = &env.config;
    let mut rng = RngStream::new(seed, 0);
    let q = sample_query(&env.query_prior, cfg, &mut rng);
    let levels = sample_levels(cfg, difficulty, &mut rng)?;
    let Some(rects) = place_blocks(cfg, &mut rng) else {
        return Ok(None);
    };
    let planted: Vec<PlantedBlock> = rects
        .iter()
        .zip(&levels)
        .enumerate()
        .map(|(rank, (&(row, col, height, width), &c))| PlantedBlock {
            row,
            col,
            height,
            width,
            feature: feature_with_cosine(c, &q, &env.query_prior, &mut rng),
            cosine: c,
            rank,
            required: rank < difficulty,
        })
        .collect();

    let (h, w, d) = (cfg.height, cfg.width, cfg.d_v);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (k, b) in planted.iter().enumerate() {
        for (r, c) in b.patches() {
            owner[r * w + c] = Some(k);
        }
    }
    let mut patch_embeddings = Vec::with_capacity(h * w);
    let mut fused_embeddings = Vec::with_capacity(h * w);
    for cell in owner {
        let mut z: Vec<f64> = match cell {
            Some(k) => planted[k].feature.to_vec(),
            None => {
                let b = rng.uniform_range(cfg.background_sim[0], cfg.background_sim[1]);
                let u = unit_orthogonal(d, &[&q], &mut rng);
                let s = (1.0 - b * b).sqrt();
                q.iter().zip(&u).map(|(a, x)| b * a + s * x).collect()
            }
        };
        for (x, n) in z.iter_mut().zip(noise(d, cfg.patch_noise, &mut rng)) {
            *x += n;
        }
        let mut fused = z.clone();
        for (x, n) in fused.iter_mut().zip(noise(d, cfg.fused_noise, &mut rng)) {
            *x += n;
        }
        patch_embeddings.push(Vector::from_raw(z));
        fused_embeddings.push(Vector::from_raw(fused));
    }
    let grid = PatchGrid::new(h, w, patch_embeddings, fused_embeddings, q)?;

    let reasoner = &env.reasoner;
    let gold = reasoner.answer(&reasoner.run(
        &reasoner.h0,
        planted.iter().filter(|b| b.required).map(|b| &b.feature),
    ));
    let task = TaskInstance {
        id,
        seed,
        difficulty,
        gold_answer: gold,
        grid,
        planted,
    };

    // The bank must expose every block as its own region, in rank order, and
    // the oracle order over the bank must reproduce the gold answer.
    let bank = task.build_bank(region_cfg)?;
    let expected = task.planted.len().min(region_cfg.max_regions.saturating_sub(1));
    if bank.regions.len() != expected {
        return Ok(None);
    }
    for (region, block) in bank.regions.iter().zip(&task.planted) {
        if region.patches != block.patches() {
            return Ok(None);
        }
    }
    let Some(actions) = task.oracle_actions(&bank) else {
        return Ok(None);
    };
    let injected: Vec<&Vector> = actions
        .iter()
        .filter_map(|a| match a {
            Action::Select(k) => Some(bank.slot_embedding(*k)),
            Action::Stop => None,
        })
        .collect();
    if reasoner.answer(&reasoner.run(&reasoner.h0, injected)) != gold {
        return Ok(None);
    }
    Ok(Some(task))
}

/// A task with its region bank built once.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub task: TaskInstance,
    pub bank: RegionBank,
}

/// Builds every task's bank in parallel.
pub fn prepare_tasks(tasks: Vec<TaskInstance>, cfg: &RegionConfig) -> Result<Vec<PreparedTask>> {
    tasks
        .into_par_iter()
        .map(|task| {
            let bank = task.build_bank(cfg)?;
            Ok(PreparedTask { task, bank })
        })
        .collect()
}

/// Draws task candidates from `rng` until one passes every check.
pub fn generate_task(
    env: &Environment,
    region_cfg: &RegionConfig,
    difficulty: usize,
    id: u64,
    rng: &mut RngStream,
) -> Result<TaskInstance> {
    let cfg = &env.config;
    if difficulty < 1 || difficulty > cfg.blocks {
        return Err(Error::invalid(format!(
            "difficulty {difficulty} must lie in 1..={}",
            cfg.blocks
        )));
    }
    for _ in 0..cfg.max_attempts {
        if let Some(task) = attempt(env, region_cfg, difficulty, id, rng.next_u64())? {
            return Ok(task);
        }
    }
    Err(Error::Generation(format!(
        "no valid task after {} attempts (difficulty {difficulty})",
        cfg.max_attempts
    )))
}

/// `n` tasks, task `i` drawn from child stream `i` with difficulty
/// `difficulties[i % len]`.
pub fn generate_dataset(
    env: &Environment,
    region_cfg: &RegionConfig,
    n: usize,
    difficulties: &[usize],
    seed: u64,
    stream: u64,
) -> Result<Vec<TaskInstance>> {
    if difficulties.is_empty() && n > 0 {
        return Err(Error::invalid("difficulty mix is empty"));
    }
    let base = RngStream::new(seed, stream);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.child(i as u64);
            generate_task(env, region_cfg, difficulties[i % difficulties.len()], i as u64, &mut rng)
        })
        .collect()
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in tasks {
        let line = serde_json::to_string(t).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        task.grid
            .validate()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}
