//! The visual-access policy: project the reasoning state and every bank slot,
//! score them by similarity, add a learned STOP action, and softmax.
//!
//! Gradients are derived by hand. [`ScoreCache`] keeps the forward
//! intermediates so any upstream gradient on the score vector can be pushed
//! back to the parameters with [`backprop_scores`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TensorLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sample_categorical, softmax, Matrix, RngStream, Similarity, Vector};
use crate::regions::RegionBank;

/// Learnable state: signal projector, visual projector and STOP embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `D_L x D_L`.
    pub w_sig: Matrix,
    /// `D_L x D_v`.
    pub w_vis: Matrix,
    pub stop: Vector,
}

impl PolicyParams {
    /// Gaussian init scaled by fan-in.
    pub fn init(d_l: usize, d_v: usize, rng: &mut RngStream) -> Self {
        let w_sig = Matrix::gaussian(d_l, d_l, 1.0 / (d_l as f64).sqrt(), rng);
        let w_vis = Matrix::gaussian(d_l, d_v, 1.0 / (d_v as f64).sqrt(), rng);
        let stop = Vector::from_raw((0..d_l).map(|_| rng.normal() / (d_l as f64).sqrt()).collect());
        PolicyParams { w_sig, w_vis, stop }
    }

    pub fn d_l(&self) -> usize {
        self.w_sig.rows()
    }

    pub fn d_v(&self) -> usize {
        self.w_vis.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d_l = self.w_sig.rows();
        if self.w_sig.cols() != d_l || self.w_vis.rows() != d_l || self.stop.len() != d_l {
            return Err(Error::invalid("policy parameter shapes are inconsistent"));
        }
        let finite = |xs: &[f64]| xs.iter().all(|v| v.is_finite());
        if !finite(self.w_sig.as_slice()) || !finite(self.w_vis.as_slice()) || !finite(&self.stop) {
            return Err(Error::invalid("policy parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> PolicyParams {
        PolicyParams {
            w_sig: Matrix::zeros(self.w_sig.rows(), self.w_sig.cols()),
            w_vis: Matrix::zeros(self.w_vis.rows(), self.w_vis.cols()),
            stop: Vector::zeros(self.stop.len()),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        self.w_sig.axpy(alpha, &other.w_sig);
        self.w_vis.axpy(alpha, &other.w_vis);
        self.stop.axpy(alpha, &other.stop);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.w_sig.scale(alpha);
        self.w_vis.scale(alpha);
        self.stop = self.stop.scaled(alpha);
    }

    /// All parameters, flattened in checkpoint order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w_sig.as_slice());
        out.extend_from_slice(self.w_vis.as_slice());
        out.extend_from_slice(&self.stop);
        out
    }

    pub fn param_count(&self) -> usize {
        self.w_sig.as_slice().len() + self.w_vis.as_slice().len() + self.stop.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum()
    }
}

/// Gradients share the parameter layout.
pub type PolicyGrad = PolicyParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub similarity: Similarity,
    /// Multiplies every similarity before the softmax.
    pub logit_scale: f64,
    /// Allow selecting an already-visited slot again.
    pub allow_revisit: bool,
    /// Optional floor on a region's raw similarity; regions below it are masked.
    pub score_floor: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            similarity: Similarity::Cosine,
            logit_scale: 1.0,
            allow_revisit: false,
            score_floor: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::invalid("logit_scale must be positive and finite"));
        }
        if let Some(f) = self.score_floor {
            if !f.is_finite() {
                return Err(Error::invalid("score_floor must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningState {
    pub h: Vector,
    /// 1-based step counter.
    pub step: usize,
    /// Slots injected so far, in order.
    pub visited: Vec<usize>,
}

impl ReasoningState {
    pub fn initial(h0: Vector) -> Self {
        ReasoningState {
            h: h0,
            step: 1,
            visited: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// A bank slot; the last slot is the global complement.
    Select(usize),
    Stop,
}

impl Action {
    /// Position in the action vector for a bank with `slots` slots.
    pub fn index(self, slots: usize) -> usize {
        match self {
            Action::Select(k) => k,
            Action::Stop => slots,
        }
    }

    pub fn from_index(i: usize, slots: usize) -> Action {
        if i == slots {
            Action::Stop
        } else {
            Action::Select(i)
        }
    }
}

/// Scores and probabilities over `slots + 1` actions, STOP last.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    /// `-inf` where masked.
    pub scores: Vec<f64>,
    pub probs: Vector,
}

impl ActionDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.scores[i] == f64::NEG_INFINITY
    }

    pub fn stop_prob(&self) -> f64 {
        self.probs[self.slots()]
    }

    /// Keeps only the actions for which `keep` holds and renormalizes.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Result<ActionDistribution> {
        let scores: Vec<f64> = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, &s)| if keep(i) { s } else { f64::NEG_INFINITY })
            .collect();
        let probs = softmax(&scores)?;
        Ok(ActionDistribution { scores, probs })
    }

    /// Uniform over the unmasked actions.
    pub fn uniform_over_support(&self) -> ActionDistribution {
        let open = self.scores.iter().filter(|s| s.is_finite()).count() as f64;
        let probs = self
            .scores
            .iter()
            .map(|s| if s.is_finite() { 1.0 / open } else { 0.0 })
            .collect();
        ActionDistribution {
            scores: self.scores.iter().map(|&s| if s.is_finite() { 0.0 } else { s }).collect(),
            probs: Vector::from_raw(probs),
        }
    }
}

/// Forward intermediates needed by [`backprop_scores`].
#[derive(Clone, Debug)]
pub struct ScoreCache {
    pub h: Vector,
    pub h_proj: Vector,
    /// Un-projected slot embeddings, one per slot.
    pub slot_raw: Vec<Vector>,
    pub slot_proj: Vec<Vector>,
    pub masked: Vec<bool>,
    pub dist: ActionDistribution,
}

fn check_dims(params: &PolicyParams, state: &ReasoningState, bank: &RegionBank) -> Result<()> {
    if state.h.len() != params.d_l() {
        return Err(Error::invalid(format!(
            "reasoning state has dimension {}, policy expects {}",
            state.h.len(),
            params.d_l()
        )));
    }
    if bank.embedding_dim() != params.d_v() {
        return Err(Error::invalid(format!(
            "bank embeddings have dimension {}, policy expects {}",
            bank.embedding_dim(),
            params.d_v()
        )));
    }
    if let Some(&k) = state.visited.iter().find(|&&k| k >= bank.slot_count()) {
        return Err(Error::invalid(format!("visited slot {k} outside the bank")));
    }
    Ok(())
}

fn sim(cfg: &PolicyConfig, a: &[f64], b: &[f64]) -> f64 {
    match cfg.similarity {
        Similarity::Cosine => crate::numerics::cosine_unchecked(a, b),
        Similarity::Dot => dot(a, b),
    }
}

/// Forward pass with the cache kept.
pub fn score_actions_cached(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    state: &ReasoningState,
    bank: &RegionBank,
) -> Result<ScoreCache> {
    check_dims(params, state, bank)?;
    let slots = bank.slot_count();
    let h_proj = params.w_sig.matvec(&state.h);
    let slot_raw: Vec<Vector> = (0..slots).map(|k| bank.slot_embedding(k).clone()).collect();
    let slot_proj: Vec<Vector> = slot_raw.iter().map(|e| params.w_vis.matvec(e)).collect();
    let mut masked = vec![false; slots + 1];
    let mut scores = Vec::with_capacity(slots + 1);
    for k in 0..slots {
        let s = sim(cfg, &h_proj, &slot_proj[k]);
        let visited = !cfg.allow_revisit && state.visited.contains(&k);
        let floored = cfg.score_floor.is_some_and(|f| s < f);
        if visited || floored {
            masked[k] = true;
            scores.push(f64::NEG_INFINITY);
        } else {
            scores.push(cfg.logit_scale * s);
        }
    }
    scores.push(cfg.logit_scale * sim(cfg, &h_proj, &params.stop));
    let probs = softmax(&scores)?;
    Ok(ScoreCache {
        h: state.h.clone(),
        h_proj,
        slot_raw,
        slot_proj,
        masked,
        dist: ActionDistribution { scores, probs },
    })
}

pub fn score_actions(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    state: &ReasoningState,
    bank: &RegionBank,
) -> Result<ActionDistribution> {
    Ok(score_actions_cached(params, cfg, state, bank)?.dist)
}

pub fn log_prob(dist: &ActionDistribution, a: Action) -> Result<f64> {
    let i = a.index(dist.slots());
    if i >= dist.len() {
        return Err(Error::invalid(format!("action {a:?} outside a {}-way distribution", dist.len())));
    }
    let p = dist.probs[i];
    if p == 0.0 {
        return Err(Error::Masked(format!("{a:?}")));
    }
    Ok(p.ln())
}

/// `d log pi(a) / d scores = onehot(a) - probs`, zero on masked entries.
pub fn score_grad_log_prob(dist: &ActionDistribution, a: Action) -> Result<Vec<f64>> {
    log_prob(dist, a)?;
    let i = a.index(dist.slots());
    Ok(dist
        .probs
        .iter()
        .enumerate()
        .map(|(k, &p)| if k == i { 1.0 - p } else { -p })
        .collect())
}

/// Partial derivatives of `sim(u, v)` with respect to `u` and `v`.
fn sim_grads(cfg: &PolicyConfig, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match cfg.similarity {
        Similarity::Dot => (v.to_vec(), u.to_vec()),
        Similarity::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let c = dot(u, v) / (nu * nv);
            let inv = 1.0 / (nu * nv);
            let du = u.iter().zip(v).map(|(a, b)| b * inv - c * a / (nu * nu)).collect();
            let dv = u.iter().zip(v).map(|(a, b)| a * inv - c * b / (nv * nv)).collect();
            (du, dv)
        }
    }
}

/// Pushes an upstream gradient on the score vector back to the parameters.
///
/// Masked entries of `dscores` are ignored.
pub fn backprop_scores(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    cache: &ScoreCache,
    dscores: &[f64],
    grad: &mut PolicyGrad,
) {
    let slots = cache.slot_raw.len();
    let mut g_u = vec![0.0; params.d_l()];
    for (k, &d) in dscores.iter().enumerate().take(slots + 1) {
        if d == 0.0 || cache.masked[k] {
            continue;
        }
        let v: &[f64] = if k < slots { &cache.slot_proj[k] } else { &params.stop };
        let (du, dv) = sim_grads(cfg, &cache.h_proj, v);
        let w = d * cfg.logit_scale;
        for (g, x) in g_u.iter_mut().zip(&du) {
            *g += w * x;
        }
        if k < slots {
            grad.w_vis.add_outer(w, &dv, &cache.slot_raw[k]);
        } else {
            grad.stop.axpy(w, &dv);
        }
    }
    grad.w_sig.add_outer(1.0, &g_u, &cache.h);
}

/// Exact gradient of `log pi(a | state)` with respect to every parameter.
pub fn grad_log_prob(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    state: &ReasoningState,
    bank: &RegionBank,
    a: Action,
) -> Result<PolicyGrad> {
    let cache = score_actions_cached(params, cfg, state, bank)?;
    let ds = score_grad_log_prob(&cache.dist, a)?;
    let mut grad = params.zeros_like();
    backprop_scores(params, cfg, &cache, &ds, &mut grad);
    Ok(grad)
}

pub fn sample_action(dist: &ActionDistribution, rng: &mut RngStream) -> Result<Action> {
    let i = sample_categorical(&dist.probs, rng)?;
    Ok(Action::from_index(i, dist.slots()))
}

/// Argmax; ties go to STOP, then to the lower slot index.
pub fn greedy_action(dist: &ActionDistribution) -> Action {
    let slots = dist.slots();
    let mut best = slots;
    let mut best_p = dist.probs[slots];
    for k in 0..slots {
        if dist.probs[k] > best_p {
            best = k;
            best_p = dist.probs[k];
        }
    }
    Action::from_index(best, slots)
}
