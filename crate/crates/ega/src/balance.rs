//! Gradient-balancing strategies for shared-parameter multi-task training.
//!
//! The eccentric strategy projects the task gradients into an orthogonal
//! frame with a common magnitude (the smallest retained singular value),
//! then recombines them with per-task difficulty weights derived from each
//! task's loss ratio against its warmup epoch. Equal-weight and
//! orthogonal-only variants are provided as baselines, plus a single-task
//! step for per-task reference runs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{project_align, Matrix};

/// Default warmup epoch: losses recorded at this epoch become the
/// denominator of every later learning-rate ratio.
pub const DEFAULT_T_WARM: usize = 4;

/// Default softmax temperature for the eccentric weights.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Warmup losses below this are treated as already converged: the task's
/// learning-rate ratio is pinned to 1 instead of dividing by ~0.
pub const WARMUP_LOSS_FLOOR: f64 = 1e-12;

/// Per-task gradients w.r.t. the shared parameters, one row per task.
#[derive(Debug, Clone)]
pub struct GradientMatrix {
    inner: Matrix,
}

impl GradientMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows)?)
    }

    pub fn from_matrix(inner: Matrix) -> Result<Self> {
        if inner.rows() < 2 {
            return Err(Error::InvalidInput(
                "a gradient matrix needs at least two tasks".into(),
            ));
        }
        Ok(Self { inner })
    }

    pub fn task_count(&self) -> usize {
        self.inner.rows()
    }

    pub fn param_count(&self) -> usize {
        self.inner.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }
}

/// Per-task mean epoch losses plus the warmup epoch index.
///
/// Append-only: one entry per finished epoch, owned by a single training
/// loop. Losses must be non-negative.
#[derive(Debug, Clone)]
pub struct LossHistory {
    t_warm: usize,
    epochs: BTreeMap<usize, Vec<f64>>,
}

impl LossHistory {
    pub fn new(t_warm: usize) -> Self {
        Self { t_warm, epochs: BTreeMap::new() }
    }

    pub fn t_warm(&self) -> usize {
        self.t_warm
    }

    pub fn record_epoch(&mut self, epoch: usize, losses: &[f64]) -> Result<()> {
        if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidInput(format!(
                "epoch {epoch} losses must be finite and non-negative: {losses:?}"
            )));
        }
        self.epochs.insert(epoch, losses.to_vec());
        Ok(())
    }

    pub fn loss(&self, epoch: usize, task: usize) -> Option<f64> {
        self.epochs.get(&epoch).and_then(|l| l.get(task)).copied()
    }

    pub fn warmup_loss(&self, task: usize) -> Option<f64> {
        self.loss(self.t_warm, task)
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Positive per-task difficulty weights summing to the task count.
#[derive(Debug, Clone)]
pub struct EccentricVector {
    weights: Vec<f64>,
    temperature: f64,
}

impl EccentricVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Joint gradient produced by a strategy step, with diagnostics.
#[derive(Debug, Clone)]
pub struct BalancedGradient {
    /// Update direction over the shared parameters (length m).
    pub joint: Vec<f64>,
    /// Common row magnitude after projection; `None` for strategies that
    /// skip the projection.
    pub sigma: Option<f64>,
    /// Singular directions retained by the projection.
    pub retained_rank: Option<usize>,
    /// Per-task weights used in the recombination.
    pub task_weights: Vec<f64>,
}

/// Loss ratio of task `task` at `epoch` against its warmup reference:
/// `L(epoch - 1) / L(t_warm)`. Small values mean fast learning.
pub fn learning_rate_ratio(history: &LossHistory, task: usize, epoch: usize) -> Result<f64> {
    if epoch <= history.t_warm() {
        return Err(Error::Precondition(format!(
            "learning-rate ratio needs epoch > t_warm ({} <= {})",
            epoch,
            history.t_warm()
        )));
    }
    let warm = history.warmup_loss(task).ok_or_else(|| {
        Error::Precondition(format!(
            "no warmup loss recorded for task {task} at epoch {}",
            history.t_warm()
        ))
    })?;
    if warm == 0.0 {
        return Err(Error::DegenerateHistory(format!(
            "task {task} warmup loss is zero"
        )));
    }
    let prev = history.loss(epoch - 1, task).ok_or_else(|| {
        Error::Precondition(format!(
            "no loss recorded for task {task} at epoch {}",
            epoch - 1
        ))
    })?;
    Ok(prev / warm)
}

/// Maps learning-rate ratios to difficulty weights through a temperature
/// softmax scaled by the task count: `k_i = n exp(lr_i/T) / sum_j exp(lr_j/T)`.
///
/// The exponentials are shifted by their maximum before summation (the
/// softmax shift identity), and partial sums run in value order so the
/// output is exactly equivariant under permutations of `lr`.
pub fn eccentric_vector(lr: &[f64], temperature: f64) -> Result<EccentricVector> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if lr.is_empty() {
        return Err(Error::InvalidInput("empty learning-rate vector".into()));
    }
    if lr.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "learning-rate ratios must be finite: {lr:?}"
        )));
    }
    let n = lr.len() as f64;
    let scaled: Vec<f64> = lr.iter().map(|v| v / temperature).collect();
    let top = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scaled.iter().map(|v| (v - top).exp()).collect();
    let denom = sorted_sum(&exps);
    let mut weights: Vec<f64> = exps.iter().map(|e| n * e / denom).collect();
    // Pin the sum to exactly n.
    let norm = n / sorted_sum(&weights);
    for w in &mut weights {
        *w *= norm;
    }
    Ok(EccentricVector { weights, temperature })
}

fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.iter().sum()
}

/// Projects, rescales, and recombines with the given weights. Shared by
/// the eccentric and orthogonal-only strategies so that their warmup
/// behavior is bit-identical.
fn weighted_aligned_step(
    g: &GradientMatrix,
    weights: &[f64],
    rank_tol: f64,
) -> Result<BalancedGradient> {
    let proj = project_align(g.matrix(), rank_tol)?;
    let joint = combine(&proj.aligned, weights);
    Ok(BalancedGradient {
        joint,
        sigma: Some(proj.sigma_min),
        retained_rank: Some(proj.retained),
        task_weights: weights.to_vec(),
    })
}

fn combine(aligned: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut joint = vec![0.0; aligned.cols()];
    for (i, &w) in weights.iter().enumerate() {
        let row = aligned.row(i);
        for (j, item) in joint.iter_mut().enumerate() {
            *item += w * row[j];
        }
    }
    joint
}

/// One eccentric-alignment step.
///
/// Before the warmup epoch ends (`epoch <= t_warm`) the weights stay at
/// all-ones and the step matches [`ortho_only_step`] exactly; afterwards
/// each task's weight comes from the loss-ratio softmax. Tasks whose
/// warmup loss is below [`WARMUP_LOSS_FLOOR`] get their ratio pinned to 1.
pub fn ega_step(
    g: &GradientMatrix,
    history: &LossHistory,
    epoch: usize,
    temperature: f64,
    rank_tol: f64,
) -> Result<BalancedGradient> {
    let n = g.task_count();
    if epoch <= history.t_warm() {
        return weighted_aligned_step(g, &vec![1.0; n], rank_tol);
    }
    let mut lr = Vec::with_capacity(n);
    for task in 0..n {
        let warm = history.warmup_loss(task).ok_or_else(|| {
            Error::Precondition(format!(
                "epoch {epoch} is past warmup but no warmup loss exists for task {task}"
            ))
        })?;
        if warm < WARMUP_LOSS_FLOOR {
            lr.push(1.0);
        } else {
            lr.push(learning_rate_ratio(history, task, epoch)?);
        }
    }
    let ecc = eccentric_vector(&lr, temperature)?;
    weighted_aligned_step(g, ecc.weights(), rank_tol)
}

/// Unweighted sum of the raw task gradients (`w = [1, ..., 1]`).
pub fn equal_weight_step(g: &GradientMatrix) -> BalancedGradient {
    let n = g.task_count();
    BalancedGradient {
        joint: combine(g.matrix(), &vec![1.0; n]),
        sigma: None,
        retained_rank: None,
        task_weights: vec![1.0; n],
    }
}

/// Orthogonal projection and rescaling with unit weights; identical to
/// [`ega_step`] while the warmup epoch has not passed.
pub fn ortho_only_step(g: &GradientMatrix, rank_tol: f64) -> Result<BalancedGradient> {
    weighted_aligned_step(g, &vec![1.0; g.task_count()], rank_tol)
}

/// The raw gradient of a single task; reference runs that follow one task
/// while the other heads keep training.
pub fn single_task_step(g: &GradientMatrix, task: usize) -> Result<BalancedGradient> {
    let n = g.task_count();
    if task >= n {
        return Err(Error::InvalidInput(format!(
            "task index {task} out of range for {n} tasks"
        )));
    }
    let mut weights = vec![0.0; n];
    weights[task] = 1.0;
    Ok(BalancedGradient {
        joint: g.matrix().row(task).to_vec(),
        sigma: None,
        retained_rank: None,
        task_weights: weights,
    })
}

/// Plain descent step on the shared parameters: `theta - eta * joint`.
pub fn apply_update(params: &[f64], grad: &BalancedGradient, eta: f64) -> Result<Vec<f64>> {
    if params.len() != grad.joint.len() {
        return Err(Error::InvalidInput(format!(
            "parameter/gradient length mismatch: {} vs {}",
            params.len(),
            grad.joint.len()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("step length must be positive, got {eta}")));
    }
    Ok(params
        .iter()
        .zip(&grad.joint)
        .map(|(p, g)| p - eta * g)
        .collect())
}

/// A gradient-balancing strategy, open for additional implementations.
pub trait GradientStrategy {
    fn id(&self) -> String;

    fn step(
        &self,
        g: &GradientMatrix,
        history: &LossHistory,
        epoch: usize,
    ) -> Result<BalancedGradient>;
}

pub struct EqualWeight;

impl GradientStrategy for EqualWeight {
    fn id(&self) -> String {
        "equal_weight".into()
    }

    fn step(&self, g: &GradientMatrix, _: &LossHistory, _: usize) -> Result<BalancedGradient> {
        Ok(equal_weight_step(g))
    }
}

pub struct OrthoOnly {
    pub rank_tol: f64,
}

impl GradientStrategy for OrthoOnly {
    fn id(&self) -> String {
        "ortho_only".into()
    }

    fn step(&self, g: &GradientMatrix, _: &LossHistory, _: usize) -> Result<BalancedGradient> {
        ortho_only_step(g, self.rank_tol)
    }
}

pub struct Ega {
    pub temperature: f64,
    pub rank_tol: f64,
}

impl GradientStrategy for Ega {
    fn id(&self) -> String {
        "ega".into()
    }

    fn step(
        &self,
        g: &GradientMatrix,
        history: &LossHistory,
        epoch: usize,
    ) -> Result<BalancedGradient> {
        ega_step(g, history, epoch, self.temperature, self.rank_tol)
    }
}

pub struct SingleTask {
    pub task: usize,
}

impl GradientStrategy for SingleTask {
    fn id(&self) -> String {
        format!("single_task_{}", self.task + 1)
    }

    fn step(&self, g: &GradientMatrix, _: &LossHistory, _: usize) -> Result<BalancedGradient> {
        single_task_step(g, self.task)
    }
}

/// Resolves a strategy id (`equal_weight`, `ortho_only`, `ega`,
/// `single_task_<k>`) into a strategy instance.
pub fn strategy_from_id(
    id: &str,
    temperature: f64,
    rank_tol: f64,
) -> Result<Box<dyn GradientStrategy>> {
    match id {
        "equal_weight" => Ok(Box::new(EqualWeight)),
        "ortho_only" => Ok(Box::new(OrthoOnly { rank_tol })),
        "ega" => Ok(Box::new(Ega { temperature, rank_tol })),
        _ => {
            if let Some(rest) = id.strip_prefix("single_task_") {
                let k: usize = rest
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("unknown strategy id '{id}'")))?;
                if k == 0 {
                    return Err(Error::InvalidConfig(
                        "single_task indices are 1-based".into(),
                    ));
                }
                return Ok(Box::new(SingleTask { task: k - 1 }));
            }
            Err(Error::InvalidConfig(format!("unknown strategy id '{id}'")))
        }
    }
}
