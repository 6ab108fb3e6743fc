//! Minimal differentiable model: a shared fully-connected trunk with tanh
//! activations feeding three task heads (waveform regression, anchor
//! classification over time-index classes, cycle-length classification).
//! Backpropagation is analytic; the trunk exposes a flat parameter vector
//! so per-task gradients can be stacked into a gradient matrix.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::GradientMatrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Floor on the batch RMSE when scaling its gradient, so a perfect fit
/// yields a zero gradient instead of 0/0.
const RMSE_GRAD_FLOOR: f64 = 1e-12;

/// Fully-connected layer; weights are out x in, row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..limit)).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::InvalidInput("linear layer shape mismatch".into()));
        }
        Ok(Self { in_dim, out_dim, weights, bias })
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Small fully-connected stack. With `activate_output` every layer output
/// passes through tanh (trunk); otherwise the last layer stays linear
/// (heads emit raw logits / regression values).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_output: bool,
}

/// Per-sample post-activation outputs of every layer, kept for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    outputs: Vec<Vec<Vec<f64>>>, // [layer][sample][dim]
}

impl MlpCache {
    pub fn outputs(&self) -> &Vec<Vec<f64>> {
        self.outputs.last().expect("cache has at least one layer")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, activate_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::InvalidInput(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activate_output })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    fn activated(&self, layer: usize) -> bool {
        self.activate_output || layer + 1 < self.layers.len()
    }

    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<MlpCache> {
        if inputs.iter().any(|x| x.len() != self.in_dim()) {
            return Err(Error::InvalidInput(format!(
                "input dimension mismatch: expected {}",
                self.in_dim()
            )));
        }
        let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(inputs.len()); self.layers.len()];
        let mut scratch = Vec::new();
        for x in inputs {
            let mut cur: Vec<f64> = x.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                layer.forward(&cur, &mut scratch);
                if self.activated(l) {
                    for v in scratch.iter_mut() {
                        *v = v.tanh();
                    }
                }
                cur = scratch.clone();
                outputs[l].push(cur.clone());
            }
        }
        Ok(MlpCache { outputs })
    }

    /// Backprop for the whole batch. Parameter gradients accumulate into
    /// `pgrads` (layout of [`Mlp::params_flat`]); returns the gradients
    /// w.r.t. the batch inputs.
    pub fn backward_batch(
        &self,
        inputs: &[Vec<f64>],
        cache: &MlpCache,
        dout: &[Vec<f64>],
        pgrads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        assert_eq!(pgrads.len(), self.n_params());
        let mut dinputs = Vec::with_capacity(inputs.len());
        for (s, x0) in inputs.iter().enumerate() {
            let mut dy = dout[s].clone();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let y = &cache.outputs[l][s];
                if self.activated(l) {
                    for (d, v) in dy.iter_mut().zip(y) {
                        *d *= 1.0 - v * v;
                    }
                }
                let x: &[f64] = if l == 0 { x0 } else { &cache.outputs[l - 1][s] };
                let base = self.param_offset(l);
                let wlen = layer.weights.len();
                for (o, &g) in dy.iter().enumerate() {
                    if g != 0.0 {
                        let wrow = base + o * layer.in_dim;
                        for (k, xv) in x.iter().enumerate() {
                            pgrads[wrow + k] += g * xv;
                        }
                    }
                    pgrads[base + wlen + o] += g;
                }
                let mut dx = vec![0.0; layer.in_dim];
                for (o, &g) in dy.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (d, w) in dx.iter_mut().zip(row) {
                        *d += g * w;
                    }
                }
                dy = dx;
            }
            dinputs.push(dy);
        }
        dinputs
    }

    fn param_offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(|l| l.n_params()).sum()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }

    /// Flattens all parameters: per layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::InvalidInput(format!(
                "parameter vector length {} does not match model size {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer.weights.copy_from_slice(&flat[pos..pos + wlen]);
            pos += wlen;
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        Ok(())
    }
}

/// Architecture hyperparameters of the three-head model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub wave_len: usize,
    pub anchor_classes: usize,
    pub length_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden == 0
            || self.wave_len == 0
            || self.anchor_classes == 0
            || self.length_classes == 0
        {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One training batch: inputs plus per-task targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    /// Target waveform per sample (length `wave_len`).
    pub waveform: Vec<Vec<f64>>,
    /// Anchor time-index classes present in each sample's window (may be
    /// empty; such samples contribute nothing to the anchor loss).
    pub anchors: Vec<Vec<usize>>,
    /// True cycle-length class per sample.
    pub length_class: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let b = self.inputs.len();
        if b == 0 {
            return Err(Error::InvalidInput("batch must contain at least one sample".into()));
        }
        if self.waveform.len() != b || self.anchors.len() != b || self.length_class.len() != b {
            return Err(Error::InvalidInput("batch target counts do not match inputs".into()));
        }
        if self.inputs.iter().any(|x| x.len() != config.input_dim) {
            return Err(Error::InvalidInput("batch input dimension mismatch".into()));
        }
        if self.waveform.iter().any(|w| w.len() != config.wave_len) {
            return Err(Error::InvalidInput("waveform target length mismatch".into()));
        }
        if self
            .anchors
            .iter()
            .any(|set| set.iter().any(|&c| c >= config.anchor_classes))
        {
            return Err(Error::InvalidInput("anchor class out of range".into()));
        }
        if self.length_class.iter().any(|&c| c >= config.length_classes) {
            return Err(Error::InvalidInput("length class out of range".into()));
        }
        Ok(())
    }
}

/// Shared trunk plus the three task heads. Head parameters are disjoint
/// from trunk parameters; only the trunk vector participates in gradient
/// balancing.
#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    pub trunk: Mlp,
    pub heads: [Mlp; 3],
}

/// Cached forward pass: predictions plus the activations needed for
/// backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    trunk_cache: MlpCache,
    head_caches: [MlpCache; 3],
}

impl ForwardPass {
    pub fn waveform(&self) -> &Vec<Vec<f64>> {
        self.head_caches[0].outputs()
    }

    pub fn anchor_logits(&self) -> &Vec<Vec<f64>> {
        self.head_caches[1].outputs()
    }

    pub fn length_logits(&self) -> &Vec<Vec<f64>> {
        self.head_caches[2].outputs()
    }

    pub fn features(&self) -> &Vec<Vec<f64>> {
        self.trunk_cache.outputs()
    }
}

/// Per-task gradients from one batch: stacked trunk rows plus separate
/// head gradients, and the task losses they correspond to.
#[derive(Debug, Clone)]
pub struct TaskGradients {
    pub trunk: GradientMatrix,
    pub heads: [Vec<f64>; 3],
    pub losses: [f64; 3],
}

impl MultiTaskModel {
    /// Builds a model with a 2-layer tanh trunk and one linear layer per
    /// head, initialized from the seed.
    pub fn new_seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Mlp::new(
            vec![
                Linear::new_seeded(config.input_dim, config.hidden, &mut rng),
                Linear::new_seeded(config.hidden, config.hidden, &mut rng),
            ],
            true,
        )?;
        let heads = [
            Mlp::new(vec![Linear::new_seeded(config.hidden, config.wave_len, &mut rng)], false)?,
            Mlp::new(
                vec![Linear::new_seeded(config.hidden, config.anchor_classes, &mut rng)],
                false,
            )?,
            Mlp::new(
                vec![Linear::new_seeded(config.hidden, config.length_classes, &mut rng)],
                false,
            )?,
        ];
        Ok(Self { config, trunk, heads })
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.n_params()
    }

    /// One trunk evaluation shared by all three heads.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass> {
        batch.validate(&self.config)?;
        let trunk_cache = self.trunk.forward_batch(&batch.inputs)?;
        let features = trunk_cache.outputs().clone();
        let head_caches = [
            self.heads[0].forward_batch(&features)?,
            self.heads[1].forward_batch(&features)?,
            self.heads[2].forward_batch(&features)?,
        ];
        Ok(ForwardPass { trunk_cache, head_caches })
    }

    /// The three task losses for a cached forward pass.
    pub fn task_losses(&self, fwd: &ForwardPass, batch: &Batch) -> Result<[f64; 3]> {
        batch.validate(&self.config)?;
        let (l1, _) = rmse_loss_grad(fwd.waveform(), &batch.waveform);
        let (l2, _) = anchor_ce_loss_grad(fwd.anchor_logits(), &batch.anchors);
        let (l3, _) = onehot_ce_loss_grad(fwd.length_logits(), &batch.length_class);
        Ok([l1, l2, l3])
    }

    /// Per-task trunk gradient rows (the gradient matrix) plus separate
    /// head gradients. Heads follow single-task optimization, so their
    /// gradients never mix.
    pub fn per_task_gradients(&self, fwd: &ForwardPass, batch: &Batch) -> Result<TaskGradients> {
        batch.validate(&self.config)?;
        let features = fwd.trunk_cache.outputs();
        let (l1, d1) = rmse_loss_grad(fwd.waveform(), &batch.waveform);
        let (l2, d2) = anchor_ce_loss_grad(fwd.anchor_logits(), &batch.anchors);
        let (l3, d3) = onehot_ce_loss_grad(fwd.length_logits(), &batch.length_class);

        let mut trunk_rows = Vec::with_capacity(3);
        let mut head_grads: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (task, dout) in [d1, d2, d3].into_iter().enumerate() {
            let head = &self.heads[task];
            let mut hg = vec![0.0; head.n_params()];
            let dfeat = head.backward_batch(features, &fwd.head_caches[task], &dout, &mut hg);
            let mut tg = vec![0.0; self.trunk.n_params()];
            self.trunk.backward_batch(&batch.inputs, &fwd.trunk_cache, &dfeat, &mut tg);
            trunk_rows.push(tg);
            head_grads.push(hg);
        }
        let heads: [Vec<f64>; 3] = head_grads.try_into().expect("three heads");
        Ok(TaskGradients {
            trunk: GradientMatrix::new(&trunk_rows)?,
            heads,
            losses: [l1, l2, l3],
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            trunk: self.trunk.params_flat(),
            heads: self.heads.iter().map(|h| h.params_flat()).collect(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        if cp.heads.len() != 3 {
            return Err(Error::Parse("checkpoint must contain three heads".into()));
        }
        let mut model = Self::new_seeded(cp.config.clone(), 0)?;
        model.trunk.set_params_flat(&cp.trunk)?;
        for (head, params) in model.heads.iter_mut().zip(&cp.heads) {
            head.set_params_flat(params)?;
        }
        Ok(model)
    }

    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_checkpoint(&cp)
    }
}

/// Versioned parameter dump; JSON keeps 64-bit floats exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub trunk: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
}

/// Batch RMSE over all waveform samples and its gradient w.r.t. the
/// predictions. The gradient is the MSE gradient scaled by
/// `1 / (2 * rmse)`, floored so a perfect fit yields zero.
pub(crate) fn rmse_loss_grad(pred: &[Vec<f64>], target: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let total: usize = pred.iter().map(|p| p.len()).sum();
    let mut sq = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (x, y) in p.iter().zip(t) {
            let d = x - y;
            sq += d * d;
        }
    }
    let mse = sq / total as f64;
    let loss = mse.sqrt();
    let scale = 1.0 / (total as f64 * loss.max(RMSE_GRAD_FLOOR));
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| p.iter().zip(t).map(|(x, y)| (x - y) * scale).collect())
        .collect();
    (loss, grads)
}

/// Mean cross-entropy over time-index classes, one term per true anchor
/// present in the window. Samples with no anchors contribute zero.
pub(crate) fn anchor_ce_loss_grad(
    logits: &[Vec<f64>],
    anchor_sets: &[Vec<usize>],
) -> (f64, Vec<Vec<f64>>) {
    let total_terms: usize = anchor_sets.iter().map(|a| a.len()).sum();
    let mut grads: Vec<Vec<f64>> = logits.iter().map(|z| vec![0.0; z.len()]).collect();
    if total_terms == 0 {
        log::debug!("anchor loss: batch contains no anchors, contributing zero");
        return (0.0, grads);
    }
    let scale = 1.0 / total_terms as f64;
    let mut loss = 0.0;
    for (s, (z, anchors)) in logits.iter().zip(anchor_sets).enumerate() {
        if anchors.is_empty() {
            continue;
        }
        let (lse, probs) = log_sum_exp(z);
        for &a in anchors {
            loss += (lse - z[a]) * scale;
            grads[s][a] -= scale;
        }
        let k = anchors.len() as f64 * scale;
        for (g, p) in grads[s].iter_mut().zip(&probs) {
            *g += k * p;
        }
    }
    (loss, grads)
}

/// Mean cross-entropy with exactly one true class per sample.
pub(crate) fn onehot_ce_loss_grad(logits: &[Vec<f64>], classes: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &c) in logits.iter().zip(classes) {
        let (lse, probs) = log_sum_exp(z);
        loss += (lse - z[c]) / b;
        let mut g: Vec<f64> = probs.iter().map(|p| p / b).collect();
        g[c] -= 1.0 / b;
        grads.push(g);
    }
    (loss, grads)
}

fn log_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let top = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = top + sum.ln();
    let probs = exps.iter().map(|e| e / sum).collect();
    (lse, probs)
}

/// Classical momentum SGD step with the weight decay folded into the
/// gradient: `v <- momentum*v + (g + wd*w); w <- w - eta*v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    eta: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::InvalidInput("sgd buffers must share a length".into()));
    }
    if !(eta > 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "bad sgd hyperparameters: eta {eta}, momentum {momentum}, weight_decay {weight_decay}"
        )));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= eta * *v;
    }
    Ok(())
}
