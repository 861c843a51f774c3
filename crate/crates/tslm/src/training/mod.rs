//! Joint understanding/generation optimisation: losses, the warmup+cosine
//! schedule, Adam, DoRA wrapping, and the interleaved batch loop.

mod dora;

pub use dora::{adapter_trainable_count, dora_wrap, AdapterMap, AdapterSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::model::{Model, ModelError};
use crate::numerics::{NodeId, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (understanding {loss_u}, generation {loss_g})")]
    NonFiniteLoss { step: usize, loss_u: f64, loss_g: f64 },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("prediction and target lengths differ: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("the {0} pool is empty but its loss weight is non-zero")]
    EmptyPool(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training hyperparameters. Defaults: Adam at 2e-5 for 10 epochs, 5%
/// linear warmup then cosine decay, batches of 6 understanding / 1
/// generation instances, equal loss weights, gradient clip at norm 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub batch_understand: usize,
    pub batch_generate: usize,
    pub seed: u64,
    pub lambda_text: f64,
    pub lambda_series: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            epochs: 10,
            warmup_frac: 0.05,
            batch_understand: 6,
            batch_generate: 1,
            seed: 0,
            lambda_text: 1.0,
            lambda_series: 1.0,
            clip_norm: 1.0,
        }
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup over the first
/// `warmup_frac` of steps (W = ceil(frac * total)), then cosine decay to 0.
/// Both branches give exactly `lr` at the junction.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    assert!(step <= total_steps);
    let warmup = ((config.warmup_frac * total_steps as f64).ceil() as usize).max(1);
    if step <= warmup {
        config.lr * step as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean squared error between a prediction node and a constant target, on
/// whatever scale the prediction lives on.
pub fn mse_loss_graph(tape: &mut Tape, pred: NodeId, target: &[f64]) -> Result<NodeId> {
    let n = tape.value(pred).numel();
    if n != target.len() {
        return Err(TrainError::LengthMismatch { pred: n, target: target.len() });
    }
    let flat = tape.reshape(pred, vec![n])?;
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let diff = tape.sub(flat, t)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq);
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Plain MSE between two slices.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch { pred: pred.len(), target: target.len() });
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mean negative log-softmax of the target ids over unmasked positions.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    mask: &[bool],
) -> Result<NodeId> {
    if !mask.iter().any(|&m| m) {
        return Err(TrainError::EmptyMask);
    }
    Ok(tape.cross_entropy(logits, targets, mask)?)
}

/// Adam with bias correction. Moments are kept per parameter name and only
/// for parameters that actually receive gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: usize,
    state: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(
        &mut self,
        params: &mut crate::numerics::ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let entry = params.get_mut(name)?;
            debug_assert!(entry.trainable, "gradient for frozen parameter `{name}`");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec())));
            let theta = entry.tensor.data_mut();
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                theta[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Serialises moments and the step counter into checkpoint extras.
    pub fn to_extras(&self) -> BTreeMap<String, Tensor> {
        let mut extras = BTreeMap::new();
        extras.insert("adam.t".into(), Tensor::scalar(self.t as f64));
        for (name, (m, v)) in &self.state {
            extras.insert(format!("adam.m.{name}"), m.clone());
            extras.insert(format!("adam.v.{name}"), v.clone());
        }
        extras
    }

    pub fn from_extras(extras: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = Self::new();
        if let Some(t) = extras.get("adam.t") {
            opt.t = t.item() as usize;
        }
        for (key, tensor) in extras {
            if let Some(name) = key.strip_prefix("adam.m.") {
                opt.state.entry(name.into()).or_insert_with(|| (tensor.clone(), tensor.clone())).0 =
                    tensor.clone();
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                opt.state.entry(name.into()).or_insert_with(|| (tensor.clone(), tensor.clone())).1 =
                    tensor.clone();
            }
        }
        opt
    }
}

/// Scales all gradients by `min(1, max_norm / ||g||)`; returns the global
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads.values().flat_map(|t| t.data()).map(|g| g * g).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in grads {
        let scaled = g.map(|v| v * scale);
        match acc.get_mut(&name) {
            Some(t) => t.accumulate(&scaled),
            None => {
                acc.insert(name, scaled);
            }
        }
    }
}

/// One optimisation step on `lambda_text * mean(understanding CE) +
/// lambda_series * mean(generation MSE)`, gradients accumulated across both
/// batches before a single Adam update. Returns `(loss_u, loss_g)` on their
/// natural scales.
pub fn joint_step(
    model: &mut Model,
    opt: &mut Adam,
    batch_u: &[&crate::dataset::TaskInstance],
    batch_g: &[&crate::dataset::TaskInstance],
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, f64)> {
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_u = 0.0;
    let mut loss_g = 0.0;

    if cfg.lambda_text != 0.0 && !batch_u.is_empty() {
        let w = cfg.lambda_text / batch_u.len() as f64;
        for inst in batch_u {
            let mut tape = Tape::new();
            let mut binder = crate::numerics::Binder::new(&model.params);
            let loss = model.understanding_loss_graph(&mut tape, &mut binder, inst)?;
            loss_u += tape.value(loss).item();
            let g = tape.backward(loss)?;
            accumulate(&mut grads, binder.collect_grads(&tape, &g), w);
        }
        loss_u /= batch_u.len() as f64;
    }

    if cfg.lambda_series != 0.0 && !batch_g.is_empty() {
        let w = cfg.lambda_series / batch_g.len() as f64;
        for inst in batch_g {
            let mut tape = Tape::new();
            let mut binder = crate::numerics::Binder::new(&model.params);
            let loss = model.generation_loss_graph(&mut tape, &mut binder, inst)?;
            loss_g += tape.value(loss).item();
            let g = tape.backward(loss)?;
            accumulate(&mut grads, binder.collect_grads(&tape, &g), w);
        }
        loss_g /= batch_g.len() as f64;
    }

    if !loss_u.is_finite() || !loss_g.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, loss_u, loss_g });
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    opt.update(&mut model.params, &grads, lr)?;
    Ok((loss_u, loss_g))
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss_u: f64,
    pub loss_g: f64,
}

struct CyclingPool {
    indices: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclingPool {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        Self { indices, pos: 0, rng }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k.min(self.indices.len()) {
            if self.pos == self.indices.len() {
                self.indices.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.indices[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Drives joint steps over shuffled understanding/generation pools. The
/// pools cycle independently; one epoch is enough steps for the larger
/// pool to be consumed once.
pub struct Trainer<'a> {
    model: &'a mut Model,
    dataset: &'a Dataset,
    pub opt: Adam,
    cfg: TrainConfig,
    u_pool: CyclingPool,
    g_pool: CyclingPool,
    u_ids: Vec<usize>,
    g_ids: Vec<usize>,
    step: usize,
    total_steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        let u_ids: Vec<usize> = dataset
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, i)| i.task_type.is_understanding())
            .map(|(n, _)| n)
            .collect();
        let g_ids: Vec<usize> = dataset
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, i)| i.task_type.is_generation())
            .map(|(n, _)| n)
            .collect();
        if u_ids.is_empty() && cfg.lambda_text != 0.0 {
            return Err(TrainError::EmptyPool("understanding"));
        }
        if g_ids.is_empty() && cfg.lambda_series != 0.0 {
            return Err(TrainError::EmptyPool("generation"));
        }
        let steps_u = u_ids.len().div_ceil(cfg.batch_understand.max(1));
        let steps_g = g_ids.len().div_ceil(cfg.batch_generate.max(1));
        let steps_per_epoch = steps_u.max(steps_g).max(1);
        let total_steps = steps_per_epoch * cfg.epochs;
        let u_pool = CyclingPool::new(u_ids.len(), cfg.seed ^ 0x5531);
        let g_pool = CyclingPool::new(g_ids.len(), cfg.seed ^ 0xa7c3);
        Ok(Self { model, dataset, opt: Adam::new(), cfg, u_pool, g_pool, u_ids, g_ids, step: 0, total_steps })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn draw(&mut self) -> (Vec<usize>, Vec<usize>) {
        let bu = if self.cfg.lambda_text != 0.0 {
            self.u_pool.next_batch(self.cfg.batch_understand)
        } else {
            Vec::new()
        };
        let bg = if self.cfg.lambda_series != 0.0 {
            self.g_pool.next_batch(self.cfg.batch_generate)
        } else {
            Vec::new()
        };
        (bu, bg)
    }

    /// Runs one joint step; call at most `total_steps` times.
    pub fn step_once(&mut self) -> Result<LossRow> {
        let (bu, bg) = self.draw();
        self.step += 1;
        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        let batch_u: Vec<&crate::dataset::TaskInstance> =
            bu.iter().map(|&i| &self.dataset.instances()[self.u_ids[i]]).collect();
        let batch_g: Vec<&crate::dataset::TaskInstance> =
            bg.iter().map(|&i| &self.dataset.instances()[self.g_ids[i]]).collect();
        let (loss_u, loss_g) =
            joint_step(self.model, &mut self.opt, &batch_u, &batch_g, lr, &self.cfg, self.step)?;
        Ok(LossRow { step: self.step, lr, loss_u, loss_g })
    }

    /// Replays the data order of one step without computing, for resuming
    /// from a checkpoint taken at a later step.
    pub fn skip_step(&mut self) {
        let _ = self.draw();
        self.step += 1;
    }

    /// Runs the remaining steps, appending to `log`.
    pub fn run(&mut self, log: &mut Vec<LossRow>) -> Result<()> {
        while self.step < self.total_steps {
            log.push(self.step_once()?);
        }
        Ok(())
    }
}

/// Full training pass: epochs of joint steps over shuffled pools.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Vec<LossRow>, Adam)> {
    let mut trainer = Trainer::new(model, dataset, cfg.clone())?;
    let mut log = Vec::with_capacity(trainer.total_steps());
    trainer.run(&mut log)?;
    Ok((log, trainer.opt))
}
