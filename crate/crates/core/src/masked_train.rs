//! Fine-tuning under a selection mask.
//!
//! Gradients, Adam moments and weight decay all live only at mask positions,
//! so every frozen entry leaves training bitwise untouched.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Reduction};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{GpsError, Result};
use crate::model::{Model, ParamRole};
use crate::rng::substream;
use crate::selection::SelectionMask;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(GpsError::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Diagnostic: keep the classifier head frozen as well.
    pub freeze_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            base_lr: 1e-3,
            weight_decay: 0.0,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 32,
            seed: 0,
            freeze_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(GpsError::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(GpsError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(GpsError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(GpsError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate for `step` of `total_steps`: linear warm-up then cosine decay.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(GpsError::Contract(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = (total_steps * config.warmup_epochs)
        .checked_div(config.epochs)
        .unwrap_or(0);
    let base = config.base_lr;
    if step < warmup {
        return Ok(base * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Adam moments for the trainable positions of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentBuffers {
    positions: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl MomentBuffers {
    pub fn for_mask(mask: &[bool]) -> Self {
        let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let n = positions.len();
        MomentBuffers {
            positions,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn dense(numel: usize) -> Self {
        MomentBuffers {
            positions: (0..numel).collect(),
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// Per-parameter moment buffers (`None` = frozen) plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<Option<MomentBuffers>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    /// 1-based step number used for Adam bias correction.
    pub step: u64,
}

/// Applies one optimizer update to `w` at the positions where `mask` is set.
pub fn masked_step(
    w: &mut Tensor,
    grad: &Tensor,
    mask: &[bool],
    state: &mut MomentBuffers,
    rule: &StepRule,
) -> Result<()> {
    if w.shape() != grad.shape() || mask.len() != w.numel() {
        return Err(GpsError::Contract(format!(
            "masked_step: weight {:?}, grad {:?}, mask of {}",
            w.shape(),
            grad.shape(),
            mask.len()
        )));
    }
    if state.positions.len() != mask.iter().filter(|&&b| b).count() {
        return Err(GpsError::Contract(
            "masked_step: optimizer state was built for a different mask".into(),
        ));
    }
    apply_update(w, grad, state, rule);
    Ok(())
}

fn apply_update(w: &mut Tensor, grad: &Tensor, state: &mut MomentBuffers, rule: &StepRule) {
    let g = grad.data();
    let wd = w.data_mut();
    match rule.optimizer {
        Optimizer::Sgd => {
            for &i in &state.positions {
                wd[i] -= rule.lr * (g[i] + rule.weight_decay * wd[i]);
            }
        }
        Optimizer::Adam => {
            let t = rule.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (k, &i) in state.positions.iter().enumerate() {
                let m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g[i];
                let v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                state.m[k] = m;
                state.v[k] = v;
                let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS) + rule.weight_decay * wd[i];
                wd[i] -= rule.lr * update;
            }
        }
    }
}

/// Which entries of each model parameter train under `mask`.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamScope {
    Frozen,
    Dense,
    Masked(Vec<bool>),
}

impl ParamScope {
    pub fn is_trainable(&self, index: usize) -> bool {
        match self {
            ParamScope::Frozen => false,
            ParamScope::Dense => true,
            ParamScope::Masked(bits) => bits[index],
        }
    }
}

/// One scope per model parameter, in model order.
pub fn training_scopes(model: &Model, mask: &SelectionMask, freeze_head: bool) -> Result<Vec<ParamScope>> {
    mask.check_model(model)?;
    let extras = mask.strategy.extras();
    let mut matrices = mask.matrices.iter();
    Ok(model
        .params()
        .iter()
        .map(|p| {
            if p.role.is_selectable() {
                let bits = &matrices.next().expect("checked").bits;
                if bits.iter().all(|&b| b) {
                    ParamScope::Dense
                } else if bits.iter().any(|&b| b) {
                    ParamScope::Masked(bits.clone())
                } else {
                    ParamScope::Frozen
                }
            } else if p.role.is_head() {
                if freeze_head {
                    ParamScope::Frozen
                } else {
                    ParamScope::Dense
                }
            } else if extras.covers(p.role) {
                ParamScope::Dense
            } else {
                ParamScope::Frozen
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn metrics_to_jsonl(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("plain struct") + "\n")
        .collect()
}

pub fn write_metrics(path: impl AsRef<Path>, history: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
    f.write_all(metrics_to_jsonl(history).as_bytes())
        .map_err(|e| GpsError::io(&path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| GpsError::Format(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 512;

/// Top-1 accuracy and mean cross-entropy.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(GpsError::Input("cannot evaluate on an empty dataset".into()));
    }
    if dataset.classes > model.spec().classes {
        return Err(GpsError::Dimension(format!(
            "dataset has {} classes, model head has {}",
            dataset.classes,
            model.spec().classes
        )));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.batch(chunk);
        let (logits, _) = model.forward(&x)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(pred == label);
            loss += log_sum_exp(row) - row[label];
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Fine-tunes a copy of `model` under `mask`; the head always trains unless frozen by config.
pub fn finetune(
    model: &Model,
    mask: &SelectionMask,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochMetrics>)> {
    config.validate()?;
    let scopes = training_scopes(model, mask, config.freeze_head)?;
    let mut tuned = model.clone();
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((tuned, history));
    }
    if train.is_empty() {
        return Err(GpsError::Input("training set is empty".into()));
    }
    let mut state = OptimizerState {
        step: 0,
        slots: scopes
            .iter()
            .zip(model.params())
            .map(|(s, p)| match s {
                ParamScope::Frozen => None,
                ParamScope::Dense => Some(MomentBuffers::dense(p.value.numel())),
                ParamScope::Masked(bits) => Some(MomentBuffers::for_mask(bits)),
            })
            .collect(),
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = substream(config.seed, "shuffle");
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in shuffled_batches(train.len(), config.batch_size, &mut rng) {
            let (x, y) = train.batch(&batch);
            let mut pass = tuned.forward_graph(&x, |p| {
                model
                    .param_index(&p.name)
                    .is_some_and(|i| state.slots[i].is_some())
            })?;
            let loss = pass
                .graph
                .softmax_cross_entropy(pass.logits, &y, Reduction::Mean)?;
            let value = pass.graph.value(loss)?.data()[0];
            if !value.is_finite() {
                let last = match epoch {
                    0 => "none".to_string(),
                    e => (e - 1).to_string(),
                };
                return Err(GpsError::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, step {step}; last good epoch: {last}"
                )));
            }
            pass.graph.backward(loss)?;
            lr = lr_at(step, total_steps, config)?;
            state.step += 1;
            let rule = StepRule {
                optimizer: config.optimizer,
                lr,
                weight_decay: config.weight_decay,
                step: state.step,
            };
            for (i, slot) in state.slots.iter_mut().enumerate() {
                if let Some(buffers) = slot {
                    let grad = pass.graph.take_grad(pass.params[i]).expect("trainable leaf");
                    apply_update(&mut tuned.params_mut()[i].value, &grad, buffers, &rule);
                }
            }
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let val_acc = evaluate(&tuned, val)?.accuracy;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_acc,
            lr,
        });
    }
    Ok((tuned, history))
}

/// Fails with an integrity error if `tuned` moved any entry outside `mask`'s training scope.
pub fn verify_frozen(base: &Model, tuned: &Model, mask: &SelectionMask, freeze_head: bool) -> Result<()> {
    let scopes = training_scopes(base, mask, freeze_head)?;
    if base.params().len() != tuned.params().len() {
        return Err(GpsError::Contract("models have different parameter sets".into()));
    }
    for ((b, t), scope) in base.params().iter().zip(tuned.params()).zip(&scopes) {
        if b.name != t.name || b.value.shape() != t.value.shape() {
            return Err(GpsError::Contract(format!("parameter '{}' does not line up", b.name)));
        }
        let moved = b
            .value
            .data()
            .iter()
            .zip(t.value.data())
            .position(|(x, y)| x.to_bits() != y.to_bits());
        let bad = moved.and_then(|first| {
            (first..b.value.numel()).find(|&i| {
                !scope.is_trainable(i) && b.value.data()[i].to_bits() != t.value.data()[i].to_bits()
            })
        });
        if let Some(i) = bad {
            return Err(GpsError::Integrity(format!(
                "frozen entry {}[{i}] changed: {} -> {}",
                b.name,
                b.value.data()[i],
                t.value.data()[i]
            )));
        }
    }
    Ok(())
}

/// Number of non-head entries whose bits differ between `a` and `b`.
pub fn l0_distance(a: &Model, b: &Model) -> usize {
    a.params()
        .iter()
        .zip(b.params())
        .filter(|(p, _)| !p.role.is_head())
        .map(|(p, q)| {
            p.value
                .data()
                .iter()
                .zip(q.value.data())
                .filter(|(x, y)| x.to_bits() != y.to_bits())
                .count()
        })
        .sum()
}

/// Trainable non-head parameters by role, for reporting.
pub fn trainable_by_role(model: &Model, mask: &SelectionMask) -> Result<Vec<(ParamRole, usize)>> {
    let scopes = training_scopes(model, mask, false)?;
    let mut out: Vec<(ParamRole, usize)> = Vec::new();
    for (p, s) in model.params().iter().zip(&scopes) {
        if p.role.is_head() {
            continue;
        }
        let n = (0..p.value.numel()).filter(|&i| s.is_trainable(i)).count();
        match out.iter_mut().find(|(r, _)| *r == p.role) {
            Some((_, c)) => *c += n,
            None => out.push((p.role, n)),
        }
    }
    Ok(out)
}
