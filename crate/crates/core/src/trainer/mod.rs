//! Training loop, checkpoints and the ablation harness.

mod ablation;
mod checkpoint;
mod optim;

pub use ablation::{ablate, AblationConfig, AblationReport, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, cosine_lr, global_norm, AdamW, AdamWConfig, StepOutcome};

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::cue::ContextMode;
use crate::data::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::losses::{LossConfig, Objective};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, Module};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip_norm: Option<f64>,
    /// Stop after this many epochs without a better validation macro F1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 2e-5,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            early_stop_patience: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// Everything that defines one training run apart from the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub context_mode: ContextMode,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps applied so far.
    pub steps: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean batch loss.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub val_recall_class1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the initial model without epochs).
    pub model: Model,
    /// Optimizer state matching `model`.
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub objective: Objective,
    pub test_report: Option<EvalReport>,
}

/// Eval-mode probabilities for every post, in order.
pub fn predict_all(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, _) = data.batch(chunk)?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let probs = predict_all(model, data, batch_size)?;
    Ok(EvalReport::from_probs(&probs, &data.labels)?)
}

fn collect_grads(model: &Model) -> Vec<Vec<f64>> {
    model.parameters().iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.values().len()])).collect()
}

/// Trains a freshly initialized model.
///
/// The seed fixes initialization, batch order and dropout, so two runs with
/// equal inputs produce bitwise-equal histories.
pub fn train(spec: &RunSpec, data: &SplitData) -> Result<TrainOutcome> {
    let cfg = &spec.train;
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    let objective = spec.loss.objective(&data.train.labels)?;
    let mut rng = seeded(cfg.seed);
    let mut model = Model::new(spec.model.clone(), &mut rng)?;
    let mut dropout_rng = seeded(rng.random());
    let mut optimizer = AdamW::new(cfg.adamw(), &model.parameters());

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>, AdamW)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut schedule_step = 0u64;
    let mut nonfinite_run = 0;
    let mut lr = cfg.lr_max;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(schedule_step, total_steps, cfg.lr_max);
            schedule_step += 1;
            let (batch, labels) = data.train.batch(chunk)?;
            model.parameters().iter().for_each(|p| p.zero_grad());
            let out = model.forward(&batch, &mut Mode::Train(&mut dropout_rng))?;
            let weight = out.context_weight(spec.context_mode)?;
            let loss = objective.loss(&out.probs, &labels, &weight)?;
            let value = loss.item();
            if !value.is_finite() {
                nonfinite_run += 1;
                let mean_w = weight.data().iter().sum::<f64>() / weight.numel() as f64;
                let diag = format!(
                    "non-finite loss {value} at epoch {epoch}, step {schedule_step}, lr {lr:e}, mean context weight {mean_w}, batch {chunk:?}"
                );
                log::warn!("{diag}");
                if nonfinite_run >= 2 {
                    return Err(Error::Numeric(format!("two consecutive non-finite losses; last: {diag}")));
                }
                continue;
            }
            nonfinite_run = 0;
            loss.backward()?;
            let mut grads = collect_grads(&model);
            drop((out, loss, weight));
            if let Some(max) = cfg.grad_clip_norm {
                clip_global_norm(&mut grads, max);
            }
            optimizer.update(&mut model.parameters_mut(), &grads, lr);
            loss_sum += value;
            loss_count += 1;
        }
        let val = evaluate(&model, &data.val, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            steps: optimizer.step,
            lr,
            train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            val_accuracy: val.accuracy,
            val_macro_f1: val.macro_f1,
            val_recall_class1: val.class(Label::ALL[0]).recall,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val macro-F1 {:.4} acc {:.4}",
            record.train_loss,
            record.val_macro_f1,
            record.val_accuracy
        );
        history.push(record);
        if best.as_ref().is_none_or(|b| val.macro_f1 > b.0) {
            best = Some((val.macro_f1, epoch, model.snapshot(), optimizer.clone()));
        }
        if let (Some(patience), Some(b)) = (cfg.early_stop_patience, &best) {
            if epoch - b.1 >= patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", b.1);
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, values, opt)) = best {
        model.restore(&values)?;
        optimizer = opt;
    }
    let test_report = match &data.test {
        Some(t) if !t.is_empty() => Some(evaluate(&model, t, cfg.eval_batch_size)?),
        _ => None,
    };
    Ok(TrainOutcome { model, optimizer, history, best_epoch, objective, test_report })
}
