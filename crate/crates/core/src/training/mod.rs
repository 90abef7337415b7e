//! Supervised pretraining, single-sample fine-tuning and the shot protocol.

mod adam;
mod fewshot;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::SampleTensor;
use crate::error::{Error, Result};
use crate::model::{AttentionHint, Model, TargetStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use adam::Adam;
pub use fewshot::{read_shots_csv, run_few_shot, select_shots, write_shots_csv, FewShotRun, ShotRecord, ShotSelection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub early_stop_patience: usize,
    /// Share of the pretrain set held out for early stopping.
    pub val_fraction: f64,
    /// Gradient steps per shot.
    pub finetune_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub shot_selection: ShotSelection,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-3,
            lr_finetune: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            val_fraction: 0.2,
            finetune_steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            shot_selection: ShotSelection::MaxError,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.lr_finetune >= self.lr_pretrain {
            return bad(format!(
                "lr_finetune ({}) must be below lr_pretrain ({})",
                self.lr_finetune, self.lr_pretrain
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.finetune_steps == 0 {
            return bad("batch_size, max_epochs and finetune_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    fn adam<S: Scalar>(&self, lr: f64) -> Adam<S> {
        Adam::new(lr, self.beta1, self.beta2, self.adam_eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean training MSE over the epoch, standardized target space.
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub history: Vec<EpochLoss>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
}

fn diverged(what: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(src) => Error::Diverged(format!("{what}: non-finite {src}")),
        other => other,
    }
}

fn z_targets<S: Scalar>(model: &Model<S>, batch: &[&SampleTensor]) -> Result<Tensor<S>> {
    let t = model.standardization.target;
    let z = batch.iter().map(|s| S::from_f64_lossy(t.to_z(s.target))).collect();
    Tensor::new(&[batch.len(), 1], z)
}

/// One forward/backward pass; returns the loss and parameter gradients.
fn loss_and_grads<S: Scalar>(
    model: &Model<S>,
    batch: &[&SampleTensor],
    hint: Option<&AttentionHint>,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let input = g.constant(model.batch_input(batch)?);
    let vars = model.build(&mut g, input, batch.len(), hint)?;
    let loss = g.mse_loss(vars.prediction, &z_targets(model, batch)?)?;
    let value = g.value(loss).data()[0].as_f64();
    let mut grads = g.backward(loss)?;
    Ok((value, vars.params.iter().map(|&p| grads.take(p)).collect()))
}

/// MSE in standardized target space, evaluated in chunks.
pub fn evaluate_loss<S: Scalar>(model: &Model<S>, set: &[SampleTensor], hint: Option<&AttentionHint>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate loss on an empty set".into()));
    }
    let mut sse = 0.0;
    for chunk in set.chunks(32) {
        let refs: Vec<&SampleTensor> = chunk.iter().collect();
        let z = model.predict_z(&refs, hint)?;
        for (p, s) in z.iter().zip(chunk) {
            let d = p - model.standardization.target.to_z(s.target);
            sse += d * d;
        }
    }
    Ok(sse / set.len() as f64)
}

/// Fits target statistics on `set`, then trains with Adam on shuffled
/// mini-batches. A seeded slice of `set` is held out for early stopping and
/// the best held-out weights are restored at the end.
pub fn pretrain<S: Scalar>(model: &mut Model<S>, set: &[SampleTensor], cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("pretrain set is empty".into()));
    }
    let targets: Vec<f64> = set.iter().map(|s| s.target).collect();
    model.standardization.target = TargetStats::fit(&targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if set.len() >= 4 { (set.len() as f64 * cfg.val_fraction).round() as usize } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<SampleTensor> = val_idx.iter().map(|&i| set[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();

    let mut adam = cfg.adam::<S>(cfg.lr_pretrain);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<S>>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SampleTensor> = chunk.iter().map(|&i| &set[i]).collect();
            let (loss, grads) =
                loss_and_grads(model, &batch, None).map_err(diverged(format!("epoch {epoch} step {step}")))?;
            total += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grads)?;
        }
        let train = total / train_idx.len() as f64;
        if !train.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: training loss {train}")));
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, &val, None).map_err(diverged(format!("epoch {epoch} validation")))?)
        };
        history.push(EpochLoss { epoch, train, val: val_loss });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                let snapshot = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
                best = Some((v, epoch, snapshot));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            for (dst, src) in model.params_mut().into_iter().zip(snapshot) {
                *dst = src;
            }
            epoch
        }
        None => history.len() - 1,
    };
    let ids = |idx: &[usize]| idx.iter().map(|&i| set[i].run_id.clone()).collect();
    Ok(PretrainReport { history, best_epoch, stopped_early, train_ids: ids(&train_idx), val_ids: ids(val_idx) })
}

/// `cfg.finetune_steps` Adam steps at `cfg.lr_finetune` on one sample with
/// the hint active, recording the sample loss before and after.
pub fn finetune_step<S: Scalar>(
    model: &mut Model<S>,
    sample: &SampleTensor,
    hint: Option<&AttentionHint>,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    if !(cfg.lr_finetune.is_finite() && cfg.lr_finetune >= 0.0) {
        return Err(Error::Config(format!("lr_finetune must be >= 0, got {}", cfg.lr_finetune)));
    }
    let mut adam = cfg.adam::<S>(cfg.lr_finetune);
    let mut loss_before = None;
    for step in 0..cfg.finetune_steps {
        let (loss, grads) = loss_and_grads(model, &[sample], hint)
            .map_err(diverged(format!("fine-tune on {} step {step}", sample.run_id)))?;
        loss_before.get_or_insert(loss);
        adam.step(model.params_mut(), &grads)?;
    }
    let loss_after = evaluate_loss(model, std::slice::from_ref(sample), hint)
        .map_err(diverged(format!("fine-tune on {}", sample.run_id)))?;
    let loss_before = match loss_before {
        Some(l) => l,
        None => loss_after,
    };
    Ok(FinetuneOutcome { loss_before, loss_after })
}

#[cfg(test)]
mod tests;
