//! Training loop: deep-supervised BCE, Adam, plateau learning-rate decay,
//! validation and best-checkpoint tracking.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::nn::{bce_value, Adam, Mode, Tape, Tensor, Var};
use crate::pipeline::PatchSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epochs without improvement before the learning rate drops.
    pub patience: usize,
    pub decay_factor: f32,
    pub min_delta: f64,
    pub dropout: f32,
    /// Number of outputs of iterative models.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            patience: 10,
            decay_factor: 10.0,
            min_delta: 1e-4,
            dropout: 0.1,
            iterations: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.iterations == 0 {
            return bad("epochs, batch_size, patience and iterations must all be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.decay_factor > 1.0) {
            return bad(format!("decay factor must exceed 1, got {}", self.decay_factor));
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f32,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Plateau scheduler state.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub lr: f32,
    pub best: f64,
    pub since_improvement: usize,
}

impl PlateauState {
    pub fn new(lr: f32) -> Self {
        PlateauState { lr, best: f64::INFINITY, since_improvement: 0 }
    }
}

/// Feed one epoch's validation loss to the scheduler. An epoch counts as an
/// improvement only if it beats the best loss by strictly more than
/// `min_delta`; after `patience` epochs without one the learning rate is
/// divided by `decay_factor`. Returns whether this epoch improved.
pub fn plateau_step(state: &mut PlateauState, val_loss: f64, config: &TrainConfig) -> bool {
    if state.best - val_loss > config.min_delta {
        state.best = val_loss;
        state.since_improvement = 0;
        return true;
    }
    state.since_improvement += 1;
    if state.since_improvement >= config.patience {
        state.lr /= config.decay_factor;
        state.since_improvement = 0;
    }
    false
}

/// Mean of the per-output BCE losses (equal-weight deep supervision).
pub fn composite_loss(tape: &mut Tape, outputs: &[Var], target: &Tensor) -> Result<Var> {
    let losses = outputs.iter().map(|&p| tape.bce_loss(p, target)).collect::<Result<Vec<_>>>()?;
    tape.mean(&losses)
}

/// Composite loss of already-computed probability maps.
pub fn composite_loss_value(outputs: &[Tensor], target: &Tensor) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Shape("composite loss of zero outputs".into()));
    }
    let mut total = 0.0;
    for p in outputs {
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!("prediction {} vs target {}", p.shape(), target.shape())));
        }
        total += f64::from(bce_value(p.data(), target.data()));
    }
    Ok(total / outputs.len() as f64)
}

fn labelled<'a>(set: &'a PatchSet, what: &str) -> Result<&'a Tensor> {
    if set.is_empty() {
        return Err(Error::Config(format!("{what} patch set is empty")));
    }
    set.targets.as_ref().ok_or_else(|| Error::Config(format!("{what} patch set has no groundtruth")))
}

/// Eval-mode composite loss averaged over every patch of `set`.
pub fn validate(model: &Model, set: &PatchSet, batch_size: usize) -> Result<f64> {
    let targets = labelled(set, "validation")?;
    let n = set.len();
    let mut total = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = set.inputs.gather(chunk);
        let y = targets.gather(chunk);
        let probs = model.predict(&x)?;
        total += composite_loss_value(&probs, &y)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Seed of the training stream (shuffling and dropout), kept apart from the
/// weight-initialization stream.
pub fn training_seed(seed: u64) -> u64 {
    let mut h = Fnv1a::default();
    h.update(&seed.to_le_bytes());
    h.update(b"train");
    h.finish()
}

/// Callbacks fired by [`train`].
pub trait TrainObserver {
    fn batch_end(&mut self, _epoch: usize, _batch: usize, _batches: usize, _loss: f32) {}
    fn epoch_end(&mut self, _record: &EpochRecord, _improved: bool) {}
    /// Called with the model right after a new best validation loss.
    fn checkpoint(&mut self, _model: &Model, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl TrainObserver for Quiet {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    best_values: Vec<Tensor>,
}

impl TrainOutcome {
    /// Load the best-validation weights into `model`.
    pub fn restore_best(&self, model: &mut Model) {
        model.params_mut().restore_values(&self.best_values);
    }
}

/// One Adam step on a batch; returns the (train-mode) composite loss.
pub fn train_step(
    model: &mut Model,
    x: Tensor,
    y: &Tensor,
    adam: &Adam,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.input(x, false);
    let out = model.forward(&mut tape, xv, Mode::Train, rng)?;
    let loss = composite_loss(&mut tape, &out.probs, y)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss, model.params_mut())?;
    adam.step(model.params_mut(), lr)?;
    Ok(value)
}

/// Train `model` in place. The model ends with the last epoch's weights;
/// the best-validation weights are kept in the outcome.
pub fn train(
    model: &mut Model,
    train_set: &PatchSet,
    val_set: &PatchSet,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let targets = labelled(train_set, "training")?;
    labelled(val_set, "validation")?;
    model.set_dropout(config.dropout)?;
    let adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(training_seed(config.seed));
    let mut plateau = PlateauState::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (0, f64::INFINITY, model.params().values());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches = order.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = plateau.lr;
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.inputs.gather(chunk);
            let y = targets.gather(chunk);
            let loss = train_step(model, x, &y, &adam, lr, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            sum += f64::from(loss) * chunk.len() as f64;
            observer.batch_end(epoch, b, batches, loss);
        }
        let val_loss = validate(model, val_set, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches, loss: val_loss as f32 });
        }
        let improved = plateau_step(&mut plateau, val_loss, config);
        let record = EpochRecord { epoch, lr, train_loss: sum / order.len() as f64, val_loss };
        history.push(record);
        observer.epoch_end(&record, improved);
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params().values());
            observer.checkpoint(model, &record)?;
        }
    }
    Ok(TrainOutcome { history, best_epoch: best.0, best_val_loss: best.1, best_values: best.2 })
}

/// Result of [`overfit`].
#[derive(Debug, Clone)]
pub struct OverfitReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reached: bool,
}

/// Repeated full-batch Adam steps on one small labelled set until the
/// eval-mode composite loss drops below `target` or `max_steps` run out.
pub fn overfit(
    model: &mut Model,
    set: &PatchSet,
    max_steps: usize,
    lr: f32,
    target: f64,
    seed: u64,
) -> Result<OverfitReport> {
    let y = labelled(set, "overfit")?.clone();
    let adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(training_seed(seed));
    let initial_loss = validate(model, set, set.len())?;
    let mut final_loss = initial_loss;
    for step in 1..=max_steps {
        let loss = train_step(model, set.inputs.clone(), &y, &adam, lr, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: step, loss });
        }
        // The eval pass costs a third of a step, so only pay for it once the
        // dropout-noisy training loss is in range.
        if f64::from(loss) < 2.0 * target || step == max_steps {
            final_loss = validate(model, set, set.len())?;
            if final_loss < target {
                return Ok(OverfitReport { steps: step, initial_loss, final_loss, reached: true });
            }
        }
    }
    Ok(OverfitReport { steps: max_steps, initial_loss, final_loss, reached: false })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        writeln!(s, "{},{:e},{:.9},{:.9}", r.epoch, r.lr, r.train_loss, r.val_loss).expect("write to string");
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
