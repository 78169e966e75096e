//! Teacher-forced training loop shared by both model kinds.
//!
//! Rows are run unpadded on their own tape and their parameter gradients
//! summed; the loss is normalized by the batch's label-token count, which
//! equals the PAD-masked batch loss. Parameters and Adam moments are
//! rounded through f32 at every epoch boundary so a run resumed from a
//! checkpoint continues bit-for-bit.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::numerics::{adam_step, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use crate::prep::{Fragment, TokenId, BOS, EOS};
use crate::rng::rng_for;

/// One training pair of content tokens (no BOS/EOS, no PAD).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl From<&Fragment> for Example {
    fn from(f: &Fragment) -> Self {
        Example { input: f.input.clone(), target: f.target.clone() }
    }
}

impl Example {
    pub fn framed_target(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.target.len() + 2);
        v.push(BOS);
        v.extend_from_slice(&self.target);
        v.push(EOS);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 32, lr: 1e-3, seed: 0, patience: Some(4), max_steps: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Summed statistics over label tokens (EOS included, PAD excluded).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl StepStats {
    pub fn mean_loss(&self) -> f64 {
        if self.tokens == 0 { 0.0 } else { self.loss_sum / self.tokens as f64 }
    }

    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 { 0.0 } else { self.correct as f64 / self.tokens as f64 }
    }

    fn add(&mut self, o: StepStats) {
        self.loss_sum += o.loss_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }
}

fn label_count(ex: &Example) -> usize {
    ex.target.len() + 1
}

/// Mean-loss gradients of a batch, one slot per parameter.
pub fn batch_gradients<M: Seq2Seq>(model: &M, batch: &[&Example], dropout_seed: u64) -> Result<(Vec<Vec<f64>>, StepStats)> {
    let total: usize = batch.iter().map(|e| label_count(e)).sum();
    if total == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / total as f64;
    let mut slots = model.store().grad_slots();
    let mut stats = StepStats::default();
    let mut rng = rng_for(dropout_seed, "dropout", 0);
    for ex in batch {
        let mut tape = Tape::new();
        let framed = ex.framed_target();
        let row = model.row_loss_train(&mut tape, &ex.input, &framed, scale, &mut rng)?;
        let loss = tape.value(row.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} (input {:?})", ex.input)));
        }
        tape.backward(row.loss)?.accumulate_params(&mut slots);
        stats.add(StepStats { loss_sum: loss / scale, tokens: row.counted, correct: row.correct });
    }
    Ok((slots, stats))
}

/// One Adam step on a batch. Returns the batch statistics measured before
/// the update.
pub fn train_step<M: Seq2Seq>(model: &mut M, batch: &[&Example], adam: &AdamConfig, dropout_seed: u64) -> Result<StepStats> {
    let (grads, stats) = batch_gradients(model, batch, dropout_seed)?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    adam_step(model.store_mut(), &grads, adam)?;
    Ok(stats)
}

/// Teacher-forced loss and token accuracy without updating parameters.
pub fn evaluate_loss<M: Seq2Seq>(model: &M, examples: &[Example]) -> Result<StepStats> {
    let mut stats = StepStats::default();
    for ex in examples {
        let mut tape = Tape::new();
        let row = model.row_loss(&mut tape, &ex.input, &ex.framed_target(), 1.0)?;
        let loss = tape.value(row.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} (input {:?})", ex.input)));
        }
        stats.add(StepStats { loss_sum: loss, tokens: row.counted, correct: row.correct });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Everything needed to continue training after an epoch boundary.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl TrainState {
    fn to_hyper(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        let history: Vec<String> = self
            .history
            .iter()
            .map(|r| format!("{},{},{},{},{},{}", r.epoch, r.steps, r.train_loss, r.train_acc, opt(r.val_loss), opt(r.val_acc)))
            .collect();
        vec![
            ("train.epoch".into(), self.epoch.to_string()),
            ("train.step".into(), self.step.to_string()),
            ("train.best_val".into(), opt(self.best_val)),
            ("train.best_epoch".into(), self.best_epoch.map_or("-".into(), |e| e.to_string())),
            ("train.bad_epochs".into(), self.bad_epochs.to_string()),
            ("train.stopped".into(), self.stopped.to_string()),
            ("train.history".into(), history.join(";")),
        ]
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |k: &str| Error::invalid(format!("checkpoint field {k} is malformed"));
        let opt_f = |s: &str| -> Result<Option<f64>> {
            if s == "-" { Ok(None) } else { s.parse().map(Some).map_err(|_| bad(s)) }
        };
        let mut history = Vec::new();
        let raw = ck.hyper("train.history").ok_or_else(|| bad("train.history"))?;
        for rec in raw.split(';').filter(|r| !r.is_empty()) {
            let f: Vec<&str> = rec.split(',').collect();
            if f.len() != 6 {
                return Err(bad("train.history"));
            }
            history.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("train.history"))?,
                steps: f[1].parse().map_err(|_| bad("train.history"))?,
                train_loss: f[2].parse().map_err(|_| bad("train.history"))?,
                train_acc: f[3].parse().map_err(|_| bad("train.history"))?,
                val_loss: opt_f(f[4])?,
                val_acc: opt_f(f[5])?,
            });
        }
        let best_epoch = ck.hyper("train.best_epoch").ok_or_else(|| bad("train.best_epoch"))?;
        Ok(TrainState {
            epoch: ck.hyper_parse("train.epoch")?,
            step: ck.hyper_parse("train.step")?,
            history,
            best_val: opt_f(ck.hyper("train.best_val").ok_or_else(|| bad("train.best_val"))?)?,
            best_epoch: if best_epoch == "-" { None } else { Some(best_epoch.parse().map_err(|_| bad("train.best_epoch"))?) },
            bad_epochs: ck.hyper_parse("train.bad_epochs")?,
            stopped: ck.hyper_parse("train.stopped")?,
        })
    }
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

/// Model checkpoint with optimizer moments and training progress.
pub fn to_checkpoint<M: Seq2Seq>(model: &M, state: Option<&TrainState>) -> Result<Checkpoint> {
    let store = model.store();
    let mut hyper = model.hyperparameters();
    let step = store.iter().next().map_or(0, |p| p.step);
    hyper.push(("adam.step".into(), step.to_string()));
    if let Some(s) = state {
        hyper.extend(s.to_hyper());
    }
    let mut tensors = Vec::with_capacity(store.len() * 3);
    for p in store.iter() {
        tensors.push((p.name.clone(), p.value.clone()));
    }
    for p in store.iter() {
        tensors.push((format!("{MOMENT_M}{}", p.name), Tensor::new(p.value.shape(), p.m.clone())?));
        tensors.push((format!("{MOMENT_V}{}", p.name), Tensor::new(p.value.shape(), p.v.clone())?));
    }
    Ok(Checkpoint { kind: model.kind().tag().into(), hyper, tensors })
}

/// Copies parameter values (and Adam moments when present) from a
/// checkpoint into a freshly constructed store.
pub fn load_params(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let step: u64 = if ck.hyper("adam.step").is_some() { ck.hyper_parse("adam.step")? } else { 0 };
    for p in store.iter_mut() {
        let t = ck.tensor(&p.name).ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Shape(format!("parameter {}: checkpoint {:?}, model {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t.clone();
        for (prefix, dst) in [(MOMENT_M, &mut p.m), (MOMENT_V, &mut p.v)] {
            match ck.tensor(&format!("{prefix}{}", p.name)) {
                Some(m) if m.len() == dst.len() => dst.copy_from_slice(m.data()),
                Some(_) => return Err(Error::Shape(format!("moment {prefix}{} has the wrong size", p.name))),
                None => dst.iter_mut().for_each(|v| *v = 0.0),
            }
        }
        p.step = step;
    }
    Ok(())
}

pub fn resume_state(ck: &Checkpoint) -> Result<TrainState> {
    TrainState::from_checkpoint(ck)
}

/// Epoch loop with shuffling, optional validation-based early stopping and
/// a hook after every epoch (for checkpoints and logging). Returns the
/// final state; the model holds the last epoch's parameters.
pub fn fit<M: Seq2Seq>(
    model: &mut M,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut state: TrainState,
    on_epoch: &mut dyn FnMut(&M, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    while state.epoch < cfg.epochs && !state.stopped {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let mut stats = StepStats::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let dropout_seed = rng_seed(cfg.seed, state.step);
            stats.add(train_step(model, &batch, &adam, dropout_seed)?);
            state.step += 1;
            steps += 1;
        }
        model.store_mut().round_to_f32();
        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let v = evaluate_loss(model, val)?;
            (Some(v.mean_loss()), Some(v.accuracy()))
        };
        state.epoch += 1;
        let rec = EpochRecord { epoch: state.epoch, steps, train_loss: stats.mean_loss(), train_acc: stats.accuracy(), val_loss, val_acc };
        log::info!(
            "epoch {} steps {} train loss {:.4} acc {:.4} val loss {}",
            rec.epoch,
            rec.steps,
            rec.train_loss,
            rec.train_acc,
            val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        state.history.push(rec);
        if let Some(v) = val_loss {
            if state.best_val.is_none_or(|b| v < b) {
                state.best_val = Some(v);
                state.best_epoch = Some(state.epoch);
                state.bad_epochs = 0;
            } else {
                state.bad_epochs += 1;
                if cfg.patience.is_some_and(|p| state.bad_epochs >= p) {
                    state.stopped = true;
                }
            }
        }
        on_epoch(model, &state)?;
    }
    Ok(state)
}

fn rng_seed(seed: u64, step: usize) -> u64 {
    crate::rng::derive_seed(seed, "train-step", step as u64)
}
