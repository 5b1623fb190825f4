//! Cross-entropy training with Adam, early stopping on validation accuracy,
//! and random drop-off of visual-path updates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamStore};
use crate::model::{BatchInput, MafNet, NetState};
use crate::rng::named_rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability per optimizer step of skipping every visual-path update.
    pub drop_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// On a skipped step, still advance the Adam moments of skipped
    /// parameters (values stay put). Off by default: moments freeze too.
    pub update_moments_on_skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            drop_rate: 0.5,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
            validation_fraction: 0.15,
            update_moments_on_skip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch normalization".into());
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad(format!(
                "drop_rate must be in [0, 1], got {}",
                self.drop_rate
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| Tensor::zeros_like(&p.value))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam step with bias correction. Parameters flagged in `skip` keep
    /// their values; their moments freeze unless `update_moments_on_skip`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
        skip: &[bool],
        update_moments_on_skip: bool,
    ) -> Result<()> {
        let n = store.len();
        if grads.len() != n || skip.len() != n || self.m.len() != n {
            return Err(Error::Config(format!(
                "adam step over {n} parameters got {} gradients, {} skip flags, {} moments",
                grads.len(),
                skip.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            if skip[i] && !update_moments_on_skip {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            }
            if skip[i] {
                continue;
            }
            for (j, theta) in param.value.data_mut().iter_mut().enumerate() {
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *theta -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-step coin flips deciding whether visual-path updates are dropped.
/// Draws from its own stream, so the drop rate never perturbs shuffling.
#[derive(Clone, Debug)]
pub struct DropSchedule {
    rng: ChaCha8Rng,
    p: f64,
}

impl DropSchedule {
    pub fn new(seed: u64, p: f64) -> Self {
        DropSchedule {
            rng: named_rng(seed, "drop"),
            p,
        }
    }

    pub fn draw(&mut self) -> bool {
        let u: f64 = self.rng.random();
        u < self.p
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub dropped: bool,
}

/// Forward, backward and one optimizer step on a batch. With `drop` set, a
/// coin is drawn after the backward pass and on success every visual-path
/// parameter is skipped. Passing `None` never skips.
pub fn train_step(
    net: &mut MafNet,
    state: &mut AdamState,
    batch: &BatchInput,
    labels: &[usize],
    cfg: &TrainConfig,
    drop: Option<&mut DropSchedule>,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let p = net.store().bind(&mut tape);
    let out = net.forward_tape(&mut tape, &p, batch, Mode::Train)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            stage: "loss".into(),
        });
    }
    let grads = p.grads(&tape);
    let dropped = drop.is_some_and(|d| d.draw());
    let skip = if dropped {
        net.visual_path_mask()
    } else {
        vec![false; grads.len()]
    };
    state.step(
        net.store_mut(),
        &grads,
        cfg.learning_rate,
        &skip,
        cfg.update_moments_on_skip,
    )?;
    net.commit_bn_stats(&out.bn_stats);
    Ok(StepOutcome {
        loss: loss_value,
        dropped,
    })
}

/// Shuffled mini-batches of indices. A trailing batch of one sample is folded
/// into the previous batch, since batch normalization needs two rows.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub dropped_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy,dropped_steps\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.epoch, e.train_loss, e.val_accuracy, e.dropped_steps
            );
        }
        s
    }
}

/// Keeps the best validation accuracy seen so far (strict improvement) and
/// the network state that produced it.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub best_state: Option<NetState>,
    pub since_improvement: usize,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            best_state: None,
            since_improvement: 0,
            patience,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, accuracy: f64, net: &MafNet) -> bool {
        if accuracy > self.best_accuracy {
            self.best_accuracy = accuracy;
            self.best_epoch = epoch;
            self.best_state = Some(net.state());
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }
}

fn labels_of(records: &[&FeatureRecord]) -> Vec<usize> {
    records.iter().map(|r| r.label).collect()
}

/// Trains until `patience` epochs pass without a strictly better validation
/// accuracy or `max_epochs` is reached, then restores the best state.
pub fn fit(
    net: &mut MafNet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train.len() < 2 {
        return Err(Error::Data(
            "training needs at least 2 samples for batch normalization".into(),
        ));
    }
    let mut state = AdamState::new(net.store());
    let mut shuffle = named_rng(cfg.seed, "shuffle");
    let mut drop = DropSchedule::new(cfg.seed, cfg.drop_rate);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut dropped_steps = 0;
        for idx in make_batches(train.len(), cfg.batch_size, &mut shuffle) {
            let recs: Vec<&FeatureRecord> = idx.iter().map(|&i| &train.records[i]).collect();
            let batch = BatchInput::from_records(&recs, net.config())?;
            let out = train_step(
                net,
                &mut state,
                &batch,
                &labels_of(&recs),
                cfg,
                Some(&mut drop),
            )?;
            loss_sum += out.loss * recs.len() as f64;
            dropped_steps += out.dropped as usize;
        }
        let val_accuracy = evaluate(net, val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
            dropped_steps,
        });
        if stopper.observe(epoch, val_accuracy, net) {
            break;
        }
    }
    if let Some(best) = &stopper.best_state {
        net.load_state(best)?;
    }
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_accuracy: stopper.best_accuracy,
    })
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Eval-mode accuracy on a dataset.
pub fn evaluate(net: &MafNet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let recs: Vec<&FeatureRecord> = ds.records.iter().collect();
    accuracy(&net.predict(&recs)?, &ds.labels())
}
