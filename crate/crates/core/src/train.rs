//! Patch-based training loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{sliding_window_predict, DiceReport, DiceSummary, DEFAULT_OVERLAP};
use crate::location::{PatchSampler, Volume};
use crate::model::Model;
use crate::tensor::{Graph, Real, Sgd, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_shape: [usize; 3],
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay; 0 keeps it constant.
    pub poly_power: f64,
    pub foreground_prob: f64,
    /// Iterations per logged epoch.
    pub epoch_length: usize,
    /// Run validation every this many epochs (0 = only after the last one).
    pub val_every: usize,
    pub val_overlap: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 250,
            batch_size: 2,
            patch_shape: [16, 16, 16],
            learning_rate: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            poly_power: 0.9,
            foreground_prob: PatchSampler::DEFAULT_FOREGROUND_PROB,
            epoch_length: 50,
            val_every: 1,
            val_overlap: DEFAULT_OVERLAP,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epoch_length == 0 {
            return Err(Error::config("batch_size and epoch_length must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("need learning_rate > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if self.poly_power < 0.0 || !(0.0..1.0).contains(&self.val_overlap) {
            return Err(Error::config("need poly_power >= 0 and val_overlap in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate used at iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let progress = it as f64 / self.iterations.max(1) as f64;
        self.learning_rate * (1.0 - progress).max(0.0).powf(self.poly_power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochEntry {
    /// Iterations completed at the end of the epoch.
    pub iteration: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Mean foreground Dice on the validation volumes, when evaluated.
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochEntry>,
}

impl TrainingLog {
    pub fn final_val_dice(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_dice)
    }

    /// CSV with columns `iteration,loss,val_dice` (empty when not evaluated).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "loss", "val_dice"])?;
        for e in &self.epochs {
            let dice = e.val_dice.map(|d| d.to_string()).unwrap_or_default();
            w.write_record([e.iteration.to_string(), e.loss.to_string(), dice])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Mean-Dice summary of a model over whole volumes.
pub fn evaluate<T: Real>(model: &Model<T>, volumes: &[Volume], patch_shape: [usize; 3], overlap: f64) -> Result<DiceSummary> {
    evaluate_shifted(model, volumes, patch_shape, overlap, 0.0)
}

pub(crate) fn evaluate_shifted<T: Real>(
    model: &Model<T>,
    volumes: &[Volume],
    patch_shape: [usize; 3],
    overlap: f64,
    shift: f64,
) -> Result<DiceSummary> {
    let k = model.config().num_classes;
    let reports = volumes
        .iter()
        .map(|v| {
            let labels = v.labels.as_ref().ok_or_else(|| Error::invalid("evaluation volume has no labels"))?;
            let pred = sliding_window_predict(model, v, patch_shape, overlap, shift)?;
            DiceReport::compute(&pred, labels, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceSummary::new(reports))
}

/// One optimization step on a batch; returns the loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &Sgd,
    input: Tensor<T>,
    labels: &[u8],
    locations: Option<&[crate::location::PatchLocation]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(input);
    let logits = model.forward(&mut g, &vars, x, locations)?;
    let loss = g.dice_ce_loss(logits, labels)?;
    g.backward(loss)?;
    let value = g.value(loss).item().as_f64();
    let store = model.params_mut();
    store.zero_grad();
    store.accumulate(&g, &vars);
    optimizer.step(store.params_mut());
    Ok(value)
}

/// Trains `model` in place. Patches are drawn with a RNG seeded from the
/// schedule, so identical inputs give bitwise-identical logs and weights.
pub fn train<T: Real>(model: &mut Model<T>, train: &[Volume], val: &[Volume], schedule: &Schedule) -> Result<TrainingLog> {
    schedule.validate()?;
    let mut log = TrainingLog::default();
    if schedule.iterations == 0 {
        return Ok(log);
    }
    if train.is_empty() || train.iter().any(|v| v.labels.is_none()) {
        return Err(Error::invalid("training needs at least one labelled volume"));
    }
    let sampler = PatchSampler::new(train, schedule.patch_shape, schedule.foreground_prob)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let [d, h, w] = schedule.patch_shape;
    let patch_voxels = d * h * w;
    let b = schedule.batch_size;
    let mut epoch_losses = Vec::with_capacity(schedule.epoch_length);
    let num_epochs = schedule.iterations.div_ceil(schedule.epoch_length);
    for it in 0..schedule.iterations {
        let mut input = Vec::with_capacity(b * patch_voxels);
        let mut labels = Vec::with_capacity(b * patch_voxels);
        let mut locations = Vec::with_capacity(b);
        for _ in 0..b {
            let idx = rng.random_range(0..train.len());
            let patch = sampler.sample(idx, &train[idx], &mut rng)?;
            input.extend(patch.intensities.iter().map(|&v| T::from_f64_lossy(v as f64)));
            labels.extend_from_slice(patch.labels.as_deref().expect("labelled"));
            locations.push(patch.location);
        }
        let tensor = Tensor::new(vec![b, 1, d, h, w], input)?;
        let opt = Sgd::new(schedule.learning_rate_at(it), schedule.momentum, schedule.weight_decay);
        let loss = train_step(model, &opt, tensor, &labels, Some(&locations))?;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("training diverged at iteration {it} (loss {loss})")));
        }
        log.losses.push(loss);
        epoch_losses.push(loss);
        let done = it + 1;
        if done % schedule.epoch_length == 0 || done == schedule.iterations {
            let epoch = log.epochs.len() + 1;
            let last = epoch == num_epochs;
            let validate = !val.is_empty() && (last || (schedule.val_every > 0 && epoch % schedule.val_every == 0));
            let val_dice = if validate {
                Some(evaluate(model, val, schedule.patch_shape, schedule.val_overlap)?.mean)
            } else {
                None
            };
            let loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            log::info!("iteration {done}: loss {loss:.4}, val dice {val_dice:?}");
            log.epochs.push(EpochEntry {
                iteration: done,
                loss,
                val_dice,
            });
            epoch_losses.clear();
        }
    }
    Ok(log)
}
