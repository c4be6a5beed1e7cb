//! Dice metrics, sliding-window inference and the evaluation sweeps.

mod sliding;
mod sweep;

pub use sliding::{sliding_window_logits, sliding_window_predict, window_starts, PatchPredictor, DEFAULT_OVERLAP};
pub use sweep::{
    is_monotone_degradation, ptvc_sweep, run_cell, shift_sweep, PtvcSweepConfig, ShiftPoint, SweepCell, SweepResult,
    CONVERGENCE_RATIO, SHIFT_FRACTIONS,
};

use serde::Serialize;

use crate::error::{Error, Result};

fn counts(prediction: &[u8], reference: &[u8], class: u8) -> Result<(usize, usize, usize)> {
    if prediction.len() != reference.len() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, reference {}",
            prediction.len(),
            reference.len()
        )));
    }
    let (mut p, mut r, mut both) = (0, 0, 0);
    for (&a, &b) in prediction.iter().zip(reference) {
        let (x, y) = (a == class, b == class);
        p += x as usize;
        r += y as usize;
        both += (x && y) as usize;
    }
    Ok((p, r, both))
}

/// `2|P ∩ R| / (|P| + |R|)` for one class; 1.0 when both sets are empty.
pub fn dice(prediction: &[u8], reference: &[u8], class: u8) -> Result<f64> {
    let (p, r, both) = counts(prediction, reference, class)?;
    Ok(if p + r == 0 { 1.0 } else { 2.0 * both as f64 / (p + r) as f64 })
}

/// Dice of one volume. `per_class[k - 1]` is `None` when class `k` is absent
/// from both prediction and reference; such classes do not enter the mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl DiceReport {
    /// Scores foreground classes `1..num_classes`.
    pub fn compute(prediction: &[u8], reference: &[u8], num_classes: usize) -> Result<Self> {
        let mut per_class = Vec::with_capacity(num_classes.saturating_sub(1));
        for k in 1..num_classes {
            let (p, r, both) = counts(prediction, reference, k as u8)?;
            per_class.push((p + r > 0).then(|| 2.0 * both as f64 / (p + r) as f64));
        }
        let mean = mean_of(per_class.iter().flatten().copied()).unwrap_or(1.0);
        Ok(DiceReport { per_class, mean })
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-volume reports and their averages over volumes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceSummary {
    pub volumes: Vec<DiceReport>,
    /// Mean over the volumes where the class was scored.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-volume means.
    pub mean: f64,
}

impl DiceSummary {
    pub fn new(volumes: Vec<DiceReport>) -> Self {
        let k = volumes.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
        let per_class = (0..k)
            .map(|c| mean_of(volumes.iter().filter_map(|r| r.per_class.get(c).copied().flatten())))
            .collect();
        let mean = mean_of(volumes.iter().map(|r| r.mean)).unwrap_or(f64::NAN);
        DiceSummary {
            volumes,
            per_class,
            mean,
        }
    }
}
