use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DiceSummary;
use crate::error::{Error, Result};
use crate::location::{ptvc, Volume};
use crate::model::{LocationMode, Model, ModelConfig};
use crate::tensor::Real;
use crate::train::{evaluate_shifted, train, Schedule};

/// Axial shift magnitudes of the robustness sweep, as fractions.
pub const SHIFT_FRACTIONS: [f64; 7] = [0.0, 0.01, 0.05, 0.10, 0.25, 0.50, 1.00];

/// A run counts as converged when its mean Dice reaches this fraction of the
/// best mode trained on the same patch shape and seed.
pub const CONVERGENCE_RATIO: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftPoint {
    pub fraction: f64,
    pub summary: DiceSummary,
}

/// Evaluates `model` on `volumes` once per shift fraction. Only the axial
/// location signal moves; the voxels fed to the model are the same.
pub fn shift_sweep<T: Real>(
    model: &Model<T>,
    volumes: &[Volume],
    patch_shape: [usize; 3],
    overlap: f64,
    fractions: &[f64],
) -> Result<Vec<ShiftPoint>> {
    fractions
        .iter()
        .map(|&fraction| {
            Ok(ShiftPoint {
                fraction,
                summary: evaluate_shifted(model, volumes, patch_shape, overlap, fraction)?,
            })
        })
        .collect()
}

/// True when the curve never rises by more than `tolerance` from one point
/// to the next and ends strictly below where it started.
pub fn is_monotone_degradation(means: &[f64], tolerance: f64) -> bool {
    means.windows(2).all(|w| w[1] <= w[0] + tolerance) && matches!((means.first(), means.last()), (Some(a), Some(b)) if b < a)
}

/// One trained-and-evaluated setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub mode: LocationMode,
    pub patch_shape: [usize; 3],
    /// Patch-to-volume coverage in percent.
    pub ptvc: f64,
    pub shift_fraction: f64,
    pub seed: u64,
    /// `None` when the run itself failed.
    pub summary: Option<DiceSummary>,
    pub converged: bool,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn mean(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| s.mean)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub num_classes: usize,
    pub cells: Vec<SweepCell>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

impl SweepResult {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.summary.is_none())
    }

    /// Median mean-Dice over seeds for one mode and patch shape.
    pub fn median_dice(&self, mode: LocationMode, patch_shape: [usize; 3]) -> Option<f64> {
        let mut v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mode == mode && c.patch_shape == patch_shape)
            .filter_map(SweepCell::mean)
            .collect();
        median(&mut v)
    }

    /// `(mode - baseline) / baseline` on the median Dice of each.
    pub fn relative_gain(&self, mode: LocationMode, patch_shape: [usize; 3]) -> Option<f64> {
        let base = self.median_dice(LocationMode::None, patch_shape)?;
        let other = self.median_dice(mode, patch_shape)?;
        (base > 0.0).then(|| (other - base) / base)
    }

    /// Marks each cell converged iff it reached [`CONVERGENCE_RATIO`] of the
    /// best mode with the same patch shape, shift and seed.
    pub fn update_convergence(&mut self) {
        let best: Vec<f64> = self
            .cells
            .iter()
            .map(|c| {
                self.cells
                    .iter()
                    .filter(|o| o.patch_shape == c.patch_shape && o.seed == c.seed && o.shift_fraction == c.shift_fraction)
                    .filter_map(SweepCell::mean)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (c, b) in self.cells.iter_mut().zip(best) {
            c.converged = c.mean().is_some_and(|m| m >= CONVERGENCE_RATIO * b);
        }
    }

    /// One row per cell: `mode,patch_d,patch_h,patch_w,ptvc,shift,seed,
    /// converged,dice_1..dice_{K-1},mean`. Failed or unscored entries are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["mode", "patch_d", "patch_h", "patch_w", "ptvc", "shift", "seed", "converged"]
            .map(String::from)
            .to_vec();
        header.extend((1..self.num_classes).map(|k| format!("dice_{k}")));
        header.push("mean".into());
        w.write_record(&header)?;
        for c in &self.cells {
            let mut row = vec![
                c.mode.to_string(),
                c.patch_shape[0].to_string(),
                c.patch_shape[1].to_string(),
                c.patch_shape[2].to_string(),
                c.ptvc.to_string(),
                c.shift_fraction.to_string(),
                c.seed.to_string(),
                c.converged.to_string(),
            ];
            for k in 0..self.num_classes.saturating_sub(1) {
                let v = c.summary.as_ref().and_then(|s| s.per_class.get(k).copied().flatten());
                row.push(v.map(|v| v.to_string()).unwrap_or_default());
            }
            row.push(c.mean().map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Grid for the patch-size sweep: every mode x patch shape x seed is trained
/// from scratch and scored on the validation volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtvcSweepConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub modes: Vec<LocationMode>,
    pub patch_shapes: Vec<[usize; 3]>,
    pub seeds: Vec<u64>,
}

impl Default for PtvcSweepConfig {
    fn default() -> Self {
        PtvcSweepConfig {
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            modes: vec![LocationMode::None, LocationMode::LocBam],
            patch_shapes: vec![[8, 8, 8]],
            seeds: vec![0],
        }
    }
}

/// Runs one cell: model and sampling seeds are both derived from `seed`.
pub fn run_cell(
    config: &PtvcSweepConfig,
    mode: LocationMode,
    patch_shape: [usize; 3],
    seed: u64,
    train_set: &[Volume],
    val_set: &[Volume],
) -> Result<DiceSummary> {
    let model_config = ModelConfig {
        location_mode: mode,
        ..config.model.clone()
    };
    let schedule = Schedule {
        patch_shape,
        seed,
        val_every: 0,
        ..config.schedule.clone()
    };
    let mut model = Model::<f32>::build(&model_config, seed)?;
    train(&mut model, train_set, &[], &schedule)?;
    crate::train::evaluate(&model, val_set, patch_shape, schedule.val_overlap)
}

/// Trains and scores every cell of the grid. A failing cell is recorded
/// with its error and does not stop the sweep.
pub fn ptvc_sweep(config: &PtvcSweepConfig, train_set: &[Volume], val_set: &[Volume]) -> Result<SweepResult> {
    let volume_shape = val_set
        .first()
        .or(train_set.first())
        .map(|v| v.shape)
        .ok_or_else(|| Error::invalid("sweep needs volumes"))?;
    let mut grid = Vec::new();
    for &patch_shape in &config.patch_shapes {
        for &seed in &config.seeds {
            for &mode in &config.modes {
                grid.push((mode, patch_shape, seed));
            }
        }
    }
    let cells = grid
        .into_iter()
        .map(|(mode, patch_shape, seed)| {
            log::info!("sweep cell: mode {mode}, patch {patch_shape:?}, seed {seed}");
            let outcome = run_cell(config, mode, patch_shape, seed, train_set, val_set);
            let (summary, error) = match outcome {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepCell {
                mode,
                patch_shape,
                ptvc: ptvc(patch_shape, volume_shape),
                shift_fraction: 0.0,
                seed,
                summary,
                converged: false,
                error,
            }
        })
        .collect();
    let mut result = SweepResult {
        num_classes: config.model.num_classes,
        cells,
    };
    result.update_convergence();
    Ok(result)
}
