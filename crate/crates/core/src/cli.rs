//! The `locseg` command line. Every subcommand reads a TOML config (unknown
//! keys are rejected), writes its outputs into `--out` and stores the resolved
//! config there as `config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate, read_manifest, read_volume, write_manifest, write_volume, Manifest, ManifestEntry, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{
    ptvc_sweep, shift_sweep, sliding_window_predict, DiceReport, DiceSummary, PtvcSweepConfig, SweepCell, SweepResult,
    DEFAULT_OVERLAP, SHIFT_FRACTIONS,
};
use crate::location::{ptvc, Volume};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::postprocess::{
    atlas_mask, build_atlas, largest_component_filter, median_shape, optimize_dilation, Connectivity, ValidationCase,
};
use crate::selfcheck::{run_gradcheck_suite, EPS_F64, TOLERANCE_F64};
use crate::train::{train, Schedule};

#[derive(Debug, Parser)]
#[command(name = "locseg", version, about = "Location-aware patch-based 3D segmentation")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(RunArgs),
    /// Train a model; writes a checkpoint and the training curve.
    Train(RunArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(RunArgs),
    /// Apply largest-component or atlas postprocessing to predictions.
    Postprocess(RunArgs),
    /// Run the patch-size or the axial-shift sweep.
    Sweep(RunArgs),
    /// Check autodiff gradients of every op against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config of the subcommand.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed where the run is random.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per op.
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    /// Also write the table as `gradcheck.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Whether a run that completed also passed: failed sweep cells or gradient
/// checks complete the run but report `Failed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    Failed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    crate::par::with_threads(cli.threads, move || match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| Outcome::Passed),
        Command::Train(a) => cmd_train(&a).map(|_| Outcome::Passed),
        Command::Eval(a) => cmd_eval(&a).map(|_| Outcome::Passed),
        Command::Postprocess(a) => cmd_postprocess(&a).map(|_| Outcome::Passed),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    })
}

fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn save_resolved<C: Serialize>(config: &C, out: &Path) -> Result<()> {
    let text = toml::to_string(config).map_err(|e| Error::format(e.to_string()))?;
    fs::write(out.join("config.toml"), text)?;
    Ok(())
}

/// Relative paths in a config resolve against the config file's directory.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    } else {
        p.to_path_buf()
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

struct Dataset {
    manifest: Manifest,
}

impl Dataset {
    fn open(path: &Path) -> Result<Self> {
        Ok(Dataset {
            manifest: read_manifest(path)?,
        })
    }

    fn split(&self, split: Split) -> Result<Vec<(String, Volume)>> {
        self.manifest
            .paths(split)
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, read_volume(p)?))
            })
            .collect()
    }

    fn volumes(&self, split: Split) -> Result<Vec<Volume>> {
        Ok(self.split(split)?.into_iter().map(|(_, v)| v).collect())
    }
}

fn labels_of(volume: &Volume) -> Result<&[u8]> {
    volume
        .labels
        .as_deref()
        .ok_or_else(|| Error::invalid("volume has no reference labels"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Volumes assigned to the validation split; the test split follows and
    /// the rest is training data.
    #[serde(default)]
    pub val_volumes: usize,
    #[serde(default)]
    pub test_volumes: usize,
}

/// Writes `vol_NNN.rv01` files and `manifest.toml` into `args.out`.
pub fn cmd_gen_data(args: &RunArgs) -> Result<Manifest> {
    let mut config: GenDataConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.synthetic.seed = seed;
    }
    let n = config.synthetic.num_volumes;
    if config.val_volumes + config.test_volumes > n {
        return Err(Error::config(format!(
            "{} validation and {} test volumes exceed the {n} generated",
            config.val_volumes, config.test_volumes
        )));
    }
    prepare_out(&args.out)?;
    let generated = generate(&config.synthetic)?;
    let mut manifest = Manifest {
        common_fov: config.synthetic.fov_jitter == 0.0,
        volumes: Vec::with_capacity(n),
    };
    let train_count = n - config.val_volumes - config.test_volumes;
    for (i, g) in generated.iter().enumerate() {
        let name = format!("vol_{i:03}.rv01");
        write_volume(&g.volume, args.out.join(&name))?;
        let split = if i < train_count {
            Split::Train
        } else if i < train_count + config.val_volumes {
            Split::Val
        } else {
            Split::Test
        };
        manifest.volumes.push(ManifestEntry {
            path: name.into(),
            split,
        });
        log::info!("wrote volume {}/{n}", i + 1);
    }
    write_manifest(&manifest, args.out.join("manifest.toml"))?;
    save_resolved(&config, &args.out)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    /// `schedule.seed` also seeds parameter initialization.
    #[serde(default)]
    pub schedule: Schedule,
}

/// Trains on the train split (validating on the val split when scheduled)
/// and writes `model.ckpt` and `training.csv`.
pub fn cmd_train(args: &RunArgs) -> Result<Model<f32>> {
    let mut config: TrainConfig = load_config(&args.config)?;
    config.manifest = resolve(&args.config, &config.manifest);
    if let Some(seed) = args.seed {
        config.schedule.seed = seed;
    }
    config.model.validate()?;
    config.schedule.validate()?;
    let data = Dataset::open(&config.manifest)?;
    let train_set = data.volumes(Split::Train)?;
    let val_set = if config.schedule.val_every > 0 {
        data.volumes(Split::Val)?
    } else {
        Vec::new()
    };
    prepare_out(&args.out)?;
    let mut model = Model::<f32>::build(&config.model, config.schedule.seed)?;
    let log = train(&mut model, &train_set, &val_set, &config.schedule)?;
    save_checkpoint(&model, args.out.join("model.ckpt"))?;
    log.save_csv(args.out.join("training.csv"))?;
    save_resolved(&config, &args.out)?;
    Ok(model)
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}

fn default_val() -> Split {
    Split::Val
}

fn default_test() -> Split {
    Split::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    /// Sliding-window patch; should match training.
    pub patch_shape: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_val")]
    pub split: Split,
    /// Axial shift applied to the location signal.
    #[serde(default)]
    pub shift: f64,
}

/// Writes one CSV row per volume (`volume,dice_1..,mean`) and a final
/// `mean` row averaging over volumes.
pub fn write_dice_csv(path: &Path, names: &[String], summary: &DiceSummary, num_classes: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["volume".to_string()];
    header.extend((1..num_classes).map(|k| format!("dice_{k}")));
    header.push("mean".into());
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for (name, r) in names.iter().zip(&summary.volumes) {
        let mut row = vec![name.clone()];
        row.extend(r.per_class.iter().map(|&v| cell(v)));
        row.push(r.mean.to_string());
        w.write_record(&row)?;
    }
    let mut row = vec!["mean".to_string()];
    row.extend(summary.per_class.iter().map(|&v| cell(v)));
    row.push(summary.mean.to_string());
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

fn predict_split(
    model: &Model<f32>,
    volumes: &[(String, Volume)],
    patch_shape: [usize; 3],
    overlap: f64,
    shift: f64,
) -> Result<Vec<Vec<u8>>> {
    volumes
        .iter()
        .map(|(name, v)| {
            log::info!("predicting {name}");
            sliding_window_predict(model, v, patch_shape, overlap, shift)
        })
        .collect()
}

fn score(predictions: &[Vec<u8>], volumes: &[(String, Volume)], num_classes: usize) -> Result<DiceSummary> {
    let reports = predictions
        .iter()
        .zip(volumes)
        .map(|(p, (_, v))| DiceReport::compute(p, labels_of(v)?, num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceSummary::new(reports))
}

fn write_predictions(out: &Path, prefix: &str, predictions: &[Vec<u8>], volumes: &[(String, Volume)]) -> Result<()> {
    for (p, (name, v)) in predictions.iter().zip(volumes) {
        let labelled = Volume {
            labels: Some(p.clone()),
            ..v.clone()
        };
        write_volume(&labelled, out.join(format!("{prefix}_{name}.rv01")))?;
    }
    Ok(())
}

/// Predicts every volume of the split, writes `pred_<name>.rv01` labelmaps
/// and `dice.csv`.
pub fn cmd_eval(args: &RunArgs) -> Result<DiceSummary> {
    let mut config: EvalConfig = load_config(&args.config)?;
    config.manifest = resolve(&args.config, &config.manifest);
    config.checkpoint = resolve(&args.config, &config.checkpoint);
    let model: Model<f32> = load_checkpoint(&config.checkpoint)?;
    let volumes = Dataset::open(&config.manifest)?.split(config.split)?;
    prepare_out(&args.out)?;
    let predictions = predict_split(&model, &volumes, config.patch_shape, config.overlap, config.shift)?;
    let k = model.config().num_classes;
    let summary = score(&predictions, &volumes, k)?;
    write_predictions(&args.out, "pred", &predictions, &volumes)?;
    let names: Vec<String> = volumes.iter().map(|(n, _)| n.clone()).collect();
    write_dice_csv(&args.out.join("dice.csv"), &names, &summary, k)?;
    save_resolved(&config, &args.out)?;
    log::info!("mean Dice {:.4}", summary.mean);
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostprocessMode {
    /// Keep the largest connected component of every class.
    Lcf,
    /// Erase predictions outside the dilated atlas region of their class.
    Atlas,
}

fn default_radii() -> Vec<usize> {
    (0..=5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessConfig {
    pub mode: PostprocessMode,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub patch_shape: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default)]
    pub connectivity: Connectivity,
    /// Candidate atlas dilation radii, chosen on the validation split.
    #[serde(default = "default_radii")]
    pub dilation_radii: Vec<usize>,
    /// Split that is postprocessed and scored.
    #[serde(default = "default_test")]
    pub split: Split,
}

/// Dice before and after postprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessOutcome {
    pub raw: DiceSummary,
    pub filtered: DiceSummary,
    /// Atlas mode only.
    pub dilation_radius: Option<usize>,
}

/// Writes `post_<name>.rv01` labelmaps, `dice_raw.csv` and
/// `dice_filtered.csv`; atlas mode also writes `atlas.rv01`.
pub fn cmd_postprocess(args: &RunArgs) -> Result<PostprocessOutcome> {
    let mut config: PostprocessConfig = load_config(&args.config)?;
    config.manifest = resolve(&args.config, &config.manifest);
    config.checkpoint = resolve(&args.config, &config.checkpoint);
    let model: Model<f32> = load_checkpoint(&config.checkpoint)?;
    let k = model.config().num_classes;
    let data = Dataset::open(&config.manifest)?;
    if config.mode == PostprocessMode::Atlas && !data.manifest.common_fov {
        return Err(Error::config(
            "atlas masking needs a dataset with a common field of view (manifest common_fov = true)",
        ));
    }
    let volumes = data.split(config.split)?;
    prepare_out(&args.out)?;
    let predictions = predict_split(&model, &volumes, config.patch_shape, config.overlap, 0.0)?;
    let raw = score(&predictions, &volumes, k)?;
    let classes: Vec<u8> = (1..k as u8).collect();

    let (filtered, radius) = match config.mode {
        PostprocessMode::Lcf => {
            let out = predictions
                .iter()
                .zip(&volumes)
                .map(|(p, (_, v))| largest_component_filter(p, v.shape, &classes, config.connectivity))
                .collect::<Result<Vec<_>>>()?;
            (out, None)
        }
        PostprocessMode::Atlas => {
            let train_set = data.volumes(Split::Train)?;
            let shapes: Vec<[usize; 3]> = train_set.iter().map(|v| v.shape).collect();
            let reference = median_shape(&shapes).ok_or_else(|| Error::invalid("atlas needs training volumes"))?;
            let labels = train_set
                .iter()
                .map(|v| Ok((labels_of(v)?, v.shape)))
                .collect::<Result<Vec<_>>>()?;
            let mut atlas = build_atlas(&labels, k, reference)?;
            let val = data.split(Split::Val)?;
            let val_pred = predict_split(&model, &val, config.patch_shape, config.overlap, 0.0)?;
            let cases = val_pred
                .iter()
                .zip(&val)
                .map(|(p, (_, v))| {
                    Ok(ValidationCase {
                        prediction: p,
                        reference: labels_of(v)?,
                        shape: v.shape,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            atlas.dilation_radius = optimize_dilation(&atlas, &cases, &config.dilation_radii)?;
            log::info!("atlas dilation radius {}", atlas.dilation_radius);
            atlas.save(args.out.join("atlas.rv01"))?;
            let out = predictions
                .iter()
                .zip(&volumes)
                .map(|(p, (_, v))| atlas_mask(p, v.shape, &atlas))
                .collect::<Result<Vec<_>>>()?;
            (out, Some(atlas.dilation_radius))
        }
    };
    let after = score(&filtered, &volumes, k)?;
    write_predictions(&args.out, "post", &filtered, &volumes)?;
    let names: Vec<String> = volumes.iter().map(|(n, _)| n.clone()).collect();
    write_dice_csv(&args.out.join("dice_raw.csv"), &names, &raw, k)?;
    write_dice_csv(&args.out.join("dice_filtered.csv"), &names, &after, k)?;
    save_resolved(&config, &args.out)?;
    log::info!("mean Dice {:.4} raw, {:.4} postprocessed", raw.mean, after.mean);
    Ok(PostprocessOutcome {
        raw,
        filtered: after,
        dilation_radius: radius,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Ptvc,
    Shift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftModel {
    pub checkpoint: PathBuf,
    /// Reported in the seed column.
    #[serde(default)]
    pub seed: u64,
}

fn default_fractions() -> Vec<f64> {
    SHIFT_FRACTIONS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSweepConfig {
    #[serde(default)]
    pub models: Vec<ShiftModel>,
    #[serde(default)]
    pub patch_shape: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_val")]
    pub split: Split,
}

impl Default for ShiftSweepConfig {
    fn default() -> Self {
        ShiftSweepConfig {
            models: Vec::new(),
            patch_shape: [0; 3],
            overlap: DEFAULT_OVERLAP,
            fractions: default_fractions(),
            split: Split::Val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub manifest: PathBuf,
    /// Used when `axis = "ptvc"`; trains on the train split, scores on val.
    #[serde(default)]
    pub ptvc: PtvcSweepConfig,
    /// Used when `axis = "shift"`.
    #[serde(default)]
    pub shift: ShiftSweepConfig,
}

/// Shift sweep of already trained checkpoints. A checkpoint that fails to
/// load or evaluate is recorded as failed cells.
pub fn run_shift_sweep(config: &ShiftSweepConfig, volumes: &[Volume]) -> Result<SweepResult> {
    let volume_shape = volumes.first().map(|v| v.shape).ok_or_else(|| Error::invalid("sweep needs volumes"))?;
    let mut result = SweepResult::default();
    for m in &config.models {
        log::info!("shift sweep of {}", m.checkpoint.display());
        let model: Result<Model<f32>> = load_checkpoint(&m.checkpoint);
        let (mode, points) = match model {
            Ok(model) => {
                result.num_classes = result.num_classes.max(model.config().num_classes);
                let points = shift_sweep(&model, volumes, config.patch_shape, config.overlap, &config.fractions);
                (model.config().location_mode, points)
            }
            Err(e) => (Default::default(), Err(e)),
        };
        let cell = |fraction: f64| SweepCell {
            mode,
            patch_shape: config.patch_shape,
            ptvc: ptvc(config.patch_shape, volume_shape),
            shift_fraction: fraction,
            seed: m.seed,
            summary: None,
            converged: false,
            error: None,
        };
        match points {
            Ok(points) => result.cells.extend(points.into_iter().map(|p| SweepCell {
                summary: Some(p.summary),
                ..cell(p.fraction)
            })),
            Err(e) => result.cells.extend(config.fractions.iter().map(|&f| SweepCell {
                error: Some(e.to_string()),
                ..cell(f)
            })),
        }
    }
    result.update_convergence();
    Ok(result)
}

/// Writes `sweep.csv`. Failed cells are kept in the table and make the
/// outcome `Failed`.
pub fn cmd_sweep(args: &RunArgs) -> Result<Outcome> {
    let mut config: SweepConfig = load_config(&args.config)?;
    config.manifest = resolve(&args.config, &config.manifest);
    for m in &mut config.shift.models {
        m.checkpoint = resolve(&args.config, &m.checkpoint);
    }
    if let Some(seed) = args.seed {
        config.ptvc.seeds = vec![seed];
    }
    let data = Dataset::open(&config.manifest)?;
    prepare_out(&args.out)?;
    let result = match config.axis {
        SweepAxis::Ptvc => ptvc_sweep(&config.ptvc, &data.volumes(Split::Train)?, &data.volumes(Split::Val)?)?,
        SweepAxis::Shift => {
            if config.shift.models.is_empty() {
                return Err(Error::config("shift sweep lists no models"));
            }
            run_shift_sweep(&config.shift, &data.volumes(config.shift.split)?)?
        }
    };
    result.save_csv(args.out.join("sweep.csv"))?;
    save_resolved(&config, &args.out)?;
    for c in &result.cells {
        match (&c.summary, &c.error) {
            (Some(s), _) => log::info!(
                "{} patch {:?} shift {} seed {}: mean Dice {:.4}",
                c.mode,
                c.patch_shape,
                c.shift_fraction,
                c.seed,
                s.mean
            ),
            (None, e) => log::error!(
                "{} patch {:?} seed {} failed: {}",
                c.mode,
                c.patch_shape,
                c.seed,
                e.as_deref().unwrap_or("unknown error")
            ),
        }
    }
    Ok(if result.any_failed() { Outcome::Failed } else { Outcome::Passed })
}

/// Prints one line per op and writes `gradcheck.csv` when `--out` is given.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    let checks = run_gradcheck_suite(args.cases, args.seed, EPS_F64)?;
    println!("op,cases,max_rel_error,passed");
    for c in &checks {
        println!("{},{},{:e},{}", c.op, c.cases, c.max_rel_error, c.passed);
    }
    if let Some(out) = &args.out {
        prepare_out(out)?;
        let mut w = csv::Writer::from_path(out.join("gradcheck.csv"))?;
        for c in &checks {
            w.serialize(c)?;
        }
        w.flush()?;
    }
    let all = checks.iter().all(|c| c.passed);
    log::info!(
        "{} at tolerance {TOLERANCE_F64:e}, step {EPS_F64:e}",
        if all { "all ops passed" } else { "some ops failed" }
    );
    Ok(if all { Outcome::Passed } else { Outcome::Failed })
}
