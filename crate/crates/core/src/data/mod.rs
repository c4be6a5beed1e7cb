//! Deterministic synthetic volumes with controllable location dependence.
//!
//! Each volume is a noisy background with spherical blobs, one or more per
//! foreground class. In `axial_pairs` mode classes come in pairs
//! `(2j - 1, 2j)` that share intensity and radius distributions but live in
//! disjoint axial score bands, so only the global axial position tells the
//! two members of a pair apart.

mod format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::location::{fit_bpr_map, BprMap, Volume};

pub use format::{
    decode_volume, encode_volume, read_channels, read_manifest, read_volume, write_channels,
    write_manifest, write_volume, Manifest, ManifestEntry, Rv01Header, Split, RV01_MAGIC,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityMode {
    /// Every class has its own intensity; appearance alone identifies it.
    None,
    /// Paired classes look identical and differ only in axial band.
    AxialPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// `(D, H, W)` before any field-of-view crop.
    pub volume_shape: [usize; 3],
    /// Number of classes including background.
    pub num_classes: usize,
    pub num_volumes: usize,
    pub ambiguity_mode: AmbiguityMode,
    /// Blob radius range in voxels, `[min, max]`.
    pub blob_radius: [f64; 2],
    pub blobs_per_class: usize,
    pub noise_sigma: f64,
    /// Maximum fraction of the axial extent cropped from each end.
    pub fov_jitter: f64,
    /// Score bands `[lo, hi]` of the lower and upper member of each pair.
    pub pair_bands: [[f64; 2]; 2],
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            volume_shape: [48, 24, 24],
            num_classes: 3,
            num_volumes: 8,
            ambiguity_mode: AmbiguityMode::AxialPairs,
            blob_radius: [3.0, 4.5],
            blobs_per_class: 1,
            noise_sigma: 0.1,
            fov_jitter: 0.0,
            pair_bands: [[20.0, 40.0], [60.0, 80.0]],
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

/// Generating parameters of one class's blobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAppearance {
    pub intensity_mean: f64,
    pub noise_sigma: f64,
    pub radius: [f64; 2],
    /// Axial score band holding the blob centroids.
    pub band: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub class: u8,
    /// Centre in voxel coordinates of the (possibly cropped) volume.
    pub center: [f64; 3],
    pub radius: f64,
}

/// A generated volume with the blobs that produced its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedVolume {
    pub volume: Volume,
    pub blobs: Vec<Blob>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes must lie in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.ambiguity_mode == AmbiguityMode::AxialPairs && (self.num_classes - 1) % 2 != 0 {
            return Err(Error::config(
                "axial_pairs needs an even number of foreground classes",
            ));
        }
        let [rmin, rmax] = self.blob_radius;
        if !(rmin > 0.0 && rmax >= rmin) {
            return Err(Error::config(format!("invalid blob radius range {:?}", self.blob_radius)));
        }
        if self.noise_sigma < 0.0 || !(0.0..0.5).contains(&self.fov_jitter) {
            return Err(Error::config("noise_sigma must be >= 0 and fov_jitter in [0, 0.5)"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("spacing must be positive"));
        }
        for band in self.pair_bands {
            if !(band[0] < band[1]) {
                return Err(Error::config(format!("empty score band {band:?}")));
            }
        }
        let bpr = BprMap::spanning(self.volume_shape[0]);
        for i in 1..3 {
            if (self.volume_shape[i] as f64) < 2.0 * rmax + 1.0 {
                return Err(Error::config(format!(
                    "blobs of radius {rmax} do not fit extent {} in-plane",
                    self.volume_shape[i]
                )));
            }
        }
        for k in 1..self.num_classes {
            self.centroid_slices(k as u8, rmax, &bpr).ok_or_else(|| {
                Error::config(format!(
                    "class {k}: no axial position inside its band keeps a radius-{rmax} blob in the volume"
                ))
            })?;
        }
        Ok(())
    }

    /// Appearance of class `k >= 1`. Paired classes differ only in `band`.
    pub fn appearance(&self, class: u8) -> ClassAppearance {
        let k = class as usize;
        let (mean, band) = match self.ambiguity_mode {
            AmbiguityMode::None => (0.75 * k as f64, [0.0, 100.0]),
            AmbiguityMode::AxialPairs => {
                let pair = (k - 1) / 2;
                let member = (k - 1) % 2;
                (1.0 + 0.75 * pair as f64, self.pair_bands[member])
            }
        };
        ClassAppearance {
            intensity_mean: mean,
            noise_sigma: self.noise_sigma,
            radius: self.blob_radius,
            band,
        }
    }

    /// Admissible centroid slice range for a blob of `radius`.
    fn centroid_slices(&self, class: u8, radius: f64, bpr: &BprMap) -> Option<(f64, f64)> {
        let band = self.appearance(class).band;
        let depth = self.volume_shape[0] as f64;
        let lo = bpr.slice_of(band[0])?.max(radius);
        let hi = bpr.slice_of(band[1])?.min(depth - 1.0 - radius);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Builds the dataset described by `config`. Identical configs give
/// bitwise-identical datasets.
pub fn generate(config: &SyntheticConfig) -> Result<Vec<GeneratedVolume>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_volumes)
        .map(|_| generate_one(config, &mut rng))
        .collect()
}

fn generate_one(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<GeneratedVolume> {
    let [d, h, w] = config.volume_shape;
    let bpr = BprMap::spanning(d);
    let mut blobs = Vec::new();
    for class in 1..config.num_classes as u8 {
        for _ in 0..config.blobs_per_class {
            let radius = rng.random_range(config.blob_radius[0]..=config.blob_radius[1]);
            let (zlo, zhi) = config
                .centroid_slices(class, radius, &bpr)
                .expect("validated band");
            let z = rng.random_range(zlo..=zhi);
            let y = rng.random_range(radius..=(h as f64 - 1.0 - radius));
            let x = rng.random_range(radius..=(w as f64 - 1.0 - radius));
            blobs.push(Blob {
                class,
                center: [z, y, x],
                radius,
            });
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut intensities = vec![0f32; d * h * w];
    let mut labels = vec![0u8; d * h * w];
    for blob in &blobs {
        let mean = config.appearance(blob.class).intensity_mean as f32;
        let r2 = blob.radius * blob.radius;
        let [cz, cy, cx] = blob.center;
        let z0 = (cz - blob.radius).floor().max(0.0) as usize;
        let z1 = ((cz + blob.radius).ceil() as usize).min(d - 1);
        let y0 = (cy - blob.radius).floor().max(0.0) as usize;
        let y1 = ((cy + blob.radius).ceil() as usize).min(h - 1);
        let x0 = (cx - blob.radius).floor().max(0.0) as usize;
        let x1 = ((cx + blob.radius).ceil() as usize).min(w - 1);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dd = (z as f64 - cz).powi(2) + (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if dd <= r2 {
                        let i = (z * h + y) * w + x;
                        intensities[i] = mean;
                        labels[i] = blob.class;
                    }
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        for v in &mut intensities {
            *v += noise.sample(rng) as f32;
        }
    }

    let volume = Volume::new(config.volume_shape, config.spacing, intensities, Some(labels), bpr)?;
    if config.fov_jitter > 0.0 {
        return crop_axial(volume, blobs, config.fov_jitter, rng);
    }
    Ok(GeneratedVolume { volume, blobs })
}

/// Random axial field-of-view crop that keeps every blob whole; the score
/// map is refit so every retained slice keeps its score.
fn crop_axial(
    volume: Volume,
    blobs: Vec<Blob>,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedVolume> {
    let [d, h, w] = volume.shape;
    let max_cut = (jitter * d as f64).floor() as usize;
    let lowest = blobs
        .iter()
        .map(|b| (b.center[0] - b.radius).floor().max(0.0) as usize)
        .min()
        .unwrap_or(d / 2);
    let highest = blobs
        .iter()
        .map(|b| (b.center[0] + b.radius).ceil() as usize)
        .max()
        .unwrap_or(d / 2)
        .min(d - 1);
    let lo = rng.random_range(0..=max_cut.min(lowest));
    let cut_hi = rng.random_range(0..=max_cut.min(d - 1 - highest));
    let hi = d - cut_hi;
    let new_shape = [hi - lo, h, w];
    let intensities = Volume::crop_grid(&volume.intensities, volume.shape, [lo, 0, 0], new_shape);
    let labels = volume
        .labels
        .as_ref()
        .map(|l| Volume::crop_grid(l, volume.shape, [lo, 0, 0], new_shape));
    let top = (new_shape[0] - 1) as f64;
    let bpr = fit_bpr_map(&[
        (0.0, volume.bpr.score(lo as f64)),
        (top.max(1.0), volume.bpr.score(lo as f64 + top.max(1.0))),
    ])?;
    let blobs = blobs
        .into_iter()
        .map(|b| Blob {
            center: [b.center[0] - lo as f64, b.center[1], b.center[2]],
            ..b
        })
        .collect();
    Ok(GeneratedVolume {
        volume: Volume::new(new_shape, volume.spacing, intensities, labels, bpr)?,
        blobs,
    })
}
