//! Volumes, patch sampling and the global location signals fed to
//! location-aware models.
//!
//! The axial position of a slice is expressed as a body-part score on a
//! 0–100 pelvis-to-head scale via a per-volume affine map. Scores outside
//! that range are kept as-is (linear extrapolation). Normalized coordinates
//! are the score divided by 100 on the axial axis and the global voxel index
//! mapped onto `[-1, 1]` in-plane.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis3, Real, Tensor};

/// Affine map from axial voxel index to body-part score: `a * z + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BprMap {
    pub a: f64,
    pub b: f64,
}

impl BprMap {
    pub fn new(a: f64, b: f64) -> Self {
        BprMap { a, b }
    }

    /// Map sending slice 0 to score 0 and slice `depth - 1` to score 100.
    pub fn spanning(depth: usize) -> Self {
        let a = if depth > 1 { 100.0 / (depth - 1) as f64 } else { 0.0 };
        BprMap { a, b: 0.0 }
    }

    pub fn score(&self, z: f64) -> f64 {
        bpr_score(z, self)
    }

    /// Inverse map, `None` for a degenerate (flat) map.
    pub fn slice_of(&self, score: f64) -> Option<f64> {
        (self.a != 0.0).then(|| (score - self.b) / self.a)
    }

    /// The same anatomy seen from a volume whose slice 0 was slice `offset`.
    pub fn shifted_origin(&self, offset: f64) -> Self {
        BprMap {
            a: self.a,
            b: self.b + self.a * offset,
        }
    }
}

/// Body-part score of axial index `z`. Not clamped to `[0, 100]`.
pub fn bpr_score(z: f64, map: &BprMap) -> f64 {
    map.a * z + map.b
}

/// Least-squares affine fit through `(z, score)` anchors.
pub fn fit_bpr_map(anchors: &[(f64, f64)]) -> Result<BprMap> {
    if anchors.len() < 2 {
        return Err(Error::invalid("fitting a score map needs at least two anchors"));
    }
    let n = anchors.len() as f64;
    let mz = anchors.iter().map(|p| p.0).sum::<f64>() / n;
    let ms = anchors.iter().map(|p| p.1).sum::<f64>() / n;
    let szz: f64 = anchors.iter().map(|p| (p.0 - mz) * (p.0 - mz)).sum();
    if szz == 0.0 {
        return Err(Error::invalid("score anchors must span at least two distinct slices"));
    }
    let szs: f64 = anchors.iter().map(|p| (p.0 - mz) * (p.1 - ms)).sum();
    let a = szs / szz;
    Ok(BprMap { a, b: ms - a * mz })
}

/// A dense scan with optional integer labels, stored `z`-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    /// Millimetres per voxel, `(z, y, x)`.
    pub spacing: [f64; 3],
    pub intensities: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub bpr: BprMap,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        intensities: Vec<f32>,
        labels: Option<Vec<u8>>,
        bpr: BprMap,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::shape(format!("volume shape {shape:?} is empty")));
        }
        if intensities.len() != n {
            return Err(Error::shape(format!(
                "volume {shape:?} needs {n} intensities, got {}",
                intensities.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(format!(
                    "labels hold {} voxels, volume has {n}",
                    l.len()
                )));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Volume {
            shape,
            spacing,
            intensities,
            labels,
            bpr,
        })
    }

    pub fn numel(&self) -> usize {
        self.intensities.len()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Copies the box `origin .. origin + shape` out of a `z`-major grid.
    pub fn crop_grid<V: Copy>(
        grid: &[V],
        grid_shape: [usize; 3],
        origin: [usize; 3],
        shape: [usize; 3],
    ) -> Vec<V> {
        let mut out = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let start = ((origin[0] + z) * grid_shape[1] + origin[1] + y) * grid_shape[2] + origin[2];
                out.extend_from_slice(&grid[start..start + shape[2]]);
            }
        }
        out
    }

    /// Extracts the patch at `location` (which must fit inside the volume).
    pub fn extract(&self, location: &PatchLocation) -> Patch {
        let intensities = Self::crop_grid(
            &self.intensities,
            self.shape,
            location.origin,
            location.patch_shape,
        );
        let labels = self
            .labels
            .as_ref()
            .map(|l| Self::crop_grid(l, self.shape, location.origin, location.patch_shape));
        Patch {
            intensities,
            labels,
            location: location.clone(),
        }
    }

    pub fn location(&self, origin: [usize; 3], patch_shape: [usize; 3]) -> Result<PatchLocation> {
        PatchLocation::new(origin, patch_shape, self.shape, self.bpr)
    }
}

/// Placement of a patch inside its source volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLocation {
    pub origin: [usize; 3],
    pub patch_shape: [usize; 3],
    pub volume_shape: [usize; 3],
    pub bpr: BprMap,
    /// Perturbation of the axial signal in normalized units (1.0 = 100%).
    /// Never moves the sampled voxels.
    pub shift_fraction: f64,
}

impl PatchLocation {
    pub fn new(
        origin: [usize; 3],
        patch_shape: [usize; 3],
        volume_shape: [usize; 3],
        bpr: BprMap,
    ) -> Result<Self> {
        for i in 0..3 {
            if patch_shape[i] == 0 || origin[i] + patch_shape[i] > volume_shape[i] {
                return Err(Error::shape(format!(
                    "patch {patch_shape:?} at {origin:?} does not fit volume {volume_shape:?}"
                )));
            }
        }
        Ok(PatchLocation {
            origin,
            patch_shape,
            volume_shape,
            bpr,
            shift_fraction: 0.0,
        })
    }

    pub fn with_shift(mut self, shift_fraction: f64) -> Self {
        self.shift_fraction = shift_fraction;
        self
    }

    /// One global coordinate per patch slice along `axis`.
    pub fn normalized_coords(&self, axis: Axis3) -> Vec<f64> {
        let i = axis.index();
        let start = self.origin[i];
        let range = start..start + self.patch_shape[i];
        match axis {
            Axis3::D => range
                .map(|z| self.bpr.score(z as f64) / 100.0 + self.shift_fraction)
                .collect(),
            Axis3::H | Axis3::W => {
                let extent = self.volume_shape[i];
                range
                    .map(|v| {
                        if extent > 1 {
                            2.0 * v as f64 / (extent - 1) as f64 - 1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    /// CoordConv channels `[3, D, H, W]`: axial, then the two in-plane axes.
    pub fn coord_channels<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.patch_shape;
        let coords: Vec<Vec<T>> = Axis3::ALL
            .iter()
            .map(|&a| {
                self.normalized_coords(a)
                    .into_iter()
                    .map(T::from_f64_lossy)
                    .collect()
            })
            .collect();
        let plane = d * h * w;
        let mut data = vec![T::zero(); 3 * plane];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    data[v] = coords[0][z];
                    data[plane + v] = coords[1][y];
                    data[2 * plane + v] = coords[2][x];
                }
            }
        }
        Tensor::new(vec![3, d, h, w], data).expect("coord channel shape")
    }
}

/// Patch voxels, labels and their global placement.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub intensities: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub location: PatchLocation,
}

fn check_fits(patch_shape: [usize; 3], volume_shape: [usize; 3]) -> Result<()> {
    if (0..3).any(|i| patch_shape[i] == 0 || patch_shape[i] > volume_shape[i]) {
        return Err(Error::shape(format!(
            "patch {patch_shape:?} larger than volume {volume_shape:?}"
        )));
    }
    Ok(())
}

/// Uniformly random valid patch.
pub fn sample_patch<R: Rng + ?Sized>(
    volume: &Volume,
    patch_shape: [usize; 3],
    rng: &mut R,
) -> Result<Patch> {
    check_fits(patch_shape, volume.shape)?;
    let mut origin = [0; 3];
    for i in 0..3 {
        origin[i] = rng.random_range(0..=volume.shape[i] - patch_shape[i]);
    }
    Ok(volume.extract(&volume.location(origin, patch_shape)?))
}

/// Patch sampler with optional foreground oversampling: with probability
/// `foreground_prob` the patch is forced to contain a randomly chosen
/// labelled voxel.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    patch_shape: [usize; 3],
    foreground_prob: f64,
    foreground: Vec<Vec<u32>>,
}

impl PatchSampler {
    pub const DEFAULT_FOREGROUND_PROB: f64 = 0.33;

    pub fn new(volumes: &[Volume], patch_shape: [usize; 3], foreground_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&foreground_prob) {
            return Err(Error::invalid("foreground probability must lie in [0, 1]"));
        }
        for v in volumes {
            check_fits(patch_shape, v.shape)?;
        }
        let foreground = volumes
            .iter()
            .map(|v| {
                v.labels
                    .as_ref()
                    .map(|l| {
                        l.iter()
                            .enumerate()
                            .filter(|(_, &c)| c > 0)
                            .map(|(i, _)| i as u32)
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        Ok(PatchSampler {
            patch_shape,
            foreground_prob,
            foreground,
        })
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patch_shape
    }

    pub fn sample<R: Rng + ?Sized>(&self, volume_idx: usize, volume: &Volume, rng: &mut R) -> Result<Patch> {
        let fg = &self.foreground[volume_idx];
        let force = self.foreground_prob > 0.0 && rng.random::<f64>() < self.foreground_prob;
        if !force || fg.is_empty() {
            return sample_patch(volume, self.patch_shape, rng);
        }
        let flat = fg[rng.random_range(0..fg.len())] as usize;
        let [_, h, w] = volume.shape;
        let voxel = [flat / (h * w), (flat / w) % h, flat % w];
        let mut origin = [0; 3];
        for i in 0..3 {
            let p = self.patch_shape[i];
            let lo = (voxel[i] + 1).saturating_sub(p);
            let hi = voxel[i].min(volume.shape[i] - p);
            origin[i] = rng.random_range(lo..=hi);
        }
        Ok(volume.extract(&volume.location(origin, self.patch_shape)?))
    }
}

/// Patch-to-volume coverage in percent.
pub fn ptvc(patch_shape: [usize; 3], volume_shape: [usize; 3]) -> f64 {
    let p: f64 = patch_shape.iter().map(|&v| v as f64).product();
    let v: f64 = volume_shape.iter().map(|&v| v as f64).product();
    100.0 * p / v
}
