//! Classical postprocessing: largest-component filtering and atlas masking.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_channels, write_channels};
use crate::error::{Error, Result};
use crate::eval::DiceReport;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Faces, edges and corners.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Component labelling: `labels[v]` is 0 for background, otherwise the
/// 1-based component id; ids follow raster order of each component's first
/// voxel. `sizes[i]` is the voxel count of component `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn check_len(len: usize, shape: [usize; 3]) -> Result<()> {
    let n: usize = shape.iter().product();
    if len != n {
        return Err(Error::shape(format!("grid of {len} voxels does not match shape {shape:?}")));
    }
    Ok(())
}

/// Flood-fill labelling of the `true` voxels.
pub fn connected_components(mask: &[bool], shape: [usize; 3], connectivity: Connectivity) -> Result<Components> {
    check_len(mask.len(), shape)?;
    let [d, h, w] = shape;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (v / (h * w), (v / w) % h, v % w);
            for o in &offsets {
                let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let u = (nz as usize * h + ny as usize) * w + nx as usize;
                if mask[u] && labels[u] == 0 {
                    labels[u] = id;
                    queue.push_back(u);
                }
            }
        }
        sizes.push(size);
    }
    Ok(Components { labels, sizes })
}

/// Keeps only the largest component of each listed class (ties go to the
/// lower component id); everything else of that class becomes background.
pub fn largest_component_filter(
    labels: &[u8],
    shape: [usize; 3],
    classes: &[u8],
    connectivity: Connectivity,
) -> Result<Vec<u8>> {
    let mut out = labels.to_vec();
    for &class in classes {
        if class == 0 {
            continue;
        }
        let mask: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let comps = connected_components(&mask, shape, connectivity)?;
        if comps.count() <= 1 {
            continue;
        }
        let mut keep = 0;
        for (i, &s) in comps.sizes.iter().enumerate() {
            if s > comps.sizes[keep] {
                keep = i;
            }
        }
        let keep = keep as u32 + 1;
        for (o, &c) in out.iter_mut().zip(&comps.labels) {
            if c != 0 && c != keep {
                *o = 0;
            }
        }
    }
    Ok(out)
}

/// Index of the nearest source voxel along one axis (centre-aligned).
fn nearest(i: usize, from: usize, to: usize) -> usize {
    (((i as f64 + 0.5) * to as f64 / from as f64).floor() as usize).min(to - 1)
}

/// Nearest-neighbour resampling of a grid from `src_shape` to `dst_shape`.
pub fn resample_nearest<V: Copy>(grid: &[V], src_shape: [usize; 3], dst_shape: [usize; 3]) -> Result<Vec<V>> {
    check_len(grid.len(), src_shape)?;
    if dst_shape.contains(&0) {
        return Err(Error::shape("resampling target has an empty extent"));
    }
    let [sd, sh, sw] = src_shape;
    let [dd, dh, dw] = dst_shape;
    let ys: Vec<usize> = (0..dh).map(|y| nearest(y, dh, sh)).collect();
    let xs: Vec<usize> = (0..dw).map(|x| nearest(x, dw, sw)).collect();
    let mut out = Vec::with_capacity(dd * dh * dw);
    for z in 0..dd {
        let sz = nearest(z, dd, sd);
        for &sy in &ys {
            for &sx in &xs {
                out.push(grid[(sz * sh + sy) * sw + sx]);
            }
        }
    }
    Ok(out)
}

/// Componentwise median of the shapes (lower median for even counts).
pub fn median_shape(shapes: &[[usize; 3]]) -> Option<[usize; 3]> {
    if shapes.is_empty() {
        return None;
    }
    let mut out = [0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut v: Vec<usize> = shapes.iter().map(|s| s[i]).collect();
        v.sort_unstable();
        *o = v[(v.len() - 1) / 2];
    }
    Some(out)
}

/// Binary dilation with a cubic structuring element of half-width `radius`,
/// done as three separable 1D passes.
pub fn dilate(mask: &[bool], shape: [usize; 3], radius: usize) -> Result<Vec<bool>> {
    check_len(mask.len(), shape)?;
    let mut cur = mask.to_vec();
    if radius == 0 {
        return Ok(cur);
    }
    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let extent = shape[axis];
        let stride = strides[axis];
        let mut next = vec![false; cur.len()];
        for (v, n) in next.iter_mut().enumerate() {
            let pos = (v / stride) % extent;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(extent - 1);
            let base = v - pos * stride;
            *n = (lo..=hi).any(|p| cur[base + p * stride]);
        }
        cur = next;
    }
    debug_assert_eq!(cur.len(), d * h * w);
    Ok(cur)
}

/// Per-class occurrence frequency on a reference grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// `probs[k]` is the fraction of training volumes labelled `k` at each voxel.
    pub probs: Vec<Vec<f32>>,
    pub dilation_radius: usize,
    /// A voxel is plausible for a class when its probability exceeds this.
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtlasSidecar {
    dilation_radius: usize,
    threshold: f64,
}

/// Averages the one-hot encodings of `labels` after resampling each to
/// `reference_shape`.
pub fn build_atlas(labels: &[(&[u8], [usize; 3])], num_classes: usize, reference_shape: [usize; 3]) -> Result<Atlas> {
    if labels.is_empty() {
        return Err(Error::invalid("an atlas needs at least one label volume"));
    }
    let n: usize = reference_shape.iter().product();
    let mut counts = vec![vec![0u32; n]; num_classes];
    for &(grid, shape) in labels {
        let r = resample_nearest(grid, shape, reference_shape)?;
        for (v, &c) in r.iter().enumerate() {
            let c = c as usize;
            if c >= num_classes {
                return Err(Error::invalid(format!("label {c} outside {num_classes} classes")));
            }
            counts[c][v] += 1;
        }
    }
    let total = labels.len() as f32;
    Ok(Atlas {
        shape: reference_shape,
        num_classes,
        probs: counts
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32 / total).collect())
            .collect(),
        dilation_radius: 0,
        threshold: 0.0,
    })
}

impl Atlas {
    /// Plausible region of `class` at the atlas shape, after dilation by `radius`.
    pub fn class_mask(&self, class: u8, radius: usize) -> Result<Vec<bool>> {
        let probs = self
            .probs
            .get(class as usize)
            .ok_or_else(|| Error::invalid(format!("class {class} not in atlas")))?;
        let bin: Vec<bool> = probs.iter().map(|&p| p as f64 > self.threshold).collect();
        dilate(&bin, self.shape, radius)
    }

    /// Writes the probability maps as a multi-channel volume plus a
    /// `<path>.toml` sidecar with radius and threshold.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_channels(path, self.shape, [1.0; 3], &self.probs)?;
        let sidecar = AtlasSidecar {
            dilation_radius: self.dilation_radius,
            threshold: self.threshold,
        };
        let text = toml::to_string(&sidecar).map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, probs) = read_channels(path)?;
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: AtlasSidecar = toml::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        Ok(Atlas {
            shape: header.shape,
            num_classes: probs.len(),
            probs,
            dilation_radius: sidecar.dilation_radius,
            threshold: sidecar.threshold,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

/// Erases predicted voxels of each class that fall outside that class's
/// dilated atlas region (resampled to the prediction's shape).
pub fn atlas_mask(prediction: &[u8], shape: [usize; 3], atlas: &Atlas) -> Result<Vec<u8>> {
    atlas_mask_with_radius(prediction, shape, atlas, atlas.dilation_radius)
}

fn atlas_mask_with_radius(prediction: &[u8], shape: [usize; 3], atlas: &Atlas, radius: usize) -> Result<Vec<u8>> {
    check_len(prediction.len(), shape)?;
    let mut out = prediction.to_vec();
    for class in 1..atlas.num_classes {
        let mask = atlas.class_mask(class as u8, radius)?;
        let mask = resample_nearest(&mask, atlas.shape, shape)?;
        for (o, &m) in out.iter_mut().zip(&mask) {
            if *o as usize == class && !m {
                *o = 0;
            }
        }
    }
    Ok(out)
}

/// One validation case: prediction, reference and their shared shape.
pub struct ValidationCase<'a> {
    pub prediction: &'a [u8],
    pub reference: &'a [u8],
    pub shape: [usize; 3],
}

/// Radius among `radii` maximizing the mean validation Dice after masking;
/// the smallest radius wins ties.
pub fn optimize_dilation(atlas: &Atlas, cases: &[ValidationCase<'_>], radii: &[usize]) -> Result<usize> {
    if radii.is_empty() || cases.is_empty() {
        return Err(Error::invalid("dilation search needs radii and validation cases"));
    }
    let mut sorted = radii.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for r in sorted {
        let mut total = 0.0;
        for c in cases {
            let masked = atlas_mask_with_radius(c.prediction, c.shape, atlas, r)?;
            total += DiceReport::compute(&masked, c.reference, atlas.num_classes)?.mean;
        }
        let score = total / cases.len() as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((r, score));
        }
    }
    Ok(best.expect("non-empty").0)
}
