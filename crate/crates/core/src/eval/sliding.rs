use crate::error::{Error, Result};
use crate::location::{PatchLocation, Volume};
use crate::model::{LocationMode, Model};
use crate::par;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Anything that maps a patch to per-class logits.
pub trait PatchPredictor: Sync {
    fn num_classes(&self) -> usize;

    /// Logits `[K, d, h, w]` for one patch, flattened.
    fn predict_patch(&self, intensities: &[f32], location: &PatchLocation) -> Result<Vec<f32>>;
}

impl<T: Real> PatchPredictor for Model<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_patch(&self, intensities: &[f32], location: &PatchLocation) -> Result<Vec<f32>> {
        let [d, h, w] = location.patch_shape;
        let input = Tensor::new(
            vec![1, 1, d, h, w],
            intensities.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )?;
        let locs = (self.config().location_mode != LocationMode::None).then(|| std::slice::from_ref(location));
        let logits = self.predict(&input, locs)?;
        Ok(logits.data().iter().map(|v| v.as_f64() as f32).collect())
    }
}

/// Window origins along one axis: evenly spaced, first at 0 and last flush
/// with the end, with spacing at most `patch * (1 - overlap)`.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Result<Vec<usize>> {
    if patch == 0 || patch > extent {
        return Err(Error::shape(format!("window {patch} does not fit extent {extent}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let span = extent - patch;
    if span == 0 {
        return Ok(vec![0]);
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let steps = span.div_ceil(stride);
    Ok((0..=steps)
        .map(|i| ((i * span) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Logits `[K, D, H, W]` averaged uniformly over all windows covering each
/// voxel. Every window's location carries `shift_fraction`.
pub fn sliding_window_logits(
    predictor: &dyn PatchPredictor,
    volume: &Volume,
    patch_shape: [usize; 3],
    overlap: f64,
    shift_fraction: f64,
) -> Result<Vec<f32>> {
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|i| window_starts(volume.shape[i], patch_shape[i], overlap))
        .collect::<Result<_>>()?;
    let mut origins = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let k = predictor.num_classes();
    let patch_voxels: usize = patch_shape.iter().product();
    let outputs = par::map_slice(&origins, |&origin| -> Result<Vec<f32>> {
        let loc = volume.location(origin, patch_shape)?.with_shift(shift_fraction);
        let patch = volume.extract(&loc);
        let out = predictor.predict_patch(&patch.intensities, &loc)?;
        if out.len() != k * patch_voxels {
            return Err(Error::shape(format!(
                "predictor returned {} values for {k} classes x {patch_voxels} voxels",
                out.len()
            )));
        }
        Ok(out)
    });
    let [vd, vh, vw] = volume.shape;
    let n = vd * vh * vw;
    let mut sum = vec![0f64; k * n];
    let mut count = vec![0u32; n];
    let [pd, ph, pw] = patch_shape;
    for (origin, out) in origins.iter().zip(outputs) {
        let out = out?;
        for z in 0..pd {
            for y in 0..ph {
                let row = ((origin[0] + z) * vh + origin[1] + y) * vw + origin[2];
                let prow = (z * ph + y) * pw;
                for x in 0..pw {
                    count[row + x] += 1;
                    for c in 0..k {
                        sum[c * n + row + x] += out[c * patch_voxels + prow + x] as f64;
                    }
                }
            }
        }
    }
    Ok(sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % n] as f64) as f32)
        .collect())
}

/// Per-voxel argmax of the averaged logits (lowest class wins ties).
pub fn sliding_window_predict(
    predictor: &dyn PatchPredictor,
    volume: &Volume,
    patch_shape: [usize; 3],
    overlap: f64,
    shift_fraction: f64,
) -> Result<Vec<u8>> {
    let logits = sliding_window_logits(predictor, volume, patch_shape, overlap, shift_fraction)?;
    let n = volume.numel();
    let k = predictor.num_classes();
    Ok((0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if logits[c * n + v] > logits[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::location::BprMap;
    use crate::model::ModelConfig;

    struct Constant(Vec<f32>);

    impl PatchPredictor for Constant {
        fn num_classes(&self) -> usize {
            self.0.len()
        }

        fn predict_patch(&self, intensities: &[f32], _: &PatchLocation) -> Result<Vec<f32>> {
            Ok(self.0.iter().flat_map(|&v| std::iter::repeat_n(v, intensities.len())).collect())
        }
    }

    /// Class-1 logit equals the window's origin along W; class 0 is zero.
    struct OriginW;

    impl PatchPredictor for OriginW {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict_patch(&self, intensities: &[f32], loc: &PatchLocation) -> Result<Vec<f32>> {
            let n = intensities.len();
            let mut out = vec![0.0; 2 * n];
            out[n..].fill(loc.origin[2] as f32);
            Ok(out)
        }
    }

    /// Counts how many windows cover each voxel through its intensity slot.
    struct Ones;

    impl PatchPredictor for Ones {
        fn num_classes(&self) -> usize {
            1
        }

        fn predict_patch(&self, intensities: &[f32], _: &PatchLocation) -> Result<Vec<f32>> {
            Ok(vec![1.0; intensities.len()])
        }
    }

    fn volume(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product();
        Volume::new(shape, [1.0; 3], (0..n).map(|i| i as f32).collect(), None, BprMap::spanning(shape[0])).unwrap()
    }

    #[test]
    fn window_start_grid() {
        assert_eq!(window_starts(8, 8, 0.5).unwrap(), vec![0]);
        assert_eq!(window_starts(16, 8, 0.5).unwrap(), vec![0, 4, 8]);
        assert_eq!(window_starts(16, 8, 0.0).unwrap(), vec![0, 8]);
        assert!(window_starts(4, 5, 0.5).is_err());
        assert!(window_starts(8, 4, 1.0).is_err());
    }

    #[test]
    fn uneven_extent_covers_both_ends() {
        let s = window_starts(10, 4, 0.5).unwrap();
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&6));
        assert!(s.windows(2).all(|w| w[1] - w[0] <= 2 && w[1] > w[0]));
    }

    #[test]
    fn single_window_equals_forward() {
        let config = ModelConfig {
            base_channels: 4,
            depth: 2,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(&config, 3).unwrap();
        let v = volume([8, 8, 8]);
        let logits = sliding_window_logits(&model, &v, [8, 8, 8], 0.5, 0.0).unwrap();
        let loc = v.location([0; 3], [8; 3]).unwrap();
        let direct = model.predict_patch(&v.intensities, &loc).unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn constant_model_constant_labels() {
        let v = volume([12, 10, 9]);
        for (patch, overlap) in [([4, 4, 4], 0.5), ([6, 5, 3], 0.0), ([12, 10, 9], 0.25)] {
            let labels = sliding_window_predict(&Constant(vec![0.1, 2.0, -1.0]), &v, patch, overlap, 0.0).unwrap();
            assert!(labels.iter().all(|&l| l == 1));
        }
    }

    #[test]
    fn two_window_average() {
        // windows at W origins 0 and 4 over a width-12 volume with patch 8
        let v = volume([2, 2, 12]);
        let logits = sliding_window_logits(&OriginW, &v, [2, 2, 8], 0.5, 0.0).unwrap();
        let n = v.numel();
        let at = |x: usize| logits[n + x];
        assert_eq!(window_starts(12, 8, 0.5).unwrap(), vec![0, 4]);
        assert_eq!(at(0), 0.0);
        assert_eq!(at(5), 2.0);
        assert_eq!(at(11), 4.0);
    }

    #[test]
    fn zero_overlap_partitions() {
        let v = volume([8, 6, 9]);
        let starts: Vec<_> = (0..3).map(|i| window_starts(v.shape[i], [4, 3, 3][i], 0.0).unwrap()).collect();
        let mut hits = vec![0; v.numel()];
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &x in &starts[2] {
                    for dz in 0..4 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                hits[v.index(z + dz, y + dy, x + dx)] += 1;
                            }
                        }
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        let logits = sliding_window_logits(&Ones, &v, [4, 3, 3], 0.0, 0.0).unwrap();
        assert!(logits.iter().all(|&l| l == 1.0));
    }
}
