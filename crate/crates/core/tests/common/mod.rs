//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use locseg::postprocess::{connected_components, Connectivity};
use locseg::tensor::{Conv3dSpec, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct six-nested-loop convolution (plus batch and channel loops).
pub fn conv3d_direct(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [cout, _, kd, kh, kw] = ws;
    let out = |i: usize, k: usize| (i + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out(d, kd), out(h, kh), out(wd, kw));
    let mut y = vec![0.0; n * cout * od * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for f in 0..kw {
                                        let iz = (z * stride + a) as isize - pad as isize;
                                        let iy = (r * stride + e) as isize - pad as isize;
                                        let ix = (c * stride + f) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((bi * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin + ci) * kd + a) * kh + e) * kw + f;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[(((bi * cout + co) * od + z) * oh + r) * ow + c] = acc;
                    }
                }
            }
        }
    }
    (y, [n, cout, od, oh, ow])
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Compares the library convolution with the direct loop on every input and
/// kernel extent in `1..=4` per axis, padding 0 and 1, stride 1 and 2.
/// Returns the number of configurations and the largest deviation.
pub fn conv3d_exhaustive() -> (usize, f64) {
    let mut rng = rng(2024);
    let (mut cases, mut worst) = (0, 0.0f64);
    let extents: Vec<[usize; 3]> =
        (0..64).map(|i| [i / 16 + 1, (i / 4) % 4 + 1, i % 4 + 1]).collect();
    for pad in 0..2 {
        for stride in 1..3 {
            for input in &extents {
                for kernel in &extents {
                    if (0..3).any(|a| kernel[a] > input[a] + 2 * pad) {
                        continue;
                    }
                    let xs = [2, 2, input[0], input[1], input[2]];
                    let ws = [3, 2, kernel[0], kernel[1], kernel[2]];
                    let x = random_vec(&mut rng, xs.iter().product());
                    let w = random_vec(&mut rng, ws.iter().product());
                    let b = random_vec(&mut rng, 3);
                    let (expected, shape) = conv3d_direct(&x, xs, &w, ws, &b, stride, pad);
                    let mut g = Graph::<f64>::new();
                    let xv = g.constant(Tensor::new(xs.to_vec(), x).unwrap());
                    let wv = g.constant(Tensor::new(ws.to_vec(), w).unwrap());
                    let bv = g.constant(Tensor::new(vec![3], b).unwrap());
                    let y = g.conv3d(xv, wv, bv, Conv3dSpec::new([stride; 3], [pad; 3])).unwrap();
                    assert_eq!(g.shape(y), &shape[..], "shape for input {input:?} kernel {kernel:?}");
                    for (a, e) in g.value(y).data().iter().zip(&expected) {
                        worst = worst.max((a - e).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    (cases, worst)
}

fn adjacent(a: [usize; 3], b: [usize; 3], connectivity: Connectivity) -> bool {
    let d: Vec<usize> = (0..3).map(|i| a[i].abs_diff(b[i])).collect();
    match connectivity {
        Connectivity::Six => d.iter().sum::<usize>() == 1,
        Connectivity::TwentySix => d.iter().all(|&v| v <= 1) && d.iter().any(|&v| v > 0),
    }
}

/// Brute-force labelling: breadth-first search where neighbours are found by
/// testing every voxel pair. Ids follow the raster order of each component's
/// first voxel.
pub fn bfs_labels(mask: &[bool], shape: [usize; 3], connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let [_, h, w] = shape;
    let coord = |v: usize| [v / (h * w), (v / w) % h, v % w];
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut frontier = vec![start];
        labels[start] = id;
        let mut size = 0;
        while !frontier.is_empty() {
            size += frontier.len();
            let mut next = Vec::new();
            for &u in &frontier {
                for v in 0..mask.len() {
                    if mask[v] && labels[v] == 0 && adjacent(coord(u), coord(v), connectivity) {
                        labels[v] = id;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Checks the library labelling against the oracle on `count` random grids.
/// Returns the number of mismatching grids.
pub fn components_random(count: usize, shape: [usize; 3], seed: u64) -> usize {
    let mut rng = rng(seed);
    let n: usize = shape.iter().product();
    let mut mismatches = 0;
    for i in 0..count {
        let density: f64 = rng.random_range(0.05..0.95);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let connectivity = if i % 2 == 0 { Connectivity::Six } else { Connectivity::TwentySix };
        let got = connected_components(&mask, shape, connectivity).unwrap();
        let (labels, sizes) = bfs_labels(&mask, shape, connectivity);
        if got.labels != labels || got.sizes != sizes {
            mismatches += 1;
        }
    }
    mismatches
}

/// Dice by explicit set construction: `2|P ∩ R| / (|P| + |R|)`, 1 when both
/// are empty.
pub fn dice_by_counting(prediction: &[u8], reference: &[u8], class: u8) -> f64 {
    let p: Vec<usize> = (0..prediction.len()).filter(|&i| prediction[i] == class).collect();
    let r: Vec<usize> = (0..reference.len()).filter(|&i| reference[i] == class).collect();
    let both = p.iter().filter(|i| r.contains(i)).count();
    if p.is_empty() && r.is_empty() {
        1.0
    } else {
        2.0 * both as f64 / (p.len() + r.len()) as f64
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: u8) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
