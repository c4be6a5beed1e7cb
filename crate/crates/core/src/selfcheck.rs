//! Finite-difference gradient checks over every differentiable op, run at
//! 64-bit precision on random small shapes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::location::{BprMap, PatchLocation};
use crate::model::{Bindings, LocBam, LocBamSpec, ParamStore};
use crate::tensor::{grad_check, grad_check_projected, Axis3, Conv1dSpec, Conv3dSpec, Graph, Tensor, Var};

/// Largest relative error accepted at 64-bit precision.
pub const TOLERANCE_F64: f64 = 1e-6;
/// Central-difference step used by the suite.
pub const EPS_F64: f64 = 1e-4;

/// Outcome for one op over all its random cases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const OPS: [&str; 16] = [
    "conv3d",
    "conv1d",
    "instance_norm",
    "max_pool3d",
    "pool_avg_over_axes",
    "up_conv3d",
    "broadcast_mul",
    "channel_affine",
    "concat",
    "sigmoid",
    "relu",
    "leaky_relu",
    "dice_ce_loss",
    "locbam_axis_gate",
    "locbam_forward",
    "mul_add",
];

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced far beyond the step, so no max flips.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape")
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(lo..=hi))
}

/// `sum(y * r)` for a fixed random `r`: gives every output element its own
/// weight so no gradient component is structurally tiny.


fn output_shape(f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.shape(y).to_vec())
}

/// Checks `sum(op(inputs) * r)` for a random positive probe `r`, which avoids
/// cancellation in the projection.
fn check_projected(
    rng: &mut ChaCha8Rng,
    eps: f64,
    op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
) -> Result<f64> {
    check_with_probe(rng, eps, op, inputs, (0.5, 1.5))
}

fn check_with_probe(
    rng: &mut ChaCha8Rng,
    eps: f64,
    op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    (lo, hi): (f64, f64),
) -> Result<f64> {
    let r = uniform(rng, output_shape(op, inputs)?, lo, hi);
    Ok(grad_check_projected(op, inputs, &r, eps)?.max_rel_error)
}

fn location(patch: [usize; 3], rng: &mut ChaCha8Rng) -> PatchLocation {
    let volume = [24, 20, 20];
    let origin = [0, 1, 2].map(|i| rng.random_range(0..=volume[i] - patch[i]));
    PatchLocation::new(origin, patch, volume, BprMap::spanning(volume[0]))
        .expect("fits")
        .with_shift(rng.random_range(-0.2..0.2))
}

/// A LocBAM block with random (non-zero) fusion weights and its parameters
/// as a flat input list.
fn locbam_case(rng: &mut ChaCha8Rng, channels: usize, downsample: usize) -> (LocBam, Vec<Tensor<f64>>) {
    let mut store = ParamStore::<f64>::new();
    let spec = LocBamSpec {
        channels,
        reduction: 2,
        kernel: 3,
        pe_dim: 2,
        slope: 0.2,
        downsample,
    };
    let seed = rng.random();
    let block = LocBam::new(&mut store, "lb", spec, seed).expect("valid spec");
    let (w, b) = block.fuse_params();
    *store.get_mut(w).value_mut() = uniform(rng, vec![channels, 3 * channels, 1, 1, 1], 0.5, 1.5);
    *store.get_mut(b).value_mut() = uniform(rng, vec![channels], -0.5, 0.5);
    // Gate parameters are redrawn at a scale that keeps the sigmoid away from
    // saturation. Each gate holds pe_scale, pe_shift, reduce_w, reduce_b,
    // expand_w, expand_b in that order, followed by the fusion pair.
    let gate_params = 6 * 3;
    let params = store
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| match i {
            i if i >= gate_params => p.value().clone(),
            i if i % 6 == 0 => uniform(rng, p.value().shape().to_vec(), 0.5, 1.5),
            _ => uniform(rng, p.value().shape().to_vec(), -0.5, 0.5),
        })
        .collect();
    (block, params)
}

const KINK_MARGIN: f64 = 0.02;

fn min_hidden_magnitude(block: &LocBam, inputs: &[Tensor<f64>], locs: &[PatchLocation]) -> Result<f64> {
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let vars = Bindings::from_vars(v[1..].to_vec());
    let mut min = f64::INFINITY;
    for axis in Axis3::ALL {
        let h = block.gate(axis).hidden(&mut g, &vars, v[0], locs)?;
        min = g.value(h).data().iter().fold(min, |m, x| m.min(x.abs()));
    }
    Ok(min)
}

fn case(op: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let n = rng.random_range(1..=2);
    match op {
        "conv3d" => {
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = dims(rng, 1, 3);
            let input = dims(rng, 3, 5);
            let stride = dims(rng, 1, 2);
            let padding = [0, 1, 2].map(|i| rng.random_range(0..=k[i] / 2 + 1).min(k[i] - 1));
            let x = uniform(rng, vec![n, cin, input[0], input[1], input[2]], -1.0, 1.0);
            let w = uniform(rng, vec![cout, cin, k[0], k[1], k[2]], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -1.0, 1.0);
            let spec = Conv3dSpec::new(stride, padding);
            check_projected(rng, eps, &|g, v| g.conv3d(v[0], v[1], v[2], spec), &[x, w, b])
        }
        "conv1d" => {
            let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let k = rng.random_range(1..=3);
            let len = rng.random_range(3..=5);
            let spec = Conv1dSpec::new(rng.random_range(1..=2), rng.random_range(0..k));
            let x = uniform(rng, vec![n, cin, len], -1.0, 1.0);
            let w = uniform(rng, vec![cout, cin, k], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.conv1d(v[0], v[1], v[2], spec), &[x, w, b])
        }
        "instance_norm" => {
            let c = rng.random_range(1..=3);
            let d = dims(rng, 2, 4);
            let x = uniform(rng, vec![n, c, d[0], d[1], d[2]], -1.0, 1.0);
            let gamma = uniform(rng, vec![c], 0.5, 1.5);
            let beta = uniform(rng, vec![c], -0.5, 0.5);
            // Normalized outputs sum to zero, so a constant-sign probe would cancel.
            let op = |g: &mut Graph<f64>, v: &[Var]| g.instance_norm(v[0], v[1], v[2], 1e-5);
            check_with_probe(rng, eps, &op, &[x, gamma, beta], (-1.0, 1.0))
        }
        "max_pool3d" => {
            let c = rng.random_range(1..=2);
            let d = dims(rng, 1, 2).map(|e| 2 * e);
            let x = distinct(rng, vec![n, c, d[0], d[1], d[2]]);
            check_projected(rng, eps, &|g, v| g.max_pool3d(v[0]), &[x])
        }
        "pool_avg_over_axes" => {
            let c = rng.random_range(1..=3);
            let d = dims(rng, 1, 5);
            let axis = Axis3::ALL[rng.random_range(0..3)];
            let x = uniform(rng, vec![n, c, d[0], d[1], d[2]], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.pool_avg_over_axes(v[0], axis), &[x])
        }
        "up_conv3d" => {
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let d = dims(rng, 1, 3);
            let x = uniform(rng, vec![n, cin, d[0], d[1], d[2]], -1.0, 1.0);
            let w = uniform(rng, vec![cin, cout, 2, 2, 2], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.up_conv3d(v[0], v[1], v[2]), &[x, w, b])
        }
        "broadcast_mul" => {
            let c = rng.random_range(1..=3);
            let d = dims(rng, 1, 5);
            let axis = Axis3::ALL[rng.random_range(0..3)];
            let gate = uniform(rng, vec![n, c, d[axis.index()]], 0.0, 1.0);
            let f = uniform(rng, vec![n, c, d[0], d[1], d[2]], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.broadcast_mul(v[0], v[1], axis), &[gate, f])
        }
        "channel_affine" => {
            let c = rng.random_range(1..=4);
            let len = rng.random_range(1..=5);
            let x = uniform(rng, vec![n, c, len], -1.0, 1.0);
            let s = uniform(rng, vec![c], -1.0, 1.0);
            let t = uniform(rng, vec![c], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.channel_affine(v[0], v[1], v[2]), &[x, s, t])
        }
        "concat" => {
            let d = dims(rng, 1, 3);
            let (a, b) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let x = uniform(rng, vec![n, a, d[0], d[1], d[2]], -1.0, 1.0);
            let y = uniform(rng, vec![n, b, d[0], d[1], d[2]], -1.0, 1.0);
            check_projected(rng, eps, &|g, v| g.concat(&[v[0], v[1]], 1), &[x, y])
        }
        "sigmoid" | "relu" | "leaky_relu" => {
            let d = dims(rng, 1, 5);
            let x = off_kink(rng, vec![n, 2, d[0], d[1], d[2]]);
            let alpha = rng.random_range(0.01..0.3);
            let f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> = match op {
                "sigmoid" => &|g, v| Ok(g.sigmoid(v[0])),
                "relu" => &|g, v| Ok(g.relu(v[0])),
                _ => &move |g, v| Ok(g.leaky_relu(v[0], alpha)),
            };
            check_projected(rng, eps, f, &[x])
        }
        "mul_add" => {
            let d = dims(rng, 1, 4);
            let x = uniform(rng, vec![n, 1, d[0], d[1], d[2]], -1.0, 1.0);
            let y = uniform(rng, vec![n, 1, d[0], d[1], d[2]], -1.0, 1.0);
            check_projected(
                rng,
                eps,
                &|g, v| {
                    let m = g.mul(v[0], v[1])?;
                    g.add(m, v[0])
                },
                &[x, y],
            )
        }
        "dice_ce_loss" => {
            let k = rng.random_range(2..=4);
            let d = dims(rng, 1, 4);
            let voxels = n * d.iter().product::<usize>();
            let logits = uniform(rng, vec![n, k, d[0], d[1], d[2]], -2.0, 2.0);
            let target: Vec<u8> = (0..voxels).map(|_| rng.random_range(0..k as u8)).collect();
            let report = grad_check(|g, v| g.dice_ce_loss(v[0], &target), &[logits], eps)?;
            Ok(report.max_rel_error)
        }
        "locbam_axis_gate" | "locbam_forward" => {
            let c = 2 * rng.random_range(1..=2);
            let downsample = rng.random_range(1..=2);
            let d = dims(rng, 2, 4);
            let patch = d.map(|e| e * downsample);
            // Resample until no hidden unit sits near the leaky kink, where
            // central differences are not meaningful.
            let (block, locs, inputs) = loop {
                let (block, params) = locbam_case(rng, c, downsample);
                let locs: Vec<PatchLocation> = (0..n).map(|_| location(patch, rng)).collect();
                let mut inputs = vec![uniform(rng, vec![n, c, d[0], d[1], d[2]], 0.5, 1.5)];
                inputs.extend(params);
                if min_hidden_magnitude(&block, &inputs, &locs)? > KINK_MARGIN {
                    break (block, locs, inputs);
                }
            };
            let axis = Axis3::ALL[rng.random_range(0..3)];
            let gate_only = op == "locbam_axis_gate";
            check_projected(
                rng,
                eps,
                &|g, v| {
                    let vars = Bindings::from_vars(v[1..].to_vec());
                    if gate_only {
                        block.axis_gate(g, &vars, v[0], axis, &locs)
                    } else {
                        block.forward(g, &vars, v[0], &locs)
                    }
                },
                &inputs,
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Runs `cases` random cases of every op in [`OPS`].
pub fn run_gradcheck_suite(cases: usize, seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut worst = 0f64;
            for _ in 0..cases {
                worst = worst.max(case(op, &mut rng, eps)?);
            }
            Ok(OpCheck {
                op,
                cases,
                max_rel_error: worst,
                passed: worst < TOLERANCE_F64,
            })
        })
        .collect()
}
