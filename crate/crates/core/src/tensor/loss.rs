use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Smoothing added to numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// The two terms of the segmentation loss.
#[derive(Clone, Debug)]
pub struct DiceCeParts<T> {
    /// Mean voxel cross-entropy.
    pub ce: f64,
    /// `1 - mean soft Dice` over foreground classes.
    pub dice_term: f64,
    pub(crate) grad: Option<Vec<T>>,
}

impl<T> DiceCeParts<T> {
    pub fn total(&self) -> f64 {
        self.ce + self.dice_term
    }
}

/// Evaluates both loss terms without building a graph.
pub fn dice_ce_components<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<DiceCeParts<T>> {
    if logits.rank() != 5 {
        return Err(Error::shape(format!(
            "logits must be [N, K, D, H, W], got {:?}",
            logits.shape()
        )));
    }
    dice_ce_forward(logits.data(), logits.shape(), target, false)
}

pub(crate) fn dice_ce_forward<T: Real>(
    logits: &[T],
    shape: &[usize],
    target: &[u8],
    want_grad: bool,
) -> Result<DiceCeParts<T>> {
    let (n, k) = (shape[0], shape[1]);
    let m: usize = shape[2..].iter().product();
    if k < 2 {
        return Err(Error::shape("dice_ce_loss needs at least two classes"));
    }
    if target.len() != n * m {
        return Err(Error::shape(format!(
            "target has {} voxels, logits describe {}",
            target.len(),
            n * m
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!("target label {bad} out of range for {k} classes")));
    }

    let voxels = (n * m) as f64;
    let mut probs = vec![0.0f64; n * k * m];
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut ysum = vec![0.0; k];
    for b in 0..n {
        let base = b * k * m;
        for v in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(logits[base + c * m + v].as_f64());
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[base + c * m + v].as_f64() - mx).exp();
                probs[base + c * m + v] = e;
                z += e;
            }
            let y = target[b * m + v] as usize;
            ce -= (probs[base + y * m + v] / z).ln();
            for c in 0..k {
                let p = probs[base + c * m + v] / z;
                probs[base + c * m + v] = p;
                psum[c] += p;
                if c == y {
                    inter[c] += p;
                    ysum[c] += 1.0;
                }
            }
        }
    }
    ce /= voxels;
    let fg = (k - 1) as f64;
    let dice: Vec<f64> = (0..k)
        .map(|c| (2.0 * inter[c] + DICE_SMOOTH) / (psum[c] + ysum[c] + DICE_SMOOTH))
        .collect();
    let dice_term = 1.0 - dice[1..].iter().sum::<f64>() / fg;

    let grad = want_grad.then(|| {
        let mut grad = vec![T::zero(); n * k * m];
        let mut gp = vec![0.0; k];
        for b in 0..n {
            let base = b * k * m;
            for v in 0..m {
                let y = target[b * m + v] as usize;
                gp[0] = 0.0;
                for c in 1..k {
                    let den = psum[c] + ysum[c] + DICE_SMOOTH;
                    let yc = if c == y { 1.0 } else { 0.0 };
                    let d_dice = (2.0 * yc * den - (2.0 * inter[c] + DICE_SMOOTH)) / (den * den);
                    gp[c] = -d_dice / fg;
                }
                let dot: f64 = (0..k).map(|c| probs[base + c * m + v] * gp[c]).sum();
                for c in 0..k {
                    let p = probs[base + c * m + v];
                    let yc = if c == y { 1.0 } else { 0.0 };
                    let g = p * (gp[c] - dot) + (p - yc) / voxels;
                    grad[base + c * m + v] = T::from_f64_lossy(g);
                }
            }
        }
        grad
    });

    Ok(DiceCeParts { ce, dice_term, grad })
}
