//! Convolution kernels on raw buffers (im2col + GEMM).

use crate::par;

use super::Real;

/// Stride and zero padding of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Stride 1 with `k / 2` padding, preserving extents for odd kernels.
    pub fn same(kernel: usize) -> Self {
        let p = kernel / 2;
        Conv3dSpec {
            stride: [1; 3],
            padding: [p; 3],
        }
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec::new([1; 3], [0; 3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv1dSpec { stride, padding }
    }

    pub fn same(kernel: usize) -> Self {
        Conv1dSpec::new(1, kernel / 2)
    }
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec::new(1, 0)
    }
}

/// Fully resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extent along one axis, `None` if the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if kernel == 0 || stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Range of output positions whose tap `k` lands inside `[0, input)`.
fn valid_range(out: usize, input: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o * stride + k - pad in [0, input)
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > k {
        (input + pad - k).div_ceil(stride)
    } else {
        0
    };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Unfolds one sample `[cin, D, H, W]` into `[cin*kd*kh*kw, OD*OH*OW]`.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_plane();
    col.fill(T::zero());
    for ci in 0..g.cin {
        let inp = &input[ci * id * ih * iw..][..id * ih * iw];
        for a in 0..kd {
            let (d0, d1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (h0, h1) = valid_range(oh, ih, sh, b, ph);
                for c in 0..kw {
                    let (w0, w1) = valid_range(ow, iw, sw, c, pw);
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let dst = &mut col[row * p..][..p];
                    for z in d0..d1 {
                        let zi = z * sd + a - pd;
                        for y in h0..h1 {
                            let yi = y * sh + b - ph;
                            let src = &inp[(zi * ih + yi) * iw..][..iw];
                            let out = &mut dst[(z * oh + y) * ow..][..ow];
                            if sw == 1 {
                                let off = w0 + c - pw;
                                out[w0..w1].copy_from_slice(&src[off..off + (w1 - w0)]);
                            } else {
                                for x in w0..w1 {
                                    out[x] = src[x * sw + c - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[rows, P]` column gradients back onto one sample's input gradient.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], grad_in: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_plane();
    for ci in 0..g.cin {
        let gin = &mut grad_in[ci * id * ih * iw..][..id * ih * iw];
        for a in 0..kd {
            let (d0, d1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (h0, h1) = valid_range(oh, ih, sh, b, ph);
                for c in 0..kw {
                    let (w0, w1) = valid_range(ow, iw, sw, c, pw);
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &col[row * p..][..p];
                    for z in d0..d1 {
                        let zi = z * sd + a - pd;
                        for y in h0..h1 {
                            let yi = y * sh + b - ph;
                            let dst = &mut gin[(zi * ih + yi) * iw..][..iw];
                            let s = &src[(z * oh + y) * ow..][..ow];
                            for x in w0..w1 {
                                dst[x * sw + c - pw] = dst[x * sw + c - pw] + s[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let in_len = g.cin * g.in_plane();
    let p = g.out_plane();
    let rows = g.rows();
    par::for_each_chunk_mut(out, g.cout * p, |n, out_n| {
        let x = &input[n * in_len..][..in_len];
        let mut col_buf = Vec::new();
        let col: &[T] = if g.is_pointwise() {
            x
        } else {
            col_buf.resize(rows * p, T::zero());
            im2col(g, x, &mut col_buf);
            &col_buf
        };
        T::gemm(g.cout, rows, p, T::one(), weight, false, col, false, T::zero(), out_n);
        for (co, plane) in out_n.chunks_mut(p).enumerate() {
            let b = bias[co];
            plane.iter_mut().for_each(|v| *v = *v + b);
        }
    });
}

/// Gradients of a convolution. Each output buffer is written only if given.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let in_len = g.cin * g.in_plane();
    let p = g.out_plane();
    let rows = g.rows();
    let out_len = g.cout * p;

    if let Some(gb) = grad_bias {
        for n in 0..g.n {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let s: T = grad_out[n * out_len + co * p..][..p].iter().copied().sum();
                *gbv = *gbv + s;
            }
        }
    }

    if let Some(gw) = grad_weight {
        // per-sample partials summed in sample order keep the result independent
        // of scheduling
        let partials = par::map_range(g.n, |n| {
            let x = &input[n * in_len..][..in_len];
            let go = &grad_out[n * out_len..][..out_len];
            let mut col_buf = Vec::new();
            let col: &[T] = if g.is_pointwise() {
                x
            } else {
                col_buf.resize(rows * p, T::zero());
                im2col(g, x, &mut col_buf);
                &col_buf
            };
            let mut part = vec![T::zero(); g.cout * rows];
            T::gemm(g.cout, p, rows, T::one(), go, false, col, true, T::zero(), &mut part);
            part
        });
        for part in partials {
            gw.iter_mut().zip(part).for_each(|(w, d)| *w = *w + d);
        }
    }

    if let Some(gi) = grad_in {
        par::for_each_chunk_mut(gi, in_len, |n, gi_n| {
            let go = &grad_out[n * out_len..][..out_len];
            let mut col = vec![T::zero(); rows * p];
            T::gemm(rows, g.cout, p, T::one(), weight, true, go, false, T::zero(), &mut col);
            if g.is_pointwise() {
                gi_n.iter_mut().zip(&col).for_each(|(a, b)| *a = *a + *b);
            } else {
                col2im(g, &col, gi_n);
            }
        });
    }
}

/// Geometry of a kernel-2 stride-2 transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
}

impl UpGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output(&self) -> [usize; 3] {
        self.input.map(|e| e * 2)
    }
}

/// Scatters `[cout*8, P]` tap rows into one `[cout, 2D, 2H, 2W]` sample.
fn scatter_taps<T: Real>(g: &UpGeom, taps: &[T], out: &mut [T], add: bool) {
    let [d, h, w] = g.input;
    let p = g.in_plane();
    let [od, oh, ow] = g.output();
    for co in 0..g.cout {
        for tap in 0..8 {
            let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &taps[(co * 8 + tap) * p..][..p];
            let plane = &mut out[co * od * oh * ow..][..od * oh * ow];
            for z in 0..d {
                for y in 0..h {
                    let row = &mut plane[((2 * z + a) * oh + 2 * y + b) * ow..][..ow];
                    let s = &src[(z * h + y) * w..][..w];
                    for x in 0..w {
                        let v = &mut row[2 * x + c];
                        *v = if add { *v + s[x] } else { s[x] };
                    }
                }
            }
        }
    }
}

/// Inverse of [`scatter_taps`]: gathers one sample into `[cout*8, P]`.
fn gather_taps<T: Real>(g: &UpGeom, grad_out: &[T], taps: &mut [T]) {
    let [d, h, w] = g.input;
    let p = g.in_plane();
    let [od, oh, ow] = g.output();
    for co in 0..g.cout {
        for tap in 0..8 {
            let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut taps[(co * 8 + tap) * p..][..p];
            let plane = &grad_out[co * od * oh * ow..][..od * oh * ow];
            for z in 0..d {
                for y in 0..h {
                    let row = &plane[((2 * z + a) * oh + 2 * y + b) * ow..][..ow];
                    let t = &mut dst[(z * h + y) * w..][..w];
                    for x in 0..w {
                        t[x] = row[2 * x + c];
                    }
                }
            }
        }
    }
}

/// Weight layout `[cin, cout, 2, 2, 2]`.
pub(crate) fn up_forward<T: Real>(
    g: &UpGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let p = g.in_plane();
    let in_len = g.cin * p;
    let out_len = g.cout * 8 * p;
    par::for_each_chunk_mut(out, out_len, |n, out_n| {
        let x = &input[n * in_len..][..in_len];
        let mut taps = vec![T::zero(); g.cout * 8 * p];
        T::gemm(g.cout * 8, g.cin, p, T::one(), weight, true, x, false, T::zero(), &mut taps);
        scatter_taps(g, &taps, out_n, false);
        for (co, plane) in out_n.chunks_mut(8 * p).enumerate() {
            let b = bias[co];
            plane.iter_mut().for_each(|v| *v = *v + b);
        }
    });
}

pub(crate) fn up_backward<T: Real>(
    g: &UpGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let p = g.in_plane();
    let in_len = g.cin * p;
    let out_len = g.cout * 8 * p;
    let gathered = par::map_range(g.n, |n| {
        let mut taps = vec![T::zero(); g.cout * 8 * p];
        gather_taps(g, &grad_out[n * out_len..][..out_len], &mut taps);
        taps
    });

    if let Some(gb) = grad_bias {
        for n in 0..g.n {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let s: T = grad_out[n * out_len + co * 8 * p..][..8 * p]
                    .iter()
                    .copied()
                    .sum();
                *gbv = *gbv + s;
            }
        }
    }

    if let Some(gw) = grad_weight {
        let partials = par::map_range(g.n, |n| {
            let x = &input[n * in_len..][..in_len];
            let mut part = vec![T::zero(); g.cin * g.cout * 8];
            T::gemm(
                g.cin,
                p,
                g.cout * 8,
                T::one(),
                x,
                false,
                &gathered[n],
                true,
                T::zero(),
                &mut part,
            );
            part
        });
        for part in partials {
            gw.iter_mut().zip(part).for_each(|(w, d)| *w = *w + d);
        }
    }

    if let Some(gi) = grad_in {
        par::for_each_chunk_mut(gi, in_len, |n, gi_n| {
            let mut d = vec![T::zero(); in_len];
            T::gemm(
                g.cin,
                g.cout * 8,
                p,
                T::one(),
                weight,
                false,
                &gathered[n],
                false,
                T::zero(),
                &mut d,
            );
            gi_n.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b);
        });
    }
}
