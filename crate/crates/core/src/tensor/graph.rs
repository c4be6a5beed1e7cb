use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom, UpGeom};
use super::loss;
use super::{inner_size, outer_size, Conv1dSpec, Conv3dSpec, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis of a `N, C, D, H, W` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis3 {
    D,
    H,
    W,
}

impl Axis3 {
    pub const ALL: [Axis3; 3] = [Axis3::D, Axis3::H, Axis3::W];

    /// Position among the three spatial dims (0 = D).
    pub fn index(self) -> usize {
        match self {
            Axis3::D => 0,
            Axis3::H => 1,
            Axis3::W => 2,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    UpConv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: UpGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Mul(Var, Var),
    Add(Var, Var),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    AxisMean {
        input: Var,
        keep: Axis3,
    },
    BroadcastMul {
        gate: Var,
        features: Var,
        axis: Axis3,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    DiceCe {
        logits: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations, swept in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {} not in graph", v.0)));
        }
        Ok(())
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        self.check_var(v)?;
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::shape(format!(
                "{what} must have rank {rank}, got shape {s:?}"
            )));
        }
        Ok(s)
    }

    // ---------------------------------------------------------------- conv

    /// 3D convolution. Weight layout `[cout, cin, kd, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv3dSpec) -> Result<Var> {
        let xs = self.expect_rank(input, 5, "conv3d input")?.to_vec();
        let ws = self.expect_rank(weight, 5, "conv3d weight")?.to_vec();
        let bs = self.expect_rank(bias, 1, "conv3d bias")?.to_vec();
        if ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv3d weight expects {} input channels, input has {}",
                ws[1], xs[1]
            )));
        }
        if bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "conv3d bias has {} entries for {} output channels",
                bs[0], ws[0]
            )));
        }
        let mut output = [0; 3];
        for i in 0..3 {
            if spec.stride[i] == 0 {
                return Err(Error::invalid("conv3d stride must be positive"));
            }
            output[i] = ConvGeom::out_extent(xs[2 + i], ws[2 + i], spec.stride[i], spec.padding[i])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "conv3d kernel {:?} does not fit input {:?} with padding {:?}",
                        &ws[2..],
                        &xs[2..],
                        spec.padding
                    ))
                })?;
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: spatial(&xs),
            kernel: spatial(&ws),
            stride: spec.stride,
            pad: spec.padding,
            output,
        };
        let out_shape = vec![geom.n, geom.cout, output[0], output[1], output[2]];
        Ok(self.conv_node(input, weight, bias, geom, out_shape))
    }

    /// 1D convolution. Weight layout `[cout, cin, k]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv1dSpec) -> Result<Var> {
        let xs = self.expect_rank(input, 3, "conv1d input")?.to_vec();
        let ws = self.expect_rank(weight, 3, "conv1d weight")?.to_vec();
        let bs = self.expect_rank(bias, 1, "conv1d bias")?.to_vec();
        if ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv1d weight expects {} input channels, input has {}",
                ws[1], xs[1]
            )));
        }
        if bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "conv1d bias has {} entries for {} output channels",
                bs[0], ws[0]
            )));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("conv1d stride must be positive"));
        }
        let len = ConvGeom::out_extent(xs[2], ws[2], spec.stride, spec.padding).ok_or_else(|| {
            Error::shape(format!(
                "conv1d kernel {} does not fit length {} with padding {}",
                ws[2], xs[2], spec.padding
            ))
        })?;
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: [xs[2], 1, 1],
            kernel: [ws[2], 1, 1],
            stride: [spec.stride, 1, 1],
            pad: [spec.padding, 0, 0],
            output: [len, 1, 1],
        };
        Ok(self.conv_node(input, weight, bias, geom, vec![xs[0], ws[0], len]))
    }

    fn conv_node(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom, shape: Vec<usize>) -> Var {
        let mut out = vec![T::zero(); shape.iter().product()];
        conv::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let rg = self.needs(&[input, weight, bias]);
        let value = Tensor::new(shape, out).expect("conv output shape");
        self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Transposed convolution with kernel 2 and stride 2, doubling every
    /// spatial extent. Weight layout `[cin, cout, 2, 2, 2]`.
    pub fn up_conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.expect_rank(input, 5, "up_conv3d input")?.to_vec();
        let ws = self.expect_rank(weight, 5, "up_conv3d weight")?.to_vec();
        let bs = self.expect_rank(bias, 1, "up_conv3d bias")?.to_vec();
        if ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::shape(format!(
                "up_conv3d weight {ws:?} incompatible with input {xs:?} (expected [{}, cout, 2, 2, 2])",
                xs[1]
            )));
        }
        if bs[0] != ws[1] {
            return Err(Error::shape(format!(
                "up_conv3d bias has {} entries for {} output channels",
                bs[0], ws[1]
            )));
        }
        let geom = UpGeom {
            n: xs[0],
            cin: xs[1],
            cout: ws[1],
            input: spatial(&xs),
        };
        let o = geom.output();
        let shape = vec![geom.n, geom.cout, o[0], o[1], o[2]];
        let mut out = vec![T::zero(); shape.iter().product()];
        conv::up_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::UpConv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2x2 max pooling with stride 2. Extents must be even.
    pub fn max_pool3d(&mut self, input: Var) -> Result<Var> {
        let xs = self.expect_rank(input, 5, "max_pool3d input")?.to_vec();
        if xs[2..].iter().any(|e| e % 2 != 0) {
            return Err(Error::shape(format!(
                "max_pool3d needs even spatial extents, got {:?}",
                &xs[2..]
            )));
        }
        let [d, h, w] = spatial(&xs);
        let [od, oh, ow] = [d / 2, h / 2, w / 2];
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(planes * od * oh * ow);
        for pl in 0..planes {
            let base = pl * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let i = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + c;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], od, oh, ow], out)?,
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    // --------------------------------------------------------- elementwise

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |a| T::one() / (T::one() + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        self.unary(
            x,
            move |a| if a > T::zero() { a } else { a * alpha },
            Op::LeakyRelu(x, alpha),
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "{name} operands differ in shape: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Sum of all elements as a one-element tensor (accumulated in `f64`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x), rg)
    }

    // -------------------------------------------------------- normalization

    /// Per-(sample, channel) normalization over all trailing dims, followed by
    /// a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_var(input)?;
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape(format!(
                "instance_norm needs [N, C, ...] input, got {xs:?}"
            )));
        }
        let c = xs[1];
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            let s = self.expect_rank(v, 1, name)?;
            if s[0] != c {
                return Err(Error::shape(format!(
                    "instance_norm {name} has {} entries for {c} channels",
                    s[0]
                )));
            }
        }
        let m = inner_size(&xs, 1);
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(xs[0] * c);
        let mf = T::from_usize(m).unwrap();
        for (plane, (xp, (np, op))) in x
            .chunks(m)
            .zip(normalized.chunks_mut(m).zip(out.chunks_mut(m)))
            .enumerate()
        {
            let ch = plane % c;
            let mean = xp.iter().copied().sum::<T>() / mf;
            let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..m {
                np[i] = (xp[i] - mean) * is;
                op[i] = np[i] * g[ch] + b[ch];
            }
        }
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// `x * scale[c] + shift[c]` for every `[N, C, ...]` element.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        self.check_var(input)?;
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("channel_affine needs [N, C, ...] input"));
        }
        for v in [scale, shift] {
            let s = self.expect_rank(v, 1, "channel_affine parameter")?;
            if s[0] != xs[1] {
                return Err(Error::shape(format!(
                    "channel_affine parameter has {} entries for {} channels",
                    s[0], xs[1]
                )));
            }
        }
        let m = inner_size(&xs, 1);
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / m) % xs[1];
                v * sc[ch] + sh[ch]
            })
            .collect();
        let rg = self.needs(&[input, scale, shift]);
        Ok(self.push(
            Tensor::new(xs, data)?,
            Op::ChannelAffine {
                input,
                scale,
                shift,
            },
            rg,
        ))
    }

    // ------------------------------------------------------ axis operations

    /// Mean over the two spatial axes other than `keep`: `[N,C,D,H,W] -> [N,C,L]`.
    pub fn pool_avg_over_axes(&mut self, input: Var, keep: Axis3) -> Result<Var> {
        let xs = self.expect_rank(input, 5, "pool_avg_over_axes input")?.to_vec();
        let dims = spatial(&xs);
        let k = keep.index();
        let len = dims[k];
        let count = T::from_usize(dims.iter().product::<usize>() / len).unwrap();
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let plane = dims.iter().product::<usize>();
        let mut out = vec![T::zero(); planes * len];
        for p in 0..planes {
            let src = &x[p * plane..][..plane];
            let dst = &mut out[p * len..][..len];
            for (i, &v) in src.iter().enumerate() {
                let coord = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
                dst[coord[k]] = dst[coord[k]] + v;
            }
            dst.iter_mut().for_each(|v| *v = *v / count);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], len], out)?,
            Op::AxisMean { input, keep },
            rg,
        ))
    }

    /// Scales every `(n, c)` spatial slice of `features` by `gate[n, c, i]`
    /// where `i` is the slice's coordinate along `axis`.
    pub fn broadcast_mul(&mut self, gate: Var, features: Var, axis: Axis3) -> Result<Var> {
        let gs = self.expect_rank(gate, 3, "broadcast_mul gate")?.to_vec();
        let fs = self.expect_rank(features, 5, "broadcast_mul features")?.to_vec();
        let dims = spatial(&fs);
        if gs[0] != fs[0] || gs[1] != fs[1] || gs[2] != dims[axis.index()] {
            return Err(Error::shape(format!(
                "gate {gs:?} does not match features {fs:?} along {axis:?}"
            )));
        }
        let plane = dims.iter().product::<usize>();
        let (g, f) = (self.value(gate).data(), self.value(features).data());
        let data = f
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[gate_index(i, plane, dims, axis)])
            .collect();
        let rg = self.needs(&[gate, features]);
        Ok(self.push(
            Tensor::new(fs, data)?,
            Op::BroadcastMul {
                gate,
                features,
                axis,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for &v in inputs {
            self.check_var(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer = outer_size(&base, axis);
        let inner = inner_size(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_var(input)?;
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} along axis {axis} out of range for {xs:?}",
                start + len
            )));
        }
        let outer = outer_size(&xs, axis);
        let inner = inner_size(&xs, axis);
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * xs[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input, axis, start }, rg))
    }

    // ----------------------------------------------------------------- loss

    /// Cross-entropy plus `1 - mean soft Dice` over foreground classes.
    /// `target` holds one class index per voxel of `logits` (`N*D*H*W`).
    pub fn dice_ce_loss(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let ls = self.expect_rank(logits, 5, "dice_ce_loss logits")?.to_vec();
        let parts = loss::dice_ce_forward(self.value(logits).data(), &ls, target, true)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(parts.total())),
            Op::DiceCe {
                logits,
                grad: parts.grad.unwrap_or_default(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Gradients of every node that
    /// requires them become available through [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            backprop(nodes, grads, node, gout.data());
            grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn gate_index(i: usize, plane: usize, dims: [usize; 3], axis: Axis3) -> usize {
    let nc = i / plane;
    let r = i % plane;
    let coord = match axis {
        Axis3::D => r / (dims[1] * dims[2]),
        Axis3::H => (r / dims[2]) % dims[1],
        Axis3::W => r % dims[2],
    };
    nc * dims[axis.index()] + coord
}

/// Mutable gradient buffer of `v`, allocated on first use; `None` when `v`
/// does not require a gradient.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
    Some(g.data_mut())
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], node: &Node<T>, gout: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv {
            input,
            weight,
            bias,
            geom,
        } => {
            // the three targets are distinct nodes; take them one at a time
            let mut gi = slot(nodes, grads, *input).map(|g| g.to_vec());
            let mut gw = slot(nodes, grads, *weight).map(|g| g.to_vec());
            let mut gb = slot(nodes, grads, *bias).map(|g| g.to_vec());
            conv::conv_backward(
                geom,
                val(*input),
                val(*weight),
                gout,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            store(grads, *input, gi);
            store(grads, *weight, gw);
            store(grads, *bias, gb);
        }
        Op::UpConv {
            input,
            weight,
            bias,
            geom,
        } => {
            let mut gi = slot(nodes, grads, *input).map(|g| g.to_vec());
            let mut gw = slot(nodes, grads, *weight).map(|g| g.to_vec());
            let mut gb = slot(nodes, grads, *bias).map(|g| g.to_vec());
            conv::up_backward(
                geom,
                val(*input),
                val(*weight),
                gout,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            store(grads, *input, gi);
            store(grads, *weight, gw);
            store(grads, *bias, gb);
        }
        Op::MaxPool { input, argmax } => {
            if let Some(g) = slot(nodes, grads, *input) {
                for (&src, &d) in argmax.iter().zip(gout) {
                    g[src] = g[src] + d;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(g) = slot(nodes, grads, *x) {
                for ((g, &d), &y) in g.iter_mut().zip(gout).zip(y) {
                    *g = *g + d * y * (T::one() - y);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(g) = slot(nodes, grads, *x) {
                for ((g, &d), &a) in g.iter_mut().zip(gout).zip(xv) {
                    if a > T::zero() {
                        *g = *g + d;
                    }
                }
            }
        }
        Op::LeakyRelu(x, alpha) => {
            let xv = val(*x);
            if let Some(g) = slot(nodes, grads, *x) {
                for ((g, &d), &a) in g.iter_mut().zip(gout).zip(xv) {
                    *g = *g + if a > T::zero() { d } else { d * *alpha };
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = val(*b).to_vec();
            if let Some(g) = slot(nodes, grads, *a) {
                for ((g, &d), &y) in g.iter_mut().zip(gout).zip(&bv) {
                    *g = *g + d * y;
                }
            }
            let av = val(*a).to_vec();
            if let Some(g) = slot(nodes, grads, *b) {
                for ((g, &d), &x) in g.iter_mut().zip(gout).zip(&av) {
                    *g = *g + d * x;
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = slot(nodes, grads, v) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d);
                }
            }
        }
        Op::Sum(x) => {
            let d = gout[0];
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().for_each(|g| *g = *g + d);
            }
        }
        Op::InstanceNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let shape = node.value.shape();
            let c = shape[1];
            let m = inner_size(shape, 1);
            let mf = T::from_usize(m).unwrap();
            let gam = val(*gamma).to_vec();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (p, (d, xh)) in gout.chunks(m).zip(normalized.chunks(m)).enumerate() {
                    let s: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    gg[p % c] = gg[p % c] + s;
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for (p, d) in gout.chunks(m).enumerate() {
                    let s: T = d.iter().copied().sum();
                    gb[p % c] = gb[p % c] + s;
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for (p, ((d, xh), gxp)) in gout
                    .chunks(m)
                    .zip(normalized.chunks(m))
                    .zip(gx.chunks_mut(m))
                    .enumerate()
                {
                    let gm = gam[p % c];
                    let sum_d: T = d.iter().map(|&v| v * gm).sum();
                    let sum_dx: T = d.iter().zip(xh).map(|(&v, &x)| v * gm * x).sum();
                    let k = inv_std[p] / mf;
                    for i in 0..m {
                        let dxh = d[i] * gm;
                        gxp[i] = gxp[i] + k * (mf * dxh - sum_d - xh[i] * sum_dx);
                    }
                }
            }
        }
        Op::ChannelAffine {
            input,
            scale,
            shift,
        } => {
            let shape = node.value.shape();
            let c = shape[1];
            let m = inner_size(shape, 1);
            let xv = val(*input).to_vec();
            let sc = val(*scale).to_vec();
            if let Some(gs) = slot(nodes, grads, *scale) {
                for (p, (d, x)) in gout.chunks(m).zip(xv.chunks(m)).enumerate() {
                    let s: T = d.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    gs[p % c] = gs[p % c] + s;
                }
            }
            if let Some(gh) = slot(nodes, grads, *shift) {
                for (p, d) in gout.chunks(m).enumerate() {
                    let s: T = d.iter().copied().sum();
                    gh[p % c] = gh[p % c] + s;
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for (p, (d, g)) in gout.chunks(m).zip(gx.chunks_mut(m)).enumerate() {
                    let s = sc[p % c];
                    g.iter_mut().zip(d).for_each(|(g, &d)| *g = *g + d * s);
                }
            }
        }
        Op::AxisMean { input, keep } => {
            let xs = nodes[input.0].value.shape();
            let dims = spatial(xs);
            let k = keep.index();
            let len = dims[k];
            let plane = dims.iter().product::<usize>();
            let count = T::from_usize(plane / len).unwrap();
            if let Some(g) = slot(nodes, grads, *input) {
                for (p, gp) in g.chunks_mut(plane).enumerate() {
                    let d = &gout[p * len..][..len];
                    for (i, gv) in gp.iter_mut().enumerate() {
                        let coord = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
                        *gv = *gv + d[coord[k]] / count;
                    }
                }
            }
        }
        Op::BroadcastMul {
            gate,
            features,
            axis,
        } => {
            let fs = nodes[features.0].value.shape();
            let dims = spatial(fs);
            let plane = dims.iter().product::<usize>();
            let gv = val(*gate).to_vec();
            let fv = val(*features).to_vec();
            if let Some(gg) = slot(nodes, grads, *gate) {
                for (i, (&d, &f)) in gout.iter().zip(&fv).enumerate() {
                    let j = gate_index(i, plane, dims, *axis);
                    gg[j] = gg[j] + d * f;
                }
            }
            if let Some(gf) = slot(nodes, grads, *features) {
                for (i, (g, &d)) in gf.iter_mut().zip(gout).enumerate() {
                    *g = *g + d * gv[gate_index(i, plane, dims, *axis)];
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer = outer_size(shape, *axis);
            let inner = inner_size(shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let block = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(g) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gout[o * total + offset..][..block];
                        let dst = &mut g[o * block..][..block];
                        dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                offset += block;
            }
        }
        Op::Slice { input, axis, start } => {
            let xs = nodes[input.0].value.shape();
            let outer = outer_size(xs, *axis);
            let inner = inner_size(xs, *axis);
            let len = node.value.shape()[*axis];
            if let Some(g) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let dst = &mut g[(o * xs[*axis] + start) * inner..][..len * inner];
                    let src = &gout[o * len * inner..][..len * inner];
                    dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                }
            }
        }
        Op::DiceCe { logits, grad } => {
            let d = gout[0];
            if let Some(g) = slot(nodes, grads, *logits) {
                g.iter_mut().zip(grad).for_each(|(g, &v)| *g = *g + d * v);
            }
        }
    }
}

fn store<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, buf: Option<Vec<T>>) {
    if let (Some(buf), Some(t)) = (buf, grads[v.0].as_mut()) {
        t.data_mut().copy_from_slice(&buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        t(shape, &(0..n).map(|v| v as f64).collect::<Vec<_>>())
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
        let w = g.constant(t(&[1, 1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv3d(x, w, b, Conv3dSpec::default()).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv3d_zero_weight_gives_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(iota(&[2, 3, 4, 3, 2]));
        let w = g.constant(Tensor::zeros(vec![2, 3, 3, 3, 3]));
        let b = g.constant(t(&[2], &[1.5, 1.5]));
        let y = g.conv3d(x, w, b, Conv3dSpec::same(3)).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 4, 3, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn conv3d_full_window_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(iota(&[1, 1, 2, 2, 2]));
        let w = g.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv3d(x, w, b, Conv3dSpec::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[28.0]);
    }

    #[test]
    fn conv3d_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 3, 3, 3]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv3d(x, w, b, Conv3dSpec::default()), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros(vec![1, 2, 5, 1, 1]));
        assert!(matches!(g.conv3d(x, w, b, Conv3dSpec::default()), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros(vec![1, 2, 1, 1, 1]));
        let spec = Conv3dSpec::new([0, 1, 1], [0; 3]);
        assert!(matches!(g.conv3d(x, w, b, spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 5], &[1.0, -2.0, 3.0, 0.5, 4.0]));
        let w = g.constant(t(&[1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, Conv1dSpec::default()).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let x = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, w, b, Conv1dSpec::default()).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);

        let w = g.constant(t(&[1, 1, 3], &[0.0; 3]));
        let b2 = g.constant(t(&[1], &[2.0]));
        let y = g.conv1d(x, w, b2, Conv1dSpec::same(3)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let l = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(l).data(), &[0.0, -0.03, 3.0]);
        let ones = g.constant(Tensor::ones(vec![3]));
        let m = g.mul(x, ones).unwrap();
        assert_eq!(g.value(m), g.value(x));
        let bad = g.constant(Tensor::ones(vec![2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(t(&[1], &[1.0]));
        let zero = g.constant(t(&[1], &[0.0]));
        let c = g.constant(Tensor::full(vec![1, 1, 4], 3.0));
        let y = g.instance_norm(c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[1, 1, 2], &[0.0, 2.0]));
        let y = g.instance_norm(x, one, zero, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

        let b = g.constant(t(&[1], &[0.7]));
        let y = g.instance_norm(x, zero, b, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![2, 3, 2, 3, 4]));
        let p = g.pool_avg_over_axes(x, Axis3::H).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.0));

        let x = g.constant(t(&[1, 1, 2, 1, 1], &[4.0, -1.0]));
        let p = g.pool_avg_over_axes(x, Axis3::D).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, -1.0]);

        let x = g.constant(iota(&[1, 1, 2, 2, 2]));
        let p = g.pool_avg_over_axes(x, Axis3::W).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0]);

        let m = g.max_pool3d(x).unwrap();
        assert_eq!(g.value(m).data(), &[7.0]);
        let c = g.constant(Tensor::full(vec![1, 2, 4, 2, 6], 2.5));
        let m = g.max_pool3d(c).unwrap();
        assert_eq!(g.shape(m), &[1, 2, 2, 1, 3]);
        assert!(g.value(m).data().iter().all(|&v| v == 2.5));
        let odd = g.constant(Tensor::zeros(vec![1, 1, 3, 2, 2]));
        assert!(g.max_pool3d(odd).is_err());
    }

    #[test]
    fn up_conv_identity_like_doubles_extents() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(iota(&[1, 1, 2, 3, 1]));
        let w = g.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.up_conv3d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 6, 2]);
        let (xv, yv) = (g.value(x).data(), g.value(y).data());
        for z in 0..4 {
            for yy in 0..6 {
                for xx in 0..2 {
                    assert_eq!(yv[(z * 6 + yy) * 2 + xx], xv[(z / 2) * 3 + yy / 2]);
                }
            }
        }
    }

    #[test]
    fn broadcast_mul_examples() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(t(&[1, 1, 2, 1, 1], &[3.0, 5.0]));
        let gate = g.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let y = g.broadcast_mul(gate, f, Axis3::D).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 10.0]);

        let f = g.constant(iota(&[2, 2, 2, 3, 4]));
        let ones = g.constant(Tensor::ones(vec![2, 2, 3]));
        let y = g.broadcast_mul(ones, f, Axis3::H).unwrap();
        assert_eq!(g.value(y), g.value(f));
        let zeros = g.constant(Tensor::zeros(vec![2, 2, 4]));
        let y = g.broadcast_mul(zeros, f, Axis3::W).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(g.broadcast_mul(zeros, f, Axis3::D).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(iota(&[2, 1, 3]));
        let b = g.constant(t(&[2, 2, 3], &[-1.0; 12]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        assert_eq!(&g.value(c).data()[..9], &[0.0, 1.0, 2.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]);
        let s = g.slice(c, 1, 0, 1).unwrap();
        assert_eq!(g.value(s), g.value(a));
        assert!(g.slice(c, 1, 2, 2).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]), true);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_on_empty_graph_is_noop() {
        let mut g = Graph::<f32>::new();
        assert!(g.backward(Var(0)).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(vec![2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(vec![3]), true);
        let c = g.constant(Tensor::ones(vec![3]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
