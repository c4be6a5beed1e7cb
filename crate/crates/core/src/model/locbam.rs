//! Location-based attention: three per-axis 1D gates conditioned on the
//! patch's global coordinates, fused back into the feature map by a
//! pointwise convolution with a residual connection.

use crate::error::{Error, Result};
use crate::location::PatchLocation;
use crate::tensor::{Axis3, Conv1dSpec, Conv3dSpec, Graph, Real, Tensor, Var};

use super::encoding::positional_encoding;
use super::params::{he_normal, Bindings, ParamId, ParamStore};

/// One axis gate: pooled features plus encoded coordinates through two 1D
/// convolutions and a sigmoid.
#[derive(Clone, Debug)]
pub struct AxisGate {
    pub axis: Axis3,
    pe_dim: usize,
    kernel: usize,
    slope: f64,
    downsample: usize,
    pe_scale: ParamId,
    pe_shift: ParamId,
    reduce_w: ParamId,
    reduce_b: ParamId,
    expand_w: ParamId,
    expand_b: ParamId,
}

/// Hyperparameters shared by the three gates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocBamSpec {
    pub channels: usize,
    pub reduction: usize,
    pub kernel: usize,
    pub pe_dim: usize,
    pub slope: f64,
    /// Spatial downsampling of the gated features relative to the patch;
    /// coordinates of each pooled cell are averaged.
    pub downsample: usize,
}

impl LocBamSpec {
    fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }
}

fn axis_name(axis: Axis3) -> &'static str {
    match axis {
        Axis3::D => "d",
        Axis3::H => "h",
        Axis3::W => "w",
    }
}

impl AxisGate {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, axis: Axis3, spec: &LocBamSpec, seed: u64) -> Self {
        let p = format!("{prefix}.gate_{}", axis_name(axis));
        let (c, k, hidden) = (spec.channels, spec.kernel, spec.hidden());
        let cin = c + spec.pe_dim;
        let name = |s: &str| format!("{p}.{s}");
        AxisGate {
            axis,
            pe_dim: spec.pe_dim,
            kernel: k,
            slope: spec.slope,
            downsample: spec.downsample,
            pe_scale: store.add(name("pe_scale"), Tensor::ones(vec![spec.pe_dim])),
            pe_shift: store.add(name("pe_shift"), Tensor::zeros(vec![spec.pe_dim])),
            reduce_w: store.add(name("reduce.weight"), he_normal(vec![hidden, cin, k], cin * k, seed, &name("reduce.weight"))),
            reduce_b: store.add(name("reduce.bias"), Tensor::zeros(vec![hidden])),
            expand_w: store.add(name("expand.weight"), he_normal(vec![c, hidden, k], hidden * k, seed, &name("expand.weight"))),
            expand_b: store.add(name("expand.bias"), Tensor::zeros(vec![c])),
        }
    }

    /// Encoded global coordinates `[N, pe_dim, L]` of every sample.
    fn encoding<T: Real>(&self, locations: &[PatchLocation], len: usize) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(locations.len() * self.pe_dim * len);
        for loc in locations {
            let coords = loc.normalized_coords(self.axis);
            let f = self.downsample;
            if coords.len() != len * f {
                return Err(Error::shape(format!(
                    "location covers {} slices along {:?}, features have {len} at downsampling {f}",
                    coords.len(),
                    self.axis
                )));
            }
            let coords: Vec<f64> = coords.chunks(f).map(|c| c.iter().sum::<f64>() / f as f64).collect();
            data.extend_from_slice(positional_encoding::<T>(&coords, self.pe_dim).data());
        }
        Tensor::new(vec![locations.len(), self.pe_dim, len], data)
    }

    /// Gate values `[N, C, L_axis]`, each in `(0, 1)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &Bindings,
        features: Var,
        locations: &[PatchLocation],
    ) -> Result<Var> {
        let h = self.hidden(g, vars, features, locations)?;
        let h = g.leaky_relu(h, T::from_f64_lossy(self.slope));
        let o = g.conv1d(h, vars[self.expand_w], vars[self.expand_b], Conv1dSpec::same(self.kernel))?;
        Ok(g.sigmoid(o))
    }

    /// Pre-activation of the reducing convolution, `[N, C / r, L_axis]`.
    pub(crate) fn hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &Bindings,
        features: Var,
        locations: &[PatchLocation],
    ) -> Result<Var> {
        let fs = g.shape(features).to_vec();
        if fs.len() != 5 || locations.len() != fs[0] {
            return Err(Error::shape(format!(
                "gate needs one location per sample of {fs:?}, got {}",
                locations.len()
            )));
        }
        let len = fs[2 + self.axis.index()];
        let pooled = g.pool_avg_over_axes(features, self.axis)?;
        let pe = g.constant(self.encoding(locations, len)?);
        let pe = g.channel_affine(pe, vars[self.pe_scale], vars[self.pe_shift])?;
        let x = g.concat(&[pooled, pe], 1)?;
        g.conv1d(x, vars[self.reduce_w], vars[self.reduce_b], Conv1dSpec::same(self.kernel))
    }

    pub fn expand_params(&self) -> (ParamId, ParamId) {
        (self.expand_w, self.expand_b)
    }
}

#[derive(Clone, Debug)]
pub struct LocBam {
    spec: LocBamSpec,
    gates: [AxisGate; 3],
    fuse_w: ParamId,
    fuse_b: ParamId,
}

impl LocBam {
    /// Registers the block's parameters. The fusion convolution starts at
    /// zero, making the block an exact identity until trained.
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: LocBamSpec, seed: u64) -> Result<Self> {
        if spec.channels == 0 || spec.reduction == 0 || spec.channels % spec.reduction != 0 {
            return Err(Error::config(format!(
                "LocBAM channels {} must be a positive multiple of the reduction {}",
                spec.channels, spec.reduction
            )));
        }
        if spec.downsample == 0 {
            return Err(Error::config("LocBAM downsampling factor must be positive"));
        }
        if spec.kernel % 2 == 0 || spec.pe_dim == 0 || spec.pe_dim % 2 != 0 {
            return Err(Error::config("LocBAM kernel must be odd and pe_dim a positive even number"));
        }
        let gates = Axis3::ALL.map(|a| AxisGate::new(store, prefix, a, &spec, seed));
        let c = spec.channels;
        let fuse_w = store.add(format!("{prefix}.fuse.weight"), Tensor::zeros(vec![c, 3 * c, 1, 1, 1]));
        let fuse_b = store.add(format!("{prefix}.fuse.bias"), Tensor::zeros(vec![c]));
        Ok(LocBam {
            spec,
            gates,
            fuse_w,
            fuse_b,
        })
    }

    pub fn spec(&self) -> &LocBamSpec {
        &self.spec
    }

    pub fn gate(&self, axis: Axis3) -> &AxisGate {
        &self.gates[axis.index()]
    }

    pub fn fuse_params(&self) -> (ParamId, ParamId) {
        (self.fuse_w, self.fuse_b)
    }

    /// Gate values along one axis.
    pub fn axis_gate<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &Bindings,
        features: Var,
        axis: Axis3,
        locations: &[PatchLocation],
    ) -> Result<Var> {
        self.gate(axis).forward(g, vars, features, locations)
    }

    /// `features + fuse(concat(gate_d * f, gate_h * f, gate_w * f))`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &Bindings,
        features: Var,
        locations: &[PatchLocation],
    ) -> Result<Var> {
        let c = g.shape(features).get(1).copied().unwrap_or(0);
        if c != self.spec.channels {
            return Err(Error::shape(format!(
                "LocBAM built for {} channels, features have {c}",
                self.spec.channels
            )));
        }
        let mut gated = Vec::with_capacity(3);
        for gate in &self.gates {
            let v = gate.forward(g, vars, features, locations)?;
            gated.push(g.broadcast_mul(v, features, gate.axis)?);
        }
        let cat = g.concat(&gated, 1)?;
        let fused = g.conv3d(cat, vars[self.fuse_w], vars[self.fuse_b], Conv3dSpec::default())?;
        g.add(features, fused)
    }
}
