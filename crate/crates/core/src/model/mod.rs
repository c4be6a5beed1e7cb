//! 3D U-Net with optional location conditioning.

mod checkpoint;
mod encoding;
mod locbam;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use encoding::positional_encoding;
pub use locbam::{AxisGate, LocBam, LocBamSpec};
pub use params::{he_normal, Bindings, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::location::PatchLocation;
use crate::tensor::{Conv3dSpec, Graph, Real, Tensor, Var};

/// How the network receives the patch's global position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationMode {
    #[default]
    None,
    /// Three coordinate channels appended to the input.
    CoordConv,
    /// Axis attention after the second encoder stage.
    LocBam,
}

impl LocationMode {
    pub const ALL: [LocationMode; 3] = [LocationMode::None, LocationMode::CoordConv, LocationMode::LocBam];

    pub fn name(self) -> &'static str {
        match self {
            LocationMode::None => "none",
            LocationMode::CoordConv => "coordconv",
            LocationMode::LocBam => "locbam",
        }
    }
}

impl std::fmt::Display for LocationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LocationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown location mode {s:?}; expected none, coordconv or locbam")))
    }
}

/// Initial weights of the LocBAM fusion convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionInit {
    /// All zeros: the block starts as an exact identity.
    #[default]
    Zero,
    /// He-normal, like every other convolution.
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Number of encoder stages, including the bottleneck.
    pub depth: usize,
    pub location_mode: LocationMode,
    pub locbam_reduction: usize,
    pub locbam_kernel: usize,
    pub pe_dim: usize,
    pub fusion_init: FusionInit,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 3,
            base_channels: 8,
            depth: 3,
            location_mode: LocationMode::None,
            locbam_reduction: 4,
            locbam_kernel: 3,
            pe_dim: 8,
            fusion_init: FusionInit::Zero,
            kernel: 3,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.base_channels == 0 {
            return fail("in_channels and base_channels must be positive and num_classes at least 2".into());
        }
        if self.locbam_reduction == 0 || self.base_channels % self.locbam_reduction != 0 {
            return fail(format!(
                "base_channels {} must be divisible by locbam_reduction {}",
                self.base_channels, self.locbam_reduction
            ));
        }
        if self.pe_dim == 0 || self.pe_dim % 2 != 0 {
            return fail(format!("pe_dim must be a positive even number, got {}", self.pe_dim));
        }
        if self.kernel % 2 == 0 || self.locbam_kernel % 2 == 0 {
            return fail("kernel sizes must be odd".into());
        }
        if !(self.norm_eps > 0.0) || !self.leaky_slope.is_finite() {
            return fail("norm_eps must be positive and leaky_slope finite".into());
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Every spatial extent must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn input_channels(&self) -> usize {
        match self.location_mode {
            LocationMode::CoordConv => self.in_channels + 3,
            _ => self.in_channels,
        }
    }
}

fn he_fusion<T: Real>(store: &mut ParamStore<T>, block: &LocBam, seed: u64) {
    let (w, _) = block.fuse_params();
    let shape = store.get(w).value().shape().to_vec();
    let fan_in = shape[1];
    *store.get_mut(w).value_mut() = he_normal(shape, fan_in, seed, "locbam.fuse.weight");
}

/// conv -> instance norm -> leaky ReLU.
#[derive(Clone, Debug)]
struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvUnit {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let weight = he_normal(vec![cout, cin, k, k, k], cin * k * k * k, seed, &wname);
        ConvUnit {
            weight: store.add(wname, weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            gamma: store.add(format!("{name}.norm.gamma"), Tensor::ones(vec![cout])),
            beta: store.add(format!("{name}.norm.beta"), Tensor::zeros(vec![cout])),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &Bindings, x: Var, config: &ModelConfig) -> Result<Var> {
        let y = g.conv3d(x, vars[self.weight], vars[self.bias], Conv3dSpec::same(config.kernel))?;
        let y = g.instance_norm(y, vars[self.gamma], vars[self.beta], T::from_f64_lossy(config.norm_eps))?;
        Ok(g.leaky_relu(y, T::from_f64_lossy(config.leaky_slope)))
    }
}

#[derive(Clone, Debug)]
struct Block([ConvUnit; 2]);

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, seed: u64) -> Self {
        Block([
            ConvUnit::new(store, &format!("{name}.conv1"), cin, cout, k, seed),
            ConvUnit::new(store, &format!("{name}.conv2"), cout, cout, k, seed),
        ])
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &Bindings, x: Var, config: &ModelConfig) -> Result<Var> {
        let h = self.0[0].forward(g, vars, x, config)?;
        self.0[1].forward(g, vars, h, config)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    weight: ParamId,
    bias: ParamId,
    block: Block,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Block>,
    locbam: Option<LocBam>,
    decoder: Vec<UpStage>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Network definition plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network. Each parameter is seeded from
    /// `seed` and its own name, so shared layers match across modes.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let k = config.kernel;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut locbam = None;
        for s in 0..config.depth {
            let cin = if s == 0 { config.input_channels() } else { config.channels(s - 1) };
            encoder.push(Block::new(&mut store, &format!("enc{s}"), cin, config.channels(s), k, seed));
            if s == 1 && config.location_mode == LocationMode::LocBam {
                let spec = LocBamSpec {
                    channels: config.channels(1),
                    reduction: config.locbam_reduction,
                    kernel: config.locbam_kernel,
                    pe_dim: config.pe_dim,
                    slope: config.leaky_slope,
                    downsample: 2,
                };
                let block = LocBam::new(&mut store, "locbam", spec, seed)?;
                if config.fusion_init == FusionInit::He {
                    he_fusion(&mut store, &block, seed);
                }
                locbam = Some(block);
            }
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for s in (0..config.depth - 1).rev() {
            let (cin, cout) = (config.channels(s + 1), config.channels(s));
            let wname = format!("dec{s}.up.weight");
            let weight = store.add(wname.clone(), he_normal(vec![cin, cout, 2, 2, 2], cin * 8, seed, &wname));
            let bias = store.add(format!("dec{s}.up.bias"), Tensor::zeros(vec![cout]));
            let block = Block::new(&mut store, &format!("dec{s}"), 2 * cout, cout, k, seed);
            decoder.push(UpStage { weight, bias, block });
        }
        let (c0, kc) = (config.channels(0), config.num_classes);
        let head_w = store.add("head.weight", he_normal(vec![kc, c0, 1, 1, 1], c0, seed, "head.weight"));
        let head_b = store.add("head.bias", Tensor::zeros(vec![kc]));
        Ok(Model {
            config: config.clone(),
            store,
            layout: Layout {
                encoder,
                locbam,
                decoder,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn locbam(&self) -> Option<&LocBam> {
        self.layout.locbam.as_ref()
    }

    /// Replaces the zero-initialized fusion weights with seeded random
    /// values so that the LocBAM path contributes from the first forward.
    pub fn randomize_fusion(&mut self, seed: u64) {
        if let Some(lb) = &self.layout.locbam {
            he_fusion(&mut self.store, lb, seed);
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        self.store.bind(g, trainable)
    }

    fn check_input(&self, shape: &[usize], locations: Option<&[PatchLocation]>) -> Result<()> {
        let c = &self.config;
        if shape.len() != 5 || shape[1] != c.in_channels {
            return Err(Error::shape(format!(
                "model expects [N, {}, D, H, W] input, got {shape:?}",
                c.in_channels
            )));
        }
        let div = c.size_divisor();
        if shape[2..].iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::shape(format!(
                "spatial extents {:?} must be positive multiples of {div}",
                &shape[2..]
            )));
        }
        if c.location_mode != LocationMode::None {
            let locs = locations.ok_or_else(|| {
                Error::invalid(format!("location mode {} requires patch locations", c.location_mode))
            })?;
            if locs.len() != shape[0] {
                return Err(Error::shape(format!("{} locations for a batch of {}", locs.len(), shape[0])));
            }
            for l in locs {
                if l.patch_shape[..] != shape[2..] {
                    return Err(Error::shape(format!(
                        "location describes a {:?} patch, input is {:?}",
                        l.patch_shape,
                        &shape[2..]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Records the forward pass into `g` and returns logits `[N, K, D, H, W]`.
    /// `locations` must hold one entry per sample unless the mode is `none`,
    /// in which case it is ignored.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &Bindings,
        input: Var,
        locations: Option<&[PatchLocation]>,
    ) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        self.check_input(&shape, locations)?;
        let mode = self.config.location_mode;
        let mut x = input;
        if mode == LocationMode::CoordConv {
            let locs = locations.expect("checked");
            let mut data = Vec::with_capacity(shape[0] * 3 * shape[2..].iter().product::<usize>());
            for l in locs {
                data.extend_from_slice(l.coord_channels::<T>().data());
            }
            let coords = g.constant(Tensor::new(vec![shape[0], 3, shape[2], shape[3], shape[4]], data)?);
            x = g.concat(&[input, coords], 1)?;
        }
        let layout = &self.layout;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (s, block) in layout.encoder.iter().enumerate() {
            if s > 0 {
                x = g.max_pool3d(x)?;
            }
            x = block.forward(g, vars, x, &self.config)?;
            if s == 1 {
                if let Some(lb) = &layout.locbam {
                    x = lb.forward(g, vars, x, locations.expect("checked"))?;
                }
            }
            skips.push(x);
        }
        skips.pop();
        for up in &layout.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let u = g.up_conv3d(x, vars[up.weight], vars[up.bias])?;
            let cat = g.concat(&[u, skip], 1)?;
            x = up.block.forward(g, vars, cat, &self.config)?;
        }
        g.conv3d(x, vars[layout.head_w], vars[layout.head_b], Conv3dSpec::default())
    }

    /// Inference convenience: logits for a batch without gradient tracking.
    pub fn predict(&self, input: &Tensor<T>, locations: Option<&[PatchLocation]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &vars, x, locations)?;
        Ok(g.value(out).clone())
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for p in self.store.params() {
            store.add(p.name(), p.value().cast());
        }
        Model {
            config: self.config.clone(),
            store,
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::location::BprMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(mode: LocationMode) -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            depth: 2,
            location_mode: mode,
            ..ModelConfig::default()
        }
    }

    fn input(shape: [usize; 5], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn loc(origin: [usize; 3], patch: usize) -> PatchLocation {
        PatchLocation::new(origin, [patch; 3], [32; 3], BprMap::spanning(32)).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            ModelConfig { depth: 1, ..ModelConfig::default() },
            ModelConfig { base_channels: 6, ..ModelConfig::default() },
            ModelConfig { pe_dim: 3, ..ModelConfig::default() },
            ModelConfig { kernel: 2, ..ModelConfig::default() },
            ModelConfig { num_classes: 1, ..ModelConfig::default() },
        ] {
            assert!(Model::<f32>::build(&bad, 0).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("locbam".parse::<LocationMode>().unwrap(), LocationMode::LocBam);
        assert_eq!("coordconv".parse::<LocationMode>().unwrap(), LocationMode::CoordConv);
        assert!("coord".parse::<LocationMode>().is_err());
        let c: ModelConfig = toml::from_str("location_mode = \"coordconv\"").unwrap();
        assert_eq!(c.location_mode, LocationMode::CoordConv);
        assert!(toml::from_str::<ModelConfig>("unknown = 1").is_err());
    }

    #[test]
    fn shared_backbone_initialized_identically() {
        let none = Model::<f32>::build(&config(LocationMode::None), 11).unwrap();
        let lb = Model::<f32>::build(&config(LocationMode::LocBam), 11).unwrap();
        assert!(lb.num_parameters() > none.num_parameters());
        for p in none.params().params() {
            let q = lb.params().params().iter().find(|q| q.name() == p.name()).unwrap();
            assert_eq!(p.value(), q.value(), "{}", p.name());
        }
        let again = Model::<f32>::build(&config(LocationMode::None), 11).unwrap();
        assert_eq!(none.params(), again.params());
    }

    #[test]
    fn coordconv_widens_first_layer() {
        let m = Model::<f32>::build(&config(LocationMode::CoordConv), 0).unwrap();
        let first = &m.params().params()[0];
        assert_eq!(first.name(), "enc0.conv1.weight");
        assert_eq!(first.value().shape()[1], 4);
    }

    #[test]
    fn baseline_ignores_location() {
        let m = Model::<f32>::build(&config(LocationMode::None), 1).unwrap();
        let x = input([1, 1, 8, 8, 8], 0);
        let a = m.predict(&x, Some(&[loc([0; 3], 8)])).unwrap();
        let b = m.predict(&x, Some(&[loc([20, 3, 9], 8)])).unwrap();
        let c = m.predict(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[1, 3, 8, 8, 8]);
    }

    #[test]
    fn coordconv_depends_on_location() {
        let m = Model::<f32>::build(&config(LocationMode::CoordConv), 1).unwrap();
        let x = input([1, 1, 8, 8, 8], 0);
        let a = m.predict(&x, Some(&[loc([0; 3], 8)])).unwrap();
        let b = m.predict(&x, Some(&[loc([20, 3, 9], 8)])).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-4);
    }

    #[test]
    fn locbam_shape_and_sensitivity() {
        let mut m = Model::<f32>::build(&config(LocationMode::LocBam), 1).unwrap();
        let x = input([1, 1, 16, 16, 16], 0);
        let a = m.predict(&x, Some(&[loc([0; 3], 16)])).unwrap();
        assert_eq!(a.shape(), &[1, 3, 16, 16, 16]);
        // zero fusion: the LocBAM path is silent
        let b = m.predict(&x, Some(&[loc([16, 0, 0], 16)])).unwrap();
        assert_eq!(a, b);
        m.randomize_fusion(3);
        let a = m.predict(&x, Some(&[loc([0; 3], 16)])).unwrap();
        let b = m.predict(&x, Some(&[loc([16, 0, 0], 16)])).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-5);
    }

    #[test]
    fn location_required_and_checked() {
        let m = Model::<f32>::build(&config(LocationMode::LocBam), 1).unwrap();
        let x = input([1, 1, 8, 8, 8], 0);
        assert!(m.predict(&x, None).is_err());
        assert!(m.predict(&x, Some(&[loc([0; 3], 4)])).is_err());
        let odd = input([1, 1, 6, 8, 7], 0);
        assert!(m.predict(&odd, Some(&[])).is_err());
    }
}
