use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Param, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered collection of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

/// Graph variables of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Wraps variables already holding each parameter, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| g.leaf(p.value().clone(), trainable))
                .collect(),
        )
    }

    /// Adds the gradients computed in `g` to each parameter's accumulator.
    pub fn accumulate(&mut self, g: &Graph<T>, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }
}

/// Deterministic per-parameter seed: independent of creation order, so a
/// layer initializes the same way whichever optional layers surround it.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// He-style normal initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal<T: Real>(shape: Vec<usize>, fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
    Tensor::new(shape, data).expect("init shape")
}
