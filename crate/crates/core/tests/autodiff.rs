mod common;

use locseg::location::{BprMap, PatchLocation};
use locseg::model::{LocationMode, Model, ModelConfig};
use locseg::tensor::{Axis3, Conv3dSpec, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn random(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Two scalar functions sharing the leaves `x` and `w`.
fn f(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Var {
    let y = g.conv3d(x, w, b, Conv3dSpec::same(3)).unwrap();
    let y = g.leaky_relu(y, 0.1);
    g.sum(y)
}

fn h(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Var {
    let y = g.conv3d(x, w, b, Conv3dSpec::default()).unwrap();
    let y = g.sigmoid(y);
    let p = g.pool_avg_over_axes(x, Axis3::H).unwrap();
    let (s, t) = (g.sum(y), g.sum(p));
    g.add(s, t).unwrap()
}

fn grads(leaves: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, Var, Var, Var, Var) -> Var) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let v: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, v[0], v[1], v[2], v[3]);
    g.backward(out).unwrap();
    v.iter().map(|&x| g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(x).to_vec()))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), c in 1usize..3, d in 1usize..5, e in 1usize..5) {
        let mut rng = common::rng(seed);
        let leaves = vec![
            random(&mut rng, vec![1, c, d, e, 3]),
            random(&mut rng, vec![2, c, 3, 3, 3]),
            random(&mut rng, vec![2]),
            random(&mut rng, vec![2, c, 1, 1, 1]),
        ];
        let gf = grads(&leaves, |g, x, w, b, _| f(g, x, w, b));
        let gh = grads(&leaves, |g, x, _, b, w1| h(g, x, w1, b));
        let both = grads(&leaves, |g, x, w, b, w1| {
            let a = f(g, x, w, b);
            let c = h(g, x, w1, b);
            g.add(a, c).unwrap()
        });
        for ((a, b), s) in gf.iter().zip(&gh).zip(&both) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(s.data()) {
                prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn forward_backward_is_bitwise_reproducible(seed in 0u64..1000, mode in 0usize..3) {
        let location_mode = [LocationMode::None, LocationMode::CoordConv, LocationMode::LocBam][mode];
        let config = ModelConfig { base_channels: 4, depth: 2, location_mode, ..Default::default() };
        let model = Model::<f32>::build(&config, seed).unwrap();
        let mut rng = common::rng(seed);
        let input = random(&mut rng, vec![2, 1, 8, 8, 8]).cast::<f32>();
        let locs: Vec<PatchLocation> = (0..2)
            .map(|i| PatchLocation::new([4 * i, 0, 0], [8; 3], [16, 8, 8], BprMap::spanning(16)).unwrap())
            .collect();
        let run = || {
            let mut g = Graph::new();
            let bindings = model.params().bind(&mut g, true);
            let x = g.constant(input.clone());
            let y = model.forward(&mut g, &bindings, x, Some(&locs)).unwrap();
            let target: Vec<u8> = (0..2 * 512).map(|i| (i % 3) as u8).collect();
            let loss = g.dice_ce_loss(y, &target).unwrap();
            g.backward(loss).unwrap();
            let mut bits: Vec<u32> = g.value(loss).data().iter().map(|v| v.to_bits()).collect();
            for &v in bindings.vars() {
                bits.extend(g.grad(v).unwrap().data().iter().map(|v| v.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
