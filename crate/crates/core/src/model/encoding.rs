use crate::tensor::{Real, Tensor};

/// Sinusoidal encoding `[pe_dim, L]` of global coordinates: channel `2i`
/// holds `sin(c / w_i)` and channel `2i + 1` holds `cos(c / w_i)` with
/// `w_i = 10000^(2i / pe_dim)`.
pub fn positional_encoding<T: Real>(coords: &[f64], pe_dim: usize) -> Tensor<T> {
    let len = coords.len();
    let mut data = vec![T::zero(); pe_dim * len];
    for i in 0..pe_dim / 2 {
        let omega = 10000f64.powf(2.0 * i as f64 / pe_dim as f64);
        for (l, &c) in coords.iter().enumerate() {
            data[2 * i * len + l] = T::from_f64_lossy((c / omega).sin());
            data[(2 * i + 1) * len + l] = T::from_f64_lossy((c / omega).cos());
        }
    }
    Tensor::new(vec![pe_dim, len], data).expect("encoding shape")
}
