use super::{Real, Tensor};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    velocity: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        let velocity = vec![T::zero(); value.numel()];
        Param {
            name: name.into(),
            value,
            grad,
            velocity,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        debug_assert_eq!(g.shape(), self.grad.shape());
        self.grad
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b);
    }
}

/// Stochastic gradient descent with (optionally Nesterov) momentum and
/// decoupled-from-loss L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            nesterov: true,
        }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step<T: Real>(&self, params: &mut [Param<T>]) {
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for p in params {
            let Param {
                value,
                grad,
                velocity,
                ..
            } = p;
            for ((w, &g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(velocity) {
                let g = g + wd * *w;
                *v = mu * *v + g;
                let d = if self.nesterov { g + mu * *v } else { *v };
                *w = *w - lr * d;
            }
        }
    }
}
