use crate::error::{Error, Result};

use super::{Graph, Real, Tensor, Var};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat coordinate of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item().as_f64())
}

/// Checks the gradient of the scalar map `f` with respect to every input.
///
/// Each coordinate is perturbed by `±eps` and the central difference
/// `(f(x+eps) - f(x-eps)) / (2 eps)` is compared with the reverse-mode
/// gradient using `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    compare(inputs, &analytic, eps, |probe| eval(&f, probe), |fp, fm| fp - fm)
}

/// [`grad_check`] of the scalar `sum(f(inputs) * r)` for a fixed tensor `r`.
///
/// The two perturbed outputs are differenced elementwise before projecting,
/// so outputs the coordinate does not touch cancel exactly instead of adding
/// the rounding error of a large sum.
pub fn grad_check_projected<T: Real, F>(f: F, inputs: &[Tensor<T>], r: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let scalar = |g: &mut Graph<T>, v: &[Var]| {
        let y = f(g, v)?;
        let rv = g.constant(r.clone());
        let m = g.mul(y, rv)?;
        Ok(g.sum(m))
    };
    let analytic = analytic_grads(&scalar, inputs)?;
    let output = |probe: &[Tensor<T>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = f(&mut g, &vars)?;
        let y = g.value(y);
        if y.shape() != r.shape() {
            return Err(Error::shape(format!("output {:?} does not match probe {:?}", y.shape(), r.shape())));
        }
        Ok(y.clone())
    };
    compare(inputs, &analytic, eps, output, |yp: Tensor<T>, ym: Tensor<T>| {
        yp.data()
            .iter()
            .zip(ym.data())
            .zip(r.data())
            .map(|((&a, &b), &w)| (a.as_f64() - b.as_f64()) * w.as_f64())
            .sum()
    })
}

fn analytic_grads<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Graph("grad_check needs a scalar-valued map".into()));
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Central differences of every coordinate against `analytic`. `eval` runs
/// the map and `delta` turns the two perturbed results into `f(x+eps) - f(x-eps)`.
fn compare<T: Real, V>(
    inputs: &[Tensor<T>],
    analytic: &[Tensor<T>],
    eps: f64,
    eval: impl Fn(&[Tensor<T>]) -> Result<V>,
    delta: impl Fn(V, V) -> f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = T::from_f64_lossy(x0.as_f64() + eps);
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = T::from_f64_lossy(x0.as_f64() - eps);
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = delta(fp, fm) / (2.0 * eps);
            let a = analytic[i].data()[j].as_f64();
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
