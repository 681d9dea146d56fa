use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst relative error between analytic and central-difference partials of
/// the scalar built by `f` from `inputs`.
///
/// The denominator of each relative error is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
        for i in 0..input.len() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + eps;
            let hi = eval(&probe)?;
            probe[k].data_mut()[i] = x - eps;
            let lo = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Reduces `v` to a scalar by a fixed pseudo-random weighting, so that every
/// output element contributes a distinct amount to the checked gradient.
pub fn random_projection(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(g.shape(v), |_| rng.random_range(-1.0..1.0));
    let w = g.constant(weights);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

/// Standard-normal test tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}
