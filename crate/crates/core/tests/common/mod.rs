#![allow(dead_code)]

pub mod synth;

use minis2t::tensor::{Graph, Tensor, Var};
use minis2t::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error with a small floor on the denominator so that gradients
/// that are essentially zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares tape gradients of `f` against central finite differences.
///
/// The op output is reduced to a scalar with fixed pseudo-random weights.
/// Returns the largest relative error over every input element.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).expect("op failed");
        let n = g.value(out).numel();
        let mut wr = rng(4242);
        let w: Vec<f64> = (0..n).map(|_| wr.gen_range(0.5..1.5)).collect();
        let loss = g.weighted_sum(out, w).unwrap();
        let value = g.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        (value, vars.iter().map(|v| grads.wrt(*v).unwrap().clone()).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}
