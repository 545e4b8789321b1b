use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite difference of `f` with respect to every entry of `values`.
pub fn numeric_grad(values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + h;
            let plus = f(values);
            values[i] = orig - h;
            let minus = f(values);
            values[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error, with a floor so near-zero gradients compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Worst relative error per trainable tensor of `trained` (which holds the
/// analytic gradients of `objective`) against finite differences on `base`.
pub fn param_grad_errors<M: crate::nn::Module + Clone>(
    base: &M,
    trained: &M,
    mut objective: impl FnMut(&mut M) -> f64,
) -> Vec<(String, f64)> {
    let mut grads = Vec::new();
    trained.visit("", &mut |name, p| {
        if p.trainable {
            grads.push((name.to_string(), p.grad.clone()))
        }
    });
    grads
        .into_iter()
        .map(|(name, analytic)| {
            let mut values = Vec::new();
            base.visit("", &mut |n, p| {
                if n == name {
                    values = p.value.clone()
                }
            });
            let num = numeric_grad(&mut values, |v| {
                let mut probe = base.clone();
                probe.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.copy_from_slice(v)
                    }
                });
                objective(&mut probe)
            });
            let err = max_rel_err(&analytic, &num);
            (name, err)
        })
        .collect()
}
