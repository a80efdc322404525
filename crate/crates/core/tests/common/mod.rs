#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runaway_core::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from zero, for inputs that feed a ReLU.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values on a 0.05 grid in random order, so no pooling window has near-ties.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
    Tensor::new(shape, values).unwrap()
}

pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs || err <= rel * numeric.abs()
}

/// Central finite differences of an `f64` scalar function of several tensors.
pub fn numeric_grads<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Analytic gradients of the `f32` instantiation.
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Tensor<f32>>
where
    F: Fn(&mut Tape<f32>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.cast()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect()
}

/// Compares f32 analytic gradients with f64 central differences.
pub fn compare(
    analytic: &[Tensor<f32>],
    numeric: &[Tensor<f64>],
    rel: f64,
    abs: f64,
) -> Result<(), String> {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            if !close(av as f64, nv, rel, abs) {
                return Err(format!("input {i} coord {j}: analytic {av} vs numeric {nv}"));
            }
        }
    }
    Ok(())
}

/// Instantiates the body once per precision and checks gradients.
#[macro_export]
macro_rules! check_grad {
    ($inputs:expr, $h:expr, |$t:ident, $v:ident| $body:expr) => {{
        let inputs: &[runaway_core::tensor::Tensor<f64>] = &$inputs;
        let analytic = common::analytic_grads(
            inputs,
            |$t: &mut runaway_core::tensor::Tape<f32>, $v: &[runaway_core::tensor::Var]| $body,
        );
        let numeric = common::numeric_grads(
            inputs,
            $h,
            |$t: &mut runaway_core::tensor::Tape<f64>, $v: &[runaway_core::tensor::Var]| $body,
        );
        common::compare(&analytic, &numeric, common::REL_TOL, common::ABS_TOL)
    }};
}

/// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random weights,
/// so every output coordinate contributes a distinct adjoint.
pub fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, out: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(shape, |i| S::from_f64(((i * 7919 % 97) as f64) / 97.0 - 0.4));
    let w = tape.constant(weights)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
