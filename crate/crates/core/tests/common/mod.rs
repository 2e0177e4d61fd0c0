//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod suites;

use vega_core::rng::{self, Domain};
use vega_core::{Tape, Tensor, Var};

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Fixed pseudo-random projection weights so every output element feeds
/// the checked scalar with a distinct upstream gradient.
pub fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Domain::Heldout, 99);
    (0..len).map(|_| rng::normal(&mut r)).collect()
}

fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let w = projection(tape.value(out).len(), seed);
    let w = tape.constant(Tensor::new(&shape, w).unwrap());
    let y = tape.mul(out, w).unwrap();
    tape.sum(y)
}

/// Compares reverse-mode gradients of `f` with central finite differences
/// at step `h` for every element of every input. Returns the worst relative
/// error and where it occurred.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> (f64, String)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let s = project(&mut tape, out, 7);
        tape.value(s).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let s = project(&mut tape, out, 7);
    tape.backward(s).unwrap();

    let mut worst = (0.0, String::new());
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = rel_err(analytic[e], numeric);
            if err > worst.0 {
                worst = (err, format!("input {k} element {e}: analytic {} numeric {numeric}", analytic[e]));
            }
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed, Domain::Heldout, 1);
    Tensor::new(shape, (0..n).map(|_| scale * rng::normal(&mut r)).collect()).unwrap()
}
