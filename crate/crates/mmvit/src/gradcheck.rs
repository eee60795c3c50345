//! Finite-difference gradient verification.
//!
//! The checker rebuilds the computation from scratch for every probe, so
//! it only asks of the graph builder that it is a pure function of its
//! input tensors. All probing runs in f64; central differences with
//! h = 1e-4 resolve roughly 8 significant digits, far tighter than the
//! 1e-3 relative tolerance used by callers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

/// Builds a scalar loss from leaf vars registered for `inputs`, in order.
pub type LossFn<'a> = &'a dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>;

fn eval(inputs: &[Tensor<f64>], build: LossFn) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&tape, &vars)?;
    Ok(tape.value(loss).item())
}

fn perturbed(inputs: &[Tensor<f64>], which: usize, coord: usize, delta: f64) -> Vec<Tensor<f64>> {
    let mut out = inputs.to_vec();
    let mut t = out[which].clone();
    t.data_mut()[coord] += delta;
    out[which] = t;
    out
}

/// Relative-error criterion: |a−b| ≤ tol·max(1, |a|, |b|).
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (a.abs().max(b.abs()).max(1.0))
}

/// Compare analytic gradients against central differences at every
/// coordinate of every input. Inputs must have `requires_grad` set.
pub fn check_grads(inputs: &[Tensor<f64>], eps: f64, tol: f64, build: LossFn) -> std::result::Result<(), String> {
    let coords: Vec<Vec<usize>> =
        inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_grads_at(inputs, &coords, eps, tol, build)
}

/// Like [`check_grads`] but probing at most `samples` coordinates per
/// input, chosen deterministically from `seed`. Makes full-model checks
/// affordable: two forward passes per probe instead of two per scalar.
pub fn check_grads_sampled(
    inputs: &[Tensor<f64>],
    samples: usize,
    seed: u64,
    eps: f64,
    tol: f64,
    build: LossFn,
) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let mut all: Vec<usize> = (0..t.numel()).collect();
            all.shuffle(&mut rng);
            all.truncate(samples);
            all
        })
        .collect();
    check_grads_at(inputs, &coords, eps, tol, build)
}

fn check_grads_at(
    inputs: &[Tensor<f64>],
    coords: &[Vec<usize>],
    eps: f64,
    tol: f64,
    build: LossFn,
) -> std::result::Result<(), String> {
    // Analytic pass once.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&tape, &vars).map_err(|e| format!("forward failed: {e}"))?;
    tape.backward(loss).map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| tape.grad(v)).collect();

    for (which, input) in inputs.iter().enumerate() {
        if !input.needs_grad() {
            continue;
        }
        let grad = analytic[which]
            .as_ref()
            .ok_or_else(|| format!("input {which}: no gradient reached it"))?;
        for &coord in &coords[which] {
            let fp = eval(&perturbed(inputs, which, coord, eps), build)
                .map_err(|e| format!("probe failed: {e}"))?;
            let fm = eval(&perturbed(inputs, which, coord, -eps), build)
                .map_err(|e| format!("probe failed: {e}"))?;
            let fd = (fp - fm) / (2.0 * eps);
            let an = grad.data()[coord];
            if !close(an, fd, tol) {
                return Err(format!(
                    "input {which} coord {coord}: analytic {an:.9e} vs finite-diff {fd:.9e} \
                     (tol {tol:.1e})"
                ));
            }
        }
    }
    Ok(())
}
