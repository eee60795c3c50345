//! AdamW with decoupled weight decay: the decay term multiplies the
//! parameter directly instead of being folded into the gradient, so
//! decay strength does not depend on the adaptive step size.

use std::collections::HashMap;

use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter, aligned with
/// the parameter tree's leaf order.
#[derive(Debug)]
pub struct OptimizerState<F: Scalar> {
    pub step: u64,
    slots: Vec<(String, Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ModelParams<Tensor<F>>) -> Self {
        let slots = params
            .leaves()
            .into_iter()
            .map(|(name, t)| {
                let shape = t.shape().to_vec();
                (name, Tensor::zeros(shape.clone()), Tensor::zeros(shape))
            })
            .collect();
        OptimizerState { step: 0, slots }
    }
}

/// One optimizer step:
///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
///   θ ← θ − lr·( m̂/(√v̂ + eps) + wd·θ )
/// with bias-corrected m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ). Every parameter
/// must have a gradient entry (the trainer substitutes zeros for
/// parameters the graph provably does not reach).
pub fn adamw_step<F: Scalar>(
    params: &mut ModelParams<Tensor<F>>,
    grads: &HashMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);

    for (slot, (name, theta)) in state.slots.iter_mut().zip(params.leaves_mut()) {
        debug_assert_eq!(slot.0, name, "optimizer slots out of order");
        let g = grads
            .get(&name)
            .ok_or_else(|| TrainError::MissingGrad { name: name.clone() })?;
        if g.shape() != theta.shape() {
            return Err(TrainError::GradShape {
                name,
                got: g.shape().to_vec(),
                want: theta.shape().to_vec(),
            });
        }
        let (m, v) = (slot.1.data_mut(), slot.2.data_mut());
        let th = theta.data_mut();
        for i in 0..th.len() {
            let gi = g.data()[i].as_f64();
            let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * gi * gi;
            m[i] = F::from_f64(mi);
            v[i] = F::from_f64(vi);
            let update = (mi / c1) / ((vi / c2).sqrt() + EPS);
            let old = th[i].as_f64();
            th[i] = F::from_f64(old * (1.0 - lr * weight_decay) - lr * update);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. No-op when `max_norm <= 0`. Accumulation
/// runs in sorted-name order so the norm is run-to-run reproducible.
pub fn clip_grad_norm<F: Scalar>(grads: &mut HashMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut sq = 0.0f64;
    for name in &names {
        for x in grads[*name].data() {
            let v = x.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = F::from_f64(x.as_f64() * scale);
            }
        }
    }
    norm
}
