//! Dense-array math shared by the learning modules: tensors, a small
//! reverse-mode tape, softmax cross-entropy, Adam and finite-difference
//! gradient checks.

mod tape;
mod tensor;

pub use tape::{softmax_in_place, Gradients, Tape, Var};
pub use tensor::{dot, norm, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

/// Deterministic generator for one named purpose under a run seed. Distinct
/// streams keep, say, prompt initialization independent of data shuffling.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable `log Σ exp(x)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index { index: target, len: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn for_tensor(t: &Tensor) -> Self {
        Self::new(t.len())
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(shape_err(format!(
            "adam: params {}, grads {}, moments {}",
            n,
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for ((p, &g), (m, v)) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Maximum per-coordinate relative error between `analytic` and central
/// finite differences of `loss_fn` around `point`.
pub fn grad_check<F>(mut loss_fn: F, point: &Tensor, analytic: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    if analytic.len() != point.len() {
        return Err(shape_err("grad_check: analytic gradient shape"));
    }
    if step <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = orig - step;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Domain(format!("non-finite loss probing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
