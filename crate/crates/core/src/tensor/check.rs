//! Central-difference gradient checking in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-4;

/// A scalar function of a parameter set with a hand-written gradient.
pub trait Differentiable {
    type Params: ParamSet<f64> + Clone;

    fn name(&self) -> &str;

    fn loss(&self, params: &Self::Params) -> Result<f64>;

    /// Analytic gradient, laid out exactly like `params`.
    fn gradient(&self, params: &Self::Params) -> Result<Self::Params>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` with central differences over
/// every learnable scalar of `params`.
pub fn grad_check<D: Differentiable>(f: &D, params: &D::Params, eps: f64) -> Result<GradCheckReport> {
    let unstable = || Error::NumericInstability {
        op: f.name().to_string(),
    };
    let grads = f.gradient(params)?;
    let mut analytic: Vec<(String, Tensor<f64>)> = Vec::new();
    grads.visit("", &mut |name, kind, t| {
        if kind.is_learnable() {
            analytic.push((name.to_string(), t.clone()));
        }
    });
    if analytic.iter().any(|(_, t)| !t.all_finite()) {
        return Err(unstable());
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        name: f.name().to_string(),
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (slot, (name, grad)) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let plus = perturbed_loss(f, &mut work, slot, e, eps)?;
            let minus = perturbed_loss(f, &mut work, slot, e, -eps)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(unstable());
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstEntry {
                    tensor: name.clone(),
                    index: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Loss with the `e`-th element of the `slot`-th learnable tensor shifted by
/// `delta`; the element is restored before returning.
fn perturbed_loss<D: Differentiable>(
    f: &D,
    work: &mut D::Params,
    slot: usize,
    e: usize,
    delta: f64,
) -> Result<f64> {
    let mut original = 0.0;
    nudge(work, slot, e, |v| {
        original = *v;
        *v += delta;
    });
    let loss = f.loss(work);
    nudge(work, slot, e, |v| *v = original);
    loss
}

fn nudge<P: ParamSet<f64>>(work: &mut P, slot: usize, e: usize, mut edit: impl FnMut(&mut f64)) {
    let mut k = 0;
    work.visit_mut("", &mut |_, kind, t| {
        if !kind.is_learnable() {
            return;
        }
        if k == slot {
            edit(&mut t.data_mut()[e]);
        }
        k += 1;
    });
}

/// Deterministic uniform(−1, 1) tensor used to reduce a block output to a
/// scalar loss `Σ out ⊙ probe`.
pub fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}
