use rand::Rng;

use crate::datasets::{sample_minibatch, LabeledDataset, Shard};
use crate::error::{invalid, Error, Result};
use crate::models::{meta_gradient, Objective};

/// Result of a user's local training between two edge rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: Vec<f64>,
    /// Sum of the update directions applied, `Σ_τ g^τ`.
    pub grad_sum: Vec<f64>,
    pub last_batch_loss: f64,
}

fn check_rates(eta: f64, steps: usize) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return invalid(format!("learning rate {eta} must be finite and nonnegative"));
    }
    if steps == 0 {
        return invalid("local training needs at least one step");
    }
    Ok(())
}

fn apply_step(params: &mut [f64], grad_sum: &mut [f64], g: &[f64], eta: f64) -> Result<()> {
    for ((w, s), gi) in params.iter_mut().zip(grad_sum.iter_mut()).zip(g) {
        *w -= eta * gi;
        *s += gi;
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(Error::NumericDivergence("local parameters became non-finite".into()));
    }
    Ok(())
}

/// `steps` plain SGD steps `w ← w − η g(w, ξ)`, one fresh batch per step.
#[allow(clippy::too_many_arguments)]
pub fn local_update<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &LabeledDataset,
    shard: &Shard,
    eta: f64,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<LocalOutcome> {
    check_rates(eta, steps)?;
    let mut w = params.to_vec();
    let mut grad_sum = vec![0.0; w.len()];
    let mut last_batch_loss = f64::NAN;
    for _ in 0..steps {
        let batch = sample_minibatch(data, shard, batch_size, rng)?;
        let g = objective.gradient(&w, batch.view())?;
        last_batch_loss = g.batch_loss;
        apply_step(&mut w, &mut grad_sum, &g.values, eta)?;
    }
    Ok(LocalOutcome { params: w, grad_sum, last_batch_loss })
}

/// `steps` first-order meta-gradient steps. Each step draws an inner batch
/// and then an outer batch from the same stream.
#[allow(clippy::too_many_arguments)]
pub fn macfl_local_update<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &LabeledDataset,
    shard: &Shard,
    eta: f64,
    rho: f64,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<LocalOutcome> {
    check_rates(eta, steps)?;
    let mut w = params.to_vec();
    let mut grad_sum = vec![0.0; w.len()];
    let mut last_batch_loss = f64::NAN;
    for _ in 0..steps {
        let inner = sample_minibatch(data, shard, batch_size, rng)?;
        let outer = sample_minibatch(data, shard, batch_size, rng)?;
        let g = meta_gradient(objective, &w, inner.view(), outer.view(), rho)?;
        last_batch_loss = g.batch_loss;
        apply_step(&mut w, &mut grad_sum, &g.values, eta)?;
    }
    Ok(LocalOutcome { params: w, grad_sum, last_batch_loss })
}
