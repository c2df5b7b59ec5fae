//! Browser bindings for the mobility model, the attention weights and the
//! convergence bounds. Each export is a thin wrapper over a plain function
//! so the numerics can be tested natively.

use mobifl::analysis::{eta_cap, hfl_bound, macfl_bound, BoundInputs};
use mobifl::fedcore::{attention_weights, AttentionSign, CosineKind};
use mobifl::mobility::{build_linear_topology, occupancy, propagate_marginal, Population, TransitionMatrix};
use mobifl::Error;
use wasm_bindgen::prelude::*;

fn linear_chain(clusters: usize, p_s: f64) -> Result<TransitionMatrix, Error> {
    TransitionMatrix::with_uniform_stay(&build_linear_topology(clusters)?, p_s)
}

/// Marginal of one user on a linear chain, starting in `start`, after
/// `0..=steps` transitions. Row-major, `steps + 1` rows of `clusters`.
pub fn marginal_path(clusters: usize, p_s: f64, start: usize, steps: usize) -> Result<Vec<f64>, Error> {
    let p = linear_chain(clusters, p_s)?;
    if start >= clusters {
        return Err(Error::InvalidArgument(format!("start cluster {start} of {clusters}")));
    }
    let mut pi = vec![0.0; clusters];
    pi[start] = 1.0;
    let mut out = pi.clone();
    for _ in 0..steps {
        pi = propagate_marginal(&pi, std::slice::from_ref(&p))?;
        out.extend_from_slice(&pi);
    }
    Ok(out)
}

/// Expected cluster sizes for `users` users that all follow the marginal
/// after `steps` transitions from `start`.
pub fn expected_sizes(users: usize, clusters: usize, p_s: f64, start: usize, steps: usize) -> Result<Vec<f64>, Error> {
    let path = marginal_path(clusters, p_s, start, steps)?;
    let last = path[steps * clusters..].to_vec();
    let dists = vec![last; users];
    Ok(occupancy(Population::Marginal(&dists), users, &linear_chain(clusters, p_s)?)?.sizes)
}

/// Attention weights of `candidates` (row-major, `dim` columns) against `anchor`.
pub fn attention(candidates: &[f64], anchor: &[f64], sigma: f64, positive: bool) -> Result<Vec<f64>, Error> {
    let dim = anchor.len();
    if dim == 0 || candidates.is_empty() || !candidates.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "{} candidate values do not split into rows of {dim}",
            candidates.len()
        )));
    }
    let rows: Vec<&[f64]> = candidates.chunks(dim).collect();
    let sign = if positive { AttentionSign::Positive } else { AttentionSign::Negative };
    attention_weights(&rows, anchor, sigma, CosineKind::Standard, sign)
}

/// Which bound a curve evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Hfl,
    Macfl,
}

/// Bound value for κ₁ = 1..=`kappa1_max` with everything else at the
/// reference inputs for `users` and `clusters`. Points at or above the
/// learning-rate cap, or with p_s = 0 for HFL, are NaN.
pub fn bound_curve(
    kind: BoundKind,
    users: usize,
    clusters: usize,
    p_s: f64,
    eta: f64,
    kappa2: usize,
    kappa1_max: usize,
) -> Vec<f64> {
    (1..=kappa1_max)
        .map(|k1| {
            let mut i = BoundInputs::uniform(users, clusters);
            i.p_s = p_s;
            i.eta = eta;
            i.kappa1 = k1;
            i.kappa2 = kappa2;
            let v = match kind {
                BoundKind::Hfl => hfl_bound(&i),
                BoundKind::Macfl => macfl_bound(&i),
            };
            v.map(|b| b.value).unwrap_or(f64::NAN)
        })
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = marginalPath)]
pub fn marginal_path_js(clusters: usize, p_s: f64, start: usize, steps: usize) -> Result<Vec<f64>, JsError> {
    marginal_path(clusters, p_s, start, steps).map_err(js)
}

#[wasm_bindgen(js_name = expectedSizes)]
pub fn expected_sizes_js(
    users: usize,
    clusters: usize,
    p_s: f64,
    start: usize,
    steps: usize,
) -> Result<Vec<f64>, JsError> {
    expected_sizes(users, clusters, p_s, start, steps).map_err(js)
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_js(candidates: &[f64], anchor: &[f64], sigma: f64, positive: bool) -> Result<Vec<f64>, JsError> {
    attention(candidates, anchor, sigma, positive).map_err(js)
}

#[wasm_bindgen(js_name = boundCurve)]
pub fn bound_curve_js(
    macfl: bool,
    users: usize,
    clusters: usize,
    p_s: f64,
    eta: f64,
    kappa2: usize,
    kappa1_max: usize,
) -> Vec<f64> {
    let kind = if macfl { BoundKind::Macfl } else { BoundKind::Hfl };
    bound_curve(kind, users, clusters, p_s, eta, kappa2, kappa1_max)
}

/// Largest admissible learning rate (exclusive) for unit smoothness.
#[wasm_bindgen(js_name = etaCap)]
pub fn eta_cap_js(kappa1: usize, kappa2: usize) -> Result<f64, JsError> {
    eta_cap(1.0, kappa1, kappa2).map_err(js)
}
