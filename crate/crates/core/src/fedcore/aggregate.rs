//! Edge and cloud aggregation rules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;

/// How the similarity between two parameter vectors is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineKind {
    /// `<x, y> / (|x| |y|)`.
    #[default]
    Standard,
    /// `<x, y> / (|x|^2 |y|^2)`.
    SquaredNorm,
}

/// Sign of the exponent in the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSign {
    /// `exp(-sigma cos)`: models similar to the anchor get less weight.
    #[default]
    Negative,
    /// `exp(+sigma cos)`: similar models get more weight.
    Positive,
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    similarity(x, y, CosineKind::Standard)
}

pub fn similarity(x: &[f64], y: &[f64], kind: CosineKind) -> Result<f64> {
    if x.len() != y.len() {
        return invalid(format!("vectors of length {} and {}", x.len(), y.len()));
    }
    let nx: f64 = x.iter().map(|v| v * v).sum();
    let ny: f64 = y.iter().map(|v| v * v).sum();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(match kind {
        CosineKind::Standard => (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0),
        CosineKind::SquaredNorm => dot / (nx * ny),
    })
}

/// Softmax over `sign * sigma * cos(candidate_k, anchor)`.
pub fn attention_weights(
    candidates: &[&[f64]],
    anchor: &[f64],
    sigma: f64,
    kind: CosineKind,
    sign: AttentionSign,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return invalid("attention over an empty candidate list");
    }
    if !sigma.is_finite() {
        return invalid(format!("attention temperature {sigma} is not finite"));
    }
    let k = candidates.len();
    if sigma == 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let s = match sign {
        AttentionSign::Negative => -sigma,
        AttentionSign::Positive => sigma,
    };
    let scores =
        candidates.iter().map(|c| similarity(c, anchor, kind).map(|cos| s * cos)).collect::<Result<Vec<f64>>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub(crate) fn check_simplex(weights: &[f64], what: &str) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return invalid(format!("{what} contains weight {w}"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return invalid(format!("{what} sums to {total}, not 1"));
    }
    Ok(())
}

/// `sum_k w_k x_k`, accumulated in input order. Bitwise-identical inputs are
/// returned as they are, so averaging copies of one model is exact.
pub fn convex_combination(inputs: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if inputs.is_empty() || inputs.len() != weights.len() {
        return invalid(format!("{} inputs with {} weights", inputs.len(), weights.len()));
    }
    let len = inputs[0].len();
    if inputs.iter().any(|x| x.len() != len) {
        return invalid("inputs of different lengths");
    }
    if inputs[1..].iter().all(|x| x.iter().zip(inputs[0]).all(|(a, b)| a.to_bits() == b.to_bits())) {
        return Ok(inputs[0].to_vec());
    }
    let mut out = vec![0.0; len];
    for (x, &w) in inputs.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Per-user and per-cluster aggregation weights of one HFL round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    /// `alpha_user[m] = alpha_user_in_cluster[m] * alpha_cluster[cluster_of[m]]`.
    pub alpha_user: Vec<f64>,
    pub alpha_user_in_cluster: Vec<f64>,
    pub alpha_cluster: Vec<f64>,
    pub cluster_of: Vec<usize>,
}

impl AggregationWeights {
    /// Uniform inside each cluster, clusters weighted by occupancy `S_n / M`.
    pub fn uniform(cluster_of: &[usize], n_clusters: usize) -> Result<Self> {
        let m = cluster_of.len();
        if m == 0 {
            return invalid("no users");
        }
        let mut sizes = vec![0usize; n_clusters];
        for &c in cluster_of {
            if c >= n_clusters {
                return invalid(format!("cluster {c} of {n_clusters}"));
            }
            sizes[c] += 1;
        }
        let alpha_user_in_cluster: Vec<f64> = cluster_of.iter().map(|&c| 1.0 / sizes[c] as f64).collect();
        let alpha_cluster: Vec<f64> = sizes.iter().map(|&s| s as f64 / m as f64).collect();
        let alpha_user = cluster_of.iter().zip(&alpha_user_in_cluster).map(|(&c, a)| a * alpha_cluster[c]).collect();
        Ok(Self { alpha_user, alpha_user_in_cluster, alpha_cluster, cluster_of: cluster_of.to_vec() })
    }

    /// Checks every simplex and the product decomposition.
    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.alpha_user, "alpha_user")?;
        check_simplex(&self.alpha_cluster, "alpha_cluster")?;
        for n in 0..self.alpha_cluster.len() {
            let inside: Vec<f64> = self
                .cluster_of
                .iter()
                .zip(&self.alpha_user_in_cluster)
                .filter(|(&c, _)| c == n)
                .map(|(_, &a)| a)
                .collect();
            if !inside.is_empty() {
                check_simplex(&inside, &format!("alpha_user_in_cluster of cluster {n}"))?;
            }
        }
        for (m, &c) in self.cluster_of.iter().enumerate() {
            let prod = self.alpha_user_in_cluster[m] * self.alpha_cluster[c];
            if (prod - self.alpha_user[m]).abs() > SIMPLEX_TOL {
                return invalid(format!("alpha_user[{m}] is not the product of its cluster weights"));
            }
        }
        Ok(())
    }
}

/// Gradient-sum form of the HFL edge rule:
/// `w_c − η Σ_m α_m I_m Σ_τ g_m^τ` over the users that started the round here.
pub fn hfl_edge_update(
    cluster_param: &[f64],
    user_grad_sums: &[&[f64]],
    indicators: &[bool],
    weights: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    if user_grad_sums.len() != indicators.len() || indicators.len() != weights.len() {
        return invalid("grad sums, indicators and weights differ in length");
    }
    if !weights.is_empty() {
        check_simplex(weights, "intra-cluster weights")?;
    }
    let mut out = cluster_param.to_vec();
    for ((g, &up), &a) in user_grad_sums.iter().zip(indicators).zip(weights) {
        if !up {
            continue;
        }
        if g.len() != out.len() {
            return invalid("gradient sum length differs from the cluster model");
        }
        for (o, gi) in out.iter_mut().zip(g.iter()) {
            *o -= eta * a * gi;
        }
    }
    Ok(out)
}

/// Model form of the same rule, used by the simulator: users that uploaded
/// contribute their final local model, the weight of those that did not
/// stays on the current cluster model. Equal to [`hfl_edge_update`] because
/// every member started from `cluster_param`.
pub fn hfl_edge_update_models(
    cluster_param: &[f64],
    user_params: &[&[f64]],
    indicators: &[bool],
    weights: &[f64],
) -> Result<Vec<f64>> {
    if user_params.len() != indicators.len() || indicators.len() != weights.len() {
        return invalid("user models, indicators and weights differ in length");
    }
    if weights.is_empty() || indicators.iter().all(|&up| !up) {
        return Ok(cluster_param.to_vec());
    }
    check_simplex(weights, "intra-cluster weights")?;
    let mut inputs: Vec<&[f64]> = Vec::with_capacity(user_params.len() + 1);
    let mut w = Vec::with_capacity(user_params.len() + 1);
    let mut stale = 0.0;
    for ((p, &up), &a) in user_params.iter().zip(indicators).zip(weights) {
        if up {
            inputs.push(p);
            w.push(a);
        } else {
            stale += a;
        }
    }
    if stale > 0.0 {
        inputs.push(cluster_param);
        w.push(stale);
    }
    convex_combination(&inputs, &w)
}

/// `w_g = Σ_n α_n w_n`. The caller broadcasts the result to every cluster.
pub fn hfl_cloud_update(cluster_params: &[&[f64]], alpha_cluster: &[f64]) -> Result<Vec<f64>> {
    check_simplex(alpha_cluster, "alpha_cluster")?;
    convex_combination(cluster_params, alpha_cluster)
}

/// Attention-weighted average of the models that arrived at a cluster,
/// anchored at the cluster's previous model. No arrivals: the previous model
/// carries over.
pub fn macfl_edge_update(
    previous_cluster_param: &[f64],
    arrived_user_params: &[&[f64]],
    sigma1: f64,
    kind: CosineKind,
    sign: AttentionSign,
) -> Result<Vec<f64>> {
    if arrived_user_params.is_empty() {
        return Ok(previous_cluster_param.to_vec());
    }
    let beta = attention_weights(arrived_user_params, previous_cluster_param, sigma1, kind, sign)?;
    convex_combination(arrived_user_params, &beta)
}

/// Attention-weighted average of all cluster models, anchored at the global
/// model of the previous cloud round.
pub fn macfl_cloud_update(
    previous_global_param: &[f64],
    cluster_params: &[&[f64]],
    sigma2: f64,
    kind: CosineKind,
    sign: AttentionSign,
) -> Result<Vec<f64>> {
    if cluster_params.is_empty() {
        return invalid("cloud update without cluster models");
    }
    let beta = attention_weights(cluster_params, previous_global_param, sigma2, kind, sign)?;
    convex_combination(cluster_params, &beta)
}
