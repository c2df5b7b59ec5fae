//! Convergence-bound evaluators and empirical estimates of the constants
//! they depend on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_minibatch, LabeledDataset, Shard};
use crate::error::{invalid, Error, Result};
use crate::fedcore::AggregationWeights;
use crate::models::{meta_gradient, Objective};

/// Aggregation weights as seen by the bounds: per user, the global weight
/// and the weight inside the user's cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundWeights {
    /// `α_c = 1/N`, `α_u = 1/M`, `α^c = N/M`.
    Uniform {
        users: usize,
        clusters: usize,
    },
    Explicit {
        user: Vec<f64>,
        user_in_cluster: Vec<f64>,
    },
}

impl BoundWeights {
    /// `(α_u, α^c)` vectors.
    pub fn resolve(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            BoundWeights::Uniform { users, clusters } => {
                let (m, n) = (*users, *clusters);
                if m == 0 || n == 0 || n > m {
                    return invalid(format!("uniform weights need 1 <= clusters <= users, got N={n}, M={m}"));
                }
                Ok((vec![1.0 / m as f64; m], vec![n as f64 / m as f64; m]))
            }
            BoundWeights::Explicit { user, user_in_cluster } => {
                if user.is_empty() || user.len() != user_in_cluster.len() {
                    return invalid("explicit weights: user and user_in_cluster must be nonempty and equal length");
                }
                if user.iter().chain(user_in_cluster).any(|w| !(0.0..=1.0).contains(w)) {
                    return invalid("explicit weights must lie in [0, 1]");
                }
                let total = neumaier(user.iter().copied());
                if (total - 1.0).abs() > 1e-9 {
                    return invalid(format!("user weights sum to {total}, not 1"));
                }
                Ok((user.clone(), user_in_cluster.clone()))
            }
        }
    }
}

/// Everything the closed-form bounds take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub eta: f64,
    pub p_s: f64,
    /// Cloud rounds `T`.
    pub rounds: usize,
    pub lipschitz: f64,
    pub sigma: f64,
    pub grad_bound: f64,
    pub eps_c: f64,
    pub eps_g: f64,
    pub kappa1: usize,
    pub kappa2: usize,
    pub f0_gap: f64,
    pub weights: BoundWeights,
    /// Attention-side weights; the HFL weights are reused when absent.
    #[serde(default)]
    pub beta: Option<BoundWeights>,
    #[serde(default)]
    pub sigma_m: f64,
    #[serde(default)]
    pub eps_mc: f64,
    #[serde(default)]
    pub eps_mg: f64,
}

impl BoundInputs {
    /// Uniform weights and zero MACFL constants; a convenient starting point.
    pub fn uniform(users: usize, clusters: usize) -> Self {
        Self {
            eta: 0.001,
            p_s: 0.5,
            rounds: 100,
            lipschitz: 1.0,
            sigma: 1.0,
            grad_bound: 1.0,
            eps_c: 0.1,
            eps_g: 0.1,
            kappa1: 20,
            kappa2: 1,
            f0_gap: 1.0,
            weights: BoundWeights::Uniform { users, clusters },
            beta: None,
            sigma_m: 0.0,
            eps_mc: 0.0,
            eps_mg: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let named = [
            ("eta", self.eta),
            ("p_s", self.p_s),
            ("lipschitz", self.lipschitz),
            ("sigma", self.sigma),
            ("grad_bound", self.grad_bound),
            ("eps_c", self.eps_c),
            ("eps_g", self.eps_g),
            ("f0_gap", self.f0_gap),
            ("sigma_m", self.sigma_m),
            ("eps_mc", self.eps_mc),
            ("eps_mg", self.eps_mg),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if self.p_s > 1.0 {
            return invalid(format!("p_s = {} exceeds 1", self.p_s));
        }
        if self.eta == 0.0 {
            return invalid("eta must be positive");
        }
        if self.rounds == 0 {
            return invalid("rounds must be at least 1");
        }
        let cap = eta_cap(self.lipschitz, self.kappa1, self.kappa2)?;
        if self.eta >= cap {
            return invalid(format!("eta = {} is not below the cap {cap}", self.eta));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub terms: Vec<BoundTerm>,
}

impl BoundValue {
    fn from_terms(terms: [(&str, f64); 5]) -> Self {
        let value = neumaier(terms.iter().map(|t| t.1));
        let terms = terms.iter().map(|&(name, value)| BoundTerm { name: name.to_string(), value }).collect();
        Self { value, terms }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// Neumaier-compensated sum.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Largest admissible learning rate, `1 / (√12 L κ₁ κ₂)` (exclusive).
pub fn eta_cap(lipschitz: f64, kappa1: usize, kappa2: usize) -> Result<f64> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return invalid(format!("L = {lipschitz} must be positive"));
    }
    if kappa1 == 0 || kappa2 == 0 {
        return invalid("kappa1 and kappa2 must be at least 1");
    }
    Ok(1.0 / (12f64.sqrt() * lipschitz * kappa1 as f64 * kappa2 as f64))
}

struct Shared {
    /// η² L² κ₁² κ₂² p²
    a12: f64,
    /// η² L² κ₁² p²
    a1: f64,
}

impl Shared {
    fn new(i: &BoundInputs, p: f64) -> Self {
        let (e, l, k1, k2) = (i.eta, i.lipschitz, i.kappa1 as f64, i.kappa2 as f64);
        let a1 = e * e * l * l * k1 * k1 * p * p;
        Self { a12: a1 * k2 * k2, a1 }
    }

    fn den12(&self) -> f64 {
        1.0 - 12.0 * self.a12
    }

    fn den1(&self) -> f64 {
        1.0 - 12.0 * self.a1
    }

    fn ratio(&self) -> f64 {
        (1.0 - 8.0 * self.a12) / self.den1()
    }
}

fn hfl_common(i: &BoundInputs) -> Result<Shared> {
    i.validate()?;
    if i.p_s == 0.0 {
        return Err(Error::BoundDiverges("with p_s = 0 no user ever uploads and the bound is infinite".into()));
    }
    Ok(Shared::new(i, i.p_s))
}

fn hfl_head(i: &BoundInputs, s: &Shared) -> (f64, f64, f64) {
    let (e, l, p, k1) = (i.eta, i.lipschitz, i.p_s, i.kappa1 as f64);
    let init = 2.0 * i.f0_gap / (e * p * i.rounds as f64);
    let eps_g = 4.0 * (1.0 - 6.0 * s.a12) / s.den12() * i.eps_g * i.eps_g;
    let inner = (1.0 - 8.0 * s.a12) * 6.0 * e * e * l * l * p * p * k1 * k1 / (s.den12() * s.den1());
    let eps_c = 4.0 * (1.0 + inner) * i.eps_c * i.eps_c;
    (init, eps_g, eps_c)
}

fn hfl_mobility_prefactor(i: &BoundInputs, s: &Shared) -> f64 {
    let (e, l, p, k1) = (i.eta, i.lipschitz, i.p_s, i.kappa1 as f64);
    let sig2 = i.sigma * i.sigma;
    8.0 * l * l * e * e * k1 * p * (sig2 + (1.0 - p) * i.grad_bound * i.grad_bound) / s.den12()
}

/// HFL bound with arbitrary weights.
pub fn hfl_bound(i: &BoundInputs) -> Result<BoundValue> {
    let s = hfl_common(i)?;
    let (alpha, alpha_c) = i.weights.resolve()?;
    let (init, eps_g, eps_c) = hfl_head(i, &s);
    let variance = i.eta * i.lipschitz * i.sigma * i.sigma * neumaier(alpha.iter().map(|a| a * a));
    let k2 = i.kappa2 as f64;
    let r = s.ratio();
    let bracket = neumaier(alpha.iter().zip(&alpha_c).map(|(&a, &ac)| a * (2.0 * k2 * (ac - a) + r * (1.0 - ac))));
    let mobility = hfl_mobility_prefactor(i, &s) * bracket;
    Ok(BoundValue::from_terms([
        ("init", init),
        ("variance", variance),
        ("eps_g", eps_g),
        ("eps_c", eps_c),
        ("mobility", mobility),
    ]))
}

/// HFL bound for uniform weights, in closed form. Needs
/// `weights = Uniform { users, clusters }`.
pub fn corollary_bound(i: &BoundInputs) -> Result<BoundValue> {
    let BoundWeights::Uniform { users, clusters } = i.weights else {
        return invalid("the uniform-weight bound needs weights = { users, clusters }");
    };
    i.weights.resolve()?;
    let s = hfl_common(i)?;
    let (m, n) = (users as f64, clusters as f64);
    let (init, eps_g, eps_c) = hfl_head(i, &s);
    let variance = i.eta * i.lipschitz / m * i.sigma * i.sigma;
    let bracket = 2.0 * i.kappa2 as f64 * (n - 1.0) / m + s.ratio() * (m - n) / m;
    let mobility = hfl_mobility_prefactor(i, &s) * bracket;
    Ok(BoundValue::from_terms([
        ("init", init),
        ("variance", variance),
        ("eps_g", eps_g),
        ("eps_c", eps_c),
        ("mobility", mobility),
    ]))
}

/// MACFL bound. Independent of `p_s`.
pub fn macfl_bound(i: &BoundInputs) -> Result<BoundValue> {
    i.validate()?;
    let (beta, beta_c) = i.beta.as_ref().unwrap_or(&i.weights).resolve()?;
    let s = Shared::new(i, 1.0);
    let (e, l, k1, k2) = (i.eta, i.lipschitz, i.kappa1 as f64, i.kappa2 as f64);
    let sm2 = i.sigma_m * i.sigma_m;
    let init = 2.0 * i.f0_gap / (e * i.rounds as f64);
    let variance = e * l * sm2 * neumaier(beta.iter().map(|b| b * b));
    let eps_g = 12.0 * s.a12 / s.den12() * i.eps_mg * i.eps_mg;
    let eps_c = 12.0 * s.a1 * (1.0 - 8.0 * s.a12) / (s.den1() * s.den12()) * i.eps_mc * i.eps_mc;
    let r = s.ratio();
    let sum = neumaier(beta.iter().zip(&beta_c).map(|(&b, &bc)| b * (r * (1.0 - bc) + 2.0 * k2 * (bc - b))));
    let last = 4.0 * l * l * e * e * k1 / s.den12() * sm2 * sum;
    Ok(BoundValue::from_terms([
        ("init", init),
        ("variance", variance),
        ("eps_g", eps_g),
        ("eps_c", eps_c),
        ("mobility", last),
    ]))
}

/// Which input a scan varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanParameter {
    Kappa1,
    Kappa2,
    /// Varies κ₁ with κ₂ = product / κ₁.
    Kappa1FixedProduct {
        product: usize,
    },
    PStay,
    Eta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub points: Vec<(f64, f64)>,
    pub nondecreasing: bool,
    pub nonincreasing: bool,
}

fn as_count(x: f64, what: &str) -> Result<usize> {
    if x >= 1.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
        Ok(x as usize)
    } else {
        invalid(format!("{what} grid value {x} is not a positive integer"))
    }
}

/// Evaluates `bound` along `grid`. Any point that breaks the learning-rate
/// cap makes the whole scan an error.
pub fn monotonicity_scan<F>(
    bound: F,
    inputs: &BoundInputs,
    parameter: ScanParameter,
    grid: &[f64],
) -> Result<ScanResult>
where
    F: Fn(&BoundInputs) -> Result<BoundValue>,
{
    if grid.is_empty() {
        return invalid("empty scan grid");
    }
    if grid.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return invalid("scan grid must be strictly increasing");
    }
    let mut points = Vec::with_capacity(grid.len());
    for &x in grid {
        let mut p = inputs.clone();
        match parameter {
            ScanParameter::Kappa1 => p.kappa1 = as_count(x, "kappa1")?,
            ScanParameter::Kappa2 => p.kappa2 = as_count(x, "kappa2")?,
            ScanParameter::Kappa1FixedProduct { product } => {
                let k1 = as_count(x, "kappa1")?;
                if product % k1 != 0 {
                    return invalid(format!("kappa1 = {k1} does not divide the product {product}"));
                }
                p.kappa1 = k1;
                p.kappa2 = product / k1;
            }
            ScanParameter::PStay => p.p_s = x,
            ScanParameter::Eta => p.eta = x,
        }
        points.push((x, bound(&p)?.value));
    }
    let nondecreasing = points.windows(2).all(|w| w[1].1 >= w[0].1);
    let nonincreasing = points.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(ScanResult { points, nondecreasing, nonincreasing })
}

/// How to probe the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub batch_size: usize,
    /// Mini-batches drawn per user and probe point for the variance bounds.
    pub batches_per_user: usize,
    /// Meta step for the attention-side constants; 0 skips them.
    pub rho: f64,
}

/// Empirical maxima over the probe points. These are lower bounds on the
/// suprema the bounds assume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub sigma_hat: f64,
    pub g_hat: f64,
    pub eps_c_hat: f64,
    pub eps_g_hat: f64,
    /// `None` with fewer than two distinct probe points.
    pub l_hat: Option<f64>,
    pub sigma_m_hat: Option<f64>,
    pub eps_mc_hat: Option<f64>,
    pub eps_mg_hat: Option<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn weighted_sum(vectors: impl Iterator<Item = (f64, Vec<f64>)>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (w, v) in vectors {
        for (o, x) in out.iter_mut().zip(&v) {
            *o += w * x;
        }
    }
    out
}

/// `(ε_c², ε_g²)` at one point from the per-user full gradients.
fn divergences(grads: &[Vec<f64>], weights: &AggregationWeights, n_clusters: usize) -> (f64, f64) {
    let len = grads[0].len();
    let cluster_grads: Vec<Vec<f64>> = (0..n_clusters)
        .map(|c| {
            let members = (0..grads.len()).filter(|&m| weights.cluster_of[m] == c);
            weighted_sum(members.map(|m| (weights.alpha_user_in_cluster[m], grads[m].clone())), len)
        })
        .collect();
    let global =
        weighted_sum(cluster_grads.iter().enumerate().map(|(c, g)| (weights.alpha_cluster[c], g.clone())), len);
    let mut eps_c2: f64 = 0.0;
    for (c, cg) in cluster_grads.iter().enumerate() {
        let members: Vec<usize> = (0..grads.len()).filter(|&m| weights.cluster_of[m] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().map(|&m| dist(&grads[m], cg).powi(2)).sum::<f64>() / members.len() as f64;
        eps_c2 = eps_c2.max(mean);
    }
    let occupied: Vec<&Vec<f64>> =
        (0..n_clusters).filter(|&c| weights.cluster_of.contains(&c)).map(|c| &cluster_grads[c]).collect();
    let eps_g2 = occupied.iter().map(|g| dist(g, &global).powi(2)).sum::<f64>() / occupied.len() as f64;
    (eps_c2, eps_g2)
}

/// Estimates the assumption constants at the given probe points.
///
/// `sigma_hat` compares mini-batch gradients with the full local gradient,
/// `g_hat` is the largest full local gradient norm, the divergences follow
/// the cluster and global averages implied by `weights`, and `l_hat` is the
/// largest secant ratio between probe points. With `rho > 0` the same is
/// repeated for the one-step-adapted objective used by MACFL.
pub fn estimate_constants<O, R>(
    objective: &O,
    data: &LabeledDataset,
    shards: &[Shard],
    weights: &AggregationWeights,
    probes: &[Vec<f64>],
    settings: ProbeSettings,
    rng: &mut R,
) -> Result<ConstantEstimates>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    if probes.is_empty() {
        return invalid("estimate_constants needs at least one probe point");
    }
    if settings.batch_size == 0 || settings.batches_per_user == 0 {
        return invalid("probing needs at least one batch of at least one sample per user");
    }
    if shards.is_empty() || shards.len() != weights.cluster_of.len() {
        return invalid("one weight entry per shard is required");
    }
    weights.validate()?;
    if probes.iter().any(|p| p.len() != objective.param_len() || p.iter().any(|w| !w.is_finite())) {
        return invalid("probe points must be finite and match the model size");
    }
    let n_clusters = weights.alpha_cluster.len();
    let local: Vec<LabeledDataset> = shards.iter().map(|s| s.materialize(data)).collect::<Result<_>>()?;
    let meta = settings.rho > 0.0;

    let mut est = ConstantEstimates {
        sigma_hat: 0.0,
        g_hat: 0.0,
        eps_c_hat: 0.0,
        eps_g_hat: 0.0,
        l_hat: None,
        sigma_m_hat: meta.then_some(0.0),
        eps_mc_hat: meta.then_some(0.0),
        eps_mg_hat: meta.then_some(0.0),
    };
    let mut full_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(probes.len());
    for w in probes {
        let grads: Vec<Vec<f64>> =
            local.iter().map(|d| objective.gradient(w, d.view()).map(|g| g.values)).collect::<Result<_>>()?;
        for (m, g) in grads.iter().enumerate() {
            est.g_hat = est.g_hat.max(norm(g));
            for _ in 0..settings.batches_per_user {
                let b = sample_minibatch(data, &shards[m], settings.batch_size, rng)?;
                let gb = objective.gradient(w, b.view())?;
                est.sigma_hat = est.sigma_hat.max(dist(&gb.values, g));
            }
        }
        let (c2, g2) = divergences(&grads, weights, n_clusters);
        est.eps_c_hat = est.eps_c_hat.max(c2.sqrt());
        est.eps_g_hat = est.eps_g_hat.max(g2.sqrt());

        if meta {
            let rho = settings.rho;
            let mut meta_grads = Vec::with_capacity(local.len());
            for (m, d) in local.iter().enumerate() {
                let full = meta_gradient(objective, w, d.view(), d.view(), rho)?.values;
                let mut sm = est.sigma_m_hat.unwrap_or(0.0);
                for _ in 0..settings.batches_per_user {
                    let a = sample_minibatch(data, &shards[m], settings.batch_size, rng)?;
                    let b = sample_minibatch(data, &shards[m], settings.batch_size, rng)?;
                    let g = meta_gradient(objective, w, a.view(), b.view(), rho)?;
                    sm = sm.max(dist(&g.values, &full));
                }
                est.sigma_m_hat = Some(sm);
                meta_grads.push(full);
            }
            let (c2, g2) = divergences(&meta_grads, weights, n_clusters);
            est.eps_mc_hat = est.eps_mc_hat.map(|v| v.max(c2.sqrt()));
            est.eps_mg_hat = est.eps_mg_hat.map(|v| v.max(g2.sqrt()));
        }
        full_grads.push(grads);
    }

    for a in 0..probes.len() {
        for b in a + 1..probes.len() {
            let step = dist(&probes[a], &probes[b]);
            if step == 0.0 {
                continue;
            }
            for (ga, gb) in full_grads[a].iter().zip(&full_grads[b]) {
                let ratio = dist(ga, gb) / step;
                est.l_hat = Some(est.l_hat.map_or(ratio, |l: f64| l.max(ratio)));
            }
        }
    }
    Ok(est)
}
