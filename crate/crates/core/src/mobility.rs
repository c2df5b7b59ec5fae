//! Edge-AP topology and the Markov model of user movement between clusters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Symmetric 0/1 neighbourhood matrix of the edge APs, self-loops included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl AdjacencyMatrix {
    /// Path graph `0 - 1 - ... - (n-1)` with self-loops.
    pub fn linear(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("a topology needs at least one cluster");
        }
        let entries = (0..n * n).map(|k| (k / n).abs_diff(k % n) <= 1).collect();
        Ok(Self { n, entries })
    }

    /// Builds a matrix from explicit 0/1 rows; checks symmetry and the unit diagonal.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return invalid("a topology needs at least one cluster");
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return invalid(format!("adjacency row {i} has {} entries, expected {n}", row.len()));
            }
            for (j, &a) in row.iter().enumerate() {
                match a {
                    0 | 1 => entries.push(a == 1),
                    _ => return invalid(format!("adjacency entry ({i},{j}) = {a} is not 0/1")),
                }
            }
        }
        let adj = Self { n, entries };
        for i in 0..n {
            if !adj.connected(i, i) {
                return invalid(format!("adjacency diagonal ({i},{i}) must be 1"));
            }
            for j in 0..i {
                if adj.connected(i, j) != adj.connected(j, i) {
                    return invalid(format!("adjacency is not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(adj)
    }

    pub fn n_clusters(&self) -> usize {
        self.n
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    /// `|N(c_i)|`, counting the cluster itself.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.connected(i, j)).count()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| (0..self.n).map(|j| u8::from(self.connected(i, j))).collect()).collect()
    }
}

pub fn build_linear_topology(n_clusters: usize) -> Result<AdjacencyMatrix> {
    AdjacencyMatrix::linear(n_clusters)
}

/// Row-stochastic cluster-to-cluster transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    n: usize,
    entries: Vec<f64>,
    stay: Vec<f64>,
}

/// Each user stays with probability `stay[i]` and otherwise moves to one of
/// the other neighbours of its cluster with equal probability.
pub fn build_transition_matrix(adj: &AdjacencyMatrix, stay: &[f64]) -> Result<TransitionMatrix> {
    let n = adj.n_clusters();
    if stay.len() != n {
        return invalid(format!("{} stay probabilities for {n} clusters", stay.len()));
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let p = stay[i];
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("stay probability {p} of cluster {i} outside [0, 1]"));
        }
        let others = adj.degree(i) - 1;
        if others == 0 && p < 1.0 {
            return invalid(format!("cluster {i} has no neighbours but stay probability {p} < 1"));
        }
        entries[i * n + i] = p;
        if others > 0 {
            let move_p = (1.0 - p) / others as f64;
            for j in (0..n).filter(|&j| j != i && adj.connected(i, j)) {
                entries[i * n + j] = move_p;
            }
        }
    }
    Ok(TransitionMatrix { n, entries, stay: stay.to_vec() })
}

impl TransitionMatrix {
    /// Same stay probability in every cluster.
    pub fn with_uniform_stay(adj: &AdjacencyMatrix, stay: f64) -> Result<Self> {
        build_transition_matrix(adj, &vec![stay; adj.n_clusters()])
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries, stay: vec![1.0; n] }
    }

    pub fn n_clusters(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn stay_probs(&self) -> &[f64] {
        &self.stay
    }

    /// Matrix product `self * rhs`: one step under `self` followed by one under `rhs`.
    pub fn then(&self, rhs: &TransitionMatrix) -> Result<TransitionMatrix> {
        if self.n != rhs.n {
            return invalid("transition matrices of different sizes");
        }
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    entries[i * n + j] += a * rhs.get(k, j);
                }
            }
        }
        let stay = (0..n).map(|i| entries[i * n + i]).collect();
        Ok(TransitionMatrix { n, entries, stay })
    }

    /// `self^k`; `k = 0` gives the identity.
    pub fn power(&self, k: usize) -> TransitionMatrix {
        let mut out = TransitionMatrix::identity(self.n);
        for _ in 0..k {
            out = out.then(self).expect("same size");
        }
        out
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_defect(&self) -> f64 {
        (0..self.n).map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Realized connection state of one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserState {
    pub user: usize,
    pub cluster: usize,
}

impl UserState {
    pub fn one_hot(&self, n_clusters: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_clusters];
        v[self.cluster] = 1.0;
        v
    }
}

/// Spreads `m` users evenly over `n` clusters (user `k` of a random
/// permutation goes to cluster `k mod n`).
pub fn initial_placement<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Vec<UserState>> {
    if n == 0 {
        return invalid("placement needs at least one cluster");
    }
    let mut order: Vec<usize> = (0..m).collect();
    // Fisher-Yates, spelled out so the draw sequence is pinned to this crate.
    for k in (1..m).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    let mut states = vec![UserState { user: 0, cluster: 0 }; m];
    for (slot, &user) in order.iter().enumerate() {
        states[user] = UserState { user, cluster: slot % n };
    }
    Ok(states)
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Moves every user one step along the chain. Users are drawn in slice order,
/// one uniform draw each.
pub fn step_users<R: Rng + ?Sized>(states: &[UserState], transition: &TransitionMatrix, rng: &mut R) -> Vec<UserState> {
    states.iter().map(|s| UserState { user: s.user, cluster: sample_row(transition.row(s.cluster), rng) }).collect()
}

/// `pi0 * P_0 * P_1 * ...` for a row probability vector.
pub fn propagate_marginal(pi0: &[f64], steps: &[TransitionMatrix]) -> Result<Vec<f64>> {
    let total: f64 = pi0.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL * pi0.len().max(1) as f64 {
        return invalid(format!("initial distribution sums to {total}, not 1"));
    }
    let mut pi = pi0.to_vec();
    for p in steps {
        if p.n_clusters() != pi.len() {
            return invalid(format!(
                "distribution of length {} against a {}-cluster transition matrix",
                pi.len(),
                p.n_clusters()
            ));
        }
        let n = pi.len();
        let mut next = vec![0.0; n];
        for (i, &w) in pi.iter().enumerate() {
            if w != 0.0 {
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot += w * p.get(i, j);
                }
            }
        }
        pi = next;
    }
    Ok(pi)
}

/// Where users are: sampled clusters or per-user marginal distributions.
#[derive(Debug, Clone, Copy)]
pub enum Population<'a> {
    Realized(&'a [UserState]),
    Marginal(&'a [Vec<f64>]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub sizes: Vec<f64>,
    /// Outflow minus inflow per cluster; zero at the balance point.
    pub equilibrium_residuals: Vec<f64>,
}

/// Expected cluster sizes and the flow-balance residual
/// `S_i (1 - p_i) - sum_{j != i, j ~ i} S_j P[j][i]`.
pub fn occupancy(population: Population<'_>, m: usize, transition: &TransitionMatrix) -> Result<OccupancyReport> {
    let n = transition.n_clusters();
    let mut sizes = vec![0.0; n];
    match population {
        Population::Realized(states) => {
            if states.len() != m {
                return invalid(format!("{} user states for M = {m}", states.len()));
            }
            for s in states {
                if s.cluster >= n {
                    return invalid(format!("user {} in cluster {} of {n}", s.user, s.cluster));
                }
                sizes[s.cluster] += 1.0;
            }
        }
        Population::Marginal(dists) => {
            if dists.len() != m {
                return invalid(format!("{} user distributions for M = {m}", dists.len()));
            }
            for d in dists {
                if d.len() != n {
                    return invalid(format!("distribution of length {} for {n} clusters", d.len()));
                }
                for (s, &p) in sizes.iter_mut().zip(d) {
                    *s += p;
                }
            }
        }
    }
    let equilibrium_residuals = (0..n)
        .map(|i| {
            let inflow: f64 = (0..n).filter(|&j| j != i).map(|j| sizes[j] * transition.get(j, i)).sum();
            sizes[i] * (1.0 - transition.stay_probs()[i]) - inflow
        })
        .collect();
    Ok(OccupancyReport { sizes, equilibrium_residuals })
}
