//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mobifl::datasets::{synth_gaussian_classes, LabeledDataset, MiniBatch, Samples, Shard};
use mobifl::fedcore::{local_update, Algorithm, AttentionParams, Federation, FederationSettings, MobilityCadence};
use mobifl::mobility::{build_linear_topology, propagate_marginal, step_users, TransitionMatrix, UserState};
use mobifl::models::{init_params, ModelSpec, Objective};
use mobifl::rng::{stream, Purpose};
use rand::Rng;

/// Largest relative error between the analytic gradient and central
/// differences with step `1e-6`; the denominator is floored at `1e-4`.
pub fn fd_max_rel_error(spec: &ModelSpec, params: &[f64], batch: Samples<'_>) -> f64 {
    let g = spec.gradient(params, batch).unwrap().values;
    let h = 1e-6;
    let mut w = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = spec.loss(&w, batch).unwrap();
        w[i] = orig - h;
        let down = spec.loss(&w, batch).unwrap();
        w[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = g[i].abs().max(fd.abs()).max(1e-4);
        worst = worst.max((g[i] - fd).abs() / denom);
    }
    worst
}

/// Worst finite-difference error over `draws` random parameter/batch pairs.
pub fn fd_worst_over_draws(spec: &ModelSpec, draws: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, Purpose::Other(7));
    let data = synth_gaussian_classes(200, spec.input_dim, spec.n_classes, 2.0, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rows: Vec<usize> = (0..8).map(|_| rng.random_range(0..data.len())).collect();
        let batch = data.select(&rows).unwrap();
        worst = worst.max(fd_max_rel_error(spec, &params, batch.view()));
    }
    worst
}

/// Small federated setup: data, shards of `shard` samples, softmax model.
pub struct Micro {
    pub data: LabeledDataset,
    pub shards: Vec<Shard>,
    pub spec: ModelSpec,
    pub init: Vec<f64>,
}

pub fn micro(users: usize, shard: usize, seed: u64) -> Micro {
    let dim = 6;
    let classes = 3;
    let data = synth_gaussian_classes(users * shard, dim, classes, 2.0, &mut stream(seed, Purpose::Data)).unwrap();
    let shards = (0..users).map(|m| Shard { owner: m, indices: (m * shard..(m + 1) * shard).collect() }).collect();
    let spec = ModelSpec::softmax(dim, classes).with_init_scale(0.3);
    let init = init_params(&spec, &mut stream(seed, Purpose::Init)).unwrap().0;
    Micro { data, shards, spec, init }
}

pub fn hfl_settings(kappa1: usize, kappa2: usize, rounds: usize, eta: f64, seed: u64) -> FederationSettings {
    FederationSettings {
        algorithm: Algorithm::Hfl,
        kappa1,
        kappa2,
        cloud_rounds: rounds,
        eta,
        batch_size: 4,
        attention: AttentionParams::default(),
        cadence: MobilityCadence::Round,
        seed,
        eval_every: 1,
    }
}

/// Plain FedAvg written out by hand: every user starts from the global model,
/// trains, and the global model becomes the equal-weight average accumulated
/// in user order. Returns the global model after each round.
pub fn fedavg_reference(m: &Micro, settings: &FederationSettings) -> Vec<Vec<f64>> {
    let users = m.shards.len();
    let mut rngs: Vec<_> = (0..users).map(|u| stream(settings.seed, Purpose::User(u as u32))).collect();
    let mut global = m.init.clone();
    let mut out = Vec::new();
    for _ in 0..settings.cloud_rounds {
        let locals: Vec<Vec<f64>> = (0..users)
            .map(|u| {
                local_update(
                    &m.spec,
                    &global,
                    &m.data,
                    &m.shards[u],
                    settings.eta,
                    settings.kappa1,
                    settings.batch_size,
                    &mut rngs[u],
                )
                .unwrap()
                .params
            })
            .collect();
        let w = 1.0 / users as f64;
        let mut avg = vec![0.0; global.len()];
        for l in &locals {
            for (a, x) in avg.iter_mut().zip(l) {
                *a += w * x;
            }
        }
        global = avg;
        out.push(global.clone());
    }
    out
}

/// Runs the federation and returns the global model after every cloud round.
pub fn federation_globals(m: &Micro, settings: &FederationSettings, transition: TransitionMatrix) -> Vec<Vec<f64>> {
    let n = transition.n_clusters();
    let users = m.shards.len();
    let positions: Vec<UserState> = (0..users).map(|u| UserState { user: u, cluster: u % n }).collect();
    let mut fed =
        Federation::new(&m.spec, &m.data, &m.shards, transition, positions, m.init.clone(), settings.clone()).unwrap();
    let mut out = Vec::new();
    while !fed.state().clock.finished() {
        fed.edge_round().unwrap();
        if fed.state().clock.at_cloud_round() {
            out.push(fed.state().global.clone());
        }
    }
    out
}

/// Largest deviation between the global model after each cloud round and
/// `w_g − η Σ_q Σ_m α_m^(q) I_m^(q) Σ_τ g_m^τ`, where `α_m^(q)` is the cloud
/// weight of the user's round-start cluster times its weight inside it.
/// Also returns how many uploads were skipped, to show the gating mattered.
pub fn telescoping_residual(seed: u64) -> (f64, usize) {
    let (users, n, k1, k2, rounds, eta) = (4, 2, 2, 2, 4, 0.05);
    let m = micro(users, 30, seed);
    let adj = build_linear_topology(n).unwrap();
    let p = TransitionMatrix::with_uniform_stay(&adj, 0.5).unwrap();
    let settings = hfl_settings(k1, k2, rounds, eta, seed);
    let positions: Vec<UserState> = (0..users).map(|u| UserState { user: u, cluster: u % n }).collect();
    let mut fed = Federation::new(&m.spec, &m.data, &m.shards, p, positions, m.init.clone(), settings).unwrap();

    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut anchor = fed.state().global.clone();
    let mut pending = Vec::new();
    while !fed.state().clock.finished() {
        let r = fed.edge_round().unwrap();
        skipped += r.indicators.iter().filter(|&&up| !up).count();
        pending.push(r.clone());
        if let Some(alpha_c) = &r.cloud_weights {
            let mut predicted = anchor.clone();
            for q in &pending {
                let w = q.weights.as_ref().unwrap();
                for u in 0..users {
                    if !q.indicators[u] {
                        continue;
                    }
                    let a = alpha_c[q.start_clusters[u]] * w.alpha_user_in_cluster[u];
                    for (p, g) in predicted.iter_mut().zip(&q.grad_sums[u]) {
                        *p -= eta * a * g;
                    }
                }
            }
            let actual = &fed.state().global;
            for (a, b) in actual.iter().zip(&predicted) {
                worst = worst.max((a - b).abs());
            }
            anchor = actual.clone();
            pending.clear();
        }
    }
    (worst, skipped)
}

/// L∞ gap between Monte Carlo cluster frequencies and the propagated
/// marginal after `steps` moves of `users` walkers on a linear graph.
pub fn markov_mc_gap(clusters: usize, stay: f64, users: usize, steps: usize, seed: u64) -> f64 {
    let adj = build_linear_topology(clusters).unwrap();
    let p = TransitionMatrix::with_uniform_stay(&adj, stay).unwrap();
    // everyone starts in cluster 0
    let mut states: Vec<UserState> = (0..users).map(|u| UserState { user: u, cluster: 0 }).collect();
    let mut rng = stream(seed, Purpose::Mobility);
    for _ in 0..steps {
        states = step_users(&states, &p, &mut rng);
    }
    let mut freq = vec![0.0; clusters];
    for s in &states {
        freq[s.cluster] += 1.0 / users as f64;
    }
    let mut pi0 = vec![0.0; clusters];
    pi0[0] = 1.0;
    let exact = propagate_marginal(&pi0, &vec![p; steps]).unwrap();
    freq.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn minibatch_of(data: &LabeledDataset, rows: &[usize]) -> MiniBatch {
    let sub = data.select(rows).unwrap();
    MiniBatch { features: sub.features().to_vec(), labels: sub.labels().to_vec(), dim: sub.dim() }
}
