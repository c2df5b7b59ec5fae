use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::aggregate::{
    convex_combination, hfl_cloud_update, hfl_edge_update_models, macfl_cloud_update, macfl_edge_update,
    AggregationWeights, AttentionSign, CosineKind,
};
use super::local::{local_update, macfl_local_update, LocalOutcome};
use crate::datasets::{LabeledDataset, Shard};
use crate::error::{invalid, Error, Result};
use crate::mobility::{initial_placement, step_users, TransitionMatrix, UserState};
use crate::models::{init_params, ModelSpec, Objective};
use crate::rng::{stream, Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hfl,
    Macfl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hfl => "hfl",
            Algorithm::Macfl => "macfl",
        }
    }
}

/// When users move between clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MobilityCadence {
    /// One transition per edge round, during local training.
    #[default]
    Round,
    /// One transition per local SGD iteration.
    Iteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub cosine: CosineKind,
    pub sign: AttentionSign,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self { sigma1: 25.0, sigma2: 25.0, rho: 0.001, cosine: CosineKind::Standard, sign: AttentionSign::Negative }
    }
}

/// Local iteration `t = b * kappa1 + j`; a cloud round closes every `kappa2`
/// edge rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundClock {
    pub t: usize,
    /// Completed edge rounds.
    pub b: usize,
    pub kappa1: usize,
    pub kappa2: usize,
    /// Cloud rounds to run.
    pub horizon: usize,
}

impl RoundClock {
    pub fn new(kappa1: usize, kappa2: usize, horizon: usize) -> Self {
        Self { t: 0, b: 0, kappa1, kappa2, horizon }
    }

    pub fn total_edge_rounds(&self) -> usize {
        self.horizon * self.kappa2
    }

    pub fn finished(&self) -> bool {
        self.b >= self.total_edge_rounds()
    }

    /// True when the edge round just completed is followed by a cloud round.
    pub fn at_cloud_round(&self) -> bool {
        self.b > 0 && self.b.is_multiple_of(self.kappa2)
    }

    fn complete_edge_round(&mut self) {
        self.b += 1;
        self.t = self.b * self.kappa1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSettings {
    pub algorithm: Algorithm,
    pub kappa1: usize,
    pub kappa2: usize,
    /// Number of cloud rounds `T`.
    pub cloud_rounds: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub attention: AttentionParams,
    pub cadence: MobilityCadence,
    pub seed: u64,
    /// Record metrics every this many edge rounds.
    pub eval_every: usize,
}

impl FederationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.kappa1 == 0 || self.kappa2 == 0 {
            return invalid("kappa1 and kappa2 must be at least 1");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid(format!("learning rate {} must be finite and nonnegative", self.eta));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return invalid("eval_every must be at least 1");
        }
        let a = &self.attention;
        if !(a.rho >= 0.0 && a.rho.is_finite()) || !a.sigma1.is_finite() || !a.sigma2.is_finite() {
            return invalid("attention parameters must be finite with rho >= 0");
        }
        Ok(())
    }
}

/// Every model in the hierarchy plus where the users are.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub global: Vec<f64>,
    pub clusters: Vec<Vec<f64>>,
    pub users: Vec<Vec<f64>>,
    pub positions: Vec<UserState>,
    pub clock: RoundClock,
}

/// What happened in one edge round; enough to replay the aggregation by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRoundReport {
    /// Edge rounds completed, this one included.
    pub round: usize,
    pub start_clusters: Vec<usize>,
    pub end_clusters: Vec<usize>,
    /// HFL upload flags (cluster unchanged over the round). All true for MACFL.
    pub indicators: Vec<bool>,
    pub grad_sums: Vec<Vec<f64>>,
    /// HFL weights from the round-start membership.
    pub weights: Option<AggregationWeights>,
    /// Cloud weights, when a cloud round closed this edge round.
    pub cloud_weights: Option<Vec<f64>>,
    /// Models that reached an edge server.
    pub participants: usize,
}

pub struct Federation<'a, O: Objective + ?Sized> {
    objective: &'a O,
    train: &'a LabeledDataset,
    shards: &'a [Shard],
    transition: TransitionMatrix,
    settings: FederationSettings,
    state: FederationState,
    user_rngs: Vec<Stream>,
    mobility_rng: Stream,
}

impl<'a, O: Objective + ?Sized> Federation<'a, O> {
    /// All clusters start from `initial`; users start at `positions`.
    pub fn new(
        objective: &'a O,
        train: &'a LabeledDataset,
        shards: &'a [Shard],
        transition: TransitionMatrix,
        positions: Vec<UserState>,
        initial: Vec<f64>,
        settings: FederationSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let n = transition.n_clusters();
        if shards.len() != positions.len() {
            return invalid(format!("{} shards for {} users", shards.len(), positions.len()));
        }
        if shards.is_empty() {
            return invalid("a federation needs at least one user");
        }
        if let Some(s) = positions.iter().find(|s| s.cluster >= n) {
            return invalid(format!("user {} placed in cluster {} of {n}", s.user, s.cluster));
        }
        if initial.len() != objective.param_len() {
            return invalid("initial parameters do not match the model");
        }
        let m = positions.len();
        let user_rngs = (0..m).map(|u| stream(settings.seed, Purpose::User(u as u32))).collect();
        let mobility_rng = stream(settings.seed, Purpose::Mobility);
        let clock = RoundClock::new(settings.kappa1, settings.kappa2, settings.cloud_rounds);
        let state = FederationState {
            clusters: vec![initial.clone(); n],
            users: vec![initial.clone(); m],
            global: initial,
            positions,
            clock,
        };
        Ok(Self { objective, train, shards, transition, settings, state, user_rngs, mobility_rng })
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn settings(&self) -> &FederationSettings {
        &self.settings
    }

    fn n_clusters(&self) -> usize {
        self.transition.n_clusters()
    }

    /// Runs local training, mobility, the edge aggregation and, when due,
    /// the cloud aggregation with broadcast.
    pub fn edge_round(&mut self) -> Result<EdgeRoundReport> {
        let s = &self.settings;
        let start: Vec<UserState> = self.state.positions.clone();
        let start_clusters: Vec<usize> = start.iter().map(|u| u.cluster).collect();

        // Local training from the model of the cluster each user sits in.
        let mut outcomes: Vec<LocalOutcome> = Vec::with_capacity(start.len());
        for (m, rng) in self.user_rngs.iter_mut().enumerate() {
            let w0 = &self.state.clusters[start_clusters[m]];
            let out = match s.algorithm {
                Algorithm::Hfl => {
                    local_update(self.objective, w0, self.train, &self.shards[m], s.eta, s.kappa1, s.batch_size, rng)?
                }
                Algorithm::Macfl => macfl_local_update(
                    self.objective,
                    w0,
                    self.train,
                    &self.shards[m],
                    s.eta,
                    s.attention.rho,
                    s.kappa1,
                    s.batch_size,
                    rng,
                )?,
            };
            outcomes.push(out);
        }

        let moves = match s.cadence {
            MobilityCadence::Round => 1,
            MobilityCadence::Iteration => s.kappa1,
        };
        let mut end = start.clone();
        for _ in 0..moves {
            end = step_users(&end, &self.transition, &mut self.mobility_rng);
        }
        let end_clusters: Vec<usize> = end.iter().map(|u| u.cluster).collect();
        let indicators: Vec<bool> = start_clusters.iter().zip(&end_clusters).map(|(a, b)| a == b).collect();

        let n = self.n_clusters();
        let (weights, participants, indicators) = match s.algorithm {
            Algorithm::Hfl => {
                let weights = AggregationWeights::uniform(&start_clusters, n)?;
                for c in 0..n {
                    let members: Vec<usize> = (0..start.len()).filter(|&m| start_clusters[m] == c).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let params: Vec<&[f64]> = members.iter().map(|&m| outcomes[m].params.as_slice()).collect();
                    let ups: Vec<bool> = members.iter().map(|&m| indicators[m]).collect();
                    let alphas: Vec<f64> = members.iter().map(|&m| weights.alpha_user_in_cluster[m]).collect();
                    self.state.clusters[c] = hfl_edge_update_models(&self.state.clusters[c], &params, &ups, &alphas)?;
                }
                let participants = indicators.iter().filter(|&&up| up).count();
                (Some(weights), participants, indicators)
            }
            Algorithm::Macfl => {
                for c in 0..n {
                    let arrived: Vec<&[f64]> = (0..end.len())
                        .filter(|&m| end_clusters[m] == c)
                        .map(|m| outcomes[m].params.as_slice())
                        .collect();
                    self.state.clusters[c] = macfl_edge_update(
                        &self.state.clusters[c],
                        &arrived,
                        s.attention.sigma1,
                        s.attention.cosine,
                        s.attention.sign,
                    )?;
                }
                (None, end.len(), vec![true; end.len()])
            }
        };

        self.state.clock.complete_edge_round();
        let mut cloud_weights = None;
        if self.state.clock.at_cloud_round() {
            let clusters: Vec<&[f64]> = self.state.clusters.iter().map(Vec::as_slice).collect();
            let global = match s.algorithm {
                Algorithm::Hfl => {
                    let m = end.len() as f64;
                    let mut sizes = vec![0usize; n];
                    for &c in &end_clusters {
                        sizes[c] += 1;
                    }
                    let alpha: Vec<f64> = sizes.iter().map(|&k| k as f64 / m).collect();
                    let g = hfl_cloud_update(&clusters, &alpha)?;
                    cloud_weights = Some(alpha);
                    g
                }
                Algorithm::Macfl => macfl_cloud_update(
                    &self.state.global,
                    &clusters,
                    s.attention.sigma2,
                    s.attention.cosine,
                    s.attention.sign,
                )?,
            };
            for c in self.state.clusters.iter_mut() {
                c.clone_from(&global);
            }
            self.state.global = global;
        }
        if self.state.global.iter().any(|w| !w.is_finite()) {
            return Err(Error::NumericDivergence("global model became non-finite".into()));
        }

        let grad_sums = outcomes.iter().map(|o| o.grad_sum.clone()).collect();
        for (u, o) in self.state.users.iter_mut().zip(outcomes) {
            *u = o.params;
        }
        self.state.positions = end;
        Ok(EdgeRoundReport {
            round: self.state.clock.b,
            start_clusters,
            end_clusters,
            indicators,
            grad_sums,
            weights,
            cloud_weights,
            participants,
        })
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub t: usize,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub mean_cluster_accuracy: f64,
    pub cluster_accuracies: Vec<f64>,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged { round: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub algorithm: Algorithm,
    pub records: Vec<MetricsRecord>,
    pub status: RunStatus,
    /// Final global model.
    #[serde(skip)]
    pub final_global: Vec<f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl MetricsTrace {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.global_accuracy)
    }
}

/// Data a run trains and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub shards: &'a [Shard],
}

/// Runs `settings.cloud_rounds` cloud rounds of the selected algorithm.
///
/// The initial model and user placement depend only on the seed, so HFL and
/// MACFL runs with equal seeds start from the same state. A record is taken
/// before training and then every `eval_every` edge rounds (and after the
/// last one). Divergence stops the run and is reported in the trace status.
pub fn run_experiment(
    model: &ModelSpec,
    settings: &FederationSettings,
    transition: &TransitionMatrix,
    data: ExperimentData<'_>,
) -> Result<MetricsTrace> {
    let started = Instant::now();
    let m = data.shards.len();
    let n = transition.n_clusters();
    let initial = init_params(model, &mut stream(settings.seed, Purpose::Init))?.0;
    let positions = initial_placement(m, n, &mut stream(settings.seed, Purpose::Placement))?;
    let all_indices: Vec<usize> = data.shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
    let union = data.train.select(&all_indices)?;

    let mut fed =
        Federation::new(model, data.train, data.shards, transition.clone(), positions, initial, settings.clone())?;
    let evaluate = |state: &FederationState, participants: usize| -> Result<MetricsRecord> {
        let global_loss = model.loss(&state.global, union.view())?;
        let global_accuracy = model.evaluate(&state.global, data.test)?;
        let cluster_accuracies =
            state.clusters.iter().map(|c| model.evaluate(c, data.test)).collect::<Result<Vec<f64>>>()?;
        let mean_cluster_accuracy = cluster_accuracies.iter().sum::<f64>() / cluster_accuracies.len() as f64;
        Ok(MetricsRecord {
            round: state.clock.b,
            t: state.clock.t,
            global_loss,
            global_accuracy,
            mean_cluster_accuracy,
            cluster_accuracies,
            participants,
        })
    };

    let mut records = vec![evaluate(fed.state(), 0)?];
    let mut status = RunStatus::Completed;
    while !fed.state().clock.finished() {
        match fed.edge_round() {
            Ok(report) => {
                let clock = fed.state().clock;
                if clock.b % settings.eval_every == 0 || clock.finished() {
                    records.push(evaluate(fed.state(), report.participants)?);
                }
            }
            Err(Error::NumericDivergence(message)) => {
                status = RunStatus::Diverged { round: fed.state().clock.b, message };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MetricsTrace {
        algorithm: settings.algorithm,
        records,
        status,
        final_global: fed.state().global.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Plain weighted average of user models (reference for reductions and tests).
pub fn average_models(models: &[&[f64]]) -> Result<Vec<f64>> {
    let w = vec![1.0 / models.len() as f64; models.len()];
    convex_combination(models, &w)
}
