//! Hierarchical training loop: local updates, edge and cloud aggregation.

pub mod aggregate;
pub mod local;
pub mod runner;

pub use aggregate::{
    attention_weights, convex_combination, cosine_similarity, hfl_cloud_update, hfl_edge_update,
    hfl_edge_update_models, macfl_cloud_update, macfl_edge_update, similarity, AggregationWeights, AttentionSign,
    CosineKind,
};
pub use local::{local_update, macfl_local_update, LocalOutcome};
pub use runner::{
    average_models, run_experiment, Algorithm, AttentionParams, EdgeRoundReport, ExperimentData, Federation,
    FederationSettings, FederationState, MetricsRecord, MetricsTrace, MobilityCadence, RoundClock, RunStatus,
};
