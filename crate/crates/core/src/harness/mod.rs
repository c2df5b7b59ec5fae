//! Configuration, experiment orchestration, sweeps and output files.

mod config;
mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    parse_config, AttentionSection, BoundsSection, DataSection, DataSource, EstimateSection, ExperimentConfig,
    ModelSection, PartitionKind, ScheduleSection, TopologyKind, TopologySection, TrainingSection, UsersSection,
    DATA_DIR_ENV,
};
pub use sweep::{
    emit_plotdata, load_trace_files, parse_sweep, summarize, sweep, write_sweep, CellOutcome, GridPoint, SummaryRow,
    SweepAxis, SweepCell, SweepSpec,
};

use crate::analysis::{
    corollary_bound, estimate_constants, hfl_bound, macfl_bound, BoundValue, ConstantEstimates, ProbeSettings,
};
use crate::datasets::{load_idx, partition_iid, partition_pathological, synth_gaussian_classes, LabeledDataset, Shard};
use crate::error::{Error, Result};
use crate::fedcore::{run_experiment, AggregationWeights, ExperimentData, MetricsTrace};
use crate::mobility::initial_placement;
use crate::models::{init_params, ModelSpec};
use crate::rng::{stream, Purpose};

/// Datasets, shards and model resolved from a config.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub shards: Vec<Shard>,
    pub model: ModelSpec,
}

/// Loads or generates the data and partitions it. Relative IDX paths are
/// resolved against `$MOBIFL_DATA_DIR`, else `base_dir`.
pub fn prepare(config: &ExperimentConfig, base_dir: &Path) -> Result<PreparedExperiment> {
    config.validate()?;
    let d = &config.data;
    let m = config.users.count;
    let (train, test) = match d.source {
        config::DataSource::Synthetic => {
            let n_train = d.synthetic_train.unwrap_or(m * d.shard_size);
            let mut rng = stream(config.seed, Purpose::Data);
            let train = synth_gaussian_classes(
                n_train,
                d.synthetic_dim,
                d.synthetic_classes,
                d.synthetic_separation,
                &mut rng,
            )?;
            let test = synth_gaussian_classes(
                d.synthetic_test,
                d.synthetic_dim,
                d.synthetic_classes,
                d.synthetic_separation,
                &mut rng,
            )?;
            (train, test)
        }
        config::DataSource::Idx => {
            let path = |f: &str| config.resolve_data_path(f, base_dir);
            let train = load_idx(path(&d.train_images), path(&d.train_labels))?;
            let test = load_idx(path(&d.test_images), path(&d.test_labels))?;
            let classes = train.n_classes().max(test.n_classes());
            (train.with_n_classes(classes)?, test.with_n_classes(classes)?)
        }
    };
    if train.dim() != test.dim() {
        return Err(Error::Config(format!(
            "train dimension {} differs from test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let test = match d.test_limit {
        Some(n) if n < test.len() => test.head(n)?,
        _ => test,
    };
    let mut rng = stream(config.seed, Purpose::Partition);
    let shards = match d.partition {
        PartitionKind::Iid => partition_iid(&train, m, d.shard_size, &mut rng)?,
        PartitionKind::Pathological => partition_pathological(&train, m, d.shard_size, d.classes_per_user, &mut rng)?,
    };
    let model = config.model_spec(train.dim(), train.n_classes());
    model.validate()?;
    Ok(PreparedExperiment { train, test, shards, model })
}

/// Runs one experiment in memory.
pub fn run(config: &ExperimentConfig, base_dir: &Path) -> Result<MetricsTrace> {
    let prepared = prepare(config, base_dir)?;
    run_prepared(config, &prepared)
}

pub fn run_prepared(config: &ExperimentConfig, prepared: &PreparedExperiment) -> Result<MetricsTrace> {
    let data = ExperimentData { train: &prepared.train, test: &prepared.test, shards: &prepared.shards };
    run_experiment(&prepared.model, &config.settings()?, &config.transition()?, data)
}

/// On-disk form of a trace: the resolved config travels with the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub series: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub trace: MetricsTrace,
}

pub const CSV_COLUMNS: &str = "round,t,algorithm,global_loss,global_accuracy,mean_cluster_accuracy,participants";

/// CSV text with a `#`-prefixed header echoing the config.
pub fn trace_csv(config: &ExperimentConfig, trace: &MetricsTrace) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# seed = {}", config.seed);
    let _ = writeln!(out, "# status = {}", serde_json::to_string(&trace.status).map_err(json_err)?);
    for line in config.to_toml_string()?.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(CSV_COLUMNS);
    out.push('\n');
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.t,
            trace.algorithm.name(),
            r.global_loss,
            r.global_accuracy,
            r.mean_cluster_accuracy,
            r.participants
        );
    }
    Ok(out)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn trace_json(file: &TraceFile) -> Result<String> {
    serde_json::to_string_pretty(file).map_err(json_err)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name =
        path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_trace_files(dir: &Path, stem: &str, file: &TraceFile) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&csv, trace_csv(&file.config, &file.trace)?.as_bytes())?;
    write_atomic(&json, trace_json(file)?.as_bytes())?;
    Ok((csv, json))
}

/// Constants estimated at a few initial-model probe points, with uniform
/// weights over the initial placement.
pub fn estimate(config: &ExperimentConfig, base_dir: &Path) -> Result<ConstantEstimates> {
    let prepared = prepare(config, base_dir)?;
    estimate_prepared(config, &prepared)
}

pub fn estimate_prepared(config: &ExperimentConfig, prepared: &PreparedExperiment) -> Result<ConstantEstimates> {
    let n = config.topology.clusters;
    let placement = initial_placement(config.users.count, n, &mut stream(config.seed, Purpose::Placement))?;
    let cluster_of: Vec<usize> = placement.iter().map(|u| u.cluster).collect();
    let weights = AggregationWeights::uniform(&cluster_of, n)?;
    let mut probe_rng = stream(config.seed, Purpose::Probe);
    let probes = (0..config.estimate.probes)
        .map(|_| init_params(&prepared.model, &mut probe_rng).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let settings = ProbeSettings {
        batch_size: config.training.batch_size,
        batches_per_user: config.estimate.batches_per_user,
        rho: config.attention.rho,
    };
    estimate_constants(&prepared.model, &prepared.train, &prepared.shards, &weights, &probes, settings, &mut probe_rng)
}

/// One evaluator's outcome, with errors kept as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundOutcome {
    Ok(BoundValue),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub eta_cap: f64,
    pub hfl: BoundOutcome,
    pub uniform: BoundOutcome,
    pub macfl: BoundOutcome,
}

/// Evaluates all bounds for the config's schedule and `[bounds]` constants.
pub fn bounds_report(config: &ExperimentConfig) -> Result<BoundsReport> {
    let inputs = config.bound_inputs()?;
    let wrap = |r: Result<BoundValue>| match r {
        Ok(v) => BoundOutcome::Ok(v),
        Err(e) => BoundOutcome::Error(e.to_string()),
    };
    Ok(BoundsReport {
        eta_cap: crate::analysis::eta_cap(inputs.lipschitz, inputs.kappa1, inputs.kappa2)?,
        hfl: wrap(hfl_bound(&inputs)),
        uniform: wrap(corollary_bound(&inputs)),
        macfl: wrap(macfl_bound(&inputs)),
    })
}
