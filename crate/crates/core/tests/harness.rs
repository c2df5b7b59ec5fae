use std::fs;
use std::path::Path;
use std::process::Command;

use mobifl::fedcore::{Algorithm, MobilityCadence};
use mobifl::harness::{
    emit_plotdata, load_trace_files, prepare, run, summarize, sweep, trace_csv, write_sweep, write_trace_files,
    CellOutcome, ExperimentConfig, PartitionKind, SweepSpec, TraceFile,
};
use mobifl::Error;

const SMALL: &str = r#"
algorithm = "hfl"
seed = 4

[users]
count = 6

[topology]
clusters = 3
p_s = 0.5

[schedule]
kappa1 = 5
total_iterations = 40

[data]
shard_size = 40
synthetic_dim = 8
synthetic_classes = 4
synthetic_test = 200
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).unwrap()
}

fn config_error(text: &str) -> String {
    match ExperimentConfig::from_toml_str(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_config_gives_the_defaults() {
    let cfg = ExperimentConfig::from_toml_str("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.users.count, 50);
    assert_eq!(cfg.topology.clusters, 5);
    assert_eq!((cfg.schedule.kappa1, cfg.schedule.kappa2), (20, 1));
    assert_eq!(cfg.cloud_rounds().unwrap(), 100);
    assert_eq!(cfg.training.eta, 0.001);
    assert_eq!(cfg.training.batch_size, 10);
    assert_eq!(cfg.topology.cadence, MobilityCadence::Round);
    assert_eq!(cfg.data.partition, PartitionKind::Pathological);
    assert_eq!((cfg.attention.sigma1, cfg.attention.sigma2, cfg.attention.rho), (25.0, 25.0, 0.001));
}

#[test]
fn invalid_values_name_their_field() {
    assert!(config_error("[topology]\np_s = 1.5").contains("topology.p_s"));
    assert!(config_error("[training]\neta = 0.0").contains("training.eta"));
    assert!(config_error("[schedule]\nkappa1 = 0").contains("schedule.kappa1"));
    assert!(config_error("[topology]\nkind = \"custom\"\nclusters = 2").contains("topology.adjacency"));
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    assert!(config_error("[topology]\nstay = 0.5").contains("stay"));
    assert!(config_error("learning_rate = 0.1").contains("learning_rate"));
}

#[test]
fn indivisible_schedule_warns() {
    let cfg = ExperimentConfig::from_toml_str("[schedule]\nkappa1 = 30").unwrap();
    assert_eq!(cfg.cloud_rounds().unwrap(), 66);
    assert!(!cfg.warnings().is_empty());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = small();
    cfg.algorithm = Algorithm::Macfl;
    cfg.topology.cadence = MobilityCadence::Iteration;
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn equal_seeds_give_identical_files() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for stem in ["a", "b"] {
        let trace = run(&cfg, Path::new(".")).unwrap();
        let file = TraceFile { series: "x".into(), seed: cfg.seed, config: cfg.clone(), trace };
        let (csv, json) = write_trace_files(dir.path(), stem, &file).unwrap();
        texts.push((fs::read(csv).unwrap(), fs::read(json).unwrap()));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn participation_columns_under_full_mobility() {
    let mut cfg = small();
    cfg.topology.p_s = 0.0;
    let hfl = run(&cfg, Path::new(".")).unwrap();
    assert!(hfl.records.iter().all(|r| r.participants == 0));
    assert!(hfl.records.windows(2).all(|w| w[0].global_accuracy == w[1].global_accuracy));

    cfg.algorithm = Algorithm::Macfl;
    let macfl = run(&cfg, Path::new(".")).unwrap();
    assert!(macfl.records.iter().skip(1).all(|r| r.participants == 6));

    let csv = trace_csv(&cfg, &macfl).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, mobifl::harness::CSV_COLUMNS);
}

#[test]
fn prepared_data_respects_the_partition() {
    let cfg = small();
    let p = prepare(&cfg, Path::new(".")).unwrap();
    assert_eq!(p.shards.len(), 6);
    for s in &p.shards {
        assert_eq!(s.len(), 40);
        assert!(s.label_support(&p.train).len() <= 2);
    }
}

#[test]
fn missing_idx_files_are_reported() {
    let mut cfg = small();
    cfg.data.source = mobifl::harness::DataSource::Idx;
    let dir = tempfile::tempdir().unwrap();
    let err = prepare(&cfg, dir.path()).unwrap_err().to_string();
    assert!(err.contains("train-images-idx3-ubyte.gz"), "{err}");
}

#[test]
fn sweep_writes_traces_summary_and_plotdata() {
    let spec = SweepSpec {
        base: small(),
        seeds: vec![1, 2],
        axes: vec![
            mobifl::harness::SweepAxis { parameter: "algorithm".into(), values: vec!["hfl".into(), "macfl".into()] },
            mobifl::harness::SweepAxis { parameter: "topology.p_s".into(), values: vec![0.5.into(), 1.0.into()] },
        ],
    };
    let cells = sweep(&spec, Path::new(".")).unwrap();
    assert_eq!(cells.len(), 8);
    assert!(cells.iter().all(|c| matches!(c.outcome, CellOutcome::Ok(_))));
    let rows = summarize(&cells);
    let names: Vec<&str> = rows.iter().map(|r| r.series.as_str()).collect();
    assert_eq!(names, ["hfl_ps0.5", "hfl_ps1", "macfl_ps0.5", "macfl_ps1"]);
    assert!(rows.iter().all(|r| r.completed == 2 && r.failed == 0));

    let dir = tempfile::tempdir().unwrap();
    write_sweep(&cells, dir.path()).unwrap();
    assert!(dir.path().join("hfl_ps1_seed2.csv").exists());
    assert!(dir.path().join("summary.csv").exists());
    assert!(!dir.path().join("failures.txt").exists());

    let traces = load_trace_files(dir.path()).unwrap();
    assert_eq!(traces.len(), 8);
    let out = dir.path().join("plot");
    let written = emit_plotdata(&traces, &out).unwrap();
    assert_eq!(written.len(), 3);
    let acc = fs::read_to_string(out.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("series,x,y\n"));
    assert!(acc.lines().any(|l| l.starts_with("macfl_ps0.5,")));
}

#[test]
fn empty_grid_runs_only_the_base() {
    let spec = SweepSpec { base: small(), seeds: vec![3], axes: vec![] };
    let cells = sweep(&spec, Path::new(".")).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].series, "base");
}

#[test]
fn bad_sweep_values_fail_up_front() {
    let spec = SweepSpec {
        base: small(),
        seeds: vec![1],
        axes: vec![mobifl::harness::SweepAxis { parameter: "topology.p_s".into(), values: vec![2.0.into()] }],
    };
    assert!(spec.validate().is_err());
    assert!(sweep(&spec, Path::new(".")).is_err());
}

#[test]
fn cli_runs_a_config_and_reports_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");
    let exe = env!("CARGO_BIN_EXE_mobifl");

    let status = Command::new(exe).arg("run").arg(&config).arg("-o").arg(&out).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("hfl.csv").exists() && out.join("hfl.json").exists());

    let bounds = Command::new(exe).arg("bounds").arg(&config).output().unwrap();
    assert!(bounds.status.success());
    let report: serde_json::Value = serde_json::from_slice(&bounds.stdout).unwrap();
    assert!(report["eta_cap"].as_f64().unwrap() > 0.0);

    fs::write(&config, "[topology]\np_s = 3.0\n").unwrap();
    let bad = Command::new(exe).arg("run").arg(&config).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("topology.p_s"));

    // features around 1e200 overflow the logits after one step
    let diverging = format!("{SMALL}synthetic_separation = 1e200\n");
    fs::write(&config, diverging).unwrap();
    let div = Command::new(exe).arg("run").arg(&config).arg("-o").arg(&out).output().unwrap();
    assert_eq!(div.status.code(), Some(2));
    let csv = fs::read_to_string(out.join("hfl.csv")).unwrap();
    assert!(csv.contains(r#""state":"diverged""#));
}
