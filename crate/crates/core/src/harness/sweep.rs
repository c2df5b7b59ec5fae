use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run, write_atomic, write_trace_files, ExperimentConfig, TraceFile};
use crate::error::{Error, Result};
use crate::fedcore::RunStatus;

/// A base config, the parameters to vary and the seeds to repeat with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
}

/// A dotted config key such as `topology.p_s` and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: String,
    pub values: Vec<toml::Value>,
}

pub fn parse_sweep(path: impl AsRef<Path>) -> Result<SweepSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let spec: SweepSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
    spec.validate()?;
    Ok(spec)
}

/// `(parameter, value)` for each axis of a sweep.
pub type GridPoint = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellOutcome {
    Ok(Box<TraceFile>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// `(parameter, value)` for each axis.
    pub point: Vec<(String, String)>,
    pub series: String,
    pub seed: u64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub series: String,
    pub completed: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) if f.fract() == 0.0 && f.abs() < 1e15 => format!("{}", *f as i64),
        other => other.to_string(),
    }
}

fn series_name(point: &[(String, String)]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point
        .iter()
        .map(|(k, v)| {
            let short = k.rsplit('.').next().unwrap_or(k);
            if short == "algorithm" {
                v.clone()
            } else {
                format!("{}{v}", short.replace('_', ""))
            }
        })
        .collect::<Vec<_>>()
        .join("_")
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty sweep parameter `{path}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("sweep parameter `{path}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        for axis in &self.axes {
            for v in &axis.values {
                self.apply(&[(axis.parameter.as_str(), v)], self.base.seed)?;
            }
        }
        Ok(())
    }

    fn apply(&self, point: &[(&str, &toml::Value)], seed: u64) -> Result<ExperimentConfig> {
        let mut table = toml::Table::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in point {
            set_path(&mut table, k, (*v).clone())?;
        }
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every `(grid point, seed)` pair as a resolved config.
    pub fn cells(&self) -> Result<Vec<(GridPoint, ExperimentConfig)>> {
        let mut points: Vec<Vec<(&str, &toml::Value)>> = vec![Vec::new()];
        for axis in &self.axes {
            let mut next = Vec::new();
            for p in &points {
                for v in &axis.values {
                    let mut q = p.clone();
                    q.push((axis.parameter.as_str(), v));
                    next.push(q);
                }
            }
            points = next;
        }
        let mut out = Vec::new();
        for p in &points {
            let labels: Vec<(String, String)> = p.iter().map(|(k, v)| (k.to_string(), value_label(v))).collect();
            for &seed in &self.seeds {
                out.push((labels.clone(), self.apply(p, seed)?));
            }
        }
        Ok(out)
    }
}

fn run_cell(point: Vec<(String, String)>, config: ExperimentConfig, base_dir: &Path) -> SweepCell {
    let series = series_name(&point);
    let seed = config.seed;
    let outcome = match run(&config, base_dir) {
        Ok(trace) => CellOutcome::Ok(Box::new(TraceFile { series: series.clone(), seed, config, trace })),
        Err(e) => CellOutcome::Failed(e.to_string()),
    };
    SweepCell { point, series, seed, outcome }
}

/// Runs every cell. A failing cell is recorded and the others carry on.
pub fn sweep(spec: &SweepSpec, base_dir: &Path) -> Result<Vec<SweepCell>> {
    let cells = spec.cells()?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(cells.into_par_iter().map(|(p, c)| run_cell(p, c, base_dir)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(cells.into_iter().map(|(p, c)| run_cell(p, c, base_dir)).collect())
    }
}

/// Final-accuracy mean and sample standard deviation per series. Diverged
/// runs count as failures.
pub fn summarize(cells: &[SweepCell]) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, Vec<f64>, usize)> = Vec::new();
    for c in cells {
        let idx = match groups.iter().position(|g| g.0 == c.series) {
            Some(i) => i,
            None => {
                groups.push((c.series.clone(), Vec::new(), 0));
                groups.len() - 1
            }
        };
        match &c.outcome {
            CellOutcome::Ok(f) if f.trace.status == RunStatus::Completed => {
                if let Some(a) = f.trace.final_accuracy() {
                    groups[idx].1.push(a);
                }
            }
            _ => groups[idx].2 += 1,
        }
    }
    groups
        .into_iter()
        .map(|(series, acc, failed)| {
            let n = acc.len();
            let mean = if n == 0 { f64::NAN } else { acc.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            SummaryRow { series, completed: n, failed, mean_accuracy: mean, std_accuracy: std }
        })
        .collect()
}

/// Writes one trace pair per successful cell, `failures.txt` for the rest,
/// and `summary.csv`.
pub fn write_sweep(cells: &[SweepCell], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut failures = String::new();
    for c in cells {
        match &c.outcome {
            CellOutcome::Ok(f) => {
                let (csv, json) = write_trace_files(dir, &format!("{}_seed{}", c.series, c.seed), f)?;
                written.push(csv);
                written.push(json);
            }
            CellOutcome::Failed(msg) => {
                let _ = writeln!(failures, "{} seed {}: {msg}", c.series, c.seed);
            }
        }
    }
    if !failures.is_empty() {
        let p = dir.join("failures.txt");
        write_atomic(&p, failures.as_bytes())?;
        written.push(p);
    }
    let mut summary = String::from("series,completed,failed,mean_accuracy,std_accuracy\n");
    for r in summarize(cells) {
        let _ = writeln!(summary, "{},{},{},{},{}", r.series, r.completed, r.failed, r.mean_accuracy, r.std_accuracy);
    }
    let p = dir.join("summary.csv");
    write_atomic(&p, summary.as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Reads every `*.json` trace file in `dir`, sorted by file name.
pub fn load_trace_files(dir: &Path) -> Result<Vec<TraceFile>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Long-format `series,x,y` files: accuracy, loss and participants against
/// the iteration counter, averaged over seeds within a series.
pub fn emit_plotdata(traces: &[TraceFile], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    type Metric = fn(&crate::fedcore::MetricsRecord) -> f64;
    let recipes: [(&str, Metric); 3] =
        [("accuracy", |r| r.global_accuracy), ("loss", |r| r.global_loss), ("participants", |r| r.participants as f64)];
    let mut order: Vec<&str> = Vec::new();
    for t in traces {
        if !order.contains(&t.series.as_str()) {
            order.push(&t.series);
        }
    }
    let mut written = Vec::new();
    for (name, metric) in recipes {
        let mut text = String::from("series,x,y\n");
        for series in &order {
            let mut by_t: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for t in traces.iter().filter(|t| t.series == *series) {
                for r in &t.trace.records {
                    let e = by_t.entry(r.t).or_insert((0.0, 0));
                    e.0 += metric(r);
                    e.1 += 1;
                }
            }
            for (x, (sum, n)) in by_t {
                let _ = writeln!(text, "{series},{x},{}", sum / n as f64);
            }
        }
        let p = out_dir.join(format!("{name}.csv"));
        write_atomic(&p, text.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
