use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BoundInputs, BoundWeights};
use crate::error::{Error, Result};
use crate::fedcore::{Algorithm, AttentionParams, AttentionSign, CosineKind, FederationSettings, MobilityCadence};
use crate::mobility::{build_linear_topology, AdjacencyMatrix, TransitionMatrix};
use crate::models::{ModelKind, ModelSpec};

/// Environment variable naming the directory relative IDX paths resolve against.
pub const DATA_DIR_ENV: &str = "MOBIFL_DATA_DIR";

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub users: UsersSection,
    pub topology: TopologySection,
    pub schedule: ScheduleSection,
    pub training: TrainingSection,
    pub attention: AttentionSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub estimate: EstimateSection,
    pub bounds: BoundsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsersSection {
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Linear,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub clusters: usize,
    /// Rows of the adjacency matrix when `kind = "custom"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<u8>>>,
    pub p_s: f64,
    pub cadence: MobilityCadence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kappa1: usize,
    pub kappa2: usize,
    /// Local iterations in total; gives `T = total_iterations / (κ₁ κ₂)`.
    pub total_iterations: usize,
    /// Overrides `total_iterations` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud_rounds: Option<usize>,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub eta: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub cosine: CosineKind,
    pub sign: AttentionSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Pathological,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub partition: PartitionKind,
    pub shard_size: usize,
    pub classes_per_user: usize,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Keep only the first this many test samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub synthetic_dim: usize,
    pub synthetic_classes: usize,
    pub synthetic_separation: f64,
    /// Training pool size; `users * shard_size` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_train: Option<usize>,
    pub synthetic_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub probes: usize,
    pub batches_per_user: usize,
}

/// Constants for the bound evaluators; schedule and weights come from the
/// rest of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub lipschitz: f64,
    pub sigma: f64,
    pub grad_bound: f64,
    pub eps_c: f64,
    pub eps_g: f64,
    pub f0_gap: f64,
    pub sigma_m: f64,
    pub eps_mc: f64,
    pub eps_mg: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Hfl,
            seed: 1,
            users: UsersSection::default(),
            topology: TopologySection::default(),
            schedule: ScheduleSection::default(),
            training: TrainingSection::default(),
            attention: AttentionSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            estimate: EstimateSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

impl Default for UsersSection {
    fn default() -> Self {
        Self { count: 50 }
    }
}

impl Default for TopologySection {
    fn default() -> Self {
        Self { kind: TopologyKind::Linear, clusters: 5, adjacency: None, p_s: 0.5, cadence: MobilityCadence::Round }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kappa1: 20, kappa2: 1, total_iterations: 2000, cloud_rounds: None, eval_every: 1 }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { eta: 0.001, batch_size: 10 }
    }
}

impl Default for AttentionSection {
    fn default() -> Self {
        let a = AttentionParams::default();
        Self { sigma1: a.sigma1, sigma2: a.sigma2, rho: a.rho, cosine: a.cosine, sign: a.sign }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Softmax, hidden_dim: 64, init_scale: None }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            partition: PartitionKind::Pathological,
            shard_size: 600,
            classes_per_user: 2,
            train_images: "train-images-idx3-ubyte.gz".into(),
            train_labels: "train-labels-idx1-ubyte.gz".into(),
            test_images: "t10k-images-idx3-ubyte.gz".into(),
            test_labels: "t10k-labels-idx1-ubyte.gz".into(),
            test_limit: None,
            synthetic_dim: 64,
            synthetic_classes: 10,
            synthetic_separation: 3.0,
            synthetic_train: None,
            synthetic_test: 2000,
        }
    }
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self { probes: 4, batches_per_user: 4 }
    }
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            lipschitz: 1.0,
            sigma: 1.0,
            grad_bound: 1.0,
            eps_c: 0.1,
            eps_g: 0.1,
            f0_gap: 1.0,
            sigma_m: 1.0,
            eps_mc: 0.1,
            eps_mg: 0.1,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return config_err(format!("{name} must be at least 1, got 0"));
    }
    Ok(())
}

fn finite_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return config_err(format!("{name} must be finite and >= 0, got {v}"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every constraint, naming the field that breaks one.
    pub fn validate(&self) -> Result<()> {
        positive("users.count", self.users.count)?;
        positive("topology.clusters", self.topology.clusters)?;
        positive("schedule.kappa1", self.schedule.kappa1)?;
        positive("schedule.kappa2", self.schedule.kappa2)?;
        positive("schedule.eval_every", self.schedule.eval_every)?;
        positive("training.batch_size", self.training.batch_size)?;
        positive("data.shard_size", self.data.shard_size)?;
        positive("data.classes_per_user", self.data.classes_per_user)?;
        let p = self.topology.p_s;
        if !(0.0..=1.0).contains(&p) {
            return config_err(format!("topology.p_s must lie in [0, 1], got {p}"));
        }
        let eta = self.training.eta;
        if !(eta.is_finite() && eta > 0.0) {
            return config_err(format!("training.eta must be finite and > 0, got {eta}"));
        }
        finite_nonneg("attention.rho", self.attention.rho)?;
        for (name, v) in [("attention.sigma1", self.attention.sigma1), ("attention.sigma2", self.attention.sigma2)] {
            if !v.is_finite() {
                return config_err(format!("{name} must be finite, got {v}"));
            }
        }
        if let Some(s) = self.model.init_scale {
            finite_nonneg("model.init_scale", s)?;
        }
        if self.model.kind == ModelKind::Mlp {
            positive("model.hidden_dim", self.model.hidden_dim)?;
        }
        if self.data.source == DataSource::Synthetic {
            positive("data.synthetic_dim", self.data.synthetic_dim)?;
            positive("data.synthetic_test", self.data.synthetic_test)?;
            if self.data.synthetic_classes < 2 {
                return config_err("data.synthetic_classes must be at least 2");
            }
            let s = self.data.synthetic_separation;
            if !(s.is_finite() && s > 0.0) {
                return config_err(format!("data.synthetic_separation must be > 0, got {s}"));
            }
        }
        positive("estimate.probes", self.estimate.probes)?;
        positive("estimate.batches_per_user", self.estimate.batches_per_user)?;
        let b = &self.bounds;
        for (name, v) in [
            ("bounds.lipschitz", b.lipschitz),
            ("bounds.sigma", b.sigma),
            ("bounds.grad_bound", b.grad_bound),
            ("bounds.eps_c", b.eps_c),
            ("bounds.eps_g", b.eps_g),
            ("bounds.f0_gap", b.f0_gap),
            ("bounds.sigma_m", b.sigma_m),
            ("bounds.eps_mc", b.eps_mc),
            ("bounds.eps_mg", b.eps_mg),
        ] {
            finite_nonneg(name, v)?;
        }
        match (self.topology.kind, &self.topology.adjacency) {
            (TopologyKind::Custom, None) => return config_err("topology.adjacency is required for kind = \"custom\""),
            (TopologyKind::Linear, Some(_)) => {
                return config_err("topology.adjacency is only allowed with kind = \"custom\"")
            }
            (TopologyKind::Custom, Some(rows)) if rows.len() != self.topology.clusters => {
                return config_err(format!(
                    "topology.adjacency has {} rows but topology.clusters = {}",
                    rows.len(),
                    self.topology.clusters
                ))
            }
            _ => {}
        }
        self.cloud_rounds()?;
        self.adjacency()?;
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.users.count < self.topology.clusters {
            out.push(format!(
                "users.count = {} is below topology.clusters = {}; some clusters start empty",
                self.users.count, self.topology.clusters
            ));
        }
        let k = self.schedule.kappa1 * self.schedule.kappa2;
        if self.schedule.cloud_rounds.is_none() && !self.schedule.total_iterations.is_multiple_of(k) {
            out.push(format!(
                "schedule.total_iterations = {} is not a multiple of kappa1 * kappa2 = {k}; rounding down",
                self.schedule.total_iterations
            ));
        }
        out
    }

    /// Number of cloud rounds `T`.
    pub fn cloud_rounds(&self) -> Result<usize> {
        let s = &self.schedule;
        let t = match s.cloud_rounds {
            Some(t) => t,
            None => s.total_iterations / (s.kappa1 * s.kappa2).max(1),
        };
        if t == 0 {
            return config_err(format!(
                "schedule gives zero cloud rounds (total_iterations = {}, kappa1 * kappa2 = {})",
                s.total_iterations,
                s.kappa1 * s.kappa2
            ));
        }
        Ok(t)
    }

    pub fn adjacency(&self) -> Result<AdjacencyMatrix> {
        let adj = match &self.topology.adjacency {
            Some(rows) => AdjacencyMatrix::from_rows(rows),
            None => build_linear_topology(self.topology.clusters),
        };
        adj.map_err(|e| Error::Config(format!("topology: {e}")))
    }

    pub fn transition(&self) -> Result<TransitionMatrix> {
        TransitionMatrix::with_uniform_stay(&self.adjacency()?, self.topology.p_s)
            .map_err(|e| Error::Config(format!("topology.p_s: {e}")))
    }

    pub fn model_spec(&self, input_dim: usize, n_classes: usize) -> ModelSpec {
        let spec = match self.model.kind {
            ModelKind::Softmax => ModelSpec::softmax(input_dim, n_classes),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.model.hidden_dim, n_classes),
        };
        match self.model.init_scale {
            Some(s) => spec.with_init_scale(s),
            None => spec,
        }
    }

    pub fn settings(&self) -> Result<FederationSettings> {
        let a = &self.attention;
        Ok(FederationSettings {
            algorithm: self.algorithm,
            kappa1: self.schedule.kappa1,
            kappa2: self.schedule.kappa2,
            cloud_rounds: self.cloud_rounds()?,
            eta: self.training.eta,
            batch_size: self.training.batch_size,
            attention: AttentionParams {
                sigma1: a.sigma1,
                sigma2: a.sigma2,
                rho: a.rho,
                cosine: a.cosine,
                sign: a.sign,
            },
            cadence: self.topology.cadence,
            seed: self.seed,
            eval_every: self.schedule.eval_every,
        })
    }

    /// Bound inputs with uniform weights over this config's users and clusters.
    pub fn bound_inputs(&self) -> Result<BoundInputs> {
        let b = &self.bounds;
        Ok(BoundInputs {
            eta: self.training.eta,
            p_s: self.topology.p_s,
            rounds: self.cloud_rounds()?,
            lipschitz: b.lipschitz,
            sigma: b.sigma,
            grad_bound: b.grad_bound,
            eps_c: b.eps_c,
            eps_g: b.eps_g,
            kappa1: self.schedule.kappa1,
            kappa2: self.schedule.kappa2,
            f0_gap: b.f0_gap,
            weights: BoundWeights::Uniform { users: self.users.count, clusters: self.topology.clusters },
            beta: None,
            sigma_m: b.sigma_m,
            eps_mc: b.eps_mc,
            eps_mg: b.eps_mg,
        })
    }

    /// Resolves an IDX path: absolute paths stay, relative ones are joined
    /// to `$MOBIFL_DATA_DIR` when set, else to `base`.
    pub fn resolve_data_path(&self, file: &str, base: &Path) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(p),
            None => base.join(p),
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
