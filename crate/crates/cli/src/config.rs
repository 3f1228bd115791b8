//! Experiment configuration: one JSON document per run, with dot-path
//! overrides applied before typed parsing and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ntklab::LossKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ToyEnsemble,
    NtkPrepost,
    NtkTracking,
    WidthSweep,
    EnsembleVsLaplace,
    BrierCounterexample,
    AssumptionAudit,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::ToyEnsemble => "toy_ensemble",
            Self::NtkPrepost => "ntk_prepost",
            Self::NtkTracking => "ntk_tracking",
            Self::WidthSweep => "width_sweep",
            Self::EnsembleVsLaplace => "ensemble_vs_laplace",
            Self::BrierCounterexample => "brier_counterexample",
            Self::AssumptionAudit => "assumption_audit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 512,
            sigma_w: 1.5,
            sigma_b: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Label-smoothing mass spread uniformly over the classes.
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Where inputs and targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// 1-d inputs with contiguous class segments and a test grid.
    Toy {
        n_train: usize,
        classes: usize,
        seed: u64,
        test_grid: GridConfig,
    },
    /// Two Gaussian blobs rescaled to `‖x‖² = d`.
    Synthetic {
        n_train: usize,
        n_test: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
    /// Digit images as an odd/even problem; falls back to `Synthetic` with
    /// the same sizes when the files are missing.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_train: usize,
        n_test: usize,
        seed: u64,
        fallback_separation: f64,
    },
    Inline {
        train: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        test: Vec<Vec<f64>>,
    },
    /// Inputs one row per point; targets one row of probabilities per
    /// training point.
    Csv {
        train: PathBuf,
        targets: PathBuf,
        test: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Toy {
            n_train: 12,
            classes: 3,
            seed: 0,
            test_grid: GridConfig {
                lo: -4.0,
                hi: 4.0,
                count: 81,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub eta0: f64,
    pub t_end: f64,
    /// First recorded time; records are log-spaced from here to `t_end`.
    pub t_first: f64,
    pub records: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            eta0: 1.0,
            t_end: 100.0,
            t_first: 0.1,
            records: 20,
            rtol: 1e-6,
            atol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub seed: u64,
    /// Random configurations for the gap certificate.
    pub configs: usize,
    pub betas: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            configs: 20,
            betas: vec![0.01, 0.1, 1.0],
            n_train: 6,
            n_test: 4,
            classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedPoint {
    pub z: f64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrierCase {
    pub beta: f64,
    pub z0: f64,
    /// Expected stationary points, in increasing `z`.
    pub expected: Vec<ExpectedPoint>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrierConfig {
    pub theta: f64,
    pub y: f64,
    pub cases: Vec<BrierCase>,
    /// Newton starts spread over this grid.
    pub starts: GridConfig,
    /// Landscape samples written to CSV.
    pub landscape: GridConfig,
}

impl Default for BrierConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            y: 0.5,
            cases: Vec::new(),
            starts: GridConfig {
                lo: -4.0,
                hi: 10.0,
                count: 141,
            },
            landscape: GridConfig {
                lo: -2.0,
                hi: 8.0,
                count: 501,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub kinds: Vec<LossKind>,
    pub n_points: usize,
    pub classes: usize,
    pub smoothing: f64,
    pub k0: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            kinds: vec![LossKind::Mse, LossKind::Ce, LossKind::CeRef],
            n_points: 4,
            classes: 3,
            smoothing: 0.1,
            k0: 10.0,
            samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub smoothing: f64,
    pub beta_reg: f64,
    pub probes: usize,
    /// Horizon of the extra one-hot runs checked against
    /// `one_hot_drift_min`; `train.t_end` when absent.
    pub one_hot_t_end: Option<f64>,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.1,
            beta_reg: 0.01,
            probes: 3,
            one_hot_t_end: None,
        }
    }
}

/// A pilot-calibrated threshold, with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub value: f64,
    /// Width the threshold applies to; the check is skipped when absent
    /// from the sweep.
    #[serde(default)]
    pub width: Option<usize>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub brier: BrierConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default)]
    pub thresholds: BTreeMap<String, Threshold>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Sets `path` (dot-separated) in a JSON document. The value is parsed as
/// JSON when possible and kept as a string otherwise.
pub fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    ensure!(keys.iter().all(|k| !k.is_empty()), "empty key in override path `{path}`");
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().with_context(|| format!("`{path}`: `{key}` is inside a non-object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().with_context(|| format!("`{path}`: parent is not an object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `k=v` overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => bail!("override `{s}` is not of the form key=value"),
    }
}

impl ExperimentConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(doc).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies overrides in order.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for (k, v) in overrides {
            set_path(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    fn needs_training(&self) -> bool {
        matches!(
            self.experiment,
            Experiment::ToyEnsemble | Experiment::NtkPrepost | Experiment::NtkTracking | Experiment::WidthSweep
        )
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        ensure!(a.depth >= 1, "arch.depth must be at least 1");
        ensure!(a.width >= 1, "arch.width must be positive");
        ensure!(a.sigma_w > 0.0 && a.sigma_w.is_finite(), "arch.sigma_w must be positive");
        ensure!(a.sigma_b >= 0.0 && a.sigma_b.is_finite(), "arch.sigma_b must be nonnegative");
        ensure!((0.0..1.0).contains(&self.loss.smoothing), "loss.smoothing must lie in [0, 1)");
        let t = &self.train;
        ensure!(t.beta >= 0.0 && t.beta.is_finite(), "train.beta must be nonnegative");
        ensure!(t.eta0 > 0.0 && t.eta0.is_finite(), "train.eta0 must be positive");
        ensure!(t.t_end > 0.0 && t.t_end.is_finite(), "train.t_end must be positive");
        ensure!(t.t_first > 0.0 && t.t_first <= t.t_end, "train.t_first must lie in (0, t_end]");
        ensure!(t.records >= 1, "train.records must be at least 1");
        ensure!(t.rtol > 0.0 && t.atol > 0.0, "integrator tolerances must be positive");
        ensure!(self.widths.iter().all(|&w| w > 0), "widths must be positive");
        for (name, th) in &self.thresholds {
            ensure!(th.value.is_finite(), "threshold {name} must be finite");
            ensure!(!th.provenance.trim().is_empty(), "threshold {name} needs a provenance note");
        }
        if self.needs_training() {
            ensure!(!self.seeds.is_empty(), "seeds must not be empty");
            let mut s = self.seeds.clone();
            s.sort_unstable();
            s.dedup();
            ensure!(s.len() == self.seeds.len(), "seeds must be distinct");
        }
        self.validate_data()?;
        match self.experiment {
            Experiment::ToyEnsemble => {
                ensure!(self.ensemble.samples >= 2, "ensemble.samples must be at least 2");
            }
            Experiment::NtkPrepost | Experiment::WidthSweep => {
                ensure!(!self.widths.is_empty(), "widths must not be empty");
            }
            Experiment::NtkTracking => {
                ensure!(!self.widths.is_empty(), "widths must not be empty");
                ensure!((0.0..1.0).contains(&self.tracking.smoothing) && self.tracking.smoothing > 0.0, "tracking.smoothing must lie in (0, 1)");
                ensure!(self.tracking.beta_reg > 0.0, "tracking.beta_reg must be positive");
                ensure!(self.tracking.probes >= 1, "tracking.probes must be at least 1");
                if let Some(t) = self.tracking.one_hot_t_end {
                    ensure!(t > self.train.t_first, "tracking.one_hot_t_end must exceed train.t_first");
                }
            }
            Experiment::EnsembleVsLaplace => {
                let e = &self.ensemble;
                ensure!(e.configs >= 1 && e.n_train >= 1 && e.classes >= 2, "ensemble configs, n_train and classes must be positive");
                ensure!(!e.betas.is_empty() && e.betas.iter().all(|b| *b > 0.0), "ensemble.betas must be positive");
                ensure!(e.samples >= 2, "ensemble.samples must be at least 2");
            }
            Experiment::BrierCounterexample => {
                let b = &self.brier;
                ensure!(b.theta > 0.0, "brier.theta must be positive");
                ensure!(b.y > 0.0 && b.y < 1.0, "brier.y must lie in (0, 1)");
                ensure!(!b.cases.is_empty(), "brier.cases must not be empty");
                ensure!(b.starts.count >= 2 && b.starts.lo < b.starts.hi, "brier.starts must span an interval");
                for c in &b.cases {
                    ensure!(c.beta >= 0.0 && c.tolerance > 0.0, "brier case needs beta ≥ 0 and tolerance > 0");
                    for e in &c.expected {
                        ensure!(["min", "max", "saddle"].contains(&e.kind.as_str()), "unknown stationary kind {}", e.kind);
                    }
                }
            }
            Experiment::AssumptionAudit => {
                let a = &self.audit;
                ensure!(!a.kinds.is_empty(), "audit.kinds must not be empty");
                ensure!(a.n_points >= 1 && a.classes >= 2 && a.samples >= 1, "audit sizes must be positive");
                ensure!(a.k0 > 0.0, "audit.k0 must be positive");
                ensure!((0.0..1.0).contains(&a.smoothing), "audit.smoothing must lie in [0, 1)");
            }
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        if !self.needs_training() {
            return Ok(());
        }
        match &self.data {
            DataConfig::Toy {
                n_train,
                classes,
                test_grid,
                ..
            } => {
                ensure!(*classes >= 2 && n_train >= classes, "toy data needs n_train ≥ classes ≥ 2");
                ensure!(test_grid.count > 0, "empty test grid");
                ensure!(test_grid.lo <= test_grid.hi, "test grid bounds are reversed");
            }
            DataConfig::Synthetic {
                n_train, dim, separation, ..
            } => {
                ensure!(*n_train >= 2 && *dim >= 1, "synthetic data needs n_train ≥ 2 and dim ≥ 1");
                ensure!(separation.is_finite(), "separation must be finite");
            }
            DataConfig::Idx {
                n_train,
                fallback_separation,
                ..
            } => {
                ensure!(*n_train >= 2, "idx data needs n_train ≥ 2");
                ensure!(fallback_separation.is_finite(), "fallback_separation must be finite");
            }
            DataConfig::Inline {
                train,
                labels,
                classes,
                test,
            } => {
                ensure!(!train.is_empty(), "inline data needs training points");
                ensure!(train.len() == labels.len(), "inline data: {} points but {} labels", train.len(), labels.len());
                ensure!(labels.iter().all(|l| l < classes), "inline label out of range");
                let d = train[0].len();
                ensure!(train.iter().chain(test).all(|p| p.len() == d), "inline points must share one dimension");
            }
            DataConfig::Csv { .. } => {}
        }
        if self.experiment == Experiment::ToyEnsemble {
            let empty = match &self.data {
                DataConfig::Toy { test_grid, .. } => test_grid.count == 0,
                DataConfig::Inline { test, .. } => test.is_empty(),
                DataConfig::Synthetic { n_test, .. } | DataConfig::Idx { n_test, .. } => *n_test == 0,
                DataConfig::Csv { .. } => false,
            };
            ensure!(!empty, "empty test grid");
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.experiment.name()))
    }

    pub fn threshold(&self, name: &str) -> Result<&Threshold> {
        self.thresholds.get(name).with_context(|| format!("missing threshold `{name}` in config"))
    }
}
