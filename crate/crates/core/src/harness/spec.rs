use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use super::HarnessError;
use crate::losses::{EasyLossKind, HardLossKind};
use crate::pipeline::{ConsistencyScope, TrainConfig};
use crate::risk::RiskEstimator;

pub const ENV_OUT_DIR: &str = "SPLITPU_OUT_DIR";
pub const ENV_JOBS: &str = "SPLITPU_JOBS";

/// A full experiment: data, PU split size, seeds, training settings and an
/// optional sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    /// Number of labeled positives.
    pub n_p: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub sweep: SweepAxes,
    pub out_dir: PathBuf,
    /// Worker threads; 0 means one per available core.
    pub jobs: usize,
    /// Unlocks oracle labels for split analysis.
    pub analysis: bool,
    /// Thresholds examined by split analysis.
    pub analysis_taus: Vec<f64>,
    /// Train one student per threshold during split analysis.
    pub analysis_students: bool,
    pub save_snapshots: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            n_p: 50,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            sweep: SweepAxes::default(),
            out_dir: PathBuf::from("runs"),
            jobs: 0,
            analysis: false,
            analysis_taus: vec![0.7, 0.8, 0.9, 0.92, 0.95],
            analysis_students: true,
            save_snapshots: true,
        }
    }
}

/// Lists of values to sweep; absent axes keep the base setting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub tau: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub easy_loss: Option<Vec<EasyLossKind>>,
    pub hard_loss: Option<Vec<HardLossKind>>,
    pub iterations: Option<Vec<usize>>,
    pub risk: Option<Vec<RiskEstimator>>,
    pub early_stop: Option<Vec<bool>>,
    pub consistency_scope: Option<Vec<ConsistencyScope>>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self == &SweepAxes::default()
    }
}

/// Parses a spec from JSON text, reporting the key path of any type error.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::Config {
            key: if path == "." { String::new() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

/// Reads, parses and range-checks a spec file. Relative dataset paths are
/// taken relative to the file's directory.
pub fn validate_config(path: impl AsRef<Path>) -> Result<ExperimentSpec, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut spec = parse_spec(&text)?;
    if let Some(dir) = path.parent() {
        spec.dataset.resolve_paths(dir);
    }
    check_spec(&spec)?;
    Ok(spec)
}

fn err(key: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Range checks on an already parsed spec.
pub fn check_spec(spec: &ExperimentSpec) -> Result<(), HarnessError> {
    if let Some((k, m)) = spec.train.problems().into_iter().next() {
        return Err(err(format!("train.{k}"), m));
    }
    if spec.n_p == 0 {
        return Err(err("n_p", "must be > 0"));
    }
    if spec.seeds.is_empty() {
        return Err(err("seeds", "at least one seed is required"));
    }
    let mut sorted = spec.seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != spec.seeds.len() {
        return Err(err("seeds", "seeds must be distinct"));
    }
    match &spec.dataset {
        DatasetSpec::Gaussians {
            n_pos,
            n_neg,
            dim,
            separation,
            test_pos,
            test_neg,
            ..
        } => {
            for (k, v) in [
                ("n_pos", n_pos),
                ("n_neg", n_neg),
                ("dim", dim),
                ("test_pos", test_pos),
                ("test_neg", test_neg),
            ] {
                if *v == 0 {
                    return Err(err(format!("dataset.{k}"), "must be > 0"));
                }
            }
            if !(separation.is_finite() && *separation >= 0.0) {
                return Err(err(
                    "dataset.separation",
                    format!("{separation} must be finite and >= 0"),
                ));
            }
            if spec.n_p > *n_pos {
                return Err(err(
                    "n_p",
                    format!("{} exceeds the {n_pos} available positives", spec.n_p),
                ));
            }
        }
        DatasetSpec::Idx {
            positive_classes,
            max_label,
            ..
        } => {
            if positive_classes.is_empty() {
                return Err(err("dataset.positive_classes", "must not be empty"));
            }
            if let Some(c) = positive_classes.iter().find(|&&c| c > *max_label) {
                return Err(err(
                    "dataset.positive_classes",
                    format!("class {c} exceeds max_label {max_label}"),
                ));
            }
        }
        DatasetSpec::Cifar10 { train, .. } => {
            if train.is_empty() {
                return Err(err("dataset.train", "at least one batch file is required"));
            }
        }
    }
    check_sweep(&spec.sweep)?;
    for (i, t) in spec.analysis_taus.iter().enumerate() {
        if !(0.0..=1.0).contains(t) {
            return Err(err(
                format!("analysis_taus[{i}]"),
                format!("{t} must lie in [0, 1]"),
            ));
        }
    }
    Ok(())
}

fn check_axis<T>(
    name: &str,
    axis: &Option<Vec<T>>,
    ok: impl Fn(&T) -> Result<(), String>,
) -> Result<(), HarnessError> {
    let Some(values) = axis else { return Ok(()) };
    if values.is_empty() {
        return Err(err(
            format!("sweep.{name}"),
            "an axis needs at least one value",
        ));
    }
    for (i, v) in values.iter().enumerate() {
        ok(v).map_err(|m| err(format!("sweep.{name}[{i}]"), m))?;
    }
    Ok(())
}

fn any_value<T>(_: &T) -> Result<(), String> {
    Ok(())
}

fn check_sweep(s: &SweepAxes) -> Result<(), HarnessError> {
    check_axis("tau", &s.tau, |t| {
        if (0.0..=1.0).contains(t) {
            Ok(())
        } else {
            Err(format!("{t} must lie in [0, 1]"))
        }
    })?;
    check_axis("rho", &s.rho, |r| {
        if *r > 0.0 && *r < 1.0 {
            Ok(())
        } else {
            Err(format!("{r} must lie strictly inside (0, 1)"))
        }
    })?;
    let nonneg = |v: &f64| {
        if v.is_finite() && *v >= 0.0 {
            Ok(())
        } else {
            Err(format!("{v} must be finite and >= 0"))
        }
    };
    check_axis("alpha", &s.alpha, nonneg)?;
    check_axis("beta", &s.beta, nonneg)?;
    check_axis("easy_loss", &s.easy_loss, any_value)?;
    check_axis("hard_loss", &s.hard_loss, any_value)?;
    check_axis("iterations", &s.iterations, any_value)?;
    check_axis("risk", &s.risk, any_value)?;
    check_axis("early_stop", &s.early_stop, any_value)?;
    check_axis("consistency_scope", &s.consistency_scope, any_value)?;
    Ok(())
}

/// Applies `SPLITPU_OUT_DIR` and `SPLITPU_JOBS` when set.
pub fn apply_env_overrides(spec: &mut ExperimentSpec) -> Result<(), HarnessError> {
    if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
        if !dir.is_empty() {
            spec.out_dir = PathBuf::from(dir);
        }
    }
    if let Ok(jobs) = std::env::var(ENV_JOBS) {
        spec.jobs = jobs
            .trim()
            .parse()
            .map_err(|_| err(ENV_JOBS, format!("{jobs:?} is not a nonnegative integer")))?;
    }
    Ok(())
}
