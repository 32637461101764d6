use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fmerge_core::lab::LabConfig;
use fmerge_core::{FilterMode, FilterSpec, RouterMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Frequency-filtered merge.
    Fr,
    /// Elementwise mean of the fine-tuned checkpoints.
    Avg,
    /// Task arithmetic: pre + lambda * sum of task vectors.
    Ta,
    /// Trim, elect sign, disjoint mean.
    Ties,
    /// Random drop-and-rescale, then task arithmetic.
    Dare,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fr => "fr",
            Method::Avg => "avg",
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::Dare => "dare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    High,
    Low,
    Band,
}

impl ModeArg {
    pub fn filter_mode(self) -> FilterMode {
        match self {
            ModeArg::High => FilterMode::High,
            ModeArg::Low => FilterMode::Low,
            ModeArg::Band => FilterMode::Band,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RouterArg {
    Perfect,
    Random,
    Learned,
}

impl RouterArg {
    pub fn mode(self) -> RouterMode {
        match self {
            RouterArg::Perfect => RouterMode::Perfect,
            RouterArg::Random => RouterMode::Random,
            RouterArg::Learned => RouterMode::Learned,
        }
    }
}

/// Every knob a command can read. Values come from an optional JSON file and
/// are then overridden by command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory written by `fmerge lab`.
    pub lab: Option<PathBuf>,
    pub pre: Option<PathBuf>,
    pub fine: Option<Vec<PathBuf>>,
    pub backbone: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub rho: Option<f64>,
    pub mode: Option<ModeArg>,
    pub d: Option<f64>,
    pub router: Option<RouterArg>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    /// Task-arithmetic scale; defaults to `1 / n_tasks`.
    pub lambda: Option<f64>,
    pub keep_frac: Option<f64>,
    pub drop_p: Option<f64>,
    pub rhos: Option<Vec<f64>>,
    pub modes: Option<Vec<ModeArg>>,
    pub lab_config: Option<PathBuf>,
    pub dump_spectrum: Option<PathBuf>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn overlay(mut self, flags: PipelineConfig) -> Self {
        overlay_fields!(self, flags;
            lab, pre, fine, backbone, bundle, out, method, rho, mode, d, router, seed, seeds,
            lambda, keep_frac, drop_p, rhos, modes, lab_config, dump_spectrum);
        self
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn rho(&self) -> Result<f64, CliError> {
        let rho = self.rho.unwrap_or(fmerge_core::merge::DEFAULT_RHO);
        check_unit("rho", rho)?;
        Ok(rho)
    }

    pub fn d(&self) -> Result<f64, CliError> {
        let d = self.d.unwrap_or(fmerge_core::expert::DEFAULT_D);
        if !(d > 0.0 && d <= 1.0) {
            return Err(CliError::Usage(format!("d must lie in (0, 1], got {d}")));
        }
        Ok(d)
    }

    pub fn filter_spec(&self) -> Result<FilterSpec, CliError> {
        let mode = self.mode.unwrap_or(ModeArg::High).filter_mode();
        FilterSpec::from_mode(mode, self.rho()?).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn lab_config(&self) -> Result<LabConfig, CliError> {
        match &self.lab_config {
            None => Ok(LabConfig::default()),
            Some(path) => {
                let path = existing(path, "lab config")?;
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read lab config {}: {e}", path.display()))
                })?;
                let cfg: LabConfig = serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("invalid lab config {}: {e}", path.display()))
                })?;
                cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(cfg)
            }
        }
    }
}

pub(crate) fn check_unit(name: &str, value: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(CliError::Usage(format!(
            "{name} must lie in [0, 1], got {value}"
        )));
    }
    Ok(())
}

/// Referenced input files must exist before any work starts.
pub(crate) fn existing<'a>(path: &'a Path, what: &str) -> Result<&'a Path, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}
