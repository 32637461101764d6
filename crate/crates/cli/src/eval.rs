use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fmerge_core::expert::{bundle_from_bytes, ExpertBundle};
use fmerge_core::lab::{routed_accuracies, Dataset, Lab, Network};
use fmerge_core::merge::fr_merge_with;
use fmerge_core::numeric::fnv1a64;
use fmerge_core::router::{train_router, RouterTrainConfig, TaskInputs};
use fmerge_core::{Checkpoint, Error, FilterSpec, RouterMode, RouterModel};
use serde::{Deserialize, Serialize};

use crate::config::{check_unit, existing, ModeArg, PipelineConfig, RouterArg};
use crate::lab::LabManifest;
use crate::merge::read_checkpoint;
use crate::output::{atomic_write, atomic_write_json};
use crate::CliError;

pub const EVAL_HEADER: &str = "task_id,method,router_mode,accuracy,seed";

/// Rho grid of the default sweep: 0% to 60% removed.
pub const DEFAULT_RHOS: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    /// `backbone` alone or `free` (backbone plus routed experts).
    pub method: String,
    /// `none` for backbone rows.
    pub router_mode: String,
    pub accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backbone: PathBuf,
    pub bundle: Option<PathBuf>,
    pub rows: Vec<EvalRow>,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task_id, r.method, r.router_mode, r.accuracy, r.seed
        );
    }
    out
}

fn read_bundle(path: &Path) -> Result<ExpertBundle, CliError> {
    existing(path, "bundle")?;
    let bytes = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read bundle {}: {e}", path.display())))?;
    Ok(bundle_from_bytes(&bytes)?)
}

/// Router over the bundle's tasks, in bundle order.
fn build_router(
    mode: RouterMode,
    bundle: &ExpertBundle,
    datasets: &[Dataset],
    seed: u64,
) -> Result<RouterModel, CliError> {
    let ids: Vec<String> = bundle.task_ids().map(str::to_string).collect();
    let input_dim = datasets
        .first()
        .map(|d| d.input_dim)
        .ok_or_else(|| CliError::Usage("lab has no datasets".into()))?;
    Ok(match mode {
        RouterMode::Perfect => RouterModel::perfect(ids, input_dim)?,
        RouterMode::Random => RouterModel::random(ids, input_dim, seed)?,
        RouterMode::Learned => {
            let tasks = ids
                .iter()
                .map(|id| {
                    let d = datasets
                        .iter()
                        .find(|d| &d.task_id == id)
                        .ok_or_else(|| Error::UnknownTask(id.clone()))?;
                    Ok(TaskInputs {
                        task_id: id.clone(),
                        inputs: d.train_x.clone(),
                    })
                })
                .collect::<fmerge_core::Result<Vec<_>>>()?;
            let cfg = RouterTrainConfig {
                seed,
                ..RouterTrainConfig::default()
            };
            train_router(&tasks, input_dim, &cfg)?.0
        }
    })
}

/// Accuracy table for a backbone, optionally with routed experts, on the
/// datasets of a lab directory. Writes `--out` (CSV) and the same basename
/// with `.json`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalReport, CliError> {
    let out = cfg.out()?.to_path_buf();
    if out.with_extension("json") == out {
        return Err(CliError::Usage(
            "--out names the CSV table; the JSON report is written next to it".into(),
        ));
    }
    let lab_dir = cfg
        .lab
        .as_deref()
        .ok_or_else(|| CliError::Usage("--lab is required".into()))?;
    let backbone_path = cfg
        .backbone
        .as_deref()
        .ok_or_else(|| CliError::Usage("--backbone is required".into()))?;
    let (backbone, backbone_bytes) = read_checkpoint(backbone_path, "backbone")?;
    let bundle = cfg.bundle.as_deref().map(read_bundle).transpose()?;
    let manifest = LabManifest::load(lab_dir)?;
    let datasets = manifest.datasets()?;
    let seed0 = cfg.seed.unwrap_or(0);
    let seeds = cfg.seeds.unwrap_or(1).max(1);
    let mode = cfg.router.unwrap_or(RouterArg::Perfect).mode();

    let net = Network::from_checkpoint(&backbone)?;
    let mut rows = Vec::new();
    for d in &datasets {
        rows.push(EvalRow {
            task_id: d.task_id.clone(),
            method: "backbone".into(),
            router_mode: "none".into(),
            accuracy: fmerge_core::lab::evaluate_network(&net, d)?,
            seed: seed0,
        });
    }
    if let Some(bundle) = &bundle {
        let actual = fnv1a64(&backbone_bytes);
        if actual != bundle.backbone_fnv1a() {
            return Err(Error::ChecksumMismatch {
                bundle: bundle.backbone_fnv1a(),
                backbone: actual,
            }
            .into());
        }
        for seed in seed0..seed0 + seeds as u64 {
            let router = build_router(mode, bundle, &datasets, seed)?;
            let acc = routed_accuracies(&backbone, bundle, &router, &datasets)?;
            for (d, a) in datasets.iter().zip(acc) {
                rows.push(EvalRow {
                    task_id: d.task_id.clone(),
                    method: "free".into(),
                    router_mode: mode.name().into(),
                    accuracy: a,
                    seed,
                });
            }
        }
    }
    let report = EvalReport {
        backbone: backbone_path.to_path_buf(),
        bundle: cfg.bundle.clone(),
        rows,
    };
    atomic_write(&out, eval_csv(&report.rows).as_bytes())?;
    atomic_write_json(&out.with_extension("json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub mode: String,
    pub mean_accuracy: f64,
    pub task_accuracy: Vec<f64>,
    pub seed: u64,
}

pub fn sweep_csv(task_ids: &[String], rows: &[SweepRow]) -> String {
    let mut out = String::from("rho,mode,mean_accuracy");
    for id in task_ids {
        let _ = write!(out, ",{id}");
    }
    out.push_str(",seed\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.rho, r.mode, r.mean_accuracy);
        for a in &r.task_accuracy {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{}", r.seed);
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Full factorial over lab seeds, filter modes, and the rho grid: one
/// FR-merged backbone per cell, scored on every task.
pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<SweepRow>, CliError> {
    let out = cfg.out()?.to_path_buf();
    let rhos = cfg.rhos.clone().unwrap_or_else(|| DEFAULT_RHOS.to_vec());
    let modes = cfg
        .modes
        .clone()
        .unwrap_or_else(|| vec![ModeArg::High, ModeArg::Low, ModeArg::Band]);
    if rhos.is_empty() || modes.is_empty() {
        return Err(CliError::Usage(
            "rho grid and mode list must be non-empty".into(),
        ));
    }
    for &rho in &rhos {
        check_unit("rho", rho)?;
    }
    let (lab_cfg, seed0) = match &cfg.lab {
        Some(dir) if cfg.lab_config.is_none() => {
            let m = LabManifest::load(dir)?;
            (m.config, cfg.seed.unwrap_or(m.seed))
        }
        _ => (cfg.lab_config()?, cfg.seed.unwrap_or(0)),
    };
    let seeds = cfg.seeds.unwrap_or(1).max(1);

    let mut rows = Vec::new();
    let mut task_ids = Vec::new();
    for seed in seed0..seed0 + seeds as u64 {
        let lab = Lab::build(&lab_cfg, seed)?;
        let tvs = lab.task_vectors()?;
        task_ids = lab.task_ids();
        for &mode in &modes {
            for &rho in &rhos {
                let spec = FilterSpec::from_mode(mode.filter_mode(), rho)?;
                let acc = lab.accuracies(&merged(lab.pre(), &tvs, &spec)?)?;
                rows.push(SweepRow {
                    rho,
                    mode: mode.filter_mode().name().into(),
                    mean_accuracy: mean(&acc),
                    task_accuracy: acc,
                    seed,
                });
            }
        }
    }
    atomic_write(&out, sweep_csv(&task_ids, &rows).as_bytes())?;
    Ok(rows)
}

fn merged(
    pre: &Checkpoint,
    tvs: &[fmerge_core::TaskVector],
    spec: &FilterSpec,
) -> fmerge_core::Result<Checkpoint> {
    fr_merge_with(pre, tvs, spec).map(|(c, _)| c)
}
