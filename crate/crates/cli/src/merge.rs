use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fmerge_core::expert::{bundle_to_bytes, extract_expert, ExpertBundle};
use fmerge_core::merge::{dare_drop, fr_merge_with, task_arithmetic, ties_merge, weight_average};
use fmerge_core::numeric::fnv1a64;
use fmerge_core::spectral::{fft, signal_shape, spectrum_csv};
use fmerge_core::store::{
    checkpoint_from_bytes, checkpoint_to_bytes, task_vector, task_vector_with_id,
};
use fmerge_core::{merging_coefficients, Checkpoint, MergeReport, TaskVector, Tensor};

use crate::config::{check_unit, existing, Method, PipelineConfig};
use crate::lab::LabManifest;
use crate::output::{atomic_write, atomic_write_json, report_path};
use crate::CliError;

const DEFAULT_KEEP_FRAC: f64 = 0.2;
const DEFAULT_DROP_P: f64 = 0.9;

/// Pretrained checkpoint plus the fine-tuned ones, as task vectors.
pub struct MergeInputs {
    pub pre: Checkpoint,
    pub fine: Vec<Checkpoint>,
    pub tvs: Vec<TaskVector>,
}

pub(crate) fn read_checkpoint(path: &Path, what: &str) -> Result<(Checkpoint, Vec<u8>), CliError> {
    existing(path, what)?;
    let bytes = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    let ckpt = checkpoint_from_bytes(&bytes)?;
    Ok((ckpt, bytes))
}

/// Reads `--lab` (manifest) or `--pre` with `--fine`.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<MergeInputs, CliError> {
    let (pre_path, fine_paths) = match (&cfg.lab, &cfg.pre, &cfg.fine) {
        (_, Some(pre), Some(fine)) => (pre.clone(), fine.clone()),
        (Some(dir), None, None) => {
            let m = LabManifest::load(dir)?;
            let fine = m.tasks.iter().map(|t| dir.join(&t.checkpoint)).collect();
            (dir.join(&m.pretrained), fine)
        }
        _ => {
            return Err(CliError::Usage(
                "give either --lab or both --pre and --fine".into(),
            ))
        }
    };
    if fine_paths.is_empty() {
        return Err(CliError::Usage(
            "at least one fine-tuned checkpoint is required".into(),
        ));
    }
    let (pre, _) = read_checkpoint(&pre_path, "pretrained checkpoint")?;
    let mut fine = Vec::new();
    let mut tvs = Vec::new();
    for path in &fine_paths {
        let (ckpt, _) = read_checkpoint(path, "fine-tuned checkpoint")?;
        let tv = match ckpt.origin_tag() {
            Some(tag) if tag.starts_with("task:") => task_vector(&ckpt, &pre)?,
            _ => {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("task{}", tvs.len()));
                task_vector_with_id(stem, &ckpt, &pre)?
            }
        };
        fine.push(ckpt);
        tvs.push(tv);
    }
    Ok(MergeInputs { pre, fine, tvs })
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub backbone: PathBuf,
    pub report_path: PathBuf,
    pub report: MergeReport,
}

/// Merges and writes the backbone plus `<basename>.report.json`.
pub fn cmd_merge(cfg: &PipelineConfig) -> Result<MergeOutcome, CliError> {
    let out = cfg.out()?.to_path_buf();
    let method = cfg.method.unwrap_or(Method::Fr);
    let spec = cfg.filter_spec()?;
    let keep_frac = cfg.keep_frac.unwrap_or(DEFAULT_KEEP_FRAC);
    let drop_p = cfg.drop_p.unwrap_or(DEFAULT_DROP_P);
    check_unit("keep_frac", keep_frac)?;
    if !(0.0..1.0).contains(&drop_p) {
        return Err(CliError::Usage(format!(
            "drop_p must lie in [0, 1), got {drop_p}"
        )));
    }
    let inputs = load_inputs(cfg)?;
    let n = inputs.tvs.len();
    let lambda = cfg.lambda.unwrap_or(1.0 / n as f64);

    let start = Instant::now();
    let (backbone, mut report) = match method {
        Method::Fr => fr_merge_with(&inputs.pre, &inputs.tvs, &spec)?,
        Method::Avg => (
            weight_average(&inputs.fine)?,
            baseline_report(method, vec![1.0 / n as f64; n]),
        ),
        Method::Ta => (
            task_arithmetic(&inputs.pre, &inputs.tvs, lambda)?,
            baseline_report(method, vec![lambda; n]),
        ),
        Method::Ties => (
            ties_merge(&inputs.pre, &inputs.tvs, keep_frac)?,
            baseline_report(method, Vec::new()),
        ),
        Method::Dare => {
            let seed = cfg.seed.unwrap_or(0);
            let dropped = inputs
                .tvs
                .iter()
                .enumerate()
                .map(|(k, tv)| dare_drop(tv, drop_p, seed.wrapping_add(k as u64)))
                .collect::<fmerge_core::Result<Vec<_>>>()?;
            (
                task_arithmetic(&inputs.pre, &dropped, lambda)?,
                baseline_report(method, vec![lambda; n]),
            )
        }
    };
    let bytes = checkpoint_to_bytes(&backbone);
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    report.param_count = inputs.pre.param_count();
    report.task_count = n;

    if let Some(dir) = &cfg.dump_spectrum {
        dump_spectra(dir, &inputs.tvs)?;
    }
    let report_path = report_path(&out);
    atomic_write(&out, &bytes)?;
    atomic_write_json(&report_path, &report)?;
    Ok(MergeOutcome {
        backbone: out,
        report_path,
        report,
    })
}

fn baseline_report(method: Method, lambdas: Vec<f64>) -> MergeReport {
    MergeReport {
        method: method.name().into(),
        rho: 0.0,
        lambdas,
        filtered_energy_ratio: BTreeMap::new(),
        wall_time_ms: 0.0,
        param_count: 0,
        task_count: 0,
    }
}

/// One CSV per task vector tensor: `<task>__<tensor>.csv`.
fn dump_spectra(dir: &Path, tvs: &[TaskVector]) -> Result<(), CliError> {
    for tv in tvs {
        for (name, t) in tv.delta().iter() {
            let Some(shape) = signal_shape(t.shape()) else {
                continue;
            };
            let grid = fft(&Tensor::new(shape, t.data().to_vec())?)?;
            let path = dir.join(format!("{}__{name}.csv", tv.task_id()));
            atomic_write(&path, spectrum_csv(&grid).as_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExtractOutcome {
    pub bundle: PathBuf,
    pub experts: ExpertBundle,
}

/// Extracts one rescaled top-d expert per task, bound to the backbone file.
pub fn cmd_extract(cfg: &PipelineConfig) -> Result<ExtractOutcome, CliError> {
    let out = cfg.out()?.to_path_buf();
    let d = cfg.d()?;
    let backbone_path = cfg
        .backbone
        .as_deref()
        .ok_or_else(|| CliError::Usage("--backbone is required".into()))?;
    let (backbone, backbone_bytes) = read_checkpoint(backbone_path, "backbone")?;
    let inputs = load_inputs(cfg)?;
    backbone.check_layout(&inputs.pre)?;
    let lambdas = merging_coefficients(&inputs.tvs)?.lambdas;
    let experts = inputs
        .tvs
        .iter()
        .zip(&lambdas)
        .map(|(tv, &lam)| extract_expert(tv, d, lam))
        .collect::<fmerge_core::Result<Vec<_>>>()?;
    let bundle = ExpertBundle::new(fnv1a64(&backbone_bytes), experts)?;
    atomic_write(&out, &bundle_to_bytes(&bundle))?;
    Ok(ExtractOutcome {
        bundle: out,
        experts: bundle,
    })
}
