use std::fs;
use std::path::{Path, PathBuf};

use fmerge_core::lab::{gen_task, split_csv, Dataset, Lab, LabConfig, TaskSpec};
use fmerge_core::store::checkpoint_to_bytes;
use serde::{Deserialize, Serialize};

use crate::config::{existing, PipelineConfig};
use crate::output::{atomic_write, atomic_write_json};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Index of a lab directory. Paths are relative to the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabManifest {
    pub seed: u64,
    pub config: LabConfig,
    pub pretrained: PathBuf,
    pub tasks: Vec<LabTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTask {
    pub task_id: String,
    pub checkpoint: PathBuf,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub finetuned_accuracy: f64,
    pub spec: TaskSpec,
}

impl LabManifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        existing(&path, "lab manifest")?;
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))
    }

    /// Regenerates the datasets from their recorded specs.
    pub fn datasets(&self) -> Result<Vec<Dataset>, CliError> {
        self.tasks
            .iter()
            .map(|t| gen_task(&t.spec).map_err(CliError::from))
            .collect()
    }
}

/// Trains the lab for one seed and writes checkpoints, dataset CSVs, and the
/// manifest into `--out`.
pub fn cmd_lab(cfg: &PipelineConfig) -> Result<LabManifest, CliError> {
    let dir = cfg.out()?.to_path_buf();
    let lab_cfg = cfg.lab_config()?;
    let seed = cfg.seed.unwrap_or(0);
    let lab = Lab::build(&lab_cfg, seed)?;

    let pretrained = PathBuf::from("pretrained.safetensors");
    atomic_write(&dir.join(&pretrained), &checkpoint_to_bytes(lab.pre()))?;
    let mut tasks = Vec::new();
    for (k, data) in lab.datasets.iter().enumerate() {
        let id = &data.task_id;
        let checkpoint = PathBuf::from(format!("{id}.safetensors"));
        let train_csv = PathBuf::from(format!("data/{id}.train.csv"));
        let test_csv = PathBuf::from(format!("data/{id}.test.csv"));
        atomic_write(
            &dir.join(&checkpoint),
            &checkpoint_to_bytes(&lab.finetuned[k].checkpoint),
        )?;
        let train = split_csv(&data.train_x, &data.train_y, data.input_dim);
        atomic_write(&dir.join(&train_csv), train.as_bytes())?;
        let test = split_csv(&data.test_x, &data.test_y, data.input_dim);
        atomic_write(&dir.join(&test_csv), test.as_bytes())?;
        tasks.push(LabTask {
            task_id: id.clone(),
            checkpoint,
            train_csv,
            test_csv,
            finetuned_accuracy: lab.finetuned_accuracy[k],
            spec: lab.specs[k].clone(),
        });
    }
    let manifest = LabManifest {
        seed,
        config: lab_cfg,
        pretrained,
        tasks,
    };
    atomic_write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}
