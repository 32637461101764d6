//! Toy training lab: synthetic blob tasks, a shared-architecture MLP, and the
//! pretrain / fine-tune / evaluate loop that produces mergeable checkpoints.
//!
//! All tasks share one output head. Task `k` owns the units
//! `label_offset..label_offset + n_classes`; training and evaluation only look
//! at that slice, mirroring per-task classifier heads on a shared backbone.

mod data;
mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{gen_task, split_csv, Dataset, TaskSpec};
pub use mlp::{MlpSpec, TrainConfig};

use crate::error::{Error, Result};
use crate::expert::{compose, ExpertBundle};
use crate::router::{RouterModel, RoutingDecision};
use crate::spectral::FilterSpec;
use crate::store::{apply_delta, Checkpoint, TaskVector};
use mlp::{Mlp, Sample};

/// A trained network ready for inference.
#[derive(Debug, Clone)]
pub struct Network(Mlp);

impl Network {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Mlp::from_checkpoint(ckpt).map(Network)
    }

    pub fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        self.0.logits(&x)
    }

    /// Local class predicted within a head slice; ties go to the lower class.
    pub fn predict(&self, x: &[f32], offset: usize, n_classes: usize) -> usize {
        let logits = self.logits(x);
        let slice = &logits[offset..offset + n_classes];
        let mut best = 0;
        for (k, &z) in slice.iter().enumerate() {
            if z > slice[best] {
                best = k;
            }
        }
        best
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if self.input_dim() != data.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "model takes {} inputs, dataset `{}` has {}",
                self.input_dim(),
                data.task_id,
                data.input_dim
            )));
        }
        if self.output_dim() < data.label_offset + data.n_classes {
            return Err(Error::ShapeMismatch(format!(
                "model head has {} units, dataset `{}` needs {}",
                self.output_dim(),
                data.task_id,
                data.label_offset + data.n_classes
            )));
        }
        Ok(())
    }
}

fn samples_of(data: &Dataset) -> Vec<Sample> {
    (0..data.n_train())
        .map(|i| Sample {
            x: data.train_point(i).iter().map(|&v| f64::from(v)).collect(),
            label: data.train_y[i],
            offset: data.label_offset,
            n_classes: data.n_classes,
        })
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    /// Mean loss before training, then after every epoch.
    pub losses: Vec<f64>,
}

/// Trains a fresh network on the union of all tasks' training splits.
pub fn pretrain(datasets: &[Dataset], mlp: &MlpSpec, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let samples: Vec<Sample> = datasets.iter().flat_map(samples_of).collect();
    let mut net = Mlp::init(mlp)?;
    for d in datasets {
        Network(net.clone()).check_dataset(d)?;
    }
    let losses = net.train(&samples, cfg)?;
    Ok(Trained {
        checkpoint: net.to_checkpoint().with_origin("pretrained"),
        losses,
    })
}

/// Continues training `pre` on one task.
pub fn finetune(pre: &Checkpoint, task: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let mut net = Mlp::from_checkpoint(pre)?;
    Network(net.clone()).check_dataset(task)?;
    let losses = net.train(&samples_of(task), cfg)?;
    let checkpoint = if cfg.lr == 0.0 {
        pre.clone()
    } else {
        net.to_checkpoint()
    };
    let mut checkpoint = checkpoint;
    checkpoint.set_origin_tag(Some(format!("task:{}", task.task_id)));
    Ok(Trained { checkpoint, losses })
}

/// Test-split accuracy, predicting within the dataset's head slice.
pub fn evaluate(model: &Checkpoint, data: &Dataset) -> Result<f64> {
    evaluate_network(&Network::from_checkpoint(model)?, data)
}

pub fn evaluate_network(net: &Network, data: &Dataset) -> Result<f64> {
    net.check_dataset(data)?;
    if data.n_test() == 0 {
        return Err(Error::Empty(format!(
            "dataset `{}` has no test points",
            data.task_id
        )));
    }
    let correct = (0..data.n_test())
        .filter(|&i| {
            net.predict(data.test_point(i), data.label_offset, data.n_classes) == data.test_y[i]
        })
        .count();
    Ok(correct as f64 / data.n_test() as f64)
}

/// Per-dataset accuracy when each test input is routed to one expert, that
/// expert is composed into the backbone, and the result classifies the input.
///
/// Decisions are one-hot, so each expert's composed network is built once.
/// Random-mode call indices run consecutively across datasets in order.
pub fn routed_accuracies(
    backbone: &Checkpoint,
    bundle: &ExpertBundle,
    router: &RouterModel,
    datasets: &[Dataset],
) -> Result<Vec<f64>> {
    let ids: Vec<&str> = bundle.task_ids().collect();
    if router
        .task_ids
        .iter()
        .map(String::as_str)
        .ne(ids.iter().copied())
    {
        return Err(Error::ShapeMismatch(format!(
            "router tasks {:?} differ from bundle tasks {ids:?}",
            router.task_ids
        )));
    }
    let n = ids.len();
    let nets = (0..n)
        .map(|k| {
            Network::from_checkpoint(&compose(
                backbone,
                bundle,
                &RoutingDecision::one_hot(n, k).weights,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut call = 0u64;
    let mut out = Vec::with_capacity(datasets.len());
    for data in datasets {
        nets[0].check_dataset(data)?;
        if data.n_test() == 0 {
            return Err(Error::Empty(format!(
                "dataset `{}` has no test points",
                data.task_id
            )));
        }
        let mut correct = 0usize;
        for i in 0..data.n_test() {
            let x = data.test_point(i);
            let decision = router.route(x, Some(&data.task_id), call)?;
            call += 1;
            if nets[decision.chosen].predict(x, data.label_offset, data.n_classes) == data.test_y[i]
            {
                correct += 1;
            }
        }
        out.push(correct as f64 / data.n_test() as f64);
    }
    Ok(out)
}

/// Accuracy of `pre + v_i` on dataset `j`, with and without high-pass
/// filtering of `v_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub filtered: Vec<Vec<f64>>,
    pub unfiltered: Vec<Vec<f64>>,
}

fn diagonal_and_off(m: &[Vec<f64>]) -> (f64, f64) {
    let n = m.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_count = (n * n - n).max(1);
    (diag / n as f64, off / off_count as f64)
}

impl GeneralizationMatrix {
    /// (mean diagonal, mean off-diagonal) of the filtered matrix.
    pub fn filtered_summary(&self) -> (f64, f64) {
        diagonal_and_off(&self.filtered)
    }

    pub fn unfiltered_summary(&self) -> (f64, f64) {
        diagonal_and_off(&self.unfiltered)
    }
}

pub fn generalization_matrix(
    pre: &Checkpoint,
    tvs: &[TaskVector],
    datasets: &[Dataset],
    rho: f64,
) -> Result<GeneralizationMatrix> {
    let spec = FilterSpec::high_pass(rho)?;
    let mut filtered = Vec::with_capacity(tvs.len());
    let mut unfiltered = Vec::with_capacity(tvs.len());
    for tv in tvs {
        let raw = Network::from_checkpoint(&apply_delta(pre, tv, 1.0)?)?;
        let g = crate::spectral::filter_task_vector(tv, &spec)?;
        let filt = Network::from_checkpoint(&apply_delta(pre, &g, 1.0)?)?;
        unfiltered.push(
            datasets
                .iter()
                .map(|d| evaluate_network(&raw, d))
                .collect::<Result<Vec<_>>>()?,
        );
        filtered.push(
            datasets
                .iter()
                .map(|d| evaluate_network(&filt, d))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(GeneralizationMatrix {
        filtered,
        unfiltered,
    })
}

/// Everything needed to build a lab from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub n_tasks: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: Vec<usize>,
    /// Distance of class centers from their task's origin.
    pub center_radius: f64,
    /// Distance of each task's origin from zero; task origins are spread
    /// evenly on a circle.
    pub task_spread: f64,
    /// Class-layout rotation added per task index, radians.
    pub rotation_step: f64,
    pub sigma: f64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            n_tasks: 3,
            n_classes: 3,
            input_dim: 2,
            n_train: 512,
            n_test: 512,
            hidden: vec![32, 32],
            center_radius: 1.5,
            task_spread: 1.5,
            rotation_step: 1.0,
            sigma: 0.35,
            pretrain: TrainConfig {
                lr: 0.02,
                epochs: 6,
                batch_size: 32,
                seed: 0,
                weight_decay: 0.0,
            },
            // Short fine-tuning keeps task vectors small relative to the backbone.
            finetune: TrainConfig {
                lr: 0.03,
                epochs: 2,
                batch_size: 64,
                seed: 0,
                weight_decay: 0.0,
            },
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::InvalidConfig("n_tasks must be positive".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    pub fn mlp_spec(&self, init_seed: u64) -> MlpSpec {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.n_tasks * self.n_classes);
        MlpSpec { widths, init_seed }
    }

    /// Task specs for one lab seed.
    pub fn task_specs(&self, seed: u64) -> Vec<TaskSpec> {
        let seeds = SeedSchedule::new(seed);
        (0..self.n_tasks)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / self.n_tasks as f64;
                let mut origin = vec![0.0; self.input_dim];
                origin[0] = self.task_spread * angle.cos();
                if self.input_dim > 1 {
                    origin[1] = self.task_spread * angle.sin();
                }
                let mut spec = TaskSpec::polygon(
                    format!("task{k}"),
                    self.n_classes,
                    &origin,
                    self.center_radius,
                    self.rotation_step * k as f64,
                    self.sigma,
                    seeds.task_data(k),
                );
                spec.n_train = self.n_train;
                spec.n_test = self.n_test;
                spec.label_offset = k * self.n_classes;
                spec
            })
            .collect()
    }
}

/// Derives the per-stage seeds of a lab from one root seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedSchedule {
    root: u64,
}

impl SeedSchedule {
    pub fn new(root: u64) -> Self {
        SeedSchedule { root }
    }

    fn derive(&self, stream: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(stream);
        rng.random()
    }

    pub fn task_data(&self, k: usize) -> u64 {
        self.derive(100 + k as u64)
    }

    pub fn init(&self) -> u64 {
        self.derive(1)
    }

    pub fn pretrain(&self) -> u64 {
        self.derive(2)
    }

    pub fn finetune(&self, k: usize) -> u64 {
        self.derive(200 + k as u64)
    }
}

/// A built lab: datasets, the shared ancestor, and one fine-tuned model per task.
#[derive(Debug, Clone)]
pub struct Lab {
    pub seed: u64,
    pub specs: Vec<TaskSpec>,
    pub datasets: Vec<Dataset>,
    pub pretrained: Trained,
    pub finetuned: Vec<Trained>,
    /// Own-task test accuracy of each fine-tuned model.
    pub finetuned_accuracy: Vec<f64>,
}

impl Lab {
    pub fn build(cfg: &LabConfig, seed: u64) -> Result<Lab> {
        cfg.validate()?;
        let seeds = SeedSchedule::new(seed);
        let specs = cfg.task_specs(seed);
        let datasets = specs.iter().map(gen_task).collect::<Result<Vec<_>>>()?;
        let pre_cfg = TrainConfig {
            seed: seeds.pretrain(),
            ..cfg.pretrain
        };
        let pretrained = pretrain(&datasets, &cfg.mlp_spec(seeds.init()), &pre_cfg)?;
        let mut finetuned = Vec::new();
        let mut finetuned_accuracy = Vec::new();
        for (k, d) in datasets.iter().enumerate() {
            let ft_cfg = TrainConfig {
                seed: seeds.finetune(k),
                ..cfg.finetune
            };
            let t = finetune(&pretrained.checkpoint, d, &ft_cfg)
                .map_err(|e| Error::Diverged(format!("task `{}`: {e}", d.task_id)))?;
            finetuned_accuracy.push(evaluate(&t.checkpoint, d)?);
            finetuned.push(t);
        }
        Ok(Lab {
            seed,
            specs,
            datasets,
            pretrained,
            finetuned,
            finetuned_accuracy,
        })
    }

    pub fn pre(&self) -> &Checkpoint {
        &self.pretrained.checkpoint
    }

    pub fn fine(&self) -> Vec<Checkpoint> {
        self.finetuned
            .iter()
            .map(|t| t.checkpoint.clone())
            .collect()
    }

    pub fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.finetuned
            .iter()
            .map(|t| crate::store::task_vector(&t.checkpoint, self.pre()))
            .collect()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.task_id.clone()).collect()
    }

    /// Per-task accuracy of one model on every dataset.
    pub fn accuracies(&self, model: &Checkpoint) -> Result<Vec<f64>> {
        let net = Network::from_checkpoint(model)?;
        self.datasets
            .iter()
            .map(|d| evaluate_network(&net, d))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sharp_task() -> Dataset {
        let mut spec = TaskSpec::polygon("a", 3, &[0.0, 0.0], 2.0, 0.0, 1e-6, 3);
        spec.n_train = 64;
        spec.n_test = 64;
        gen_task(&spec).unwrap()
    }

    #[test]
    fn pretrain_rejects_zero_epochs() {
        let d = sharp_task();
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 0,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.0,
        };
        let spec = MlpSpec {
            widths: vec![2, 8, 3],
            init_seed: 0,
        };
        assert!(matches!(
            pretrain(&[d], &spec, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_lr_finetune_is_identity() {
        let d = sharp_task();
        let spec = MlpSpec {
            widths: vec![2, 8, 3],
            init_seed: 0,
        };
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 2,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.0,
        };
        let pre = pretrain(std::slice::from_ref(&d), &spec, &cfg)
            .unwrap()
            .checkpoint;
        let ft = finetune(&pre, &d, &TrainConfig { lr: 0.0, ..cfg }).unwrap();
        assert_eq!(
            ft.checkpoint.flat_values().collect::<Vec<_>>(),
            pre.flat_values().collect::<Vec<_>>()
        );
    }

    #[test]
    fn evaluate_rejects_mismatched_head() {
        let mut d = sharp_task();
        d.label_offset = 5;
        let net = MlpSpec {
            widths: vec![2, 4, 3],
            init_seed: 0,
        };
        let ckpt = Mlp::init(&net).unwrap().to_checkpoint();
        assert!(matches!(evaluate(&ckpt, &d), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn seed_schedule_streams_differ() {
        let s = SeedSchedule::new(1);
        assert_ne!(s.task_data(0), s.task_data(1));
        assert_ne!(s.init(), s.pretrain());
    }
}
