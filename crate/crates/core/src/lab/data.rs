use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian-blob classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub n_classes: usize,
    pub input_dim: usize,
    /// One center per class, before rotation.
    pub centers: Vec<Vec<f64>>,
    /// Rotation applied to the first two input coordinates of every center.
    pub rotation: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// First output unit of this task in the shared head.
    #[serde(default)]
    pub label_offset: usize,
}

impl TaskSpec {
    /// Regular polygon of `n_classes` centers at `radius` around `origin`.
    pub fn polygon(
        task_id: impl Into<String>,
        n_classes: usize,
        origin: &[f64],
        radius: f64,
        rotation: f64,
        sigma: f64,
        seed: u64,
    ) -> Self {
        let input_dim = origin.len();
        let centers = (0..n_classes)
            .map(|c| {
                let angle = 2.0 * PI * c as f64 / n_classes as f64;
                let mut p = origin.to_vec();
                p[0] += radius * angle.cos();
                if input_dim > 1 {
                    p[1] += radius * angle.sin();
                }
                p
            })
            .collect();
        TaskSpec {
            task_id: task_id.into(),
            n_classes,
            input_dim,
            centers,
            rotation,
            sigma,
            n_train: 512,
            n_test: 512,
            seed,
            label_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidConfig(format!(
                "task `{}`: {msg}",
                self.task_id
            )))
        };
        if self.n_classes < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.n_classes));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.centers.len() != self.n_classes {
            return bad(format!(
                "{} centers for {} classes",
                self.centers.len(),
                self.n_classes
            ));
        }
        if self.centers.iter().any(|c| c.len() != self.input_dim) {
            return bad("center dimension differs from input_dim".into());
        }
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                if a == b {
                    return bad("class centers must be pairwise distinct".into());
                }
            }
        }
        Ok(())
    }

    /// Centers after rotation about the mean of all centers.
    pub fn rotated_centers(&self) -> Vec<Vec<f64>> {
        if self.input_dim < 2 {
            return self.centers.clone();
        }
        let n = self.centers.len() as f64;
        let cx = self.centers.iter().map(|c| c[0]).sum::<f64>() / n;
        let cy = self.centers.iter().map(|c| c[1]).sum::<f64>() / n;
        let (s, c) = self.rotation.sin_cos();
        self.centers
            .iter()
            .map(|p| {
                let (dx, dy) = (p[0] - cx, p[1] - cy);
                let mut q = p.clone();
                q[0] = cx + c * dx - s * dy;
                q[1] = cy + s * dx + c * dy;
                q
            })
            .collect()
    }
}

/// Inputs and local labels (`0..n_classes`) with a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub input_dim: usize,
    pub n_classes: usize,
    pub label_offset: usize,
    pub train_x: Vec<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f32>,
    pub test_y: Vec<usize>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }

    pub fn train_point(&self, i: usize) -> &[f32] {
        &self.train_x[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn test_point(&self, i: usize) -> &[f32] {
        &self.test_x[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Samples a dataset: labels uniform over classes, inputs Gaussian around
/// the rotated class center. Deterministic in `spec.seed`.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let centers = spec.rotated_centers();
    let noise =
        Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidConfig(format!("sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| {
        let mut xs = Vec::with_capacity(n * spec.input_dim);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..spec.n_classes);
            for &c in &centers[y] {
                xs.push((c + noise.sample(&mut rng)) as f32);
            }
            ys.push(y);
        }
        (xs, ys)
    };
    let (train_x, train_y) = draw(spec.n_train);
    let (test_x, test_y) = draw(spec.n_test);
    Ok(Dataset {
        task_id: spec.task_id.clone(),
        input_dim: spec.input_dim,
        n_classes: spec.n_classes,
        label_offset: spec.label_offset,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

/// `x0,..,x{d-1},label` rows for one split.
pub fn split_csv(x: &[f32], y: &[usize], input_dim: usize) -> String {
    let mut out = String::new();
    for i in 0..input_dim {
        let _ = write!(out, "x{i},");
    }
    out.push_str("label\n");
    for (row, label) in x.chunks_exact(input_dim).zip(y) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}
