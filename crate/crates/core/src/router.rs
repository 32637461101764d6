//! Per-input expert selection: a learned linear-softmax router plus the
//! perfect (oracle) and random modes used to bound router quality.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    Learned,
    Perfect,
    Random,
}

impl RouterMode {
    pub fn name(self) -> &'static str {
        match self {
            RouterMode::Learned => "learned",
            RouterMode::Perfect => "perfect",
            RouterMode::Random => "random",
        }
    }
}

/// Serialized as JSON: mode, dims, row-major weights, bias, task ids, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub mode: RouterMode,
    pub input_dim: usize,
    pub feature_dim: usize,
    /// `task_ids.len() x feature_dim`, row-major. Empty unless learned.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub task_ids: Vec<String>,
    pub seed: u64,
}

/// One-hot expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub weights: Vec<f64>,
    pub chosen: usize,
}

impl RoutingDecision {
    pub fn one_hot(n: usize, chosen: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[chosen] = 1.0;
        RoutingDecision { weights, chosen }
    }

    /// One-hot at the argmax; ties go to the lowest index.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut chosen = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[chosen] {
                chosen = i;
            }
        }
        Self::one_hot(scores.len(), chosen)
    }
}

/// Raw input plus its squared norm.
pub fn featurize(x: &[f32], input_dim: usize) -> Result<Vec<f64>> {
    if x.len() != input_dim {
        return Err(Error::ShapeMismatch(format!(
            "router input has {} features, expected {input_dim}",
            x.len()
        )));
    }
    let mut out: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    out.push(out.iter().map(|v| v * v).sum());
    Ok(out)
}

fn check_task_ids(task_ids: &[String]) -> Result<()> {
    if task_ids.is_empty() {
        return Err(Error::Empty("router needs at least one task".into()));
    }
    Ok(())
}

impl RouterModel {
    pub fn perfect(task_ids: Vec<String>, input_dim: usize) -> Result<Self> {
        check_task_ids(&task_ids)?;
        Ok(RouterModel {
            mode: RouterMode::Perfect,
            input_dim,
            feature_dim: input_dim + 1,
            weights: Vec::new(),
            bias: Vec::new(),
            task_ids,
            seed: 0,
        })
    }

    pub fn random(task_ids: Vec<String>, input_dim: usize, seed: u64) -> Result<Self> {
        check_task_ids(&task_ids)?;
        Ok(RouterModel {
            mode: RouterMode::Random,
            input_dim,
            feature_dim: input_dim + 1,
            weights: Vec::new(),
            bias: Vec::new(),
            task_ids,
            seed,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_ids.len()
    }

    /// Linear scores of a learned router.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} features for a router of width {}",
                features.len(),
                self.feature_dim
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.feature_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>())
            .collect())
    }

    /// Routes one input. `true_task` is required in perfect mode; `call_index`
    /// keys the random stream so decisions do not depend on evaluation order.
    pub fn route(
        &self,
        x: &[f32],
        true_task: Option<&str>,
        call_index: u64,
    ) -> Result<RoutingDecision> {
        let n = self.n_tasks();
        match self.mode {
            RouterMode::Learned => {
                let features = featurize(x, self.input_dim)?;
                Ok(RoutingDecision::from_scores(&self.scores(&features)?))
            }
            RouterMode::Perfect => {
                let task = true_task.ok_or_else(|| {
                    Error::UnknownTask("perfect routing needs the true task".into())
                })?;
                let idx = self
                    .task_ids
                    .iter()
                    .position(|t| t == task)
                    .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
                Ok(RoutingDecision::one_hot(n, idx))
            }
            RouterMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(call_index);
                Ok(RoutingDecision::one_hot(n, rng.random_range(0..n)))
            }
        }
    }
}

/// Inputs of one task; the task index is the router's training label.
#[derive(Debug, Clone)]
pub struct TaskInputs {
    pub task_id: String,
    /// Row-major `n x input_dim`.
    pub inputs: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            lr: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

/// Multinomial logistic regression on featurized inputs with the task index
/// as label, trained by mini-batch gradient descent. Returns the model and
/// the mean cross-entropy before training and after each epoch.
pub fn train_router(
    tasks: &[TaskInputs],
    input_dim: usize,
    cfg: &RouterTrainConfig,
) -> Result<(RouterModel, Vec<f64>)> {
    if tasks.len() < 2 {
        return Err(Error::DegenerateDataset(format!(
            "router training needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig(format!("bad router config {cfg:?}")));
    }
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
    for (label, task) in tasks.iter().enumerate() {
        if task.inputs.is_empty() {
            return Err(Error::DegenerateDataset(format!(
                "task `{}` has no inputs",
                task.task_id
            )));
        }
        if task.inputs.len() % input_dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "task `{}` inputs are not a multiple of {input_dim}",
                task.task_id
            )));
        }
        for x in task.inputs.chunks_exact(input_dim) {
            samples.push((featurize(x, input_dim)?, label));
        }
    }

    let n = tasks.len();
    let f = input_dim + 1;
    let mut model = RouterModel {
        mode: RouterMode::Learned,
        input_dim,
        feature_dim: f,
        weights: vec![0.0; n * f],
        bias: vec![0.0; n],
        task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
        seed: cfg.seed,
    };

    let mean_loss = |model: &RouterModel| -> f64 {
        let total: f64 = samples
            .iter()
            .map(|(x, y)| {
                let mut p = model.scores(x).expect("dims fixed");
                softmax_in_place(&mut p);
                -p[*y].max(1e-300).ln()
            })
            .sum();
        total / samples.len() as f64
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = vec![mean_loss(&model)];
    let mut grad_w = vec![0.0; n * f];
    let mut grad_b = vec![0.0; n];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (x, y) = &samples[i];
                let mut p = model.scores(x)?;
                softmax_in_place(&mut p);
                p[*y] -= 1.0;
                for (k, &pk) in p.iter().enumerate() {
                    grad_b[k] += pk;
                    for (g, &xj) in grad_w[k * f..(k + 1) * f].iter_mut().zip(x) {
                        *g += pk * xj;
                    }
                }
            }
            let step = cfg.lr / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w -= step * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad_b) {
                *b -= step * g;
            }
        }
        let loss = mean_loss(&model);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("router loss became {loss}")));
        }
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn featurize_examples() {
        assert_eq!(featurize(&[0.0, 0.0], 2).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(featurize(&[3.0, 4.0], 2).unwrap(), vec![3.0, 4.0, 25.0]);
        assert!(featurize(&[1.0], 2).is_err());
    }

    #[test]
    fn perfect_mode() {
        let r = RouterModel::perfect(ids(3), 2).unwrap();
        let d = r.route(&[0.0, 0.0], Some("t2"), 0).unwrap();
        assert_eq!(d.chosen, 2);
        assert_eq!(d.weights, vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            r.route(&[0.0, 0.0], Some("nope"), 0),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(RoutingDecision::from_scores(&[0.1, 0.9]).chosen, 1);
        assert_eq!(RoutingDecision::from_scores(&[0.5, 0.5, 0.1]).chosen, 0);
    }

    #[test]
    fn random_mode_is_keyed_by_call_index() {
        let r = RouterModel::random(ids(4), 2, 9).unwrap();
        let a: Vec<usize> = (0..50)
            .map(|i| r.route(&[0.0, 0.0], None, i).unwrap().chosen)
            .collect();
        let b: Vec<usize> = (0..50)
            .rev()
            .map(|i| r.route(&[1.0, 1.0], None, i).unwrap().chosen)
            .collect();
        let b: Vec<usize> = b.into_iter().rev().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn training_rejects_degenerate_inputs() {
        let one = [TaskInputs {
            task_id: "a".into(),
            inputs: vec![0.0, 1.0],
        }];
        assert!(matches!(
            train_router(&one, 2, &RouterTrainConfig::default()),
            Err(Error::DegenerateDataset(_))
        ));
        let empty = [
            TaskInputs {
                task_id: "a".into(),
                inputs: vec![0.0, 1.0],
            },
            TaskInputs {
                task_id: "b".into(),
                inputs: vec![],
            },
        ];
        assert!(matches!(
            train_router(&empty, 2, &RouterTrainConfig::default()),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let r = RouterModel::random(ids(2), 3, 5).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mode\":\"random\""));
        assert_eq!(serde_json::from_str::<RouterModel>(&json).unwrap(), r);
    }
}
