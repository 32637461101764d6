//! Lightweight sparse task experts and their composition into a backbone.

mod bundle;
mod lowrank;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{fraction_count_ceil, pairwise_sum};
use crate::select::top_magnitude;
use crate::store::{checkpoint_fnv1a, mean_abs, Checkpoint, TaskVector, Tensor};

pub use bundle::{bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle, ExpertBundle};
pub use lowrank::{lowrank_expert, truncated_svd, SingularTriple};

/// Desk-scale default kept fraction.
pub const DEFAULT_D: f64 = 0.1;

/// Sparse entries of one tensor, indices strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub shape: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::InvalidTensor {
                name: name.to_string(),
                reason: "index and value counts differ".into(),
            });
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTensor {
                name: name.to_string(),
                reason: "indices are not strictly increasing".into(),
            });
        }
        if let Some(&last) = self.indices.last() {
            if last as usize >= self.numel() {
                return Err(Error::IndexOutOfBounds {
                    name: name.to_string(),
                    index: u64::from(last),
                    len: self.numel(),
                });
            }
        }
        Ok(())
    }
}

/// A sparse, rescaled slice of one task vector. Stored values already include
/// the rescale factor `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExpert {
    pub task_id: String,
    pub d: f64,
    pub mu: f64,
    pub tensors: BTreeMap<String, SparseTensor>,
}

impl SparseExpert {
    pub fn entry_count(&self) -> usize {
        self.tensors.values().map(|t| t.indices.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(SparseTensor::numel).sum()
    }

    /// Mean absolute value of the stored entries (zero when empty).
    pub fn mean_abs_values(&self) -> f64 {
        let abs: Vec<f64> = self
            .tensors
            .values()
            .flat_map(|t| t.values.iter().map(|&x| f64::from(x).abs()))
            .collect();
        if abs.is_empty() {
            0.0
        } else {
            pairwise_sum(&abs) / abs.len() as f64
        }
    }

    /// Mean absolute value of the dense masked tensor set: stored entries
    /// summed, divided by the full parameter count.
    pub fn masked_mean_abs(&self) -> f64 {
        let abs: Vec<f64> = self
            .tensors
            .values()
            .flat_map(|t| t.values.iter().map(|&x| f64::from(x).abs()))
            .collect();
        let m = self.param_count();
        if m == 0 {
            0.0
        } else {
            pairwise_sum(&abs) / m as f64
        }
    }

    /// Multiplies every stored value by `factor` and folds it into `mu`.
    pub fn rescaled(mut self, factor: f64) -> SparseExpert {
        for t in self.tensors.values_mut() {
            for v in &mut t.values {
                *v = (f64::from(*v) * factor) as f32;
            }
        }
        self.mu *= factor;
        self
    }

    /// Dense task vector with zeros outside the stored support.
    pub fn to_dense(&self) -> TaskVector {
        let mut c = Checkpoint::new();
        for (name, t) in &self.tensors {
            let mut data = vec![0.0f32; t.numel()];
            for (&i, &v) in t.indices.iter().zip(&t.values) {
                data[i as usize] = v;
            }
            c.insert(
                name.clone(),
                Tensor::new(t.shape.clone(), data).expect("valid shape"),
            )
            .expect("unique names");
        }
        TaskVector::new(self.task_id.clone(), c)
    }
}

fn check_d(d: f64) -> Result<()> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("d = {d} must lie in (0, 1]")))
    }
}

/// Splits global flat selections back into per-tensor sparse entries.
fn split_by_tensor(
    tv: &TaskVector,
    mut keep: impl FnMut(usize, f32) -> Option<f32>,
) -> BTreeMap<String, SparseTensor> {
    let mut out = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in tv.delta().iter() {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &x) in t.data().iter().enumerate() {
            if let Some(v) = keep(offset + i, x) {
                indices.push(i as u32);
                values.push(v);
            }
        }
        offset += t.numel();
        out.insert(
            name.clone(),
            SparseTensor {
                shape: t.shape().to_vec(),
                indices,
                values,
            },
        );
    }
    out
}

/// Keeps the `ceil(d * m)` largest-magnitude entries across the whole task
/// vector; ties go to the lower global flat index. `mu` is 1.
pub fn topd_select(tv: &TaskVector, d: f64) -> Result<SparseExpert> {
    check_d(d)?;
    let flat: Vec<f32> = tv.delta().flat_values().collect();
    let count = fraction_count_ceil(d, flat.len());
    let selected = top_magnitude(&flat, count);
    let mut cursor = 0;
    let tensors = split_by_tensor(tv, |g, x| {
        if selected.get(cursor) == Some(&g) {
            cursor += 1;
            Some(x)
        } else {
            None
        }
    });
    Ok(SparseExpert {
        task_id: tv.task_id().to_string(),
        d,
        mu: 1.0,
        tensors,
    })
}

/// `mu = -E(M) * ln(d) / (lambda * E(v))`.
///
/// `selected_mean` is the mean absolute value of the masked task vector
/// (unselected entries count as zero) and `task_mean` the mean absolute value
/// of the whole task vector.
pub fn rescale_factor(selected_mean: f64, lambda: f64, task_mean: f64, d: f64) -> Result<f64> {
    check_d(d)?;
    let denom = lambda * task_mean;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::ZeroDenominator(format!(
            "lambda * E(v) = {lambda} * {task_mean}"
        )));
    }
    if d == 1.0 {
        return Ok(0.0);
    }
    Ok(-selected_mean * d.ln() / denom)
}

/// Top-d selection followed by rescaling with `mu`.
pub fn extract_expert(tv: &TaskVector, d: f64, lambda: f64) -> Result<SparseExpert> {
    let selected = topd_select(tv, d)?;
    let task_mean = mean_abs(tv)?;
    let mu = rescale_factor(selected.masked_mean_abs(), lambda, task_mean, d)?;
    Ok(selected.rescaled(mu))
}

/// Keeps each entry with probability `d` and rescales survivors by `1 / d`.
/// Tensor `k` (name order) draws from ChaCha8 keyed by `seed`, stream `k`.
pub fn bernoulli_expert(tv: &TaskVector, d: f64, seed: u64) -> Result<SparseExpert> {
    check_d(d)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..tv.delta().len() as u64)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        })
        .collect();
    let bounds: Vec<usize> = tv
        .delta()
        .iter()
        .scan(0, |acc, (_, t)| {
            *acc += t.numel();
            Some(*acc)
        })
        .collect();
    let tensors = split_by_tensor(tv, |g, x| {
        let k = bounds.partition_point(|&b| b <= g);
        let draw: f64 = rngs[k].random();
        (draw < d).then(|| (f64::from(x) / d) as f32)
    });
    Ok(SparseExpert {
        task_id: tv.task_id().to_string(),
        d,
        mu: 1.0,
        tensors,
    })
}

/// Scatter-adds `weight * expert` into a copy of `backbone` without checking
/// any bundle binding. Zero weights leave the backbone bit-identical.
pub fn compose_expert(
    backbone: &Checkpoint,
    expert: &SparseExpert,
    weight: f64,
) -> Result<Checkpoint> {
    let mut out = backbone.clone();
    add_expert_in_place(&mut out, expert, weight)?;
    Ok(out)
}

fn add_expert_in_place(target: &mut Checkpoint, expert: &SparseExpert, weight: f64) -> Result<()> {
    if weight == 0.0 {
        return Ok(());
    }
    for (name, sparse) in &expert.tensors {
        let tensor = target
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("backbone has no tensor `{name}`")))?;
        if tensor.shape() != sparse.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}`: expert shape {:?} vs backbone {:?}",
                sparse.shape,
                tensor.shape()
            )));
        }
        let len = tensor.numel();
        let data = tensor.data_mut();
        for (&i, &v) in sparse.indices.iter().zip(&sparse.values) {
            let slot = data
                .get_mut(i as usize)
                .ok_or_else(|| Error::IndexOutOfBounds {
                    name: name.clone(),
                    index: u64::from(i),
                    len,
                })?;
            *slot = (f64::from(*slot) + weight * f64::from(v)) as f32;
        }
    }
    Ok(())
}

/// `backbone + sum_i w_i * e_i` without the checksum check.
pub fn compose_unchecked(
    backbone: &Checkpoint,
    bundle: &ExpertBundle,
    weights: &[f64],
) -> Result<Checkpoint> {
    if weights.len() != bundle.experts().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} experts",
            weights.len(),
            bundle.experts().len()
        )));
    }
    let mut out = backbone.clone();
    for (expert, &w) in bundle.experts().iter().zip(weights) {
        add_expert_in_place(&mut out, expert, w)?;
    }
    Ok(out)
}

/// `backbone + sum_i w_i * e_i`; the bundle must be bound to this backbone.
pub fn compose(
    backbone: &Checkpoint,
    bundle: &ExpertBundle,
    weights: &[f64],
) -> Result<Checkpoint> {
    bundle.verify(backbone)?;
    compose_unchecked(backbone, bundle, weights)
}

/// Checksum a bundle binds to.
pub fn backbone_checksum(backbone: &Checkpoint) -> u64 {
    checkpoint_fnv1a(backbone)
}
