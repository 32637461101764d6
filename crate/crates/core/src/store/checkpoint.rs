use std::collections::btree_map;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: shape must be positive")
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("from_vec: empty data")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same shape, new values. Panics if the length differs.
    pub fn with_data(&self, data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), self.data.len(), "with_data: length mismatch");
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Named collection of tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    origin_tag: Option<String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_origin(mut self, tag: impl Into<String>) -> Self {
        self.origin_tag = Some(tag.into());
        self
    }

    pub fn origin_tag(&self) -> Option<&str> {
        self.origin_tag.as_deref()
    }

    pub fn set_origin_tag(&mut self, tag: Option<String>) {
        self.origin_tag = tag;
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "tensor name is empty".into(),
            });
        }
        match self.tensors.entry(name) {
            btree_map::Entry::Occupied(e) => Err(Error::DuplicateName(e.key().clone())),
            btree_map::Entry::Vacant(e) => {
                e.insert(tensor);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// All values in global flat order (tensors by name, then row-major).
    pub fn flat_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.tensors.values().flat_map(|t| t.data.iter().copied())
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_layout(&self, other: &Checkpoint) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if na != nb {
                return Err(Error::ShapeMismatch(format!(
                    "tensor names differ: `{na}` vs `{nb}`"
                )));
            }
            if ta.shape != tb.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{na}`: {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    /// Same layout with every value set to zero.
    pub fn zeros_like(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
            origin_tag: None,
        }
    }

    /// Applies `f` to each tensor, keeping names and origin tag.
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), f(n, t)))
                .collect(),
            origin_tag: self.origin_tag.clone(),
        }
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>, origin_tag: Option<String>) -> Self {
        Checkpoint {
            tensors,
            origin_tag,
        }
    }
}

/// Delta between a fine-tuned checkpoint and its pretrained ancestor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    task_id: String,
    delta: Checkpoint,
}

impl TaskVector {
    pub fn new(task_id: impl Into<String>, delta: Checkpoint) -> Self {
        TaskVector {
            task_id: task_id.into(),
            delta,
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn delta(&self) -> &Checkpoint {
        &self.delta
    }

    pub fn into_delta(self) -> Checkpoint {
        self.delta
    }

    pub fn param_count(&self) -> usize {
        self.delta.param_count()
    }

    /// Every element multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> TaskVector {
        TaskVector {
            task_id: self.task_id.clone(),
            delta: self.delta.map_tensors(|_, t| {
                t.with_data(
                    t.data
                        .iter()
                        .map(|&x| (alpha * f64::from(x)) as f32)
                        .collect(),
                )
            }),
        }
    }
}

/// `fine - pre`, elementwise per tensor. The task id is taken from the fine
/// checkpoint's origin tag (a leading `task:` is stripped).
pub fn task_vector(fine: &Checkpoint, pre: &Checkpoint) -> Result<TaskVector> {
    let task_id = fine
        .origin_tag()
        .map(|t| t.strip_prefix("task:").unwrap_or(t).to_string())
        .unwrap_or_else(|| "task".to_string());
    task_vector_with_id(task_id, fine, pre)
}

pub fn task_vector_with_id(
    task_id: impl Into<String>,
    fine: &Checkpoint,
    pre: &Checkpoint,
) -> Result<TaskVector> {
    pre.check_layout(fine)?;
    let delta = fine.map_tensors(|name, f| {
        let p = &pre.tensors[name];
        f.with_data(f.data.iter().zip(&p.data).map(|(a, b)| a - b).collect())
    });
    let mut delta = delta;
    delta.origin_tag = None;
    Ok(TaskVector::new(task_id, delta))
}

/// `base + scale * delta`, elementwise.
pub fn apply_delta(base: &Checkpoint, delta: &TaskVector, scale: f64) -> Result<Checkpoint> {
    base.check_layout(&delta.delta)?;
    if scale == 0.0 {
        return Ok(base.clone());
    }
    Ok(base.map_tensors(|name, b| {
        let d = &delta.delta.tensors[name];
        b.with_data(
            b.data
                .iter()
                .zip(&d.data)
                .map(|(&x, &y)| (f64::from(x) + scale * f64::from(y)) as f32)
                .collect(),
        )
    }))
}

/// Global mean of absolute values over every element of every tensor.
pub fn mean_abs(v: &TaskVector) -> Result<f64> {
    let c = &v.delta;
    let m = c.param_count();
    if m == 0 {
        return Err(Error::Empty("mean_abs of an empty task vector".into()));
    }
    let abs: Vec<f64> = c.flat_values().map(|x| f64::from(x).abs()).collect();
    Ok(pairwise_sum(&abs) / m as f64)
}
