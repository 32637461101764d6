#![allow(dead_code)]

use fmerge_core::{Checkpoint, TaskVector, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank-1 or rank-2 shapes up to 16 per axis.
pub fn signal_shape() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (1usize..=64).prop_map(|n| vec![n]),
        (1usize..=16, 1usize..=16).prop_map(|(a, b)| vec![a, b]),
    ]
}

pub fn tensor_of(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let m: usize = shape.iter().product();
    prop::collection::vec(-1.0f32..1.0, m)
        .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

pub fn tensor() -> impl Strategy<Value = Tensor> {
    signal_shape().prop_flat_map(tensor_of)
}

/// Checkpoints with 1 to 4 tensors of mixed rank, including scalars.
pub fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    let shape = prop_oneof![
        Just(vec![]),
        (1usize..=12).prop_map(|n| vec![n]),
        (1usize..=6, 1usize..=6).prop_map(|(a, b)| vec![a, b]),
        (1usize..=3, 1usize..=3, 1usize..=4).prop_map(|(a, b, c)| vec![a, b, c]),
    ];
    prop::collection::vec(shape.prop_flat_map(tensor_of), 1..=4).prop_map(|tensors| {
        let mut c = Checkpoint::new();
        for (i, t) in tensors.into_iter().enumerate() {
            c.insert(format!("t{i}"), t).unwrap();
        }
        c
    })
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let m: usize = shape.iter().product();
    let data = (0..m).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checkpoint with one tensor per `(name, shape)`, uniform in [-1, 1).
pub fn random_checkpoint(seed: u64, layout: &[(&str, Vec<usize>)]) -> Checkpoint {
    let mut r = rng(seed);
    let mut c = Checkpoint::new();
    for (name, shape) in layout {
        c.insert(*name, random_tensor(&mut r, shape)).unwrap();
    }
    c
}

pub fn single(name: &str, data: &[f32]) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert(name, Tensor::from_vec(data.to_vec())).unwrap();
    c
}

pub fn tv(id: &str, c: Checkpoint) -> TaskVector {
    TaskVector::new(id, c)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
}

pub fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

pub fn flat(c: &Checkpoint) -> Vec<f32> {
    c.flat_values().collect()
}
