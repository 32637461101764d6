//! Merged-backbone construction: frequency-filtered merging and the
//! cost-free baselines it is compared against.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::select::top_magnitude;
use crate::spectral::{mask_for_tensor_shape, FilterSpec, Transform};
use crate::store::{mean_abs, Checkpoint, TaskVector, Tensor};

/// Default removed fraction for the high-pass filter.
pub const DEFAULT_RHO: f64 = 0.3;

/// Per-task merging coefficients; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: String,
    pub rho: f64,
    pub lambdas: Vec<f64>,
    /// Per tensor: retained energy of the filtered task vectors over their
    /// unfiltered energy, pooled across tasks.
    pub filtered_energy_ratio: BTreeMap<String, f64>,
    pub wall_time_ms: f64,
    pub param_count: usize,
    pub task_count: usize,
}

fn check_tasks(pre: &Checkpoint, tvs: &[TaskVector]) -> Result<()> {
    if tvs.is_empty() {
        return Err(Error::Empty("no task vectors to merge".into()));
    }
    for tv in tvs {
        pre.check_layout(tv.delta())?;
    }
    Ok(())
}

/// `lambda_i = E(v_i) / sum_j E(v_j)` with `E` the global mean absolute value.
pub fn merging_coefficients(tvs: &[TaskVector]) -> Result<MergeWeights> {
    if tvs.is_empty() {
        return Err(Error::Empty("no task vectors".into()));
    }
    let means = tvs.iter().map(mean_abs).collect::<Result<Vec<_>>>()?;
    let total = pairwise_sum(&means);
    if total == 0.0 {
        return Err(Error::AllZeroTaskVectors);
    }
    Ok(MergeWeights {
        lambdas: means.iter().map(|e| e / total).collect(),
    })
}

/// Frequency-filtered merge with a high-pass filter removing `rho`.
pub fn fr_merge(
    pre: &Checkpoint,
    tvs: &[TaskVector],
    rho: f64,
) -> Result<(Checkpoint, MergeReport)> {
    fr_merge_with(pre, tvs, &FilterSpec::high_pass(rho)?)
}

/// `pre + sum_i lambda_i * G(v_i)`; `lambda` is computed on the unfiltered
/// task vectors. Tensors are filtered in parallel; the result does not depend
/// on the thread count.
pub fn fr_merge_with(
    pre: &Checkpoint,
    tvs: &[TaskVector],
    spec: &FilterSpec,
) -> Result<(Checkpoint, MergeReport)> {
    let start = Instant::now();
    check_tasks(pre, tvs)?;
    let weights = merging_coefficients(tvs)?;
    let lambdas = &weights.lambdas;

    let entries: Vec<(&String, &Tensor)> = pre.iter().collect();
    let merged: Vec<(String, Tensor, f64)> = entries
        .par_iter()
        .map(|&(name, base)| {
            let mask = mask_for_tensor_shape(base.shape(), spec)?;
            let mut acc: Vec<f64> = base.data().iter().map(|&x| f64::from(x)).collect();
            let mut kept_energy = 0.0;
            let mut total_energy = 0.0;
            for (tv, &lam) in tvs.iter().zip(lambdas) {
                let delta = tv.delta().get(name).expect("layout checked");
                let filtered = match &mask {
                    Some(mask) => mask.apply(delta, Transform::Fft)?,
                    None => delta.clone(),
                };
                total_energy += energy(delta.data());
                kept_energy += energy(filtered.data());
                for (a, &g) in acc.iter_mut().zip(filtered.data()) {
                    *a += lam * f64::from(g);
                }
            }
            let ratio = if total_energy > 0.0 {
                kept_energy / total_energy
            } else {
                1.0
            };
            let tensor = base.with_data(acc.into_iter().map(|x| x as f32).collect());
            Ok((name.clone(), tensor, ratio))
        })
        .collect::<Result<_>>()?;

    let mut out = Checkpoint::new().with_origin("merged:fr");
    let mut ratios = BTreeMap::new();
    for (name, tensor, ratio) in merged {
        ratios.insert(name.clone(), ratio);
        out.insert(name, tensor)?;
    }
    let rho = match *spec {
        FilterSpec::HighPass { rho } | FilterSpec::LowPass { rho } => rho,
        FilterSpec::BandStop { rho_lo, rho_hi } => rho_hi - rho_lo,
    };
    let report = MergeReport {
        method: "fr".into(),
        rho,
        lambdas: weights.lambdas,
        filtered_energy_ratio: ratios,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        param_count: pre.param_count(),
        task_count: tvs.len(),
    };
    Ok((out, report))
}

fn energy(xs: &[f32]) -> f64 {
    let sq: Vec<f64> = xs.iter().map(|&x| f64::from(x) * f64::from(x)).collect();
    pairwise_sum(&sq)
}

/// Elementwise mean of checkpoints.
pub fn weight_average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Empty("no checkpoints to average".into()))?;
    for c in &ckpts[1..] {
        first.check_layout(c)?;
    }
    let n = ckpts.len() as f64;
    let mut out = first.map_tensors(|name, t| {
        let mut acc = vec![0.0f64; t.numel()];
        for c in ckpts {
            for (a, &x) in acc.iter_mut().zip(c.get(name).unwrap().data()) {
                *a += f64::from(x);
            }
        }
        t.with_data(acc.into_iter().map(|s| (s / n) as f32).collect())
    });
    out.set_origin_tag(Some("merged:avg".into()));
    Ok(out)
}

/// `pre + lam * sum_i v_i`.
pub fn task_arithmetic(pre: &Checkpoint, tvs: &[TaskVector], lam: f64) -> Result<Checkpoint> {
    check_tasks(pre, tvs)?;
    let mut out = pre.map_tensors(|name, base| {
        let mut acc = vec![0.0f64; base.numel()];
        for tv in tvs {
            for (a, &x) in acc.iter_mut().zip(tv.delta().get(name).unwrap().data()) {
                *a += f64::from(x);
            }
        }
        base.with_data(
            base.data()
                .iter()
                .zip(acc)
                .map(|(&b, s)| (f64::from(b) + lam * s) as f32)
                .collect(),
        )
    });
    out.set_origin_tag(Some("merged:ta".into()));
    Ok(out)
}

/// Trim, elect sign, disjoint mean.
///
/// Each task vector keeps its top `keep_frac` entries by magnitude. Per
/// parameter the elected sign is the sign of the sum of trimmed values (zero
/// sums elect positive), and the merged delta is the mean over the tasks whose
/// nonzero trimmed value agrees with it.
pub fn ties_merge(pre: &Checkpoint, tvs: &[TaskVector], keep_frac: f64) -> Result<Checkpoint> {
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "keep_frac = {keep_frac} must lie in (0, 1]"
        )));
    }
    check_tasks(pre, tvs)?;
    let m = pre.param_count();
    let trimmed: Vec<Vec<f32>> = tvs
        .iter()
        .map(|tv| {
            let count = crate::numeric::fraction_count_ceil(keep_frac, m);
            let flat: Vec<f32> = tv.delta().flat_values().collect();
            let mut out = vec![0.0f32; m];
            for i in top_magnitude(&flat, count) {
                out[i] = flat[i];
            }
            out
        })
        .collect();

    let mut delta = vec![0.0f32; m];
    for (i, d) in delta.iter_mut().enumerate() {
        let sum: f64 = trimmed.iter().map(|t| f64::from(t[i])).sum();
        let positive = sum >= 0.0;
        let (mut acc, mut count) = (0.0f64, 0usize);
        for t in &trimmed {
            let x = t[i];
            if x != 0.0 && (x > 0.0) == positive {
                acc += f64::from(x);
                count += 1;
            }
        }
        if count > 0 {
            *d = (acc / count as f64) as f32;
        }
    }
    let mut out = add_flat(pre, &delta);
    out.set_origin_tag(Some("merged:ties".into()));
    Ok(out)
}

/// `base + flat`, where `flat` is in global flat order.
pub(crate) fn add_flat(base: &Checkpoint, flat: &[f32]) -> Checkpoint {
    let mut offset = 0;
    base.map_tensors(|_, t| {
        let n = t.numel();
        let chunk = &flat[offset..offset + n];
        offset += n;
        t.with_data(t.data().iter().zip(chunk).map(|(&b, &d)| b + d).collect())
    })
}

/// Drop each entry with probability `p`, rescale survivors by `1 / (1 - p)`.
///
/// The random stream for tensor `k` (in name order) is ChaCha8 keyed by
/// `seed` on stream `k`, so the output depends only on `(tv, p, seed)`.
pub fn dare_drop(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::OutOfRange(format!(
            "drop probability {p} must lie in [0, 1)"
        )));
    }
    if p == 0.0 {
        return Ok(tv.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let mut stream = 0u64;
    let delta = tv.delta().map_tensors(|_, t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        t.with_data(
            t.data()
                .iter()
                .map(|&x| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        (f64::from(x) * scale) as f32
                    }
                })
                .collect(),
        )
    });
    Ok(TaskVector::new(tv.task_id(), delta))
}
