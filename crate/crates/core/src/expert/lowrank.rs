//! Truncated SVD by deflated power iteration, used for the low-rank expert
//! baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::store::{Checkpoint, TaskVector};

const TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Top `rank` singular triples of a row-major `rows x cols` matrix.
///
/// Each triple is found by power iteration on the deflated residual and
/// accepted once the singular value changes by at most `1e-8` relative.
/// Components below the numerical rank are dropped, so fewer than `rank`
/// triples may be returned.
pub fn truncated_svd(
    a: &[f64],
    rows: usize,
    cols: usize,
    rank: usize,
) -> Result<Vec<SingularTriple>> {
    assert_eq!(a.len(), rows * cols);
    let scale = norm(a);
    let mut residual = a.to_vec();
    let mut triples = Vec::new();
    if scale == 0.0 {
        return Ok(triples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..rank.min(rows).min(cols) {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() - 0.5).collect();
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut u = vec![0.0; rows];
        let mut sigma_prev = 0.0;
        let mut sigma = 0.0;
        let mut converged = false;
        for _ in 0..MAX_ITERATIONS {
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = (0..cols).map(|c| residual[r * cols + c] * v[c]).sum();
            }
            let nu = norm(&u);
            if nu <= 1e-12 * scale {
                sigma = 0.0;
                converged = true;
                break;
            }
            u.iter_mut().for_each(|x| *x /= nu);
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = (0..rows).map(|r| residual[r * cols + c] * u[r]).sum();
            }
            sigma = norm(&v);
            v.iter_mut().for_each(|x| *x /= sigma);
            if (sigma - sigma_prev).abs() <= TOLERANCE * sigma {
                converged = true;
                break;
            }
            sigma_prev = sigma;
        }
        if !converged {
            return Err(Error::NoConvergence(MAX_ITERATIONS));
        }
        if sigma <= 1e-12 * scale {
            break;
        }
        for r in 0..rows {
            for c in 0..cols {
                residual[r * cols + c] -= sigma * u[r] * v[c];
            }
        }
        triples.push(SingularTriple {
            sigma,
            u: u.clone(),
            v: v.clone(),
        });
    }
    Ok(triples)
}

fn reconstruct(triples: &[SingularTriple], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for t in triples {
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += t.sigma * t.u[r] * t.v[c];
            }
        }
    }
    out
}

/// Per-tensor best rank-`rank` approximation of a task vector.
///
/// Matrices (and higher-rank tensors viewed as `(shape[0], rest)`) are
/// approximated; vectors and scalars pass through. `rank` is clamped to the
/// smaller matrix dimension.
pub fn lowrank_expert(tv: &TaskVector, rank: usize) -> Result<TaskVector> {
    if rank == 0 {
        return Err(Error::OutOfRange("rank must be positive".into()));
    }
    let mut out = Checkpoint::new();
    for (name, t) in tv.delta().iter() {
        let approx = if t.rank() >= 2 {
            let rows = t.shape()[0];
            let cols = t.numel() / rows;
            let a: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
            let triples = truncated_svd(&a, rows, cols, rank)?;
            t.with_data(
                reconstruct(&triples, rows, cols)
                    .into_iter()
                    .map(|x| x as f32)
                    .collect(),
            )
        } else {
            t.clone()
        };
        out.insert(name.clone(), approx)?;
    }
    Ok(TaskVector::new(tv.task_id(), out))
}
