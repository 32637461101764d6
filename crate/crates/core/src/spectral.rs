//! Frequency-domain filtering of weight tensors.
//!
//! Rank-1 tensors are treated as 1-D signals and rank-2 tensors as 2-D
//! signals. Scalars pass through, and tensors of rank three or more are viewed
//! as `(shape[0], m / shape[0])` matrices. The forward transform is unscaled
//! with an `exp(-i..)` kernel; the inverse divides by the element count.
//!
//! Filters are parameterized by the fraction `rho` of coefficients they act
//! on. Coefficients are ranked by normalized radial frequency
//! `sqrt(sum_axes (min(i, N - i) / (N / 2))^2)` with ties broken by flat
//! index, and the selected rank range is closed under conjugate symmetry so
//! that filtered real tensors stay real.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Checkpoint, TaskVector, Tensor};

/// Which frequencies a filter zeroes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterSpec {
    /// Zero the `rho` fraction of lowest-frequency coefficients.
    HighPass { rho: f64 },
    /// Keep only the `rho` fraction of lowest-frequency coefficients, i.e.
    /// exactly what `HighPass { rho }` removes.
    LowPass { rho: f64 },
    /// Zero the ranked band `[rho_lo, rho_hi)`.
    BandStop { rho_lo: f64, rho_hi: f64 },
}

/// CLI-level filter choice; `Band` removes the middle annulus of mass `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    High,
    Low,
    Band,
}

impl FilterMode {
    pub const ALL: [FilterMode; 3] = [FilterMode::High, FilterMode::Low, FilterMode::Band];

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::High => "high_pass",
            FilterMode::Low => "low_pass",
            FilterMode::Band => "band_stop",
        }
    }
}

fn check_fraction(what: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!(
            "{what} = {x} must lie in [0, 1]"
        )))
    }
}

impl FilterSpec {
    pub fn high_pass(rho: f64) -> Result<Self> {
        check_fraction("rho", rho)?;
        Ok(FilterSpec::HighPass { rho })
    }

    pub fn low_pass(rho: f64) -> Result<Self> {
        check_fraction("rho", rho)?;
        Ok(FilterSpec::LowPass { rho })
    }

    pub fn band_stop(rho_lo: f64, rho_hi: f64) -> Result<Self> {
        check_fraction("rho_lo", rho_lo)?;
        check_fraction("rho_hi", rho_hi)?;
        if rho_lo >= rho_hi {
            return Err(Error::OutOfRange(format!(
                "band_stop needs rho_lo < rho_hi, got {rho_lo} >= {rho_hi}"
            )));
        }
        Ok(FilterSpec::BandStop { rho_lo, rho_hi })
    }

    /// Removes the middle annulus holding a `rho` fraction of coefficients.
    pub fn band_stop_centered(rho: f64) -> Result<Self> {
        check_fraction("rho", rho)?;
        if rho == 0.0 {
            // Empty band: identity, expressed as a high-pass removing nothing.
            return Ok(FilterSpec::HighPass { rho: 0.0 });
        }
        Self::band_stop((1.0 - rho) / 2.0, (1.0 + rho) / 2.0)
    }

    pub fn from_mode(mode: FilterMode, rho: f64) -> Result<Self> {
        match mode {
            FilterMode::High => Self::high_pass(rho),
            FilterMode::Low => Self::low_pass(rho),
            FilterMode::Band => Self::band_stop_centered(rho),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FilterSpec::HighPass { rho } | FilterSpec::LowPass { rho } => {
                check_fraction("rho", rho)
            }
            FilterSpec::BandStop { rho_lo, rho_hi } => Self::band_stop(rho_lo, rho_hi).map(|_| ()),
        }
    }
}

/// Complex spectrum of a rank-1 or rank-2 signal; DC at index 0 on every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrid {
    pub shape: Vec<usize>,
    pub coefficients: Vec<Complex64>,
}

/// Which DFT implementation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Fft,
    /// Direct evaluation of the DFT sum, O(m^2).
    Oracle,
}

fn check_signal_shape(shape: &[usize]) -> Result<()> {
    match shape.len() {
        1 | 2 => Ok(()),
        r => Err(Error::UnsupportedRank(r)),
    }
}

/// Shape used when filtering a tensor: `None` for scalars.
pub fn signal_shape(shape: &[usize]) -> Option<Vec<usize>> {
    match shape.len() {
        0 => None,
        1 | 2 => Some(shape.to_vec()),
        _ => {
            let m: usize = shape.iter().product();
            Some(vec![shape[0], m / shape[0]])
        }
    }
}

/// Reference DFT straight from the definition.
fn dft_direct(input: &[Complex64], shape: &[usize], inverse: bool) -> Vec<Complex64> {
    let (rows, cols) = match *shape {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!(),
    };
    let sign = if inverse { 1.0 } else { -1.0 };
    let m = rows * cols;
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for k0 in 0..rows {
        for k1 in 0..cols {
            let mut acc = Complex64::new(0.0, 0.0);
            for n0 in 0..rows {
                for n1 in 0..cols {
                    let frac = ((k0 * n0) % rows) as f64 / rows as f64
                        + ((k1 * n1) % cols) as f64 / cols as f64;
                    let phase = sign * 2.0 * PI * frac;
                    acc += input[n0 * cols + n1] * Complex64::new(phase.cos(), phase.sin());
                }
            }
            out[k0 * cols + k1] = acc;
        }
    }
    if inverse {
        let scale = 1.0 / m as f64;
        out.iter_mut().for_each(|z| *z *= scale);
    }
    out
}

/// Row-major `rows x cols` into row-major `cols x rows`, in cache-sized tiles.
fn transpose_into(a: &[Complex64], out: &mut [Complex64], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
}

/// Separable FFT in place: rows, then columns. `t` is transpose scratch.
fn fft_in_place(data: &mut [Complex64], t: &mut Vec<Complex64>, shape: &[usize], inverse: bool) {
    let (rows, cols) = match *shape {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!(),
    };
    let mut planner = FftPlanner::<f64>::new();
    let plan = |planner: &mut FftPlanner<f64>, n: usize| {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    };
    if cols > 1 {
        let row_fft = plan(&mut planner, cols);
        let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
        // Rows are contiguous, so the whole buffer is processed in one call.
        row_fft.process_with_scratch(data, &mut scratch);
    }
    if rows > 1 {
        // Columns become contiguous rows, so one batched call covers them.
        let col_fft = plan(&mut planner, rows);
        let mut scratch = vec![Complex64::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
        t.resize(data.len(), Complex64::new(0.0, 0.0));
        transpose_into(data, t, rows, cols);
        col_fft.process_with_scratch(t, &mut scratch);
        transpose_into(t, data, cols, rows);
    }
    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        data.iter_mut().for_each(|z| *z *= scale);
    }
}

fn fft_separable(mut data: Vec<Complex64>, shape: &[usize], inverse: bool) -> Vec<Complex64> {
    fft_in_place(&mut data, &mut Vec::new(), shape, inverse);
    data
}

thread_local! {
    // Working and transpose buffers for filtering, kept per thread. Large
    // tensors otherwise pay for fresh pages on every call.
    static FILTER_SCRATCH: RefCell<(Vec<Complex64>, Vec<Complex64>)> =
        const { RefCell::new((Vec::new(), Vec::new())) };
}

fn run_transform(
    input: Vec<Complex64>,
    shape: &[usize],
    inverse: bool,
    transform: Transform,
) -> Vec<Complex64> {
    match transform {
        Transform::Fft => fft_separable(input, shape, inverse),
        Transform::Oracle => dft_direct(&input, shape, inverse),
    }
}

fn to_complex(t: &Tensor) -> Vec<Complex64> {
    t.data()
        .iter()
        .map(|&x| Complex64::new(f64::from(x), 0.0))
        .collect()
}

/// Forward transform of a rank-1 or rank-2 tensor.
pub fn forward(t: &Tensor, transform: Transform) -> Result<SpectrumGrid> {
    check_signal_shape(t.shape())?;
    Ok(SpectrumGrid {
        shape: t.shape().to_vec(),
        coefficients: run_transform(to_complex(t), t.shape(), false, transform),
    })
}

/// Inverse transform; returns complex values in row-major order.
pub fn inverse(grid: &SpectrumGrid, transform: Transform) -> Result<Vec<Complex64>> {
    check_signal_shape(&grid.shape)?;
    if grid.shape.iter().product::<usize>() != grid.coefficients.len() {
        return Err(Error::ShapeMismatch(format!(
            "spectrum shape {:?} does not hold {} coefficients",
            grid.shape,
            grid.coefficients.len()
        )));
    }
    Ok(run_transform(
        grid.coefficients.clone(),
        &grid.shape,
        true,
        transform,
    ))
}

pub fn dft_oracle(t: &Tensor) -> Result<SpectrumGrid> {
    forward(t, Transform::Oracle)
}

pub fn dft_oracle_inverse(grid: &SpectrumGrid) -> Result<Vec<Complex64>> {
    inverse(grid, Transform::Oracle)
}

pub fn fft(t: &Tensor) -> Result<SpectrumGrid> {
    forward(t, Transform::Fft)
}

pub fn ifft(grid: &SpectrumGrid) -> Result<Vec<Complex64>> {
    inverse(grid, Transform::Fft)
}

/// Normalized radial frequency of a flat index.
pub fn radius(shape: &[usize], flat: usize) -> f64 {
    let mut rem = flat;
    let mut sq = 0.0;
    for &n in shape.iter().rev() {
        let i = rem % n;
        rem /= n;
        let aliased = i.min(n - i) as f64;
        let norm = aliased / (n as f64 / 2.0);
        sq += norm * norm;
    }
    sq.sqrt()
}

/// `round(rho * m)`: how many coefficients a fraction `rho` covers.
pub fn removed_count(shape: &[usize], rho: f64) -> usize {
    let m: usize = shape.iter().product();
    ((rho * m as f64).round() as usize).min(m)
}

fn rank_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keys occupying ranked positions `[lo, hi)`, in no particular order.
fn ranked_keys(shape: &[usize], lo: usize, hi: usize) -> Vec<(f64, usize)> {
    let m: usize = shape.iter().product();
    let hi = hi.min(m);
    if lo >= hi {
        return Vec::new();
    }
    let mut keys: Vec<(f64, usize)> = (0..m).map(|i| (radius(shape, i), i)).collect();
    if hi < m {
        keys.select_nth_unstable_by(hi, rank_cmp);
        keys.truncate(hi);
    }
    if lo > 0 {
        keys.select_nth_unstable_by(lo, rank_cmp);
    }
    keys.split_off(lo)
}

/// Flat indices occupying ranked positions `[lo, hi)` in (radius, index) order.
pub fn ranked_range(shape: &[usize], lo: usize, hi: usize) -> Vec<usize> {
    let mut band = ranked_keys(shape, lo, hi);
    band.sort_unstable_by(rank_cmp);
    band.into_iter().map(|(_, i)| i).collect()
}

/// The `removed_count(shape, rho)` lowest-frequency flat indices, in rank order.
pub fn removed_indices(shape: &[usize], rho: f64) -> Vec<usize> {
    ranked_range(shape, 0, removed_count(shape, rho))
}

/// Flat index of the conjugate-symmetric partner `(-k) mod N` on every axis.
pub fn conjugate_index(shape: &[usize], flat: usize) -> usize {
    let mut rem = flat;
    let mut out = 0;
    let mut stride = 1;
    for &n in shape.iter().rev() {
        let i = rem % n;
        rem /= n;
        out += ((n - i) % n) * stride;
        stride *= n;
    }
    out
}

/// Precomputed zero/keep pattern for one signal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl FilterMask {
    /// Builds the mask for a rank-1 or rank-2 signal shape.
    pub fn new(shape: &[usize], spec: &FilterSpec) -> Result<Self> {
        check_signal_shape(shape)?;
        spec.validate()?;
        let m: usize = shape.iter().product();
        let (lo, hi, invert) = match *spec {
            FilterSpec::HighPass { rho } => (0, removed_count(shape, rho), false),
            FilterSpec::LowPass { rho } => (0, removed_count(shape, rho), true),
            FilterSpec::BandStop { rho_lo, rho_hi } => (
                removed_count(shape, rho_lo),
                removed_count(shape, rho_hi),
                false,
            ),
        };
        let mut band = vec![false; m];
        for (_, i) in ranked_keys(shape, lo, hi) {
            band[i] = true;
            band[conjugate_index(shape, i)] = true;
        }
        let keep = band.into_iter().map(|in_band| in_band == invert).collect();
        Ok(FilterMask {
            shape: shape.to_vec(),
            keep,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keeps(&self, flat: usize) -> bool {
        self.keep[flat]
    }

    pub fn zeroed_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Filters a tensor whose element count matches the mask shape.
    pub fn apply(&self, t: &Tensor, transform: Transform) -> Result<Tensor> {
        let m: usize = self.shape.iter().product();
        if t.numel() != m {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} vs tensor shape {:?}",
                self.shape,
                t.shape()
            )));
        }
        let zeroed = self.zeroed_count();
        if zeroed == 0 {
            return Ok(t.clone());
        }
        if zeroed == m {
            return Ok(t.with_data(vec![0.0; m]));
        }
        let max_abs = t
            .data()
            .iter()
            .fold(0.0f64, |a, &x| a.max(f64::from(x).abs()));
        let tolerance = 1e-5 * (1.0 + max_abs);
        let finish = |spectrum: &mut [Complex64]| -> Result<Vec<f32>> {
            let residue = spectrum.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
            if residue > tolerance {
                return Err(Error::ImaginaryResidue { residue, tolerance });
            }
            Ok(spectrum.iter().map(|z| z.re as f32).collect())
        };
        let data = match transform {
            Transform::Fft => FILTER_SCRATCH.with(|cell| {
                let (work, tbuf) = &mut *cell.borrow_mut();
                work.clear();
                work.extend(t.data().iter().map(|&x| Complex64::new(f64::from(x), 0.0)));
                fft_in_place(work, tbuf, &self.shape, false);
                self.zero_masked(work);
                fft_in_place(work, tbuf, &self.shape, true);
                finish(work)
            })?,
            Transform::Oracle => {
                let mut spectrum = dft_direct(&to_complex(t), &self.shape, false);
                self.zero_masked(&mut spectrum);
                finish(&mut dft_direct(&spectrum, &self.shape, true))?
            }
        };
        Ok(t.with_data(data))
    }

    fn zero_masked(&self, spectrum: &mut [Complex64]) {
        for (z, &keep) in spectrum.iter_mut().zip(&self.keep) {
            if !keep {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Mask for an arbitrary tensor shape; `None` means the tensor passes through.
pub fn mask_for_tensor_shape(shape: &[usize], spec: &FilterSpec) -> Result<Option<FilterMask>> {
    spec.validate()?;
    signal_shape(shape)
        .map(|s| FilterMask::new(&s, spec))
        .transpose()
}

/// `F^-1{ H . F{t} }` for the mask `H` described by `spec`.
pub fn filter_tensor(t: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    filter_tensor_with(t, spec, Transform::Fft)
}

pub fn filter_tensor_with(t: &Tensor, spec: &FilterSpec, transform: Transform) -> Result<Tensor> {
    match mask_for_tensor_shape(t.shape(), spec)? {
        None => Ok(t.clone()),
        Some(mask) => mask.apply(t, transform),
    }
}

/// Filters every tensor of a task vector with the same spec.
pub fn filter_task_vector(tv: &TaskVector, spec: &FilterSpec) -> Result<TaskVector> {
    let mut out = Checkpoint::new();
    for (name, t) in tv.delta().iter() {
        out.insert(name.clone(), filter_tensor(t, spec)?)?;
    }
    Ok(TaskVector::new(tv.task_id(), out))
}

/// Sum of complex moduli of the coefficient-wise spectrum difference.
pub fn spectral_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    spectral_l1_with(a, b, Transform::Fft)
}

pub fn spectral_l1_with(a: &Tensor, b: &Tensor, transform: Transform) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let Some(shape) = signal_shape(a.shape()) else {
        return Ok((f64::from(a.data()[0]) - f64::from(b.data()[0])).abs());
    };
    let fa = run_transform(to_complex(a), &shape, false, transform);
    let fb = run_transform(to_complex(b), &shape, false, transform);
    let terms: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).norm()).collect();
    Ok(crate::numeric::pairwise_sum(&terms))
}

/// Debug dump: `flat_index,radius,re,im` per coefficient.
pub fn spectrum_csv(grid: &SpectrumGrid) -> String {
    let mut out = String::from("flat_index,radius,re,im\n");
    for (i, z) in grid.coefficients.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", radius(&grid.shape, i), z.re, z.im);
    }
    out
}
