//! Small numeric helpers shared across modules.

const PAIRWISE_BLOCK: usize = 16;

/// Pairwise (tree) summation. Error grows as O(log n) instead of O(n), and
/// the result depends only on the input order, never on thread count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `ceil(frac * total)` clamped to `[1, total]`, with a small guard so that
/// products like `0.07 * 100 = 7.000000000000001` do not round up.
pub(crate) fn fraction_count_ceil(frac: f64, total: usize) -> usize {
    if total == 0 {
        return 0;
    }
    let raw = frac * total as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil();
    (count.max(1.0) as usize).min(total)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(PRIME))
}
