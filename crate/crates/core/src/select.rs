//! Magnitude-based selection shared by experts and TIES trimming.

use std::cmp::Ordering;

fn magnitude_rank(values: &[f32], a: usize, b: usize) -> Ordering {
    values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
}

/// Indices of the `count` largest-magnitude values, ties broken by lower
/// index, returned in ascending index order. Runs in O(n + count log count).
pub fn top_magnitude(values: &[f32], count: usize) -> Vec<usize> {
    let count = count.min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if count < values.len() && count > 0 {
        idx.select_nth_unstable_by(count, |&a, &b| magnitude_rank(values, a, b));
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}
