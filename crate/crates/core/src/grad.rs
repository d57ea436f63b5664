//! Sparse gradient accumulator over logit-table coordinates.

use std::collections::BTreeMap;

/// Sparse map from flat logit-table indices to accumulated partial derivatives.
///
/// Entries for unvisited coordinates are absent and implicitly zero. Iteration
/// order is by index, so accumulation is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    entries: BTreeMap<usize, f64>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries.get(&index).copied().unwrap_or(0.0)
    }

    /// Adds `value` to the accumulator at `index`. Non-finite values are a bug
    /// upstream and panic in debug builds.
    pub fn accumulate(&mut self, index: usize, value: f64) {
        debug_assert!(value.is_finite(), "non-finite gradient entry at {index}");
        *self.entries.entry(index).or_insert(0.0) += value;
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (&i, &g) in &other.entries {
            self.accumulate(i, scale * g);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            *g *= factor;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&i, &g)| (i, g))
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Max elementwise absolute difference against a dense gradient table.
    pub fn max_abs_diff_dense(&self, dense: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (i, &d) in dense.iter().enumerate() {
            worst = worst.max((self.get(i) - d).abs());
        }
        worst
    }

    /// Max relative error against a dense table, with `atol` guarding the
    /// near-zero entries.
    pub fn max_rel_err_dense(&self, dense: &[f64], atol: f64) -> f64 {
        // relative to the larger of the per-component magnitude and the
        // overall gradient scale, so near-zero components are not judged
        // against finite-difference round-off noise alone
        let scale = dense
            .iter()
            .map(|d| d.abs())
            .fold(0.0f64, f64::max)
            .max(self.max_abs());
        let mut worst = 0.0f64;
        for (i, &d) in dense.iter().enumerate() {
            let g = self.get(i);
            let denom = d.abs().max(g.abs()).max(scale).max(atol);
            worst = worst.max((g - d).abs() / denom);
        }
        worst
    }
}
