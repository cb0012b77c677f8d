//! Per-layer key/value cache with completeness tracking.
//!
//! Completeness is prefix-closed per position: position `t` holds K/V for
//! layers `1..=depth(t)`. Positions that stopped below the top layer are
//! recorded in the pending list together with their last hidden state, so
//! the missing layers can be computed later.

use crate::error::{Error, Result};
use crate::math::max_abs_diff;

#[derive(Debug, Clone, PartialEq)]
pub struct PendingPosition {
    pub position: usize,
    /// Highest layer computed for this position.
    pub exit_layer: usize,
    /// Hidden state output by `exit_layer`.
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    num_layers: usize,
    width: usize,
    capacity: usize,
    // keys[layer - 1][position * width ..]
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    depth: Vec<usize>,
    pending: Vec<PendingPosition>,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize, capacity: usize) -> Self {
        Self {
            num_layers,
            width,
            capacity,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
            depth: Vec::new(),
            pending: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Number of occupied positions.
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depth(&self, position: usize) -> usize {
        self.depth[position]
    }

    pub fn is_complete(&self, position: usize, layer: usize) -> bool {
        position < self.len() && layer >= 1 && layer <= self.depth[position]
    }

    pub fn pending(&self) -> &[PendingPosition] {
        &self.pending
    }

    pub(crate) fn pending_mut(&mut self) -> &mut Vec<PendingPosition> {
        &mut self.pending
    }

    /// True once every occupied position holds every layer.
    pub fn is_fully_complete(&self) -> bool {
        self.pending.is_empty() && self.depth.iter().all(|&d| d == self.num_layers)
    }

    /// Appends a new position with no layers computed.
    pub(crate) fn open_position(&mut self, position: usize) -> Result<()> {
        if position != self.len() {
            return Err(Error::Cache(format!(
                "positions must be contiguous: expected {}, got {position}",
                self.len()
            )));
        }
        if position >= self.capacity {
            return Err(Error::PositionOverflow { position, max_seq_len: self.capacity });
        }
        for layer in 0..self.num_layers {
            self.keys[layer].resize((position + 1) * self.width, 0.0);
            self.values[layer].resize((position + 1) * self.width, 0.0);
        }
        self.depth.push(0);
        Ok(())
    }

    /// Writes K/V for `(position, layer)`; the position must be complete up to `layer - 1`.
    pub(crate) fn write(&mut self, position: usize, layer: usize, key: &[f64], value: &[f64]) -> Result<()> {
        if position >= self.len() || self.depth[position] + 1 != layer {
            return Err(Error::Cache(format!(
                "layer {layer} written out of order at position {position}"
            )));
        }
        let span = position * self.width..(position + 1) * self.width;
        self.keys[layer - 1][span.clone()].copy_from_slice(key);
        self.values[layer - 1][span].copy_from_slice(value);
        self.depth[position] = layer;
        Ok(())
    }

    pub fn key(&self, layer: usize, position: usize) -> &[f64] {
        &self.keys[layer - 1][position * self.width..(position + 1) * self.width]
    }

    pub fn value(&self, layer: usize, position: usize) -> &[f64] {
        &self.values[layer - 1][position * self.width..(position + 1) * self.width]
    }

    /// Keys of positions `0..=upto` at `layer`, flattened.
    pub(crate) fn keys_upto(&self, layer: usize, upto: usize) -> &[f64] {
        &self.keys[layer - 1][..(upto + 1) * self.width]
    }

    pub(crate) fn values_upto(&self, layer: usize, upto: usize) -> &[f64] {
        &self.values[layer - 1][..(upto + 1) * self.width]
    }

    /// First position before `position` that is not complete at `layer`.
    pub fn first_incomplete_before(&self, position: usize, layer: usize) -> Option<usize> {
        self.depth[..position.min(self.len())].iter().position(|&d| d < layer)
    }

    /// Largest absolute difference between two caches over all entries.
    /// `None` if the caches differ in shape or completeness.
    pub fn max_abs_diff(&self, other: &KvCache) -> Option<f64> {
        if self.num_layers != other.num_layers || self.width != other.width || self.depth != other.depth {
            return None;
        }
        let mut worst = 0.0f64;
        for layer in 0..self.num_layers {
            worst = worst
                .max(max_abs_diff(&self.keys[layer], &other.keys[layer]))
                .max(max_abs_diff(&self.values[layer], &other.values[layer]));
        }
        Some(worst)
    }

    /// Drops positions from `len` onward. Pending records past the cut go too.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len() {
            return;
        }
        for layer in 0..self.num_layers {
            self.keys[layer].truncate(len * self.width);
            self.values[layer].truncate(len * self.width);
        }
        self.depth.truncate(len);
        self.pending.retain(|p| p.position < len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_contiguous_and_bounded() {
        let mut c = KvCache::new(2, 4, 2);
        assert!(c.open_position(1).is_err());
        c.open_position(0).unwrap();
        c.open_position(1).unwrap();
        assert!(matches!(c.open_position(2), Err(Error::PositionOverflow { .. })));
    }

    #[test]
    fn layers_fill_in_order() {
        let mut c = KvCache::new(3, 2, 4);
        c.open_position(0).unwrap();
        assert!(c.write(0, 2, &[1.0, 2.0], &[3.0, 4.0]).is_err());
        c.write(0, 1, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(c.is_complete(0, 1));
        assert!(!c.is_complete(0, 2));
        assert_eq!(c.key(1, 0), &[1.0, 2.0]);
        assert_eq!(c.first_incomplete_before(1, 2), Some(0));
        assert_eq!(c.first_incomplete_before(1, 1), None);
    }
}
