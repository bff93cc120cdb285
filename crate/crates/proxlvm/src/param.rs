//! Flat parameter vectors with a named block map.
//!
//! The optimizer, the proximal operators, and the diagonal scaling all
//! address coordinates through one flat layout, so a model defines its
//! blocks once and every component agrees on what lives where.

use std::ops::Range;
use std::sync::Arc;

/// One named contiguous block of coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
}

/// An ordered, gap-free partition of `0..dim` into named blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    dim: usize,
}

impl BlockLayout {
    /// Build a layout from (name, length) pairs, laid out contiguously.
    pub fn new(parts: &[(&str, usize)]) -> Arc<Self> {
        let mut blocks = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &(name, len) in parts {
            blocks.push(Block {
                name: name.to_string(),
                range: offset..offset + len,
            });
            offset += len;
        }
        Arc::new(BlockLayout { blocks, dim: offset })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.range.clone())
    }
}

/// A parameter vector bound to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    layout: Arc<BlockLayout>,
    values: Vec<f64>,
}

impl ParamVec {
    pub fn new(layout: Arc<BlockLayout>, values: Vec<f64>) -> Self {
        assert_eq!(
            layout.dim(),
            values.len(),
            "parameter vector length must match layout dimension"
        );
        ParamVec { layout, values }
    }

    pub fn zeros(layout: Arc<BlockLayout>) -> Self {
        let dim = layout.dim();
        ParamVec {
            layout,
            values: vec![0.0; dim],
        }
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no block named '{name}'"));
        &self.values[r]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no block named '{name}'"));
        &mut self.values[r]
    }

    /// Max-norm of the coordinatewise difference.
    pub fn max_diff(&self, other: &ParamVec) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite coordinate, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_blocks() {
        let layout = BlockLayout::new(&[("d", 3), ("a", 4), ("b", 2)]);
        assert_eq!(layout.dim(), 9);
        assert_eq!(layout.range("a"), Some(3..7));
        assert_eq!(layout.range("nope"), None);

        let mut p = ParamVec::zeros(layout);
        p.block_mut("a").copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.block("a"), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.block("d"), &[0.0; 3]);
        assert_eq!(p.as_slice()[3], 1.0);
    }

    #[test]
    fn max_diff_is_max_norm() {
        let layout = BlockLayout::new(&[("x", 3)]);
        let a = ParamVec::new(layout.clone(), vec![1.0, 2.0, 3.0]);
        let b = ParamVec::new(layout, vec![1.5, 2.0, 0.5]);
        assert_eq!(a.max_diff(&b), 2.5);
    }
}
