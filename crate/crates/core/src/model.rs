//! Named parameter blocks making up a model.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One named parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub matrix: Matrix,
}

/// Ordered parameter blocks plus the step counter. Block order is the spatial
/// axis of every per-block report.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    blocks: Vec<ParamBlock>,
    pub step: usize,
}

impl ModelState {
    pub fn new(blocks: Vec<(String, Matrix)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("model needs at least one block".into()));
        }
        let mut seen = HashSet::new();
        for (name, _) in &blocks {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate block name {name:?}")));
            }
        }
        Ok(Self {
            blocks: blocks
                .into_iter()
                .map(|(name, matrix)| ParamBlock { name, matrix })
                .collect(),
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &Matrix {
        &self.blocks[index].matrix
    }

    pub fn name(&self, index: usize) -> &str {
        &self.blocks[index].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.blocks.iter().map(|b| &b.matrix)
    }

    /// (name, rows, cols) for every block.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.blocks
            .iter()
            .map(|b| (b.name.clone(), b.matrix.rows(), b.matrix.cols()))
            .collect()
    }

    /// Replaces block `index`; the shape must not change.
    pub fn set_block(&mut self, index: usize, matrix: Matrix) -> Result<()> {
        let current = &self.blocks[index];
        if current.matrix.shape() != matrix.shape() {
            return Err(Error::InvalidInput(format!(
                "block {:?} is {:?}, replacement is {:?}",
                current.name,
                current.matrix.shape(),
                matrix.shape()
            )));
        }
        self.blocks[index].matrix = matrix;
        Ok(())
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    /// Names of blocks whose name or shape differs between `self` and `other`,
    /// plus blocks present in only one of them.
    pub fn layout_mismatches(&self, other: &ModelState) -> Vec<String> {
        layout_mismatches(&self.layout(), &other.layout())
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> ModelState {
        ModelState {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    matrix: Matrix::zeros(b.matrix.rows(), b.matrix.cols()),
                })
                .collect(),
            step: 0,
        }
    }
}

pub(crate) fn layout_mismatches(
    a: &[(String, usize, usize)],
    b: &[(String, usize, usize)],
) -> Vec<String> {
    let mut bad = Vec::new();
    for i in 0..a.len().max(b.len()) {
        match (a.get(i), b.get(i)) {
            (Some(x), Some(y)) if x == y => {}
            (Some(x), Some(y)) if x.0 == y.0 => bad.push(format!(
                "{} ({}x{} vs {}x{})",
                x.0, x.1, x.2, y.1, y.2
            )),
            (Some(x), Some(y)) => bad.push(format!("{} vs {} at position {i}", x.0, y.0)),
            (Some(x), None) | (None, Some(x)) => bad.push(format!("{} (missing)", x.0)),
            (None, None) => unreachable!(),
        }
    }
    bad
}
