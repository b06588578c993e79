use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Index of a parameter group inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable matrix and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }
}

/// Ordered collection of parameter groups. Group order is part of the
/// checkpoint format and of the optimizer's moment layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.groups.push(ParamGroup::new(name, value));
        ParamId(self.groups.len() - 1)
    }

    /// Weight matrix drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Matrix::uniform(rows, cols, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.groups[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.groups[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.groups.iter().position(|g| g.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            g.grad.fill(0.0);
        }
    }

    /// Adds per-group gradients (as produced by a tape) into the stores'
    /// accumulators. `None` entries did not participate in the loss.
    pub fn accumulate(&mut self, grads: &[Option<Matrix>]) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(Error::Dimension(format!(
                "gradient list has {} groups, store has {}",
                grads.len(),
                self.groups.len()
            )));
        }
        for (g, d) in self.groups.iter_mut().zip(grads) {
            if let Some(d) = d {
                g.grad.add_assign(d)?;
            }
        }
        Ok(())
    }

    /// Copies values from `other`; names and shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::Dimension("parameter stores differ in group count".into()));
        }
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Flat view of scalar `k` across all groups, in group order.
    pub(crate) fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, g) in self.groups.iter().enumerate() {
            if k < g.value.len() {
                return (i, k);
            }
            k -= g.value.len();
        }
        panic!("scalar index out of range");
    }
}
