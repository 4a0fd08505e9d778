use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    frozen: BTreeMap<ParamId, BTreeSet<usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Marks a row of a matrix parameter as fixed: optimisers and gradient
    /// checks leave it alone.
    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        self.frozen.entry(id).or_default().insert(row);
    }

    pub fn frozen_rows(&self, id: ParamId) -> impl Iterator<Item = usize> + '_ {
        self.frozen.get(&id).into_iter().flatten().copied()
    }

    /// Whether flat coordinate `index` of `id` lies in a frozen row.
    pub fn is_frozen(&self, id: ParamId, index: usize) -> bool {
        self.frozen.get(&id).is_some_and(|rows| {
            let t = &self.values[id.0];
            t.rank() == 2 && rows.contains(&(index / t.cols()))
        })
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient for one parameter: dense, or a sparse set of rows for
/// embedding lookups.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl ParamGrad {
    /// Adds this gradient, scaled by `scale`, into a dense buffer.
    pub fn add_to(&self, dense: &mut [f64], scale: f64) {
        match self {
            ParamGrad::Dense(g) => {
                for (d, v) in dense.iter_mut().zip(g) {
                    *d += scale * v;
                }
            }
            ParamGrad::Rows { width, rows } => {
                for (&r, g) in rows {
                    let slot = &mut dense[r * width..(r + 1) * width];
                    for (d, v) in slot.iter_mut().zip(g) {
                        *d += scale * v;
                    }
                }
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.add_to(&mut out, 1.0);
        out
    }
}
