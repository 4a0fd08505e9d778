//! Neural building blocks: the position-aware CNN word encoder, BiLSTM,
//! attentive pooling and the supervised-attention target and loss.

mod attention;
mod cnn;
mod lstm;

pub use attention::{attention_loss, attention_pool, supervised_target, AttentionPool};
pub use cnn::{cnn_encode, ConvBank, PositionEmbedding};
pub use lstm::{bilstm_encode, BiLstmEncoder, LstmCell};
pub use cnn::ConvBranch;

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// A tape plus the parameter set it reads, binding each parameter at most
/// once per forward pass.
pub struct Graph<'p> {
    pub tape: Tape<'p>,
    store: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<'p>, store: &'p ParamStore) -> Self {
        Graph {
            tape,
            store,
            bound: HashMap::new(),
        }
    }

    pub fn into_tape(self) -> Tape<'p> {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.param(id, self.store.get(id));
        self.bound.insert(id, v);
        v
    }

    /// Embedding lookup; `frozen` names a row that never receives gradient.
    pub fn gather(&mut self, id: ParamId, rows: &[usize], frozen: Option<usize>) -> Result<Var> {
        self.tape.gather(id, self.store.get(id), rows, frozen)
    }
}

pub(crate) fn uniform(shape: &[usize], range: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if range > 0.0 {
        for v in t.data_mut() {
            *v = rng.gen_range(-range..range);
        }
    }
    t
}

/// Fully connected layer `y = W·x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Dense {
            weight: store.insert(format!("{prefix}.weight"), uniform(&[outputs, inputs], range, rng))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.linear(x, w, Some(b))
    }
}
