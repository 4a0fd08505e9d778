use rand::Rng;

use super::{uniform, Graph};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Standard LSTM cell with gates packed as input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        range: f64,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(forget_bias);
        Ok(LstmCell {
            w_input: store.insert(format!("{prefix}.w_input"), uniform(&[4 * hidden, in_dim], range, rng))?,
            w_hidden: store.insert(format!("{prefix}.w_hidden"), uniform(&[4 * hidden, hidden], range, rng))?,
            bias: store.insert(format!("{prefix}.bias"), bias)?,
            hidden,
        })
    }

    /// Runs over the rows of `inputs [n×d]`, forwards or backwards in time.
    /// The returned states are indexed by input position.
    pub fn run(&self, g: &mut Graph<'_>, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = g.tape.shape(inputs)[0];
        let h = self.hidden;
        let wi = g.param(self.w_input);
        let wh = g.param(self.w_hidden);
        let b = g.param(self.bias);
        let projected = g.tape.linear(inputs, wi, Some(b))?;
        let mut state = g.tape.constant(Tensor::zeros(&[h]));
        let mut cell = state;
        let mut out = vec![None; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let x = g.tape.row(projected, t)?;
            let r = g.tape.linear(state, wh, None)?;
            let z = g.tape.add(x, r)?;
            let i = g.tape.slice(z, 0, h)?;
            let i = g.tape.sigmoid(i);
            let f = g.tape.slice(z, h, h)?;
            let f = g.tape.sigmoid(f);
            let c = g.tape.slice(z, 2 * h, h)?;
            let c = g.tape.tanh(c);
            let o = g.tape.slice(z, 3 * h, h)?;
            let o = g.tape.sigmoid(o);
            let keep = g.tape.mul(f, cell)?;
            let write = g.tape.mul(i, c)?;
            cell = g.tape.add(keep, write)?;
            let squashed = g.tape.tanh(cell);
            state = g.tape.mul(o, squashed)?;
            out[t] = Some(state);
        }
        Ok(out.into_iter().map(|s| s.expect("every step visited")).collect())
    }
}

/// One or more stacked LSTM layers per direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiLstmEncoder {
    pub forward: Vec<LstmCell>,
    pub backward: Vec<LstmCell>,
}

impl BiLstmEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        range: f64,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut forward = Vec::with_capacity(layers);
        let mut backward = Vec::with_capacity(layers);
        for k in 0..layers {
            let d = if k == 0 { in_dim } else { hidden };
            forward.push(LstmCell::init(store, &format!("{prefix}.fwd{k}"), d, hidden, range, forget_bias, rng)?);
            backward.push(LstmCell::init(store, &format!("{prefix}.bwd{k}"), d, hidden, range, forget_bias, rng)?);
        }
        Ok(BiLstmEncoder { forward, backward })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward[0].hidden
    }
}

fn run_stack(g: &mut Graph<'_>, cells: &[LstmCell], inputs: Var, reverse: bool) -> Result<Vec<Var>> {
    let mut x = inputs;
    let mut states = Vec::new();
    for (k, cell) in cells.iter().enumerate() {
        states = cell.run(g, x, reverse)?;
        if k + 1 < cells.len() {
            x = g.tape.stack_rows(&states)?;
        }
    }
    Ok(states)
}

/// Encodes a sequence of embeddings `[n×d]`. Returns the per-token states
/// `[n×2h]` (forward ⊕ backward) and the document vector made of the final
/// forward state and the final backward state (the one at position 0).
pub fn bilstm_encode(g: &mut Graph<'_>, inputs: Var, enc: &BiLstmEncoder) -> Result<(Var, Var)> {
    let shape = g.tape.shape(inputs);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("bilstm_encode needs a non-empty [n×d] sequence"));
    }
    let fwd = run_stack(g, &enc.forward, inputs, false)?;
    let bwd = run_stack(g, &enc.backward, inputs, true)?;
    let n = fwd.len();
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| g.tape.concat(&[*f, *b]))
        .collect::<Result<Vec<_>>>()?;
    let per_token = g.tape.stack_rows(&rows)?;
    let doc = g.tape.concat(&[fwd[n - 1], bwd[0]])?;
    Ok((per_token, doc))
}
