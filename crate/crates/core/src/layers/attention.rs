use rand::Rng;

use super::{uniform, Graph};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Attentive pooling parameters: projection `W`, bias `b` and context
/// vector `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionPool {
    pub projection: ParamId,
    pub bias: ParamId,
    pub context: ParamId,
}

impl AttentionPool {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        features: usize,
        size: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AttentionPool {
            projection: store.insert(format!("{prefix}.projection"), uniform(&[size, features], range, rng))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[size]))?,
            context: store.insert(format!("{prefix}.context"), uniform(&[size], range, rng))?,
        })
    }
}

/// Pools the rows of `c [q×f]`:
/// `u_i = tanh(W c_i + b)`, `α = softmax(u_i·u)`, `v = Σ α_i c_i`.
/// Returns `(v, α)`.
pub fn attention_pool(g: &mut Graph<'_>, c: Var, pool: &AttentionPool) -> Result<(Var, Var)> {
    let w = g.param(pool.projection);
    let b = g.param(pool.bias);
    let u_ctx = g.param(pool.context);
    let hidden = g.tape.linear(c, w, Some(b))?;
    let hidden = g.tape.tanh(hidden);
    let scores = g.tape.matvec(hidden, u_ctx)?;
    let alpha = g.tape.softmax(scores)?;
    let v = g.tape.vecmat(alpha, c)?;
    Ok((v, alpha))
}

/// Attention target from binary key-element labels: a sliding all-ones
/// window of width `w` sums the labels, then softmax normalises.
pub fn supervised_target(labels: &[bool], w: usize) -> Result<Vec<f64>> {
    if w == 0 || labels.len() < w {
        return Err(Error::shape(format!(
            "supervised target: {} labels shorter than window {w}",
            labels.len()
        )));
    }
    let raw: Vec<f64> = labels
        .windows(w)
        .map(|win| win.iter().filter(|e| **e).count() as f64)
        .collect();
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// `Σ (α_i − α*_i)²` with `α*` held constant.
pub fn attention_loss(g: &mut Graph<'_>, alpha: Var, target: &[f64]) -> Result<Var> {
    let q = g.tape.value(alpha).len();
    if q != target.len() {
        return Err(Error::shape(format!(
            "attention loss: {q} weights vs {} targets",
            target.len()
        )));
    }
    let t = g.tape.constant(Tensor::vector(target.to_vec()));
    let diff = g.tape.sub(alpha, t)?;
    Ok(g.tape.sum_of_squares(diff))
}
