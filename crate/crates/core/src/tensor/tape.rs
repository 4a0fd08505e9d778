use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{ParamGrad, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
        frozen: Option<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatVec(Var, Var),
    VecMat(Var, Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Slice(Var, usize),
    PadRows(Var),
    Conv1d {
        seq: Var,
        filters: Var,
        bias: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Dot(Var, Var),
    SumSquares(Var),
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted. Parameters are borrowed for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf value. Gradients are only tracked if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrows a trainable parameter. Its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Looks up rows of an embedding matrix. Row `frozen`, if given, never
    /// receives gradient (used for the padding row).
    pub fn gather(
        &mut self,
        id: ParamId,
        table: &'p Tensor,
        rows: &[usize],
        frozen: Option<usize>,
    ) -> Result<Var> {
        if table.rank() != 2 {
            return Err(Error::shape(format!(
                "gather needs a matrix, got {:?}",
                table.shape()
            )));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather with no rows"));
        }
        let (n, d) = (table.rows(), table.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::shape(format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(table.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
                frozen,
            },
            true,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| f(*x)).collect(),
        };
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], orow);
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `x·Wᵀ + b` for `x` of shape `[k]` or `[m×k]` and `W` of shape `[n×k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != k || sx.is_empty() || sx.len() > 2 {
            return Err(Error::shape(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let n = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} vs {n} outputs",
                    self.shape(b)
                )));
            }
        }
        let m = if sx.len() == 2 { sx[0] } else { 1 };
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                let bias = bd.map_or(0.0, |b| b[j]);
                out.push(bias + dot(xr, &wd[j * k..(j + 1) * k]));
            }
        }
        let shape = if sx.len() == 2 { vec![m, n] } else { vec![n] };
        let mut parents = vec![x, w];
        parents.extend(b);
        let needs = self.needs(&parents);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// `[q×a]·[a] → [q]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape(format!("matvec: {sm:?} by {sv:?}")));
        }
        let (q, a) = (sm[0], sm[1]);
        let (md, vd) = (self.data(m), self.data(v));
        let out = (0..q).map(|i| dot(&md[i * a..(i + 1) * a], vd)).collect();
        let needs = self.needs(&[m, v]);
        Ok(self.push(Tensor::vector(out), Op::MatVec(m, v), needs))
    }

    /// `[q]·[q×f] → [f]`: weighted sum of rows.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (sv, sm) = (self.shape(v), self.shape(m));
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::shape(format!("vecmat: {sv:?} by {sm:?}")));
        }
        let f = sm[1];
        let (vd, md) = (self.data(v), self.data(m));
        let mut out = vec![0.0; f];
        for (i, &w) in vd.iter().enumerate() {
            axpy(w, &md[i * f..(i + 1) * f], &mut out);
        }
        let needs = self.needs(&[v, m]);
        Ok(self.push(Tensor::vector(out), Op::VecMat(v, m), needs))
    }

    /// Concatenates along the last axis. All parts must share their leading
    /// shape (vectors, or matrices with equal row counts).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rank = self.shape(*first).len();
        if rank == 0 || rank > 2 {
            return Err(Error::shape("concat needs vectors or matrices"));
        }
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != rank || s[..rank - 1] != lead[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match {:?}",
                    s,
                    self.shape(*first)
                )));
            }
            width += s[rank - 1];
        }
        let rows = if rank == 2 { lead[0] } else { 1 };
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::shape("stack of nothing"))?;
        let f = self.shape(*first).to_vec();
        if f.len() != 1 {
            return Err(Error::shape("stack_rows needs vectors"));
        }
        let mut out = Vec::with_capacity(rows.len() * f[0]);
        for r in rows {
            if self.shape(*r) != f.as_slice() {
                return Err(Error::shape(format!(
                    "stack_rows: {:?} vs {:?}",
                    self.shape(*r),
                    f
                )));
            }
            out.extend_from_slice(self.data(*r));
        }
        let needs = self.needs(rows);
        Ok(self.push(
            Tensor::new(vec![rows.len(), f[0]], out)?,
            Op::StackRows(rows.to_vec()),
            needs,
        ))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let s = self.shape(m);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::shape(format!("row {i} of {s:?}")));
        }
        let value = Tensor::vector(self.value(m).row(i).to_vec());
        let needs = self.needs(&[m]);
        Ok(self.push(value, Op::Row(m, i), needs))
    }

    /// Contiguous sub-vector `[start, start+len)`.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 || start + len > s[0] || len == 0 {
            return Err(Error::shape(format!("slice {start}+{len} of {s:?}")));
        }
        let value = Tensor::vector(self.data(v)[start..start + len].to_vec());
        let needs = self.needs(&[v]);
        Ok(self.push(value, Op::Slice(v, start), needs))
    }

    /// Appends zero rows until the matrix has at least `min_rows` rows.
    pub fn pad_rows(&mut self, m: Var, min_rows: usize) -> Result<Var> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("pad_rows of {s:?}")));
        }
        if s[0] >= min_rows {
            return Ok(m);
        }
        let mut data = self.data(m).to_vec();
        data.resize(min_rows * s[1], 0.0);
        let needs = self.needs(&[m]);
        Ok(self.push(Tensor::new(vec![min_rows, s[1]], data)?, Op::PadRows(m), needs))
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.data(v).to_vec())?;
        let needs = self.needs(&[v]);
        Ok(self.push(value, Op::Reshape(v), needs))
    }

    /// Valid 1-D convolution of `seq [n×d]` with `filters [f×w×d]` plus
    /// `bias [f]`, giving `[(n−w+1)×f]`.
    pub fn conv1d(&mut self, seq: Var, filters: Var, bias: Var) -> Result<Var> {
        let (ss, sf, sb) = (self.shape(seq), self.shape(filters), self.shape(bias));
        if ss.len() != 2 || sf.len() != 3 || sf[2] != ss[1] || sb != [sf[0]] {
            return Err(Error::shape(format!(
                "conv1d: sequence {ss:?}, filters {sf:?}, bias {sb:?}"
            )));
        }
        let (n, d, f, w) = (ss[0], ss[1], sf[0], sf[1]);
        if n < w {
            return Err(Error::shape(format!(
                "conv1d: sequence too short ({n} steps) for width {w}"
            )));
        }
        let q = n - w + 1;
        let (sd, fd, bd) = (self.data(seq), self.data(filters), self.data(bias));
        let span = w * d;
        let mut out = Vec::with_capacity(q * f);
        for t in 0..q {
            let block = &sd[t * d..t * d + span];
            for j in 0..f {
                out.push(bd[j] + dot(block, &fd[j * span..(j + 1) * span]));
            }
        }
        let needs = self.needs(&[seq, filters, bias]);
        Ok(self.push(
            Tensor::new(vec![q, f], out)?,
            Op::Conv1d {
                seq,
                filters,
                bias,
            },
            needs,
        ))
    }

    /// Per-feature maximum over the time axis of `[q×f]`. Ties go to the
    /// earliest step.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("max_pool_time of {s:?}")));
        }
        let (q, f) = (s[0], s[1]);
        let xd = self.data(x);
        let mut argmax = vec![0usize; f];
        let mut out = xd[..f].to_vec();
        for t in 1..q {
            for j in 0..f {
                let v = xd[t * f + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = t;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MaxPool { x, argmax }, needs))
    }

    /// Smallest gap between the winner and the runner-up over every
    /// max-pooled column recorded so far; infinite when nothing competes.
    pub fn min_pool_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Op::MaxPool { x, argmax } = &node.op else { continue };
            let xd = self.data(*x);
            let f = argmax.len();
            for (j, &t) in argmax.iter().enumerate() {
                let best = xd[t * f + j];
                for (u, row) in xd.chunks(f).enumerate() {
                    if u != t {
                        margin = margin.min(best - row[j]);
                    }
                }
            }
        }
        margin
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape(format!("softmax of {:?}", self.shape(x))));
        }
        let mut out = vec![0.0; self.value(x).len()];
        softmax_into(self.data(x), &mut out);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Softmax(x), needs))
    }

    /// `−log softmax(logits)[label]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(Error::shape(format!("cross_entropy of {s:?}")));
        }
        self.cross_entropy_impl(logits, &[label])
    }

    /// Mean over rows of per-row cross entropy for `[m×k]` logits.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy_rows: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        self.cross_entropy_impl(logits, labels)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = self.value(logits).cols();
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::shape(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            let row = x.row(i);
            loss += log_sum_exp(row) - row[label];
            softmax_into(row, &mut probs[i * k..(i + 1) * k]);
        }
        loss /= labels.len() as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "dropout mask of {} for {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = dot(self.data(a), self.data(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), needs))
    }

    /// `Σ xᵢ²`.
    pub fn sum_of_squares(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v * v).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), needs)
    }

    /// Sums scalars; convenience over repeated [`Tape::add`].
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or_else(|| Error::shape("empty sum"))?;
        for t in it {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut params: BTreeMap<ParamId, ParamGrad> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(
        &self,
        node: &Node<'p>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut BTreeMap<ParamId, ParamGrad>,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(ParamGrad::Dense(acc)) => axpy(1.0, g, acc),
                _ => {
                    params.insert(*id, ParamGrad::Dense(g.to_vec()));
                }
            },
            Op::Gather {
                param,
                rows,
                frozen,
            } => {
                let width = node.value.cols();
                let entry = params.entry(*param).or_insert_with(|| ParamGrad::Rows {
                    width,
                    rows: BTreeMap::new(),
                });
                if let ParamGrad::Rows { rows: acc, .. } = entry {
                    for (k, &r) in rows.iter().enumerate() {
                        if Some(r) == *frozen {
                            continue;
                        }
                        let dst = acc.entry(r).or_insert_with(|| vec![0.0; width]);
                        axpy(1.0, &g[k * width..(k + 1) * width], dst);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(1.0, g, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    axpy(1.0, g, s);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(1.0, g, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    axpy(-1.0, g, s);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(bd) {
                        *si += gi * bi;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *si += gi * ai;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(*k, g, s);
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((si, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *si += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((si, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *si += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..m {
                        for p in 0..k {
                            axpy(ad[i * k + p], &g[i * n..(i + 1) * n], &mut s[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let k = self.value(*w).cols();
                let n = self.value(*w).rows();
                let m = g.len() / n;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..m {
                        let sr = &mut s[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], &wd[j * k..(j + 1) * k], sr);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for i in 0..m {
                        let xr = &xd[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], xr, &mut s[j * k..(j + 1) * k]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, *b) {
                        for i in 0..m {
                            axpy(1.0, &g[i * n..(i + 1) * n], s);
                        }
                    }
                }
            }
            Op::MatVec(m, v) => {
                let a = self.value(*v).len();
                let (md, vd) = (self.data(*m), self.data(*v));
                if let Some(s) = self.slot(grads, *m) {
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, vd, &mut s[i * a..(i + 1) * a]);
                    }
                }
                if let Some(s) = self.slot(grads, *v) {
                    for (i, gi) in g.iter().enumerate() {
                        axpy(*gi, &md[i * a..(i + 1) * a], s);
                    }
                }
            }
            Op::VecMat(v, m) => {
                let f = g.len();
                let (vd, md) = (self.data(*v), self.data(*m));
                if let Some(s) = self.slot(grads, *v) {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += dot(g, &md[i * f..(i + 1) * f]);
                    }
                }
                if let Some(s) = self.slot(grads, *m) {
                    for (i, vi) in vd.iter().enumerate() {
                        axpy(*vi, g, &mut s[i * f..(i + 1) * f]);
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let pw = self.value(*p).cols();
                    if let Some(s) = self.slot(grads, *p) {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * width + offset..r * width + offset + pw],
                                &mut s[r * pw..(r + 1) * pw],
                            );
                        }
                    }
                    offset += pw;
                }
            }
            Op::StackRows(rows) => {
                let f = node.value.cols();
                for (r, v) in rows.iter().enumerate() {
                    if let Some(s) = self.slot(grads, *v) {
                        axpy(1.0, &g[r * f..(r + 1) * f], s);
                    }
                }
            }
            Op::Row(m, i) => {
                let f = g.len();
                if let Some(s) = self.slot(grads, *m) {
                    axpy(1.0, g, &mut s[i * f..(i + 1) * f]);
                }
            }
            Op::Slice(v, start) => {
                if let Some(s) = self.slot(grads, *v) {
                    axpy(1.0, g, &mut s[*start..*start + g.len()]);
                }
            }
            Op::PadRows(m) => {
                if let Some(s) = self.slot(grads, *m) {
                    let len = s.len();
                    axpy(1.0, &g[..len], s);
                }
            }
            Op::Reshape(v) => {
                if let Some(s) = self.slot(grads, *v) {
                    axpy(1.0, g, s);
                }
            }
            Op::Conv1d {
                seq,
                filters,
                bias,
            } => {
                let sf = self.shape(*filters);
                let (f, w, d) = (sf[0], sf[1], sf[2]);
                let span = w * d;
                let q = g.len() / f;
                let (sd, fd) = (self.data(*seq), self.data(*filters));
                if let Some(s) = self.slot(grads, *seq) {
                    for t in 0..q {
                        let dst = &mut s[t * d..t * d + span];
                        for j in 0..f {
                            let go = g[t * f + j];
                            if go != 0.0 {
                                axpy(go, &fd[j * span..(j + 1) * span], dst);
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *filters) {
                    for t in 0..q {
                        let block = &sd[t * d..t * d + span];
                        for j in 0..f {
                            let go = g[t * f + j];
                            if go != 0.0 {
                                axpy(go, block, &mut s[j * span..(j + 1) * span]);
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for t in 0..q {
                        axpy(1.0, &g[t * f..(t + 1) * f], s);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let f = argmax.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (j, &t) in argmax.iter().enumerate() {
                        s[t * f + j] += g[j];
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let inner = dot(g, y);
                    for ((si, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *si += yi * (gi - inner);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            s[i * k + c] += scale * (probs[i * k + c] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((si, gi), mi) in s.iter_mut().zip(g).zip(mask) {
                        *si += gi * mi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                }
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    axpy(g[0], bd, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    axpy(g[0], ad, s);
                }
            }
            Op::SumSquares(x) => {
                let xd = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    axpy(2.0 * g[0], xd, s);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(mat(2, 1, &[3.0, 4.0]));
        let y = t.matmul(i, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);

        let a = t.constant(mat(1, 2, &[1.0, 2.0]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);

        let z = t.constant(Tensor::zeros(&[3, 2]));
        let y = t.matmul(z, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
    }

    #[test]
    fn conv1d_examples() {
        let mut t = Tape::new();
        let seq = t.constant(mat(3, 1, &[1.0, 2.0, 3.0]));
        let pass = t.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap());
        let ones = t.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
        let bias = t.constant(Tensor::vector(vec![0.0]));
        let y = t.conv1d(seq, pass, bias).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
        let y = t.conv1d(seq, ones, bias).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);

        let short = t.constant(mat(1, 1, &[5.0]));
        let err = t.conv1d(short, ones, bias).unwrap_err();
        assert!(err.to_string().contains("too short"));
    }

    #[test]
    fn conv1d_one_hot_filter_reproduces_slice() {
        // Filter picks channel 1 at offset 2 of a width-3 window.
        let mut t = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 1.0).collect();
        let seq = t.constant(mat(6, 2, &data));
        let mut f = vec![0.0; 6];
        f[2 * 2 + 1] = 1.0;
        let filt = t.constant(Tensor::new(vec![1, 3, 2], f).unwrap());
        let bias = t.constant(Tensor::vector(vec![0.0]));
        let y = t.conv1d(seq, filt, bias).unwrap();
        let expected: Vec<f64> = (2..6).map(|r| data[r * 2 + 1]).collect();
        assert_eq!(t.value(y).data(), expected.as_slice());
    }

    #[test]
    fn pool_margin_is_the_smallest_winning_gap() {
        let mut t = Tape::new();
        assert_eq!(t.min_pool_margin(), f64::INFINITY);
        let x = t.leaf(mat(3, 2, &[1.0, 5.0, 3.0, 4.5, 2.5, 0.0]), true);
        t.max_pool_time(x).unwrap();
        assert!((t.min_pool_margin() - 0.5).abs() < 1e-15);
        let tie = t.leaf(mat(2, 1, &[2.0, 2.0]), true);
        t.max_pool_time(tie).unwrap();
        assert_eq!(t.min_pool_margin(), 0.0);
    }

    #[test]
    fn max_pool_examples_and_tie_rule() {
        let mut t = Tape::new();
        let x = t.leaf(mat(3, 1, &[1.0, 3.0, 2.0]), true);
        let y = t.max_pool_time(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0]);

        let one = t.constant(mat(1, 2, &[7.0, -2.0]));
        let y1 = t.max_pool_time(one).unwrap();
        assert_eq!(t.value(y1).data(), &[7.0, -2.0]);

        let tie = t.leaf(mat(2, 1, &[2.0, 2.0]), true);
        let y2 = t.max_pool_time(tie).unwrap();
        assert_eq!(t.value(y2).data(), &[2.0]);
        let s = t.sum(y2);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(tie).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(a).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let b = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = t.softmax(b).unwrap();
        for v in t.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let c = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = t.softmax(c).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = t.cross_entropy(a, 0).unwrap();
        assert_abs_diff_eq!(t.scalar(l).unwrap(), 2f64.ln(), epsilon = 1e-15);

        let b = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let l = t.cross_entropy(b, 0).unwrap();
        let v = t.scalar(l).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);

        let c = t.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
        let l = t.cross_entropy(c, 1).unwrap();
        assert_abs_diff_eq!(t.scalar(l).unwrap(), 4f64.ln(), epsilon = 1e-14);

        assert!(t.cross_entropy(c, 2).is_err());
    }

    #[test]
    fn backward_closed_forms() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0, -3.0]), true);
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let d = t.dot(w, w).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn gather_routes_sparse_rows_and_skips_frozen() {
        let table = mat(3, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let mut t = Tape::new();
        let e = t.gather(ParamId(0), &table, &[0, 2, 2], Some(0)).unwrap();
        let s = t.sum(e);
        let g = t.backward(s).unwrap();
        match g.param(ParamId(0)).unwrap() {
            ParamGrad::Rows { rows, .. } => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[&2], vec![2.0, 2.0]);
            }
            other => panic!("expected rows, got {other:?}"),
        }
    }
}
