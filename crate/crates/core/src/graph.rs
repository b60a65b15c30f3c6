//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Nodes
//! are appended in evaluation order, so walking them backwards from the loss
//! is a valid topological order for gradient propagation. A graph is built
//! per training step and dropped afterwards; parameters live in a
//! [`ParamStore`] and are copied in with [`Graph::param`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{self, axis_split, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CausalMask(Var),
    Take {
        x: Var,
        indices: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    IndexAddRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Input, false)
    }

    /// A free variable whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Brings a stored parameter into the graph. Repeated calls for the same
    /// id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.read_for_forward(id).clone();
        let v = self.push_with(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter used in this graph into the
    /// store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if !store.owns(id) {
                continue;
            }
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("div", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `a[.., D] + b[D]`, broadcasting `b` over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.last_dim();
        if tb.len() != d {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies row `r` of `a[.., D]` by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let d = ta.last_dim();
        if ts.len() != ta.rows() {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: ta.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for (row, &f) in data.chunks_mut(d).zip(ts.data()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: ta.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let f = ts.item();
        let data = ta.data().iter().map(|x| x * f).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngStream, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x: a, mask }, &[a]))
    }

    // ----- linear algebra and layout -----------------------------------

    /// `a[.., K] · b[K, N] -> [.., N]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        tensor::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape).map_err(|_| Error::Dimension {
            op: "reshape",
            lhs: self.value(a).shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("narrow", ta, axis)?;
        if start + len > ta.shape()[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: ta.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, dim, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Narrow { x: a, axis, start }, &[a]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let base_shape = self.value(first).shape().to_vec();
        check_axis("concat", self.value(first), axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let inputs = inputs.to_vec();
        let parents = inputs.clone();
        Ok(self.push(value, Op::Concat { inputs, axis }, &parents))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let ta = self.value(a);
        check_axis(op, ta, axis)?;
        let (outer, dim, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..dim {
                let row = &src[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, out, dim))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out, _) = self.reduce_axis(a, axis, "sum_axis")?;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::SumAxis { x: a, axis }, &[a]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out, dim) = self.reduce_axis(a, axis, "mean_axis")?;
        out.iter_mut().for_each(|x| *x /= dim as f64);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x: a, axis }, &[a]))
    }

    // ----- neural-network primitives -------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("softmax", ta, axis)?;
        let (outer, dim, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * dim + i) * inner + r;
                let max = (0..dim).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..dim {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..dim {
                    out[at(i)] /= total;
                }
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        Ok(self.push(value, Op::Softmax { x: a, axis }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.last_dim();
        let n = tl.rows();
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!(
                "target index {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, (row, &t)) in tl.data().chunks(v).zip(targets).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.len() != d || tb.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Row lookup: `table[V, D]`, ids of length N -> `[N, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: tt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Sets entries above the diagonal of the trailing `[T, T]` axes to
    /// negative infinity, so a following softmax ignores future positions.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let r = ta.rank();
        if r < 2 || ta.shape()[r - 1] != ta.shape()[r - 2] {
            return Err(Error::Dimension {
                op: "causal_mask",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let t = ta.shape()[r - 1];
        let mut data = ta.data().to_vec();
        for block in data.chunks_mut(t * t) {
            for i in 0..t {
                for j in i + 1..t {
                    block[i * t + j] = f64::NEG_INFINITY;
                }
            }
        }
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::CausalMask(a), &[a]))
    }

    /// Gathers flat elements `a[indices[k]]` into a vector.
    pub fn take(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.len()) {
            return Err(Error::Dimension {
                op: "take",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let value = Tensor::vector(data);
        let op = Op::Take {
            x: a,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[a]))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = (ta.rows(), ta.last_dim());
        if ta.rank() != 2 || rows.iter().any(|&r| r >= n) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: ta.shape().to_vec(),
                rhs: rows.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&ta.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[rows.len(), d], data)?;
        let op = Op::GatherRows {
            x: a,
            rows: rows.to_vec(),
        };
        Ok(self.push(value, op, &[a]))
    }

    /// `base` with `src[k]` added into row `rows[k]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let d = tb.last_dim();
        let n = tb.rows();
        if tb.rank() != 2 || ts.last_dim() != d || ts.rows() != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Dimension {
                op: "index_add_rows",
                lhs: tb.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let mut data = tb.data().to_vec();
        for (k, &r) in rows.iter().enumerate() {
            for (x, y) in data[r * d..(r + 1) * d].iter_mut().zip(&ts.data()[k * d..(k + 1) * d]) {
                *x += y;
            }
        }
        let value = Tensor::new(tb.shape(), data)?;
        let op = Op::IndexAddRows {
            base,
            src,
            rows: rows.to_vec(),
        };
        Ok(self.push(value, op, &[base, src]))
    }

    /// Forward value is the one-hot argmax of each last-axis row of `soft`;
    /// the gradient passes through to `soft` unchanged.
    pub fn straight_through_one_hot(&mut self, soft: Var) -> Var {
        let ts = self.value(soft);
        let d = ts.last_dim();
        let mut data = vec![0.0; ts.len()];
        for (row, out) in ts.data().chunks(d).zip(data.chunks_mut(d)) {
            out[tensor::argmax(row)] = 1.0;
        }
        let value = Tensor::new(ts.shape(), data).expect("same shape");
        self.push(value, Op::StraightThrough(soft), &[soft])
    }

    // ----- backward --------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// `loss` must hold exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];

        macro_rules! buf {
            ($v:expr) => {
                grad_buf(grads, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = buf!(v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = buf!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = buf!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / vb[k];
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let d = nodes[b.0].value.len();
                if let Some(gb) = buf!(*b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let d = nodes[a.0].value.last_dim();
                let (va, vs) = (val(*a), val(*s));
                if let Some(ga) = buf!(*a) {
                    for (r, (gr, gi)) in ga.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        gr.iter_mut().zip(gi).for_each(|(x, y)| *x += y * vs[r]);
                    }
                }
                if let Some(gs) = buf!(*s) {
                    for (r, (ar, gi)) in va.chunks(d).zip(g.chunks(d)).enumerate() {
                        gs[r] += ar.iter().zip(gi).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * vs[0]);
                }
                if let Some(gs) = buf!(*s) {
                    gs[0] += va.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::MatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                let (va, vb) = (ta.data(), tb.data());
                if let Some(ga) = buf!(*a) {
                    tensor::gemm_nt(g, vb, ga, m, n, k);
                }
                if let Some(gb) = buf!(*b) {
                    tensor::gemm_tn(va, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = buf!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                if let Some(ga) = buf!(*a) {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |i: usize| (o * dim + i) * inner + r;
                            let dot: f64 = (0..dim).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..dim {
                                gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.last_dim();
                let n = targets.len() as f64;
                if let Some(gl) = buf!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += g[0] * (probs[r * v + j] - ind) / n;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[x.0].value.last_dim();
                let vg = val(*gamma);
                if let Some(gg) = buf!(*gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = buf!(*beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let df = d as f64;
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * vg[j]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] / df * (df * dxhat[j] - sum - hr[j] * dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(gt) = buf!(*table) {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[k * d + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * mask[k];
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = buf!(v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for k in 0..d * inner {
                                gv[o * d * inner + k] += g[src + k];
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        for i in 0..dim {
                            for r in 0..inner {
                                gx[(o * dim + i) * inner + r] += f * g[o * inner + r];
                            }
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                let t = node.value.last_dim();
                if let Some(ga) = buf!(*a) {
                    for (b, gb) in ga.chunks_mut(t * t).enumerate() {
                        for i in 0..t {
                            for j in 0..=i {
                                gb[i * t + j] += g[b * t * t + i * t + j];
                            }
                        }
                    }
                }
            }
            Op::Take { x, indices } => {
                if let Some(gx) = buf!(*x) {
                    for (k, &i) in indices.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let d = node.value.last_dim();
                if let Some(gx) = buf!(*x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[k * d + j];
                        }
                    }
                }
            }
            Op::IndexAddRows { base, src, rows } => {
                let d = node.value.last_dim();
                if let Some(gb) = buf!(*base) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gs) = buf!(*src) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gs[k * d + j] += g[r * d + j];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use, or None when `v` does
/// not need a gradient.
fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}
