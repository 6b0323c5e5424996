//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse,
//! summing contributions when a value feeds several consumers.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::ops::{self, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across graphs (index into a parameter store).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Backward rule for an operation defined outside this module.
pub trait Backward {
    /// Gradient contribution for each input (in input order); `None` when an
    /// input receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op<'a> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Exp(Var),
    Reshape(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        stats: NormStats,
        bias: Var,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward + 'a>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing the parameter tensor.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient but is not tied to a parameter id.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .map(|&x| f64::from(x))
            .sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total as f32), Op::Sum(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    /// Adds `bias[p]` to every row of `x[m, p]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rank() != 1 || vx.last_dim() != vb.len() {
            return Err(Error::shape("add_row_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        let w = vb.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb.data()[i % w];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// `x · w + b` for `x[m, k]`, `w[k, p]`, `b[p]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                stats,
                bias,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row lookup `table[ids[t], :]` producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::Contract("embedding table must be 2-D".into()));
        }
        let (rows, d) = (vt.dim(0), vt.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("index {id} >= table rows {rows}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (out, probs) = ops::causal_attention(self.value(qkv), heads)?;
        let rg = self.rg(qkv);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Mean cross-entropy over rows of `logits[T, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Record an externally defined operation whose forward value has already
    /// been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: impl Backward + 'a) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule: Box::new(rule),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape(), d)?)?;
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape(), d)?)?;
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f))?,
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s))?;
            }
            Op::Exp(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| x * y)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), d)?)?;
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.value(*a).shape())?)?;
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul(g, self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*b) {
                    let w = self.value(*b).len();
                    let mut db = vec![0.0f32; w];
                    for row in g.data().chunks_exact(w) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db))?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                stats,
                bias,
            } => {
                let (dx, dg, db) =
                    ops::layer_norm_backward(self.value(*x), self.value(*gain), stats, g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gain, dg)?;
                self.accumulate(grads, *bias, db)?;
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gv, &x)| gv * ops::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape(), d)?)?;
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let mut dt = Tensor::zeros(self.value(*table).shape());
                    for (t, &id) in ids.iter().enumerate() {
                        for (acc, v) in dt.row_mut(id).iter_mut().zip(g.row(t)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let d = ops::causal_attention_backward(self.value(*qkv), probs, *heads, g);
                self.accumulate(grads, *qkv, d)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vl = self.value(*logits);
                let (t_len, vocab) = (vl.dim(0), vl.dim(1));
                let scale = g.data()[0] / t_len as f32;
                let mut d = probs.clone();
                for (t, &y) in targets.iter().enumerate() {
                    d[t * vocab + y] -= 1.0;
                }
                for x in &mut d {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vl.shape(), d)?)?;
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = rule.backward(&vals, &node.value, g)?;
                if contributions.len() != inputs.len() {
                    return Err(Error::Contract(
                        "custom backward returned the wrong number of gradients".into(),
                    ));
                }
                for (&v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        if c.shape() != self.value(v).shape() {
                            return Err(Error::shape(
                                "custom backward",
                                c.shape(),
                                self.value(v).shape(),
                            ));
                        }
                        self.accumulate(grads, v, c)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter, summed over every node that borrowed it.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for &(p, idx) in &self.params {
            if p != id {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                match &mut out {
                    Some(acc) => acc.add_assign(g).expect("same parameter, same shape"),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// All parameter gradients, one entry per distinct id, sorted by id.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        let mut params = std::mem::take(&mut self.params);
        params.sort();
        for (p, idx) in params {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            match out.last_mut() {
                Some((last, acc)) if *last == p => {
                    acc.add_assign(&g).expect("same parameter, same shape")
                }
                _ => out.push((p, g)),
            }
        }
        out
    }
}
