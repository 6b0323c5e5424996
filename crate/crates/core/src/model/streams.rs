//! Kernels that move data between the `[T, n, d]` stream state and the
//! `[T, d]` per-token vectors consumed by the layer function.
//!
//! Weight tensors are either shared across tokens (`[n]`, `[n, n]`) or carry a
//! leading token axis (`[T, n]`, `[T, n, n]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Backward, Graph, Tensor, Var};
use crate::routing::RealizedRouting;

/// Per-token hidden state widened to `n` parallel streams: `[T, n, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState(Tensor);

impl StreamState {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Contract(format!(
                "stream state must be [T, n, d], got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_values(self) -> Tensor {
        self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.dim(0)
    }

    pub fn streams(&self) -> usize {
        self.0.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.0.dim(2)
    }

    /// Residual vector of stream `s` at token `t`.
    pub fn stream(&self, t: usize, s: usize) -> &[f32] {
        self.0.row(t * self.streams() + s)
    }

    pub fn stream_mut(&mut self, t: usize, s: usize) -> &mut [f32] {
        let n = self.streams();
        self.0.row_mut(t * n + s)
    }

    /// Tokens × features matrix for one stream.
    pub fn stream_matrix(&self, s: usize) -> Tensor {
        let (t_len, d) = (self.tokens(), self.dim());
        let mut out = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            out.extend_from_slice(self.stream(t, s));
        }
        Tensor::new(&[t_len, d], out).expect("consistent sizes")
    }
}

fn weight_at(w: &Tensor, t: usize, per_token_rank: usize) -> &[f32] {
    if w.rank() == per_token_rank {
        let width = w.len() / w.dim(0);
        &w.data()[t * width..(t + 1) * width]
    } else {
        w.data()
    }
}

fn check_weights(op: &'static str, w: &Tensor, t_len: usize, expect: &[usize]) -> Result<()> {
    let mut per_token = vec![t_len];
    per_token.extend_from_slice(expect);
    if w.shape() == expect || w.shape() == per_token.as_slice() {
        Ok(())
    } else {
        Err(Error::shape(op, w.shape(), expect))
    }
}

/// Replicate each `[d]` embedding into all `n` streams.
pub fn expand_kernel(x: &Tensor, n: usize) -> Result<Tensor> {
    if x.rank() != 2 || n == 0 {
        return Err(Error::Contract(format!(
            "expand needs [T, d] and n >= 1, got {:?} and n = {n}",
            x.shape()
        )));
    }
    let (t_len, d) = (x.dim(0), x.dim(1));
    let mut out = Vec::with_capacity(t_len * n * d);
    for row in x.rows() {
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    Tensor::new(&[t_len, n, d], out)
}

/// `out[t] = Σ_s w[s] · x[t, s]` (aggregation by `h_pre`, or the output collapse).
pub fn combine_kernel(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t_len, n, d) = (x.dim(0), x.dim(1), x.dim(2));
    check_weights("stream combine", w, t_len, &[n])?;
    let mut out = vec![0.0f32; t_len * d];
    for t in 0..t_len {
        let wt = weight_at(w, t, 2);
        let o = &mut out[t * d..(t + 1) * d];
        for (s, &ws) in wt.iter().enumerate() {
            let src = x.row(t * n + s);
            for (a, &b) in o.iter_mut().zip(src) {
                *a += ws * b;
            }
        }
    }
    Tensor::new(&[t_len, d], out)
}

/// `y[t, i] = Σ_s h[i, s] · x[t, s]`.
pub fn mix_kernel(x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let (t_len, n, d) = (x.dim(0), x.dim(1), x.dim(2));
    check_weights("stream mix", h, t_len, &[n, n])?;
    let mut out = vec![0.0f32; t_len * n * d];
    for t in 0..t_len {
        let ht = weight_at(h, t, 3);
        for i in 0..n {
            let o = &mut out[(t * n + i) * d..(t * n + i + 1) * d];
            for s in 0..n {
                let his = ht[i * n + s];
                let src = x.row(t * n + s);
                for (a, &b) in o.iter_mut().zip(src) {
                    *a += his * b;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// `y[t, i] = w[i] · f[t]`.
pub fn spread_kernel(f: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (f.dim(0), f.dim(1));
    let n = w.last_dim();
    check_weights("stream spread", w, t_len, &[n])?;
    let mut out = Vec::with_capacity(t_len * n * d);
    for (t, row) in f.rows().enumerate() {
        for &wi in weight_at(w, t, 2) {
            out.extend(row.iter().map(|&v| wi * v));
        }
    }
    Tensor::new(&[t_len, n, d], out)
}

fn accumulate_weight(
    dw: &mut [f32],
    w: &Tensor,
    t: usize,
    per_token_rank: usize,
    idx: usize,
    v: f32,
) {
    let offset = if w.rank() == per_token_rank {
        t * (w.len() / w.dim(0))
    } else {
        0
    };
    dw[offset + idx] += v;
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    crate::numerics::ops::dot(a, b)
}

struct ExpandBackward;

impl Backward for ExpandBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (t_len, n, d) = (out.dim(0), out.dim(1), out.dim(2));
        let mut dx = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            for s in 0..n {
                for (a, &b) in dx[t * d..(t + 1) * d].iter_mut().zip(g.row(t * n + s)) {
                    *a += b;
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), dx)?)])
    }
}

struct CombineBackward;

impl Backward for CombineBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (t_len, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = vec![0.0f32; x.len()];
        let mut dw = vec![0.0f32; w.len()];
        for t in 0..t_len {
            let wt = weight_at(w, t, 2);
            let gt = g.row(t);
            for s in 0..n {
                let dst = &mut dx[(t * n + s) * d..(t * n + s + 1) * d];
                for (a, &b) in dst.iter_mut().zip(gt) {
                    *a = wt[s] * b;
                }
                accumulate_weight(&mut dw, w, t, 2, s, dot(x.row(t * n + s), gt));
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), dx)?),
            Some(Tensor::new(w.shape(), dw)?),
        ])
    }
}

struct MixBackward;

impl Backward for MixBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, h) = (inputs[0], inputs[1]);
        let (t_len, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = vec![0.0f32; x.len()];
        let mut dh = vec![0.0f32; h.len()];
        for t in 0..t_len {
            let ht = weight_at(h, t, 3);
            for i in 0..n {
                let gi = g.row(t * n + i);
                for s in 0..n {
                    let his = ht[i * n + s];
                    let dst = &mut dx[(t * n + s) * d..(t * n + s + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(gi) {
                        *a += his * b;
                    }
                    accumulate_weight(&mut dh, h, t, 3, i * n + s, dot(x.row(t * n + s), gi));
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), dx)?),
            Some(Tensor::new(h.shape(), dh)?),
        ])
    }
}

struct SpreadBackward;

impl Backward for SpreadBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (f, w) = (inputs[0], inputs[1]);
        let (t_len, d) = (f.dim(0), f.dim(1));
        let n = out.dim(1);
        let mut df = vec![0.0f32; f.len()];
        let mut dw = vec![0.0f32; w.len()];
        for t in 0..t_len {
            let wt = weight_at(w, t, 2);
            let ft = f.row(t);
            for i in 0..n {
                let gi = g.row(t * n + i);
                for (a, &b) in df[t * d..(t + 1) * d].iter_mut().zip(gi) {
                    *a += wt[i] * b;
                }
                accumulate_weight(&mut dw, w, t, 2, i, dot(ft, gi));
            }
        }
        Ok(vec![
            Some(Tensor::new(f.shape(), df)?),
            Some(Tensor::new(w.shape(), dw)?),
        ])
    }
}

pub(crate) fn expand_on(g: &mut Graph<'_>, x: Var, n: usize) -> Result<Var> {
    let out = expand_kernel(g.value(x), n)?;
    Ok(g.custom(&[x], out, ExpandBackward))
}

pub(crate) fn combine_on(g: &mut Graph<'_>, x: Var, w: Var) -> Result<Var> {
    let out = combine_kernel(g.value(x), g.value(w))?;
    Ok(g.custom(&[x, w], out, CombineBackward))
}

pub(crate) fn mix_on(g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
    let out = mix_kernel(g.value(x), g.value(h))?;
    Ok(g.custom(&[x, h], out, MixBackward))
}

pub(crate) fn spread_on(g: &mut Graph<'_>, f: Var, w: Var) -> Result<Var> {
    let out = spread_kernel(g.value(f), g.value(w))?;
    Ok(g.custom(&[f, w], out, SpreadBackward))
}

/// Replicate `embeddings[T, d]` into `n` identical streams.
pub fn expand(embeddings: &Tensor, n: usize) -> Result<StreamState> {
    StreamState::new(expand_kernel(embeddings, n)?)
}

/// Sum over the stream axis: `[T, n, d] -> [T, d]`.
pub fn collapse(x: &StreamState) -> Tensor {
    combine_kernel(x.values(), &Tensor::full(&[x.streams()], 1.0)).expect("weights match streams")
}

/// One hyper-connected update: `y = h_res·x + h_postᵀ · F(h_pre·x)`, per token.
pub fn block_forward(
    x: &StreamState,
    routing: &RealizedRouting,
    layer_fn: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<StreamState> {
    let collapsed = combine_kernel(x.values(), &routing.h_pre)?;
    let f = layer_fn(&collapsed)?;
    if f.shape() != collapsed.shape() {
        return Err(Error::shape("block_forward", f.shape(), collapsed.shape()));
    }
    let mut y = mix_kernel(x.values(), &routing.h_res)?;
    y.add_assign(&spread_kernel(&f, &routing.h_post)?)?;
    StreamState::new(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamId, Rng};

    #[test]
    fn expand_replicates() {
        let mut rng = Rng::new(0);
        let e = rng.normal_tensor(&[3, 5], 1.0);
        let one = expand(&e, 1).unwrap();
        assert_eq!(one.values().data(), e.data());
        let four = expand(&e, 4).unwrap();
        for t in 0..3 {
            for s in 0..4 {
                assert_eq!(four.stream(t, s), e.row(t));
            }
        }
    }

    #[test]
    fn collapse_examples() {
        let mut rng = Rng::new(1);
        let e = rng.normal_tensor(&[3, 5], 1.0);
        assert_eq!(collapse(&expand(&e, 1).unwrap()), e);
        let c = collapse(&expand(&e, 4).unwrap());
        for (a, b) in c.data().iter().zip(e.data()) {
            assert!((a - 4.0 * b).abs() < 1e-6);
        }
        let x = StreamState::new(rng.normal_tensor(&[2, 3, 4], 1.0)).unwrap();
        let c = collapse(&x);
        for t in 0..2 {
            for k in 0..4 {
                let mut s = 0.0f32;
                for st in 0..3 {
                    s += x.stream(t, st)[k];
                }
                assert!((c.get(&[t, k]) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_stream_unit_routing_is_plain_residual() {
        let mut rng = Rng::new(2);
        let x = StreamState::new(rng.normal_tensor(&[4, 1, 6], 1.0)).unwrap();
        let f = |u: &Tensor| Ok(u.map(|v| (v * 0.7).tanh()));
        let y = block_forward(&x, &RealizedRouting::unit(1), f).unwrap();
        for (i, (&a, &b)) in y.values().data().iter().zip(x.values().data()).enumerate() {
            let _ = i;
            assert!((a - (b + (b * 0.7).tanh())).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_post_with_permutation_permutes() {
        let mut rng = Rng::new(3);
        let x = StreamState::new(rng.normal_tensor(&[2, 3, 4], 1.0)).unwrap();
        let perm = [2usize, 0, 1];
        let mut p = Tensor::zeros(&[3, 3]);
        for (i, &j) in perm.iter().enumerate() {
            p.set(&[i, j], 1.0);
        }
        let r = RealizedRouting {
            h_res: p,
            h_pre: Tensor::full(&[3], 1.0),
            h_post: Tensor::zeros(&[3]),
        };
        let y = block_forward(&x, &r, |u| Ok(u.map(|v| v * 3.0 + 1.0))).unwrap();
        for t in 0..2 {
            for (i, &j) in perm.iter().enumerate() {
                assert_eq!(y.stream(t, i), x.stream(t, j));
            }
        }
    }

    #[test]
    fn block_matches_loop_evaluation() {
        let mut rng = Rng::new(4);
        let (t_len, n, d) = (4, 2, 8);
        let x = StreamState::new(rng.normal_tensor(&[t_len, n, d], 1.0)).unwrap();
        let r = RealizedRouting {
            h_res: Tensor::from_rows(&[vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap(),
            h_pre: rng.normal_tensor(&[n], 1.0),
            h_post: rng.normal_tensor(&[n], 1.0),
        };
        let w = rng.normal_tensor(&[d, d], 0.5);
        let f = |u: &Tensor| crate::numerics::ops::matmul(u, &w);
        let y = block_forward(&x, &r, f).unwrap();
        for t in 0..t_len {
            let mut u = vec![0.0f64; d];
            for s in 0..n {
                for k in 0..d {
                    u[k] += f64::from(r.h_pre.data()[s]) * f64::from(x.stream(t, s)[k]);
                }
            }
            let fu: Vec<f64> = (0..d)
                .map(|k| (0..d).map(|m| u[m] * f64::from(w.get(&[m, k]))).sum())
                .collect();
            for i in 0..n {
                for k in 0..d {
                    let mut e = f64::from(r.h_post.data()[i]) * fu[k];
                    for s in 0..n {
                        e += f64::from(r.h_res.get(&[i, s])) * f64::from(x.stream(t, s)[k]);
                    }
                    assert!((f64::from(y.stream(t, i)[k]) - e).abs() < 1e-5);
                }
            }
        }
    }

    fn fd_check(build: impl Fn(&mut Graph<'_>, Var, Var) -> Var, x: &Tensor, w: &Tensor) {
        let mut g = Graph::new();
        let xv = g.param(ParamId(0), x);
        let wv = g.param(ParamId(1), w);
        let out = build(&mut g, xv, wv);
        let probe = Rng::new(99).normal_tensor(g.value(out).shape(), 1.0);
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let eval = |x: &Tensor, w: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let out = build(&mut g, xv, wv);
            g.value(out)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
        };
        for (id, base) in [(ParamId(0), x), (ParamId(1), w)] {
            let analytic = grads.param(id).unwrap();
            for i in 0..base.len() {
                let h = 1e-2f32;
                let mut up = base.clone();
                up.data_mut()[i] += h;
                let mut dn = base.clone();
                dn.data_mut()[i] -= h;
                let (fu, fd) = if id == ParamId(0) {
                    (eval(&up, w), eval(&dn, w))
                } else {
                    (eval(x, &up), eval(x, &dn))
                };
                let num = (fu - fd) / (2.0 * f64::from(h));
                let a = f64::from(analytic.data()[i]);
                assert!(
                    (a - num).abs() < 1e-3 * (1.0 + num.abs()),
                    "{id:?}[{i}]: {a} vs {num}"
                );
            }
        }
    }

    #[test]
    fn stream_op_gradients() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(&[3, 2, 4], 1.0);
        fd_check(
            |g, x, w| combine_on(g, x, w).unwrap(),
            &x,
            &rng.normal_tensor(&[2], 1.0),
        );
        fd_check(
            |g, x, w| combine_on(g, x, w).unwrap(),
            &x,
            &rng.normal_tensor(&[3, 2], 1.0),
        );
        fd_check(
            |g, x, h| mix_on(g, x, h).unwrap(),
            &x,
            &rng.normal_tensor(&[2, 2], 1.0),
        );
        fd_check(
            |g, x, h| mix_on(g, x, h).unwrap(),
            &x,
            &rng.normal_tensor(&[3, 2, 2], 1.0),
        );
        let f = rng.normal_tensor(&[3, 4], 1.0);
        fd_check(
            |g, f, w| spread_on(g, f, w).unwrap(),
            &f,
            &rng.normal_tensor(&[2], 1.0),
        );
        fd_check(
            |g, f, w| spread_on(g, f, w).unwrap(),
            &f,
            &rng.normal_tensor(&[3, 2], 1.0),
        );
        fd_check(
            |g, f, w| {
                let e = expand_on(g, f, 2).unwrap();
                let s = spread_on(g, f, w).unwrap();
                g.add(e, s).unwrap()
            },
            &f,
            &rng.normal_tensor(&[2], 1.0),
        );
    }
}
