//! Stream-mixing matrices for a hyper-connected block.
//!
//! `h_res` is projected onto the doubly stochastic matrices with Sinkhorn-Knopp
//! iterations applied to `exp(res_logits)`; `h_pre` and `h_post` are free
//! real-valued weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Backward, Graph, Tensor, Var};

pub const DEFAULT_SINKHORN_ITERS: usize = 200;
pub const DEFAULT_SINKHORN_TOL: f32 = 1e-6;

/// Learnable routing parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingParams {
    /// Unconstrained `[n, n]` logits; `h_res = sinkhorn(exp(res_logits))`.
    pub res_logits: Tensor,
    /// `[n]` aggregation weights.
    pub pre_weights: Tensor,
    /// `[n]` redistribution weights.
    pub post_weights: Tensor,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f32,
}

impl RoutingParams {
    /// Near-identity initialization: `h_res ≈ I`, `h_pre = 1/n`, `h_post = 1`.
    pub fn identity_init(n: usize) -> Self {
        let mut res_logits = Tensor::zeros(&[n, n]);
        for i in 0..n {
            res_logits.set(&[i, i], 6.0);
        }
        Self {
            res_logits,
            pre_weights: Tensor::full(&[n], 1.0 / n as f32),
            post_weights: Tensor::full(&[n], 1.0),
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            sinkhorn_tol: DEFAULT_SINKHORN_TOL,
        }
    }

    pub fn streams(&self) -> usize {
        self.pre_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.streams();
        if n == 0 {
            return Err(Error::Contract("routing needs at least one stream".into()));
        }
        if self.res_logits.shape() != [n, n] || self.post_weights.shape() != [n] {
            return Err(Error::shape(
                "RoutingParams",
                self.res_logits.shape(),
                self.post_weights.shape(),
            ));
        }
        if self.sinkhorn_iters == 0 || !(self.sinkhorn_tol > 0.0) {
            return Err(Error::Contract(
                "sinkhorn_iters must be >= 1 and sinkhorn_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Concrete mixing matrices used by a block.
///
/// Static routing holds `h_res[n, n]`, `h_pre[n]`, `h_post[n]`. Token-dependent
/// routing carries a leading token axis: `[T, n, n]`, `[T, n]`, `[T, n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizedRouting {
    pub h_res: Tensor,
    pub h_pre: Tensor,
    pub h_post: Tensor,
}

impl RealizedRouting {
    /// `h_res = I`, `h_pre = h_post = 1` for one stream: the plain residual.
    pub fn unit(n: usize) -> Self {
        Self {
            h_res: Tensor::identity(n),
            h_pre: Tensor::full(&[n], 1.0),
            h_post: Tensor::full(&[n], 1.0),
        }
    }

    pub fn streams(&self) -> usize {
        self.h_pre.last_dim()
    }

    pub fn is_per_token(&self) -> bool {
        self.h_pre.rank() == 2
    }

    /// Routing that applies at token `t`.
    pub fn at_token(&self, t: usize) -> RealizedRouting {
        if !self.is_per_token() {
            return self.clone();
        }
        let n = self.streams();
        let pick = |x: &Tensor, w: usize, shape: &[usize]| {
            Tensor::new(shape, x.data()[t * w..(t + 1) * w].to_vec()).expect("slice of a token")
        };
        RealizedRouting {
            h_res: pick(&self.h_res, n * n, &[n, n]),
            h_pre: pick(&self.h_pre, n, &[n]),
            h_post: pick(&self.h_post, n, &[n]),
        }
    }

    /// Largest deviation of any row or column sum of `h_res` from 1, and
    /// whether every entry lies in `[0, 1]` within `1e-6`.
    pub fn doubly_stochastic_error(&self) -> (f64, bool) {
        let n = self.streams();
        let mut worst = 0.0f64;
        let mut in_range = true;
        for m in self.h_res.data().chunks_exact(n * n) {
            worst = worst.max(max_marginal_deviation(m, n));
            in_range &= m.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v));
        }
        (worst, in_range)
    }
}

/// Result of a Sinkhorn projection.
#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub matrix: Tensor,
    /// Row/column iterations actually performed (max over a batch).
    pub iterations: usize,
    pub converged: bool,
    pub max_deviation: f64,
}

fn max_marginal_deviation(m: &[f32], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| f64::from(m[i * n + j])).sum();
        let col: f64 = (0..n).map(|j| f64::from(m[j * n + i])).sum();
        worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    worst
}

/// One half-step of the trace: the normalized matrix and the sums divided by.
#[derive(Clone, Debug)]
struct HalfStep {
    by_rows: bool,
    out: Vec<f32>,
    sums: Vec<f32>,
}

fn normalize(m: &mut [f32], n: usize, by_rows: bool) -> Vec<f32> {
    let idx = |a: usize, b: usize| if by_rows { a * n + b } else { b * n + a };
    let mut sums = vec![0.0f32; n];
    for (a, s) in sums.iter_mut().enumerate() {
        *s = (0..n).map(|b| m[idx(a, b)]).sum();
        let inv = 1.0 / *s;
        for b in 0..n {
            m[idx(a, b)] *= inv;
        }
    }
    sums
}

/// Project every `[n, n]` block of `m` (shape `[.., n, n]`), keeping the
/// per-block trace needed to differentiate through the unrolled iterations.
fn sinkhorn_traced(
    m: &Tensor,
    iters: usize,
    tol: f32,
) -> Result<(SinkhornOutput, Vec<Vec<HalfStep>>)> {
    let shape = m.shape();
    if m.rank() < 2 || shape[m.rank() - 1] != shape[m.rank() - 2] {
        return Err(Error::Contract(format!(
            "sinkhorn needs square trailing axes, got {shape:?}"
        )));
    }
    if let Some(bad) = m.data().iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "sinkhorn input must be strictly positive and finite, found {bad}"
        )));
    }
    let n = shape[m.rank() - 1];
    let mut data = m.data().to_vec();
    let mut traces = Vec::new();
    let mut iterations = 0;
    let mut max_dev = 0.0f64;
    for block in data.chunks_exact_mut(n * n) {
        let mut trace = Vec::new();
        let mut dev = max_marginal_deviation(block, n);
        let mut it = 0;
        while dev > f64::from(tol) && it < iters {
            for by_rows in [true, false] {
                let sums = normalize(block, n, by_rows);
                trace.push(HalfStep {
                    by_rows,
                    out: block.to_vec(),
                    sums,
                });
            }
            it += 1;
            dev = max_marginal_deviation(block, n);
        }
        iterations = iterations.max(it);
        max_dev = max_dev.max(dev);
        traces.push(trace);
    }
    let out = SinkhornOutput {
        matrix: Tensor::new(shape, data)?,
        iterations,
        converged: max_dev <= f64::from(tol),
        max_deviation: max_dev,
    };
    Ok((out, traces))
}

/// Alternating row/column normalization of a strictly positive matrix until
/// every marginal is within `tol` of 1 or `iters` iterations have run.
///
/// Accepts `[n, n]` or a batch `[.., n, n]`.
pub fn sinkhorn_project(m: &Tensor, iters: usize, tol: f32) -> Result<SinkhornOutput> {
    sinkhorn_traced(m, iters, tol).map(|(out, _)| out)
}

struct SinkhornBackward {
    n: usize,
    traces: Vec<Vec<HalfStep>>,
}

impl Backward for SinkhornBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let n = self.n;
        let mut g = grad.data().to_vec();
        for (block, trace) in g.chunks_exact_mut(n * n).zip(&self.traces) {
            for step in trace.iter().rev() {
                let idx = |a: usize, b: usize| if step.by_rows { a * n + b } else { b * n + a };
                for a in 0..n {
                    let inner: f32 = (0..n).map(|b| block[idx(a, b)] * step.out[idx(a, b)]).sum();
                    let inv = 1.0 / step.sums[a];
                    for b in 0..n {
                        block[idx(a, b)] = (block[idx(a, b)] - inner) * inv;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

/// Differentiable Sinkhorn projection recorded on `graph`.
pub fn sinkhorn_on(graph: &mut Graph<'_>, m: Var, iters: usize, tol: f32) -> Result<Var> {
    let (out, traces) = sinkhorn_traced(graph.value(m), iters, tol)?;
    let n = out.matrix.last_dim();
    Ok(graph.custom(&[m], out.matrix, SinkhornBackward { n, traces }))
}

/// `h_res = sinkhorn(exp(res_logits))`; `h_pre`, `h_post` pass through.
pub fn realize(params: &RoutingParams) -> Result<RealizedRouting> {
    params.validate()?;
    let positive = params.res_logits.map(f32::exp);
    let projected = sinkhorn_project(&positive, params.sinkhorn_iters, params.sinkhorn_tol)?;
    Ok(RealizedRouting {
        h_res: projected.matrix,
        h_pre: params.pre_weights.clone(),
        h_post: params.post_weights.clone(),
    })
}

/// Depth-wise summary of one layer's routing matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layer: usize,
    pub frob_pre: f64,
    pub frob_res: f64,
    pub frob_post: f64,
    pub var_pre: f64,
    pub var_res: f64,
    pub var_post: f64,
}

fn frobenius(t: &Tensor) -> f64 {
    t.squared_norm().sqrt()
}

fn population_variance(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    t.data()
        .iter()
        .map(|&x| (f64::from(x) - mean).powi(2))
        .sum::<f64>()
        / n
}

/// Frobenius norm and population variance of each matrix, per layer.
pub fn routing_stats(layers: &[RealizedRouting]) -> Vec<RoutingStats> {
    layers
        .iter()
        .enumerate()
        .map(|(layer, r)| RoutingStats {
            layer,
            frob_pre: frobenius(&r.h_pre),
            frob_res: frobenius(&r.h_res),
            frob_post: frobenius(&r.h_post),
            var_pre: population_variance(&r.h_pre),
            var_res: population_variance(&r.h_res),
            var_post: population_variance(&r.h_post),
        })
        .collect()
}
