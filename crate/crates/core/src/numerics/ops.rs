//! Forward (and matching backward) kernels on plain tensors.
//!
//! The autograd tape calls into these; they are also usable directly for
//! inference-only code.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// C (m×n) = alpha·op(A)·op(B) + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the bounds sgemm reads and
    // writes; every caller derives the strides from validated tensor shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a 2-D tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Standard matrix product `a[m×k] · b[k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d("matmul", a)?;
    let (k2, p) = check_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * p];
    gemm(m, k, p, a.data(), (k, 1), b.data(), (p, 1), 0.0, &mut out);
    Tensor::new(&[m, p], out)
}

/// `a[m×k] · b[p×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d("matmul_nt", a)?;
    let (p, k2) = check_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * p];
    gemm(m, k, p, a.data(), (k, 1), b.data(), (1, k), 0.0, &mut out);
    Tensor::new(&[m, p], out)
}

/// `a[k×m]ᵀ · b[k×p]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = check_2d("matmul_tn", a)?;
    let (k2, p) = check_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * p];
    gemm(m, k, p, a.data(), (1, m), b.data(), (p, 1), 0.0, &mut out);
    Tensor::new(&[m, p], out)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank().max(1) || (x.rank() == 0 && axis != 0) {
        return Err(Error::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let shape = if x.rank() == 0 {
        vec![1]
    } else {
        x.shape().to_vec()
    };
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| src[idx(j)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Softmax of a single row, written into `out`.
pub fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Log-softmax of one row in `f64`.
pub fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row
        .iter()
        .map(|&x| (x as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Layer normalization over the last axis; `gain` and `bias` have the
/// length of that axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_with_stats(x, gain, bias).map(|(t, _)| t)
}

pub fn layer_norm_with_stats(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, NormStats)> {
    let d = x.last_dim();
    if x.rank() == 0 || d < 2 {
        return Err(Error::Contract(format!(
            "layer_norm needs a last axis of at least 2, got shape {:?}",
            x.shape()
        )));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0f32; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for (r, row) in x.rows().enumerate() {
        let mu = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - mu) * rs * g[j] + b[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape(), out)?, NormStats { mean, rstd }))
}

/// Gradients of layer norm with respect to (x, gain, bias).
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    stats: &NormStats,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = x.last_dim();
    let g = gain.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    for (r, (row, grow)) in x.rows().zip(grad.rows()).enumerate() {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = grow[j] * g[j];
            dgain[j] += grow[j] * xhat;
            dbias[j] += grow[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let inv_d = 1.0 / d as f32;
        let o = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = grow[j] * g[j];
            o[j] = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("shape preserved"),
        Tensor::vector(dgain),
        Tensor::vector(dbias),
    )
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation (GPT-2 flavour), evaluated through the identity
/// `0.5 (1 + tanh u) = sigmoid(2u)`.
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// Multi-head causal self-attention over a packed `[T, 3d]` q/k/v tensor.
/// Returns the `[T, d]` output and the `[heads, T, T]` attention weights.
pub fn causal_attention(qkv: &Tensor, heads: usize) -> Result<(Tensor, Vec<f32>)> {
    let (t_len, three_d) = check_2d("causal_attention", qkv)?;
    if heads == 0 || three_d % (3 * heads) != 0 {
        return Err(Error::Contract(format!(
            "qkv width {three_d} not divisible into 3 x {heads} heads"
        )));
    }
    let d = three_d / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let src = qkv.data();
    let mut out = vec![0.0f32; t_len * d];
    let mut probs = vec![0.0f32; heads * t_len * t_len];
    let mut scores = vec![0.0f32; t_len * t_len];
    let mut head_out = vec![0.0f32; t_len * hd];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        // scores = Q_h · K_hᵀ
        gemm(
            t_len,
            hd,
            t_len,
            &src[qo..],
            (three_d, 1),
            &src[ko..],
            (1, three_d),
            0.0,
            &mut scores,
        );
        let p_h = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        for i in 0..t_len {
            let row = &mut scores[i * t_len..i * t_len + i + 1];
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_row(row, &mut p_h[i * t_len..i * t_len + i + 1]);
        }
        gemm(
            t_len,
            t_len,
            hd,
            p_h,
            (t_len, 1),
            &src[vo..],
            (three_d, 1),
            0.0,
            &mut head_out,
        );
        for i in 0..t_len {
            out[i * d + qo..i * d + qo + hd].copy_from_slice(&head_out[i * hd..(i + 1) * hd]);
        }
    }
    Ok((Tensor::new(&[t_len, d], out)?, probs))
}

pub fn causal_attention_backward(
    qkv: &Tensor,
    probs: &[f32],
    heads: usize,
    grad: &Tensor,
) -> Tensor {
    let (t_len, three_d) = (qkv.dim(0), qkv.dim(1));
    let d = three_d / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let src = qkv.data();
    let g = grad.data();
    let mut dqkv = vec![0.0f32; t_len * three_d];
    let mut dp = vec![0.0f32; t_len * t_len];
    let mut tmp = vec![0.0f32; t_len * hd];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        let p_h = &probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        let mut scatter = |tmp: &[f32], offset: usize| {
            for i in 0..t_len {
                let dst = &mut dqkv[i * three_d + offset..i * three_d + offset + hd];
                for (a, &b) in dst.iter_mut().zip(&tmp[i * hd..(i + 1) * hd]) {
                    *a += b;
                }
            }
        };
        // dV_h = P_hᵀ · dO_h
        gemm(
            t_len,
            t_len,
            hd,
            p_h,
            (1, t_len),
            &g[qo..],
            (d, 1),
            0.0,
            &mut tmp,
        );
        scatter(&tmp, vo);
        // dP = dO_h · V_hᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale
        gemm(
            t_len,
            hd,
            t_len,
            &g[qo..],
            (d, 1),
            &src[vo..],
            (1, three_d),
            0.0,
            &mut dp,
        );
        for i in 0..t_len {
            let p = &p_h[i * t_len..(i + 1) * t_len];
            let row = &mut dp[i * t_len..(i + 1) * t_len];
            let weighted: f32 = p[..=i].iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..t_len {
                row[j] = if j <= i {
                    p[j] * (row[j] - weighted) * scale
                } else {
                    0.0
                };
            }
        }
        // dQ_h = dS · K_h, dK_h = dSᵀ · Q_h
        gemm(
            t_len,
            t_len,
            hd,
            &dp,
            (t_len, 1),
            &src[ko..],
            (three_d, 1),
            0.0,
            &mut tmp,
        );
        scatter(&tmp, qo);
        gemm(
            t_len,
            t_len,
            hd,
            &dp,
            (1, t_len),
            &src[qo..],
            (three_d, 1),
            0.0,
            &mut tmp,
        );
        scatter(&tmp, ko);
    }
    Tensor::new(qkv.shape(), dqkv).expect("shape preserved")
}

/// Mean next-token cross-entropy of `logits[T, V]` against `targets`.
/// Returns the loss and the softmax probabilities for the backward pass.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Vec<f32>)> {
    let (t_len, vocab) = check_2d("cross_entropy", logits)?;
    if targets.len() != t_len {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
        return Err(Error::Input(format!("target id {bad} >= vocab {vocab}")));
    }
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (t, row) in logits.rows().enumerate() {
        let p = &mut probs[t * vocab..(t + 1) * vocab];
        softmax_row(row, p);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln() + max;
        total += f64::from(lse - row[targets[t]]);
    }
    Ok(((total / t_len as f64) as f32, probs))
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut total: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        total += a[i] * b[i];
    }
    total
}
