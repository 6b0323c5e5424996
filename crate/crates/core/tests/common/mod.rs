//! Independent f64 reference implementation of the model forward pass, plus
//! helpers for building small and engineered models.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod criteria;

use std::collections::HashMap;

use mhc_core::model::{Model, ModelConfig};
use mhc_core::numerics::Rng;

/// Parameters copied out of a model as f64, keyed by name.
#[derive(Clone)]
pub struct RefParams {
    pub cfg: ModelConfig,
    pub tensors: HashMap<String, Vec<f64>>,
}

impl RefParams {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .params()
            .entries()
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.tensor.data().iter().map(|&v| f64::from(v)).collect(),
                )
            })
            .collect();
        Self {
            cfg: model.config().clone(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.tensors.get_mut(name).expect("known parameter")
    }
}

type Mat = Vec<Vec<f64>>;

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

/// `x · W + b` with `W` stored row-major as `[din, dout]`.
fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let dout = b.len();
    x.iter()
        .map(|row| {
            let mut out = b.to_vec();
            for (i, &xi) in row.iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
                    *o += xi * wv;
                }
            }
            out
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(qkv: &Mat, heads: usize) -> Mat {
    let t_len = qkv.len();
    let d = qkv[0].len() / 3;
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; t_len];
    for h in 0..heads {
        let q = |t: usize| &qkv[t][h * hd..(h + 1) * hd];
        let k = |t: usize| &qkv[t][d + h * hd..d + (h + 1) * hd];
        let v = |t: usize| &qkv[t][2 * d + h * hd..2 * d + (h + 1) * hd];
        for i in 0..t_len {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for (o, vv) in out[i][h * hd..(h + 1) * hd].iter_mut().zip(v(j)) {
                    *o += ej / z * vv;
                }
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// GPT-2 pre-norm layer update without the outer residual.
fn layer_update(p: &RefParams, l: usize, u: &Mat) -> Mat {
    let g = |s: &str| p.get(&format!("blocks.{l}.{s}"));
    let h = layer_norm(u, g("ln_1.gain"), g("ln_1.bias"));
    let qkv = linear(&h, g("attn.qkv.weight"), g("attn.qkv.bias"));
    let att = attention(&qkv, p.cfg.heads);
    let a = linear(&att, g("attn.proj.weight"), g("attn.proj.bias"));
    let h2 = layer_norm(&add(u, &a), g("ln_2.gain"), g("ln_2.bias"));
    let mut z = linear(&h2, g("mlp.fc.weight"), g("mlp.fc.bias"));
    z.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    let m = linear(&z, g("mlp.proj.weight"), g("mlp.proj.bias"));
    add(&a, &m)
}

/// Sinkhorn in f64 with the model's stopping rule: stop once every row and
/// column sum is within `tol` of 1, or after `iters` iterations.
pub fn sinkhorn64(m: &[f64], n: usize, iters: usize, tol: f64) -> Vec<f64> {
    let mut a = m.to_vec();
    let deviation = |a: &[f64]| {
        (0..n)
            .flat_map(|i| {
                let row: f64 = (0..n).map(|j| a[i * n + j]).sum();
                let col: f64 = (0..n).map(|j| a[j * n + i]).sum();
                [(row - 1.0).abs(), (col - 1.0).abs()]
            })
            .fold(0.0, f64::max)
    };
    let mut it = 0;
    while it < iters && deviation(&a) > tol {
        for i in 0..n {
            let s: f64 = a[i * n..(i + 1) * n].iter().sum();
            a[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= s);
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| a[i * n + j]).sum();
            (0..n).for_each(|i| a[i * n + j] /= s);
        }
        it += 1;
    }
    a
}

fn embed(p: &RefParams, tokens: &[usize]) -> Mat {
    let d = p.cfg.model_dim;
    let (wte, wpe) = (p.get("wte"), p.get("wpe"));
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|i| wte[tok * d + i] + wpe[t * d + i]).collect())
        .collect()
}

fn unembed(p: &RefParams, x: &Mat) -> Mat {
    let h = layer_norm(x, p.get("ln_f.gain"), p.get("ln_f.bias"));
    let (d, v) = (p.cfg.model_dim, p.cfg.vocab);
    let wte = p.get("wte");
    h.iter()
        .map(|row| {
            (0..v)
                .map(|k| (0..d).map(|i| row[i] * wte[k * d + i]).sum())
                .collect()
        })
        .collect()
}

/// Plain single-stream residual transformer `x ← x + F(x)` over the same
/// weights, ignoring all routing parameters.
pub fn vanilla_logits(p: &RefParams, tokens: &[usize]) -> Mat {
    let mut x = embed(p, tokens);
    for l in 0..p.cfg.layers {
        let f = layer_update(p, l, &x);
        x = add(&x, &f);
    }
    unembed(p, &x)
}

/// Multi-stream forward with static routing: per token,
/// `x_i ← Σ_j H_res[i,j] x_j + h_post[i] · F(Σ_s h_pre[s] x_s)`.
pub fn stream_logits(p: &RefParams, tokens: &[usize]) -> Mat {
    let n = p.cfg.streams;
    let e = embed(p, tokens);
    let mut x: Vec<Mat> = (0..n).map(|_| e.clone()).collect();
    for l in 0..p.cfg.layers {
        let g = |s: &str| p.get(&format!("blocks.{l}.routing.{s}"));
        let positive: Vec<f64> = g("res_logits").iter().map(|v| v.exp()).collect();
        let h_res = sinkhorn64(
            &positive,
            n,
            p.cfg.sinkhorn_iters,
            f64::from(p.cfg.sinkhorn_tol),
        );
        let (pre, post) = (g("pre_weights"), g("post_weights"));
        let u: Mat = (0..tokens.len())
            .map(|t| {
                (0..p.cfg.model_dim)
                    .map(|i| (0..n).map(|s| pre[s] * x[s][t][i]).sum())
                    .collect()
            })
            .collect();
        let f = layer_update(p, l, &u);
        x = (0..n)
            .map(|a| {
                (0..tokens.len())
                    .map(|t| {
                        (0..p.cfg.model_dim)
                            .map(|i| {
                                (0..n).map(|b| h_res[a * n + b] * x[b][t][i]).sum::<f64>()
                                    + post[a] * f[t][i]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
    }
    let cw = p.get("collapse.weights");
    let collapsed: Mat = (0..tokens.len())
        .map(|t| {
            (0..p.cfg.model_dim)
                .map(|i| (0..n).map(|s| cw[s] * x[s][t][i]).sum())
                .collect()
        })
        .collect();
    unembed(p, &collapsed)
}

/// Mean next-token cross-entropy.
pub fn mean_cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / targets.len() as f64
}

/// Small model configuration used across tests.
pub fn small_config(layers: usize, streams: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers,
        streams,
        model_dim: 8,
        heads: 2,
        head_dim: 4,
        vocab: 256,
        context: 8,
        seed,
        ..ModelConfig::default()
    }
}

/// Add Gaussian noise of `std` to every trainable non-routing tensor, so
/// biases and norms are not at their trivial initial values.
pub fn perturb(model: &mut Model, std: f32, seed: u64) {
    let mut rng = Rng::new(seed);
    let names: Vec<String> = model
        .params()
        .entries()
        .iter()
        .filter(|e| e.trainable && !e.name.contains("routing"))
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let t = model.params_mut().by_name_mut(&name).unwrap();
        let noise = rng.normal_tensor(t.shape(), std);
        t.add_assign(&noise).unwrap();
    }
}

pub fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

/// Shannon entropy (nats) of byte frequencies, by direct counting.
pub fn byte_entropy(text: &str) -> f64 {
    let mut counts = [0u64; 256];
    for &b in text.as_bytes() {
        counts[b as usize] += 1;
    }
    let total = text.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}
