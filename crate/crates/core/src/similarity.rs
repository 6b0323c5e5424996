//! Linear CKA between stream residuals, within a layer and across layers.
//!
//! All arithmetic runs in `f64` using the feature-space form
//! `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Rng, Tensor};
use crate::training::{Corpus, Split};

/// Default number of sampled token positions.
pub const DEFAULT_POSITIONS: usize = 2048;

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn from_tensor(x: &Tensor) -> Result<Self> {
        let [rows, cols] = *x.shape() else {
            return Err(Error::Contract(format!(
                "features must be 2-D, got {:?}",
                x.shape()
            )));
        };
        Ok(Self {
            rows,
            cols,
            data: x.data().iter().map(|&v| f64::from(v)).collect(),
        })
    }
}

/// `C[m×n] = op(A)·op(B)` in f64 with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    // SAFETY: the assertions above bound every element dgemm reads; `c` has
    // exactly m·n elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn center(x: &Features) -> Result<Features> {
    if x.rows < 2 {
        return Err(Error::Input(format!(
            "centering needs at least 2 rows, got {}",
            x.rows
        )));
    }
    let mut means = vec![0.0; x.cols];
    for row in x.data.chunks_exact(x.cols) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= x.rows as f64;
    }
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(x.cols) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(Features { data, ..*x })
}

/// Subtract each column's mean.
pub fn center_columns(x: &Tensor) -> Result<Tensor> {
    let c = center(&Features::from_tensor(x)?)?;
    Tensor::new(x.shape(), c.data.iter().map(|&v| v as f32).collect())
}

/// `‖Aᵀ B‖²_F` for two centered feature matrices with equal row counts.
fn cross_norm_sq(a: &Features, b: &Features) -> f64 {
    let g = dgemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        (1, a.cols),
        &b.data,
        (b.cols, 1),
    );
    g.iter().map(|v| v * v).sum()
}

/// A centered feature matrix together with `‖Xcᵀ Xc‖_F`.
struct Prepared {
    x: Features,
    self_norm: f64,
}

fn prepare(x: &Features, what: &str) -> Result<Prepared> {
    let x = center(x)?;
    let self_norm = cross_norm_sq(&x, &x).sqrt();
    if !(self_norm > 0.0) {
        return Err(Error::UndefinedSimilarity(format!(
            "{what} has zero variance"
        )));
    }
    Ok(Prepared { x, self_norm })
}

fn cka_prepared(x: &Prepared, y: &Prepared) -> f64 {
    cross_norm_sq(&y.x, &x.x) / (x.self_norm * y.self_norm)
}

/// Linear CKA of two representations of the same `N` samples.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    let px = prepare(&Features::from_tensor(x)?, "first input")?;
    let py = prepare(&Features::from_tensor(y)?, "second input")?;
    Ok(cka_prepared(&px, &py))
}

/// Residuals at sampled token positions for every layer and stream.
#[derive(Clone, Debug)]
pub struct StreamSamples {
    pub layers: usize,
    pub streams: usize,
    pub dim: usize,
    pub positions: usize,
    /// `per_layer[l][s]` is `[positions × dim]`, row-major.
    per_layer: Vec<Vec<Features>>,
    pub warnings: Vec<String>,
}

impl StreamSamples {
    /// Build from explicit residual tensors: `states[l]` is `[N, n, d]`.
    pub fn from_states(states: &[Tensor]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Input("no layers to sample".into()))?;
        let [positions, streams, dim] = *first.shape() else {
            return Err(Error::Contract(format!(
                "state must be [N, n, d], got {:?}",
                first.shape()
            )));
        };
        let mut per_layer = Vec::with_capacity(states.len());
        for st in states {
            if st.shape() != first.shape() {
                return Err(Error::shape("stream samples", st.shape(), first.shape()));
            }
            let mut layer = Vec::with_capacity(streams);
            for s in 0..streams {
                let mut data = Vec::with_capacity(positions * dim);
                for p in 0..positions {
                    let off = (p * streams + s) * dim;
                    data.extend(st.data()[off..off + dim].iter().map(|&v| f64::from(v)));
                }
                layer.push(Features {
                    rows: positions,
                    cols: dim,
                    data,
                });
            }
            per_layer.push(layer);
        }
        let mut warnings = Vec::new();
        if positions < dim {
            warnings.push(format!(
                "only {positions} sampled positions for {dim} features per stream"
            ));
        }
        Ok(Self {
            layers: states.len(),
            streams,
            dim,
            positions,
            per_layer,
            warnings,
        })
    }

    pub fn stream(&self, layer: usize, s: usize) -> &Features {
        &self.per_layer[layer][s]
    }

    /// Streams of one layer concatenated along the feature axis: `N × (n·d)`.
    pub fn concat(&self, layer: usize) -> Features {
        let cols = self.streams * self.dim;
        let mut data = Vec::with_capacity(self.positions * cols);
        for p in 0..self.positions {
            for s in 0..self.streams {
                let f = &self.per_layer[layer][s];
                data.extend_from_slice(&f.data[p * self.dim..(p + 1) * self.dim]);
            }
        }
        Features {
            rows: self.positions,
            cols,
            data,
        }
    }
}

/// Sample `positions` token positions uniformly without replacement from
/// held-out windows of the corpus and record their residuals at every layer
/// (layer 0 after expansion through layer `L` before collapse).
pub fn sample_streams(
    model: &Model,
    corpus: &Corpus,
    positions: usize,
    seed: u64,
) -> Result<StreamSamples> {
    let cfg = model.config();
    let t_len = cfg.context;
    let windows = corpus.fixed_windows(Split::Heldout, t_len, usize::MAX);
    let available = windows.len() * t_len;
    let mut warnings = Vec::new();
    let mut n = positions;
    if n > available {
        warnings.push(format!(
            "requested {positions} positions but only {available} are available; using {available}"
        ));
        n = available;
    }
    if n < 2 {
        return Err(Error::Input(format!(
            "need at least 2 held-out positions, have {available}"
        )));
    }
    let mut picks = Rng::new(seed).sample_indices(available, n);
    picks.sort_unstable();

    let (layers, streams, dim) = (cfg.layers + 1, cfg.streams, cfg.model_dim);
    let mut states = vec![Vec::with_capacity(n * streams * dim); layers];
    let mut i = 0;
    while i < picks.len() {
        let w = picks[i] / t_len;
        let (_, cache) = model.forward(windows[w], true)?;
        let cache = cache.expect("cache requested");
        while i < picks.len() && picks[i] / t_len == w {
            let t = picks[i] % t_len;
            for (l, state) in states.iter_mut().enumerate() {
                let r = cache.residuals[l].values();
                state.extend_from_slice(&r.data()[t * streams * dim..(t + 1) * streams * dim]);
            }
            i += 1;
        }
    }
    let states = states
        .into_iter()
        .map(|d| Tensor::new(&[n, streams, dim], d))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = StreamSamples::from_states(&states)?;
    warnings.append(&mut samples.warnings);
    samples.warnings = warnings;
    Ok(samples)
}

/// `n × n` CKA between the streams of one layer.
pub fn stream_cka(samples: &StreamSamples, layer: usize) -> Result<Vec<Vec<f64>>> {
    let prepared = (0..samples.streams)
        .map(|s| {
            prepare(
                samples.stream(layer, s),
                &format!("layer {layer} stream {s}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(symmetric(&prepared))
}

/// `(L+1) × (L+1)` CKA between layers, each layer's streams concatenated.
pub fn interlayer_cka(samples: &StreamSamples) -> Result<Vec<Vec<f64>>> {
    let prepared = (0..samples.layers)
        .map(|l| prepare(&samples.concat(l), &format!("layer {l}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(symmetric(&prepared))
}

fn symmetric(items: &[Prepared]) -> Vec<Vec<f64>> {
    let k = items.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = cka_prepared(&items[i], &items[j]);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub positions: usize,
    pub seed: u64,
    /// `within_layer[l]` is the `n × n` stream matrix at layer `l`.
    pub within_layer: Vec<Vec<Vec<f64>>>,
    pub inter_layer: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl CkaReport {
    pub fn compute(samples: &StreamSamples, seed: u64) -> Result<Self> {
        Ok(Self {
            positions: samples.positions,
            seed,
            within_layer: (0..samples.layers)
                .map(|l| stream_cka(samples, l))
                .collect::<Result<_>>()?,
            inter_layer: interlayer_cka(samples)?,
            warnings: samples.warnings.clone(),
        })
    }

    /// Rows `layer,stream_i,stream_j,cka`.
    pub fn within_csv(&self) -> String {
        let mut out = String::from("layer,stream_i,stream_j,cka\n");
        for (l, m) in self.within_layer.iter().enumerate() {
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out.push_str(&format!("{l},{i},{j},{v}\n"));
                }
            }
        }
        out
    }

    /// Rows `layer_a,layer_b,cka`.
    pub fn inter_csv(&self) -> String {
        let mut out = String::from("layer_a,layer_b,cka\n");
        for (a, row) in self.inter_layer.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                out.push_str(&format!("{a},{b},{v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    /// Random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
    fn orthogonal(d: usize, rng: &mut Rng) -> Tensor {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Tensor::from_fn(&[d, d], |k| cols[k % d][k / d] as f32)
    }

    #[test]
    fn centering_examples() {
        let centered = Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert!(center_columns(&centered).unwrap().max_abs_diff(&centered) <= 1e-7);
        let constant =
            Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let c = center_columns(&constant).unwrap();
        assert!((0..3).all(|r| c.get(&[r, 0]) == 0.0));
        assert!(matches!(
            center_columns(&Tensor::zeros(&[1, 3])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn centered_means_vanish() {
        let x = Rng::new(1).normal_tensor(&[50, 7], 3.0);
        let c = center_columns(&x).unwrap();
        for j in 0..7 {
            let mean: f64 = (0..50).map(|i| f64::from(c.get(&[i, j]))).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn self_similarity_and_invariance() {
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(&[200, 16], 1.0);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let q = orthogonal(16, &mut rng);
        let mut y = crate::numerics::ops::matmul(&x, &q).unwrap();
        y.scale_in_place(-3.5);
        assert!((linear_cka(&x, &y).unwrap() - linear_cka(&x, &x).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let x = Rng::new(3).normal_tensor(&[10, 3], 1.0);
        let flat = Tensor::full(&[10, 3], 2.0);
        assert!(matches!(
            linear_cka(&x, &flat),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    /// Gram-space linear CKA: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with
    /// K = XXᵀ, L = YYᵀ and HSIC(K, L) = tr(K H L H).
    fn gram_cka(x: &Tensor, y: &Tensor) -> f64 {
        let n = x.dim(0);
        let gram = |m: &Tensor| {
            let mut k = vec![0.0f64; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = m
                        .row(i)
                        .iter()
                        .zip(m.row(j))
                        .map(|(a, b)| f64::from(*a) * f64::from(*b))
                        .sum();
                }
            }
            // Double centering H K H.
            let rm: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| k[i * n + j]).sum::<f64>() / n as f64)
                .collect();
            let all: f64 = rm.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] += all - rm[i] - rm[j];
                }
            }
            k
        };
        let (k, l) = (gram(x), gram(y));
        let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    #[test]
    fn feature_form_matches_gram_form() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor(&[60, 5], 1.0);
        let mut y = rng.normal_tensor(&[60, 9], 1.0);
        for i in 0..60 {
            let v = y.get(&[i, 0]) + 2.0 * x.get(&[i, 1]);
            y.set(&[i, 0], v);
        }
        assert!((linear_cka(&x, &y).unwrap() - gram_cka(&x, &y)).abs() < 1e-6);
    }

    #[test]
    fn independent_gaussians_fall_below_null_threshold() {
        // Null level from independent draws, scored with the Gram form.
        let mut rng = Rng::new(5);
        let draws: Vec<f64> = (0..10)
            .map(|_| {
                gram_cka(
                    &rng.normal_tensor(&[256, 32], 1.0),
                    &rng.normal_tensor(&[256, 32], 1.0),
                )
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64)
            .sqrt();
        let threshold = mean + 5.0 * sd;
        let x = rng.normal_tensor(&[256, 32], 1.0);
        let y = rng.normal_tensor(&[256, 32], 1.0);
        assert!(linear_cka(&x, &y).unwrap() < threshold);
    }

    #[test]
    fn stream_matrices_are_symmetric() {
        let mut rng = Rng::new(6);
        let states: Vec<Tensor> = (0..3)
            .map(|_| rng.normal_tensor(&[40, 3, 4], 1.0))
            .collect();
        let samples = StreamSamples::from_states(&states).unwrap();
        for l in 0..3 {
            let m = stream_cka(&samples, l).unwrap();
            for i in 0..3 {
                assert!((m[i][i] - 1.0).abs() < 1e-9);
                for j in 0..3 {
                    assert_eq!(m[i][j], m[j][i]);
                }
            }
        }
        let inter = interlayer_cka(&samples).unwrap();
        assert_eq!(inter.len(), 3);
        assert!((inter[1][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn report_csv_matches_json() {
        let mut rng = Rng::new(7);
        let states: Vec<Tensor> = (0..2)
            .map(|_| rng.normal_tensor(&[30, 2, 3], 1.0))
            .collect();
        let report = CkaReport::compute(&StreamSamples::from_states(&states).unwrap(), 0).unwrap();
        let csv = report.within_csv();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (l, i, j): (usize, usize, usize) = (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            );
            let v: f64 = f[3].parse().unwrap();
            assert_eq!(v, report.within_layer[l][i][j]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cka_in_unit_interval(seed in 0u64..10_000, dx in 1usize..6, dy in 1usize..6) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(&[20, dx], 1.0);
            let y = rng.normal_tensor(&[20, dy], 1.0);
            let v = linear_cka(&x, &y).unwrap();
            prop_assert!((0.0..=1.0 + 1e-6).contains(&v));
        }

        #[test]
        fn orthogonal_invariance(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(&[30, 6], 1.0);
            let y = rng.normal_tensor(&[30, 4], 1.0);
            let q = orthogonal(6, &mut rng);
            let xq = crate::numerics::ops::matmul(&x, &q).unwrap();
            prop_assert!((linear_cka(&xq, &y).unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-5);
        }
    }
}
