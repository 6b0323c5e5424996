//! Acceptance criteria as functions returning a one-line summary, shared by
//! the acceptance runner and the ordinary integration tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mhc_core::interventions::{
    clean_runs, intervention_kl, recovery_ratio, rescue_asymmetry, rescue_matrix, CleanRun,
    InterventionSpec,
};
use mhc_core::model::{Model, ModelConfig};
use mhc_core::numerics::{derive_seed, Rng, Tensor};
use mhc_core::routing::sinkhorn_project;
use mhc_core::similarity::{linear_cka, sample_streams, stream_cka};
use mhc_core::training::{synthetic_corpus, Corpus};
use serde_json::Value;

use super::{
    byte_entropy, mean_cross_entropy, perturb, random_tokens, small_config, stream_logits,
    vanilla_logits, RefParams,
};

pub type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

pub fn sinkhorn_constraint() -> Outcome {
    let mut rng = Rng::new(101);
    let (mut worst_sum, mut worst_idem, mut in_range) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let m = Tensor::from_fn(&[4, 4], |_| rng.normal().exp() as f32);
        let p = sinkhorn_project(&m, 200, 1e-6)
            .map_err(|e| e.to_string())?
            .matrix;
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| f64::from(p.get(&[i, j]))).sum();
            let col: f64 = (0..4).map(|j| f64::from(p.get(&[j, i]))).sum();
            worst_sum = worst_sum.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        in_range &= p.data().iter().all(|v| (0.0..=1.0).contains(v));
        let again = sinkhorn_project(&p, 200, 1e-6)
            .map_err(|e| e.to_string())?
            .matrix;
        worst_idem = worst_idem.max(f64::from(again.max_abs_diff(&p)));
    }
    check(
        worst_sum <= 1e-4 && worst_idem <= 1e-6 && in_range,
        format!("max marginal error {worst_sum:.2e}, max idempotence gap {worst_idem:.2e}, entries in [0,1]: {in_range}"),
    )
}

// ---------------------------------------------------------------- 2

pub fn degeneration() -> Outcome {
    let mut model = Model::new(ModelConfig {
        streams: 1,
        seed: 202,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    perturb(&mut model, 0.05, 203);
    let p = RefParams::from_model(&model);
    let mut rng = Rng::new(204);
    let mut worst = 0.0f64;
    for _ in 0..32 {
        let len = 1 + rng.below(48);
        let tokens = random_tokens(&mut rng, len, 256);
        let (logits, _) = model.forward(&tokens, false).map_err(|e| e.to_string())?;
        for (t, row) in vanilla_logits(&p, &tokens).iter().enumerate() {
            for (k, &r) in row.iter().enumerate() {
                worst = worst.max((f64::from(logits.get(&[t, k])) - r).abs());
            }
        }
    }
    check(
        worst <= 1e-5,
        format!("max |logit difference| over 32 prompts {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

/// Gradients below this magnitude would be compared absolutely; at the
/// tested size no sampled gradient is that small.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

pub struct GradCheck {
    pub checked: usize,
    pub trainable: usize,
    pub max_rel: f64,
}

/// Autograd gradients against central differences of the f64 reference loss.
pub fn gradient_check(model: &Model, tokens: &[usize], samples: usize, seed: u64) -> GradCheck {
    let (inputs, targets) = (&tokens[..tokens.len() - 1], &tokens[1..]);
    let (_, grads) = model.loss_and_grads(inputs, targets).unwrap();
    let base = RefParams::from_model(model);
    let mut flat = Vec::new();
    for (id, g) in &grads {
        let name = &model.params().entry(*id).name;
        for (k, &v) in g.data().iter().enumerate() {
            flat.push((name.clone(), k, f64::from(v)));
        }
    }
    let mut rng = Rng::new(seed);
    let picks = rng.sample_indices(flat.len(), samples);
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for &i in &picks {
        let (name, k, analytic) = &flat[i];
        let loss_at = |delta: f64| {
            let mut p = base.clone();
            p.get_mut(name)[*k] += delta;
            mean_cross_entropy(&stream_logits(&p, inputs), targets)
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let rel =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    GradCheck {
        checked: picks.len(),
        trainable: flat.len(),
        max_rel,
    }
}

pub fn gradient_model(seed: u64) -> Model {
    let mut model = Model::new(ModelConfig {
        routing_init_noise: 0.3,
        // Run every Sinkhorn iteration so the loss is a smooth function.
        sinkhorn_tol: 1e-12,
        ..small_config(2, 2, seed)
    })
    .unwrap();
    perturb(&mut model, 0.3, seed + 1);
    model
}

pub fn gradient_fidelity() -> Outcome {
    let model = gradient_model(301);
    let tokens = random_tokens(&mut Rng::new(302), 9, 256);
    let g = gradient_check(&model, &tokens, 300, 303);
    check(
        g.checked >= 200 && g.max_rel < 1e-3,
        format!(
            "{} of {} parameters, max relative error {:.2e}",
            g.checked, g.trainable, g.max_rel
        ),
    )
}

// ---------------------------------------------------------------- 4

pub struct LossCurve {
    pub train: Vec<(usize, f64)>,
    pub heldout: Vec<(usize, f64)>,
}

pub fn read_loss_csv(path: &Path) -> Result<LossCurve, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut curve = LossCurve {
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let point = (
            f[0].parse().map_err(|_| line.to_string())?,
            f[2].parse().map_err(|_| line.to_string())?,
        );
        match f[1] {
            "train" => curve.train.push(point),
            "heldout" => curve.heldout.push(point),
            other => return Err(format!("unknown split {other}")),
        }
    }
    Ok(curve)
}

/// Train the default toy model on the default synthetic corpus through the
/// command-line entry point.
pub fn train_toy(out: &Path, seed: u64) -> Result<(), String> {
    let code = mhc_core::cli::run([
        "mhc",
        "train",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
    ]);
    check(code == 0, format!("train exited with {code}")).map(|_| ())
}

pub fn training_signal(out: &Path, seed: u64) -> Outcome {
    let curve = read_loss_csv(&out.join("loss.csv"))?;
    let text = synthetic_corpus(
        mhc_core::cli::DEFAULT_SYNTHETIC_BYTES,
        derive_seed(seed, "corpus"),
    );
    let entropy = byte_entropy(&text);
    let start = curve.train.first().ok_or("empty loss curve")?;
    let (last_step, last) = *curve.heldout.last().ok_or("no held-out loss")?;
    let ln256 = 256f64.ln();
    check(
        start.0 == 0 && (start.1 - ln256).abs() <= 0.05 && last < entropy && last_step <= 2000,
        format!(
            "step-0 loss {:.4} (ln 256 = {ln256:.4}), held-out loss {last:.4} at step {last_step} vs unigram entropy {entropy:.4}",
            start.1
        ),
    )
}

// ---------------------------------------------------------------- 5

/// CKA through the centered Gram matrices `HKH` and `HLH` of the linear kernels.
pub fn gram_cka(x: &Tensor, y: &Tensor) -> f64 {
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
        let row_mean: Vec<f64> = (0..n)
            .map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let all = row_mean.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] += all - row_mean[i] - row_mean[j];
            }
        }
        k
    };
    let (k, l) = (gram(x), gram(y));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    dot(&k, &l) / (dot(&k, &k) * dot(&l, &l)).sqrt()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut Rng, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_fn(&[d, d], |k| cols[k % d][k / d] as f32)
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k)
            .map(|p| f64::from(a.get(&[i, p])) * f64::from(b.get(&[p, j])))
            .sum::<f64>() as f32
    })
}

pub fn cka_properties() -> Outcome {
    let mut rng = Rng::new(501);
    let (n, d) = (256, 16);
    let x = rng.normal_tensor(&[n, d], 1.0);
    let z = rng.normal_tensor(&[n, d], 1.0).map(|v| v * v);
    let cka = |a: &Tensor, b: &Tensor| linear_cka(a, b).map_err(|e| e.to_string());

    let self_err = (cka(&x, &x)? - 1.0).abs();
    let q = random_orthogonal(&mut rng, d);
    let xq = matmul(&x, &q).map(|v| 3.7 * v);
    let invariance = (cka(&xq, &z)? - cka(&x, &z)?)
        .abs()
        .max((cka(&x, &xq)? - 1.0).abs());

    // Null distribution of independent Gaussian features, via the Gram oracle.
    let null: Vec<f64> = (0..200)
        .map(|_| {
            gram_cka(
                &rng.normal_tensor(&[n, d], 1.0),
                &rng.normal_tensor(&[n, d], 1.0),
            )
        })
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd =
        (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    let threshold = mean + 5.0 * sd;
    let mut worst_null = 0.0f64;
    for _ in 0..20 {
        let v = cka(
            &rng.normal_tensor(&[n, d], 1.0),
            &rng.normal_tensor(&[n, d], 1.0),
        )?;
        worst_null = worst_null.max(v);
    }

    let model = Model::new(ModelConfig {
        context: 32,
        seed: 502,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let corpus =
        Corpus::from_text(&synthetic_corpus(40_000, 503), 0.1, 504).map_err(|e| e.to_string())?;
    let samples = sample_streams(&model, &corpus, 512, 505).map_err(|e| e.to_string())?;
    let layer0 = stream_cka(&samples, 0).map_err(|e| e.to_string())?;
    let ones_err = layer0
        .iter()
        .flatten()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);

    check(
        self_err <= 1e-6 && invariance <= 1e-5 && worst_null < threshold && ones_err <= 1e-6,
        format!(
            "self {self_err:.1e}, invariance {invariance:.1e}, null max {worst_null:.4} < {threshold:.4}, layer-0 ones {ones_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Small model with enlarged weights so interventions visibly move the logits.
pub fn loud_model(streams: usize, seed: u64) -> Model {
    let mut model = Model::new(ModelConfig {
        layers: 3,
        routing_init_noise: 0.5,
        context: 16,
        ..small_config(3, streams, seed)
    })
    .unwrap();
    perturb(&mut model, 0.3, seed + 1);
    model
}

pub fn prompts(model: &Model, count: usize, seed: u64) -> Vec<CleanRun> {
    let mut rng = Rng::new(seed);
    let cfg = model.config();
    let prompts: Vec<Vec<usize>> = (0..count)
        .map(|_| random_tokens(&mut rng, cfg.context, cfg.vocab))
        .collect();
    clean_runs(model, &prompts).unwrap()
}

pub fn rescue_identities() -> Outcome {
    let model = loud_model(4, 601);
    let runs = prompts(&model, 4, 602);
    let mut worst_full = 0.0f64;
    let mut all_hold = true;
    for layer in 0..model.config().layers {
        for (i, j) in [(0, 1), (1, 3), (2, 0)] {
            let kl = |rescue: &[usize]| {
                intervention_kl(
                    &model,
                    &runs,
                    &InterventionSpec::ablate(layer, &[i, j], rescue),
                )
                .map_err(|e| e.to_string())
            };
            let ablation = kl(&[])?;
            let full = kl(&[i, j])?;
            let nothing = kl(&[])?;
            worst_full = worst_full.max(full);
            all_hold &= ablation > 1e-9
                && full == 0.0
                && recovery_ratio(ablation, full) == Some(1.0)
                && recovery_ratio(ablation, nothing) == Some(0.0);
        }
    }
    let hand = recovery_ratio(2.0, 0.5);
    check(
        all_hold && hand == Some(0.75),
        format!("full-restoration KL max {worst_full:e}, identities hold: {all_hold}, recovery(2.0, 0.5) = {hand:?}"),
    )
}

// ---------------------------------------------------------------- 7

fn set(model: &mut Model, name: &str, f: impl Fn(&mut Tensor)) {
    f(model.params_mut().by_name_mut(name).unwrap());
}

/// Streams 0 and 1 are exchangeable: routing is invariant under swapping them,
/// so they carry identical copies at every depth.
pub fn tied_copy_model(seed: u64) -> Model {
    let mut model = loud_model(4, seed);
    let swap = |i: usize| match i {
        0 => 1,
        1 => 0,
        k => k,
    };
    for l in 0..model.config().layers {
        set(&mut model, &format!("blocks.{l}.routing.res_logits"), |t| {
            let old = t.clone();
            for i in 0..4 {
                for j in 0..4 {
                    t.set(
                        &[i, j],
                        0.5 * (old.get(&[i, j]) + old.get(&[swap(i), swap(j)])),
                    );
                }
            }
        });
        for w in ["pre_weights", "post_weights"] {
            set(&mut model, &format!("blocks.{l}.routing.{w}"), |t| {
                let m = 0.5 * (t.data()[0] + t.data()[1]);
                t.data_mut()[0] = m;
                t.data_mut()[1] = m;
            });
        }
    }
    model
}

/// Stream `dead` neither feeds the layer input, nor mixes into other streams,
/// nor reaches the output.
pub fn dead_stream_model(seed: u64, dead: usize) -> Model {
    let mut model = loud_model(4, seed);
    for l in 0..model.config().layers {
        set(&mut model, &format!("blocks.{l}.routing.res_logits"), |t| {
            for j in 0..4 {
                if j != dead {
                    t.set(&[dead, j], -40.0);
                    t.set(&[j, dead], -40.0);
                }
            }
        });
        set(
            &mut model,
            &format!("blocks.{l}.routing.pre_weights"),
            |t| t.data_mut()[dead] = 0.0,
        );
    }
    set(&mut model, "collapse.weights", |t| t.data_mut()[dead] = 0.0);
    model
}

pub fn engineered_oracles() -> Outcome {
    let tied = tied_copy_model(701);
    let runs = prompts(&tied, 4, 702);
    let layers: Vec<usize> = (0..tied.config().layers).collect();
    let report = rescue_matrix(&tied, &runs, &layers, &[[0, 1], [2, 3]], false)
        .map_err(|e| e.to_string())?;
    let tied_asym = rescue_asymmetry(&report, 0, 1).map_err(|e| e.to_string())?;
    let worst_tied = tied_asym
        .per_layer
        .iter()
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let tied_ok = tied_asym.per_layer.len() == layers.len() && worst_tied < 0.02;

    let dead = 3;
    let model = dead_stream_model(703, dead);
    let runs = prompts(&model, 4, 704);
    let (mut worst_kl, mut worst_dead_rec, mut min_live_rec) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut defined = true;
    for layer in layers {
        let kl = intervention_kl(
            &model,
            &runs,
            &InterventionSpec::ablate(layer, &[dead], &[]),
        )
        .map_err(|e| e.to_string())?;
        worst_kl = worst_kl.max(kl);
        for live in 0..3 {
            let pair = rescue_matrix(&model, &runs, &[layer], &[[live, dead]], false)
                .map_err(|e| e.to_string())?;
            let m = pair.matrix(0);
            match (m[live][dead], m[dead][live]) {
                (Some(dead_rescues), Some(live_rescues)) => {
                    worst_dead_rec = worst_dead_rec.max(dead_rescues.abs());
                    min_live_rec = min_live_rec.min(live_rescues);
                }
                _ => defined = false,
            }
        }
    }
    check(
        tied_ok && defined && worst_kl < 1e-6 && worst_dead_rec < 0.01,
        format!(
            "tied |asymmetry| max {worst_tied:.2e}; dead-stream ablation KL max {worst_kl:.1e}, dead rescuer |recovery| max {worst_dead_rec:.1e}, live rescuer recovery min {min_live_rec:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 8

pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        files.insert(
            entry.file_name().to_string_lossy().into_owned(),
            fs::read(entry.path()).unwrap(),
        );
    }
    files
}

pub fn run_report(checkpoint: &Path, out: &Path, seed: u64, extra: &[&str]) -> Result<(), String> {
    let seed = seed.to_string();
    let mut args = vec![
        "mhc",
        "report",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed,
    ];
    args.extend_from_slice(extra);
    let code = mhc_core::cli::run(args);
    check(code == 0, format!("report exited with {code}")).map(|_| ())
}

fn json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// Check the layout of a report directory for a model with `layers` and `streams`.
pub fn report_layout(dir: &Path, layers: usize, streams: usize) -> Outcome {
    let rescue = json(&dir.join("rescue_matrix.json"))?;
    let mean = rescue["mean"].as_array().ok_or("rescue mean missing")?;
    let mut grid = vec![vec![false; streams]; streams];
    for e in mean {
        let (a, r) = (
            e["ablated"].as_u64().unwrap() as usize,
            e["rescued"].as_u64().unwrap() as usize,
        );
        grid[a][r] = e["recovery"].is_number();
    }
    let off_diagonal_defined = (0..streams).all(|i| (0..streams).all(|j| (i == j) != grid[i][j]));
    let diagonal_absent = mean.len() == streams * (streams - 1);

    let patch = fs::read_to_string(dir.join("patch_heatmap.csv")).map_err(|e| e.to_string())?;
    let patch_rows = patch.lines().count() - 1;

    let cka = json(&dir.join("cka.json"))?;
    let within = cka["within_layer"]
        .as_array()
        .ok_or("within_layer missing")?;
    let cka_shapes = within.len() == layers + 1
        && within.iter().all(|m| {
            m.as_array().unwrap().len() == streams && m[0].as_array().unwrap().len() == streams
        });

    let stats = fs::read_to_string(dir.join("routing_stats.csv")).map_err(|e| e.to_string())?;
    let stat_rows = stats.lines().count() - 1;

    check(
        off_diagonal_defined && diagonal_absent && patch_rows == layers * streams && cka_shapes && stat_rows == layers,
        format!(
            "{streams}x{streams} mean rescue (diagonal undefined: {diagonal_absent}, off-diagonal defined: {off_diagonal_defined}), {patch_rows} patch rows, {} CKA matrices, {stat_rows} routing rows",
            within.len()
        ),
    )
}

pub fn structural_reproduction(checkpoint: &Path, out: &Path, seed: u64) -> Outcome {
    run_report(checkpoint, out, seed, &[])?;
    let first = snapshot(out);
    let layout = report_layout(out, 4, 4)?;
    run_report(checkpoint, out, seed, &[])?;
    let second = snapshot(out);
    check(
        first == second,
        format!(
            "{layout}; {} files byte-identical on rerun: {}",
            first.len(),
            first == second
        ),
    )
}
