//! Next-token training: learning-rate schedule, gradient clipping, AdamW and
//! the training loop over a byte-level corpus.

pub mod corpus;
mod optim;

use serde::{Deserialize, Serialize};

pub use corpus::{synthetic_corpus, unigram_entropy, Corpus, Split, TemplateSet};
pub use optim::AdamW;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{derive_seed, ParamId, Rng, Tensor};

/// Missing fields in JSON take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Tokens per optimizer step; split into windows of the model context.
    pub batch_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between loss evaluations.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Fixed windows per split used for each evaluation.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
}

fn default_eval_interval() -> usize {
    100
}

fn default_eval_windows() -> usize {
    8
}

fn default_heldout_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-4,
            lr_min: 3e-5,
            warmup_steps: 200,
            total_steps: 2000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            clip_norm: 1.0,
            batch_tokens: 8 * 128,
            seed: 0,
            eval_interval: default_eval_interval(),
            eval_windows: default_eval_windows(),
            heldout_fraction: default_heldout_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Input(format!("train.{field}: {why}")));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("lr_min", "must satisfy 0 < lr_min <= lr_max");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps", "must be < total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be > 0");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens", "must be >= 1");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be >= 1");
        }
        if self.eval_windows == 0 {
            return bad("eval_windows", "must be >= 1");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction", "must be in (0, 1)");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min` at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside schedule 0..={}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let cos = (std::f64::consts::PI * progress).cos();
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + cos))
}

/// Scale every gradient by `clip_norm / g` when the global L2 norm `g`
/// exceeds `clip_norm`. Returns `g`.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > clip_norm {
        let factor = (clip_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

/// Loss curve as CSV with header `step,split,loss`.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,split,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.split.name(), r.loss));
    }
    out
}

/// Mean next-token loss over `windows` (each `T + 1` tokens long).
pub fn mean_loss(model: &Model, windows: &[&[usize]]) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        total += f64::from(model.loss(&w[..w.len() - 1], &w[1..])?);
    }
    Ok(total / windows.len() as f64)
}

/// Mean loss and averaged gradients over a batch of windows.
pub fn batch_gradients(
    model: &Model,
    windows: &[&[usize]],
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut loss = 0.0;
    let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
    for w in windows {
        let (l, grads) = model.loss_and_grads(&w[..w.len() - 1], &w[1..])?;
        loss += f64::from(l);
        if acc.is_empty() {
            acc = grads;
        } else {
            for ((ia, a), (ib, b)) in acc.iter_mut().zip(&grads) {
                debug_assert_eq!(ia, ib);
                a.add_assign(b)?;
            }
        }
    }
    let scale = 1.0 / windows.len() as f32;
    for (_, g) in &mut acc {
        g.scale_in_place(scale);
    }
    Ok((loss / windows.len() as f64, acc))
}

/// One optimizer update at an explicit learning rate: clip, then AdamW.
pub fn apply_update(
    model: &mut Model,
    opt: &mut AdamW,
    grads: Vec<(ParamId, Tensor)>,
    lr: f64,
    clip_norm: f64,
) -> f64 {
    let (ids, mut tensors): (Vec<ParamId>, Vec<Tensor>) = grads.into_iter().unzip();
    let norm = clip_gradients(&mut tensors, clip_norm);
    let grads: Vec<(ParamId, Tensor)> = ids.into_iter().zip(tensors).collect();
    opt.step(model.params_mut(), &grads, lr);
    norm
}

/// Train `model` in place for `cfg.total_steps` steps on random windows of the
/// train split, evaluating both splits every `cfg.eval_interval` steps and at
/// the end. `progress` sees each record as it is produced.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let context = model.config().context;
    if corpus.len() < 100 * context {
        return Err(Error::Input(format!(
            "corpus has {} tokens; training needs at least 100 x context = {}",
            corpus.len(),
            100 * context
        )));
    }
    let window = context + 1;
    let per_batch = (cfg.batch_tokens / context).max(1);
    let eval_sets = [Split::Train, Split::Heldout]
        .map(|s| (s, corpus.fixed_windows(s, window, cfg.eval_windows)));
    if eval_sets.iter().any(|(_, w)| w.is_empty()) {
        return Err(Error::Input(format!(
            "corpus splits cannot hold a {window}-token window"
        )));
    }
    let mut rng = Rng::new(derive_seed(cfg.seed, "train"));
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut records = Vec::new();
    let mut evaluate = |model: &Model, step: usize, records: &mut Vec<LossRecord>| -> Result<()> {
        for (split, windows) in &eval_sets {
            let loss = mean_loss(model, windows)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} loss is {loss} at step {step}",
                    split.name()
                )));
            }
            let rec = LossRecord {
                step,
                split: *split,
                loss,
            };
            progress(&rec);
            records.push(rec);
        }
        Ok(())
    };

    for step in 0..cfg.total_steps {
        if step % cfg.eval_interval == 0 {
            evaluate(model, step, &mut records)?;
        }
        let batch = (0..per_batch)
            .map(|_| corpus.sample_window(Split::Train, window, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss is {loss} at step {step}"
            )));
        }
        apply_update(model, &mut opt, grads, lr_at(step + 1, cfg)?, cfg.clip_norm);
    }
    evaluate(model, cfg.total_steps, &mut records)?;
    Ok(records)
}
