//! Causal experiments on the stream state: counterfactual patching and
//! ablation with rescue.
//!
//! Every intervened pass edits the state entering a single layer, replays the
//! routing recorded in the clean pass, and resumes from that layer.

mod pairs;
mod patch;
mod rescue;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use pairs::{build_str_pairs, PromptPair};
pub use patch::{patch_csv, patch_heatmap};
pub use rescue::{
    asymmetry_csv, rescue_asymmetry, rescue_matrix, AsymmetrySeries, RescueEntry, RescueLayer,
    RescueReport,
};

use crate::error::{Error, Result};
use crate::model::{mean_token_kl, ActivationCache, Model, StreamState};
use crate::numerics::Tensor;

/// Below this ablation KL, recovery is undefined.
pub const RECOVERY_EPS: f64 = 1e-9;

/// What happens to the state entering the chosen layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Edit {
    /// Zero the `ablate` streams at every position, then restore the
    /// `rescue` streams from the clean cache.
    Ablate {
        ablate: Vec<usize>,
        rescue: Vec<usize>,
    },
    /// Overwrite `stream` at `positions` with the source run's residual.
    Patch {
        stream: usize,
        positions: Range<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSpec {
    pub layer: usize,
    pub edit: Edit,
}

impl InterventionSpec {
    pub fn ablate(layer: usize, ablate: &[usize], rescue: &[usize]) -> Self {
        Self {
            layer,
            edit: Edit::Ablate {
                ablate: ablate.to_vec(),
                rescue: rescue.to_vec(),
            },
        }
    }

    pub fn patch(layer: usize, stream: usize, positions: Range<usize>) -> Self {
        Self {
            layer,
            edit: Edit::Patch { stream, positions },
        }
    }

    fn validate(&self, layers: usize, streams: usize, tokens: usize) -> Result<()> {
        if self.layer >= layers {
            return Err(Error::Contract(format!(
                "layer {} out of range 0..{layers}",
                self.layer
            )));
        }
        let check_stream = |s: usize| {
            if s >= streams {
                Err(Error::Contract(format!(
                    "stream {s} out of range 0..{streams}"
                )))
            } else {
                Ok(())
            }
        };
        match &self.edit {
            Edit::Ablate { ablate, rescue } => {
                ablate.iter().try_for_each(|&s| check_stream(s))?;
                if let Some(r) = rescue.iter().find(|r| !ablate.contains(r)) {
                    return Err(Error::Contract(format!(
                        "rescued stream {r} is not in the ablated set"
                    )));
                }
            }
            Edit::Patch { stream, positions } => {
                check_stream(*stream)?;
                if positions.is_empty() || positions.end > tokens {
                    return Err(Error::Contract(format!(
                        "patch positions {positions:?} invalid for {tokens} tokens"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A prompt with its clean-pass cache.
#[derive(Clone, Debug)]
pub struct CleanRun {
    pub tokens: Vec<usize>,
    pub cache: ActivationCache,
}

impl CleanRun {
    pub fn new(model: &Model, tokens: &[usize]) -> Result<Self> {
        let (_, cache) = model.forward(tokens, true)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            cache: cache.expect("cache requested"),
        })
    }
}

pub fn clean_runs(model: &Model, prompts: &[Vec<usize>]) -> Result<Vec<CleanRun>> {
    prompts.iter().map(|p| CleanRun::new(model, p)).collect()
}

/// Logits of the intervened pass. `source` is the clean run of the
/// counterfactual prompt and is required for patching.
pub fn run_intervened(
    model: &Model,
    clean: &CleanRun,
    spec: &InterventionSpec,
    source: Option<&CleanRun>,
) -> Result<Tensor> {
    let cfg = model.config();
    let cache = &clean.cache;
    if cache.first_layer != 0 || cache.routing.len() != cfg.layers {
        return Err(Error::Contract(
            "intervention needs a full clean-pass cache".into(),
        ));
    }
    spec.validate(cfg.layers, cfg.streams, clean.tokens.len())?;
    let entering = cache
        .residual(spec.layer)
        .ok_or_else(|| Error::Contract(format!("no cached state for layer {}", spec.layer)))?;
    let mut state = entering.clone();
    match &spec.edit {
        Edit::Ablate { ablate, rescue } => {
            for t in 0..state.tokens() {
                for &s in ablate {
                    if !rescue.contains(&s) {
                        state.stream_mut(t, s).fill(0.0);
                    }
                }
            }
        }
        Edit::Patch { stream, positions } => {
            let source =
                source.ok_or_else(|| Error::Contract("patching needs a source cache".into()))?;
            let src: &StreamState = source
                .cache
                .residual(spec.layer)
                .ok_or_else(|| Error::Contract("source cache lacks the patched layer".into()))?;
            if src.tokens() != state.tokens() {
                return Err(Error::Contract(format!(
                    "source has {} tokens, target has {}",
                    src.tokens(),
                    state.tokens()
                )));
            }
            for t in positions.clone() {
                state
                    .stream_mut(t, *stream)
                    .copy_from_slice(src.stream(t, *stream));
            }
        }
    }
    let out = model.forward_from(&clean.tokens, spec.layer, &state, &cache.routing)?;
    Ok(out.logits)
}

/// Mean over prompts and token positions of `KL(clean ‖ intervened)`.
pub fn intervention_kl(model: &Model, runs: &[CleanRun], spec: &InterventionSpec) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Input("no prompts".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for run in runs {
        let logits = run_intervened(model, run, spec, None)?;
        let positions = run.tokens.len();
        total += mean_token_kl(&run.cache.logits, &logits) * positions as f64;
        count += positions;
    }
    Ok(total / count as f64)
}

/// `L(−i,−j)`: KL after zeroing streams `i` and `j` entering `layer`.
pub fn ablation_kl(
    model: &Model,
    runs: &[CleanRun],
    layer: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    if i == j {
        return Err(Error::Contract(format!(
            "ablated streams must differ, got {i} twice"
        )));
    }
    intervention_kl(model, runs, &InterventionSpec::ablate(layer, &[i, j], &[]))
}

/// `L(+i,−j)`: KL after zeroing both streams and restoring `i`.
pub fn rescue_kl(
    model: &Model,
    runs: &[CleanRun],
    layer: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    if i == j {
        return Err(Error::Contract(format!(
            "rescued and ablated streams must differ, got {i}"
        )));
    }
    intervention_kl(model, runs, &InterventionSpec::ablate(layer, &[i, j], &[i]))
}

/// `1 − L(+i,−j) / L(−i,−j)`, or `None` when the ablation had no effect.
pub fn recovery_ratio(ablation_kl: f64, rescue_kl: f64) -> Option<f64> {
    (ablation_kl > RECOVERY_EPS).then(|| 1.0 - rescue_kl / ablation_kl)
}

/// Fraction of the `{i, j}` ablation's KL removed by restoring `i`.
pub fn recovery(
    model: &Model,
    runs: &[CleanRun],
    layer: usize,
    i: usize,
    j: usize,
) -> Result<Option<f64>> {
    let abl = ablation_kl(model, runs, layer, i, j)?;
    let res = rescue_kl(model, runs, layer, i, j)?;
    Ok(recovery_ratio(abl, res))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Ablate each pair, rescue one stream.
    Ablate,
    /// Ablate each pair, rescue both (a replay check: recovery is 1).
    FullRescue,
    /// Counterfactual patching from STR prompt pairs.
    Patch,
    /// Patching with each prompt as its own source (effects are 0).
    SelfPatch,
}

/// Experiment description read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Layers to intervene at; all layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Unordered stream pairs; all pairs when absent.
    #[serde(default)]
    pub stream_pairs: Option<Vec<[usize; 2]>>,
    pub prompt_count: usize,
    #[serde(default)]
    pub seed: u64,
    pub mode: ExperimentMode,
}

impl ExperimentSpec {
    pub fn validate(&self, layers: usize, streams: usize) -> Result<()> {
        if self.prompt_count == 0 {
            return Err(Error::Input("spec.prompt_count: must be >= 1".into()));
        }
        if let Some(ls) = &self.layers {
            if ls.is_empty() {
                return Err(Error::Input("spec.layers: must not be empty".into()));
            }
            if let Some(l) = ls.iter().find(|&&l| l >= layers) {
                return Err(Error::Input(format!(
                    "spec.layers: layer {l} out of range 0..{layers}"
                )));
            }
        }
        if let Some(ps) = &self.stream_pairs {
            for &[a, b] in ps {
                if a == b || a >= streams || b >= streams {
                    return Err(Error::Input(format!(
                        "spec.stream_pairs: [{a}, {b}] is not a pair of distinct streams in 0..{streams}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layer_list(&self, layers: usize) -> Vec<usize> {
        self.layers.clone().unwrap_or_else(|| (0..layers).collect())
    }

    pub fn pair_list(&self, streams: usize) -> Vec<[usize; 2]> {
        self.stream_pairs.clone().unwrap_or_else(|| {
            let mut out = Vec::new();
            for a in 0..streams {
                for b in a + 1..streams {
                    out.push([a, b]);
                }
            }
            out
        })
    }
}
