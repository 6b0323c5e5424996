use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{DEFAULT_SINKHORN_ITERS, DEFAULT_SINKHORN_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// One set of mixing matrices per layer, independent of the input.
    #[default]
    Static,
    /// Logits offset per token by a learned linear map of the stream mean.
    Dynamic,
}

/// Architecture hyperparameters.
/// Missing fields in JSON take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub streams: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub context: usize,
    #[serde(default)]
    pub routing_mode: RoutingMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sinkhorn_iters")]
    pub sinkhorn_iters: usize,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f32,
    /// Std of the Gaussian jitter added to routing parameters at
    /// initialization when `streams > 1`, so streams are not exchangeable.
    #[serde(default = "default_routing_noise")]
    pub routing_init_noise: f32,
}

fn default_sinkhorn_iters() -> usize {
    DEFAULT_SINKHORN_ITERS
}

fn default_sinkhorn_tol() -> f32 {
    DEFAULT_SINKHORN_TOL
}

fn default_routing_noise() -> f32 {
    0.05
}

impl Default for ModelConfig {
    /// Desk-scale toy configuration.
    fn default() -> Self {
        Self {
            layers: 4,
            streams: 4,
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            vocab: 256,
            context: 128,
            routing_mode: RoutingMode::Static,
            seed: 0,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            sinkhorn_tol: DEFAULT_SINKHORN_TOL,
            routing_init_noise: default_routing_noise(),
        }
    }
}

impl ModelConfig {
    /// Reference scale of the published 781M-parameter model.
    pub fn reference() -> Self {
        Self {
            layers: 36,
            streams: 4,
            model_dim: 1280,
            heads: 20,
            head_dim: 64,
            vocab: 50304,
            context: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Input(format!("model.{field}: {why}")));
        if self.layers == 0 {
            return bad("layers", "must be >= 1".into());
        }
        if self.streams == 0 {
            return bad("streams", "must be >= 1".into());
        }
        if self.heads == 0 || self.heads * self.head_dim != self.model_dim {
            return bad(
                "heads",
                format!(
                    "heads ({}) x head_dim ({}) must equal model_dim ({})",
                    self.heads, self.head_dim, self.model_dim
                ),
            );
        }
        if self.model_dim < 2 {
            return bad("model_dim", "must be >= 2".into());
        }
        if self.vocab == 0 {
            return bad("vocab", "must be >= 1".into());
        }
        if self.context < 2 {
            return bad("context", "must be >= 2".into());
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters", "must be >= 1".into());
        }
        if !(self.sinkhorn_tol > 0.0) {
            return bad("sinkhorn_tol", "must be > 0".into());
        }
        if !(self.routing_init_noise >= 0.0) {
            return bad("routing_init_noise", "must be >= 0".into());
        }
        Ok(())
    }
}
