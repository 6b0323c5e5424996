//! The hyper-connected transformer: embeddings, stream expansion, `L` mixing
//! blocks around a GPT-2 style layer function, stream collapse and a tied
//! unembedding.

pub mod checkpoint;
mod config;
mod params;
pub mod streams;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, RoutingMode};
pub use params::{ParamEntry, ParamStore};
pub use streams::{block_forward, collapse, expand, StreamState};

use crate::error::{Error, Result};
use crate::numerics::ops::log_softmax_f64;
use crate::numerics::{Graph, ParamId, Rng, Tensor, Var};
use crate::routing::{sinkhorn_on, RealizedRouting, RoutingParams};

/// Everything recorded from one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationCache {
    /// Layer index of `residuals[0]` (0 for a full pass).
    pub first_layer: usize,
    /// Stream state entering each layer, then the pre-collapse state.
    pub residuals: Vec<StreamState>,
    /// Routing used by each layer from `first_layer` on.
    pub routing: Vec<RealizedRouting>,
    pub logits: Tensor,
}

impl ActivationCache {
    /// State entering layer `layer` (`layer == L` is the pre-collapse state).
    pub fn residual(&self, layer: usize) -> Option<&StreamState> {
        layer
            .checked_sub(self.first_layer)
            .and_then(|i| self.residuals.get(i))
    }

    pub fn routing_at(&self, layer: usize) -> Option<&RealizedRouting> {
        layer
            .checked_sub(self.first_layer)
            .and_then(|i| self.routing.get(i))
    }
}

/// Rewrites a stream state in place.
pub type StateEdit<'r> = &'r dyn Fn(&mut StreamState);

/// Knobs for a non-standard forward pass.
#[derive(Default)]
pub struct RunOptions<'r> {
    /// Begin at this layer from the given stream state (embedding and earlier
    /// layers are skipped).
    pub start: Option<(usize, &'r StreamState)>,
    /// Per-layer routing to use instead of recomputing it (length `L`).
    pub frozen_routing: Option<&'r [RealizedRouting]>,
    /// Rewrite the stream state entering one layer before that layer runs.
    pub edit: Option<(usize, StateEdit<'r>)>,
    pub want_cache: bool,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub cache: Option<ActivationCache>,
}

#[derive(Clone, Debug)]
struct LayerIds {
    res_logits: ParamId,
    pre_weights: ParamId,
    post_weights: ParamId,
    dynamic: Option<[ParamId; 3]>,
    ln_1: [ParamId; 2],
    qkv: [ParamId; 2],
    attn_proj: [ParamId; 2],
    ln_2: [ParamId; 2],
    fc: [ParamId; 2],
    mlp_proj: [ParamId; 2],
}

#[derive(Clone, Debug)]
struct ModelIds {
    wte: ParamId,
    wpe: ParamId,
    layers: Vec<LayerIds>,
    ln_f: [ParamId; 2],
    collapse: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f32),
    Const(f32),
    ResLogits,
    PreWeights,
    PostWeights,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
    decay: bool,
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let (d, n, v, t) = (cfg.model_dim, cfg.streams, cfg.vocab, cfg.context);
    let resid_std = 0.02 / (2.0 * cfg.layers as f32).sqrt();
    let mut slots = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init, trainable: bool, decay: bool| {
        slots.push(Slot {
            name,
            shape,
            init,
            trainable,
            decay,
        })
    };
    add("wte".into(), vec![v, d], Init::Normal(0.02), true, true);
    add("wpe".into(), vec![t, d], Init::Normal(0.01), true, true);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        add(
            p("routing.res_logits"),
            vec![n, n],
            Init::ResLogits,
            true,
            false,
        );
        add(
            p("routing.pre_weights"),
            vec![n],
            Init::PreWeights,
            true,
            false,
        );
        add(
            p("routing.post_weights"),
            vec![n],
            Init::PostWeights,
            true,
            false,
        );
        if cfg.routing_mode == RoutingMode::Dynamic {
            add(
                p("routing.res_proj"),
                vec![d, n * n],
                Init::Const(0.0),
                true,
                true,
            );
            add(
                p("routing.pre_proj"),
                vec![d, n],
                Init::Const(0.0),
                true,
                true,
            );
            add(
                p("routing.post_proj"),
                vec![d, n],
                Init::Const(0.0),
                true,
                true,
            );
        }
        add(p("ln_1.gain"), vec![d], Init::Const(1.0), true, false);
        add(p("ln_1.bias"), vec![d], Init::Const(0.0), true, false);
        add(
            p("attn.qkv.weight"),
            vec![d, 3 * d],
            Init::Normal(0.02),
            true,
            true,
        );
        add(
            p("attn.qkv.bias"),
            vec![3 * d],
            Init::Const(0.0),
            true,
            false,
        );
        add(
            p("attn.proj.weight"),
            vec![d, d],
            Init::Normal(resid_std),
            true,
            true,
        );
        add(p("attn.proj.bias"), vec![d], Init::Const(0.0), true, false);
        add(p("ln_2.gain"), vec![d], Init::Const(1.0), true, false);
        add(p("ln_2.bias"), vec![d], Init::Const(0.0), true, false);
        add(
            p("mlp.fc.weight"),
            vec![d, 4 * d],
            Init::Normal(0.02),
            true,
            true,
        );
        add(p("mlp.fc.bias"), vec![4 * d], Init::Const(0.0), true, false);
        add(
            p("mlp.proj.weight"),
            vec![4 * d, d],
            Init::Normal(resid_std),
            true,
            true,
        );
        add(p("mlp.proj.bias"), vec![d], Init::Const(0.0), true, false);
    }
    add("ln_f.gain".into(), vec![d], Init::Const(1.0), true, false);
    add("ln_f.bias".into(), vec![d], Init::Const(0.0), true, false);
    // Output collapse weights: a fixed buffer (all ones = stream sum).
    add(
        "collapse.weights".into(),
        vec![n],
        Init::Const(1.0),
        false,
        false,
    );
    slots
}

fn resolve_ids(cfg: &ModelConfig, store: &ParamStore) -> Result<ModelIds> {
    let id = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    };
    let pair = |prefix: &str, a: &str, b: &str| -> Result<[ParamId; 2]> {
        Ok([id(&format!("{prefix}.{a}"))?, id(&format!("{prefix}.{b}"))?])
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}");
        let dynamic = if cfg.routing_mode == RoutingMode::Dynamic {
            Some([
                id(&format!("{p}.routing.res_proj"))?,
                id(&format!("{p}.routing.pre_proj"))?,
                id(&format!("{p}.routing.post_proj"))?,
            ])
        } else {
            None
        };
        layers.push(LayerIds {
            res_logits: id(&format!("{p}.routing.res_logits"))?,
            pre_weights: id(&format!("{p}.routing.pre_weights"))?,
            post_weights: id(&format!("{p}.routing.post_weights"))?,
            dynamic,
            ln_1: pair(&p, "ln_1.gain", "ln_1.bias")?,
            qkv: pair(&p, "attn.qkv.weight", "attn.qkv.bias")?,
            attn_proj: pair(&p, "attn.proj.weight", "attn.proj.bias")?,
            ln_2: pair(&p, "ln_2.gain", "ln_2.bias")?,
            fc: pair(&p, "mlp.fc.weight", "mlp.fc.bias")?,
            mlp_proj: pair(&p, "mlp.proj.weight", "mlp.proj.bias")?,
        });
    }
    Ok(ModelIds {
        wte: id("wte")?,
        wpe: id("wpe")?,
        layers,
        ln_f: [id("ln_f.gain")?, id("ln_f.bias")?],
        collapse: id("collapse.weights")?,
    })
}

/// A hyper-connected decoder-only language model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

struct Built {
    logits: Var,
    residuals: Vec<Var>,
    routing: Vec<[Var; 3]>,
    first_layer: usize,
}

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let n = config.streams;
        let jitter = if n > 1 {
            config.routing_init_noise
        } else {
            0.0
        };
        let mut store = ParamStore::default();
        for slot in layout(&config) {
            let mut noise = |base: Tensor| {
                if jitter > 0.0 {
                    let eps = rng.normal_tensor(base.shape(), jitter);
                    let mut t = base;
                    t.add_assign(&eps).expect("same shape");
                    t
                } else {
                    base
                }
            };
            let tensor = match slot.init {
                Init::Normal(std) => rng.normal_tensor(&slot.shape, std),
                Init::Const(v) => Tensor::full(&slot.shape, v),
                Init::ResLogits => noise(RoutingParams::identity_init(n).res_logits),
                Init::PreWeights => noise(RoutingParams::identity_init(n).pre_weights),
                Init::PostWeights => noise(RoutingParams::identity_init(n).post_weights),
            };
            store.push(slot.name, tensor, slot.trainable, slot.decay);
        }
        Self::from_parts(config, store)
    }

    /// Assemble a model from an explicit parameter store (checkpoint load).
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (slot, entry) in expected.iter().zip(store.entries()) {
            if slot.name != entry.name || slot.shape != entry.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        let mut rebuilt = ParamStore::default();
        for (slot, entry) in expected.into_iter().zip(store.entries()) {
            rebuilt.push(slot.name, entry.tensor.clone(), slot.trainable, slot.decay);
        }
        let store = rebuilt;
        let ids = resolve_ids(&config, &store)?;
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access to the weights (optimizer updates, engineered models).
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Static routing parameters of one layer.
    pub fn routing_params(&self, layer: usize) -> RoutingParams {
        let ids = &self.ids.layers[layer];
        RoutingParams {
            res_logits: self.params.get(ids.res_logits).clone(),
            pre_weights: self.params.get(ids.pre_weights).clone(),
            post_weights: self.params.get(ids.post_weights).clone(),
            sinkhorn_iters: self.config.sinkhorn_iters,
            sinkhorn_tol: self.config.sinkhorn_tol,
        }
    }

    /// Input-independent routing per layer. In dynamic mode this is the
    /// routing at a zero stream mean (the bias part of each map).
    pub fn realized_routing(&self) -> Result<Vec<RealizedRouting>> {
        (0..self.config.layers)
            .map(|l| crate::routing::realize(&self.routing_params(l)))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!(
                "token id {bad} >= vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn p<'g>(&'g self, g: &mut Graph<'g>, id: ParamId) -> Var {
        if self.params.entry(id).trainable {
            g.param(id, self.params.get(id))
        } else {
            g.constant_ref(self.params.get(id))
        }
    }

    /// Pre-norm attention followed by a pre-norm GELU MLP, returning the
    /// update `a + mlp(ln_2(u + a))` where `a = attn(ln_1(u))`.
    fn layer_fn<'g>(&'g self, g: &mut Graph<'g>, ids: &LayerIds, u: Var) -> Result<Var> {
        let [g1, b1] = ids.ln_1.map(|id| self.p(g, id));
        let h = g.layer_norm(u, g1, b1)?;
        let [qw, qb] = ids.qkv.map(|id| self.p(g, id));
        let qkv = g.linear(h, qw, qb)?;
        let att = g.causal_attention(qkv, self.config.heads)?;
        let [pw, pb] = ids.attn_proj.map(|id| self.p(g, id));
        let a = g.linear(att, pw, pb)?;

        let mid = g.add(u, a)?;
        let [g2, b2] = ids.ln_2.map(|id| self.p(g, id));
        let h2 = g.layer_norm(mid, g2, b2)?;
        let [fw, fb] = ids.fc.map(|id| self.p(g, id));
        let z = g.linear(h2, fw, fb)?;
        let z = g.gelu(z);
        let [mw, mb] = ids.mlp_proj.map(|id| self.p(g, id));
        let m = g.linear(z, mw, mb)?;
        g.add(a, m)
    }

    fn routing_vars<'g>(
        &'g self,
        g: &mut Graph<'g>,
        ids: &LayerIds,
        x: Var,
        frozen: Option<&RealizedRouting>,
    ) -> Result<[Var; 3]> {
        if let Some(r) = frozen {
            return Ok([
                g.constant(r.h_res.clone()),
                g.constant(r.h_pre.clone()),
                g.constant(r.h_post.clone()),
            ]);
        }
        let n = self.config.streams;
        let (iters, tol) = (self.config.sinkhorn_iters, self.config.sinkhorn_tol);
        let logits = self.p(g, ids.res_logits);
        let pre = self.p(g, ids.pre_weights);
        let post = self.p(g, ids.post_weights);
        match ids.dynamic {
            None => {
                let e = g.exp(logits);
                let h_res = sinkhorn_on(g, e, iters, tol)?;
                Ok([h_res, pre, post])
            }
            Some([res_proj, pre_proj, post_proj]) => {
                let t_len = g.value(x).dim(0);
                let avg = g.constant(Tensor::full(&[n], 1.0 / n as f32));
                let mean = streams::combine_on(g, x, avg)?;
                let rp = self.p(g, res_proj);
                let off = g.matmul(mean, rp)?;
                let flat = g.reshape(logits, &[n * n])?;
                let per_tok = g.add_row_bias(off, flat)?;
                let per_tok = g.reshape(per_tok, &[t_len, n, n])?;
                let e = g.exp(per_tok);
                let h_res = sinkhorn_on(g, e, iters, tol)?;
                let pp = self.p(g, pre_proj);
                let pre_off = g.matmul(mean, pp)?;
                let h_pre = g.add_row_bias(pre_off, pre)?;
                let qp = self.p(g, post_proj);
                let post_off = g.matmul(mean, qp)?;
                let h_post = g.add_row_bias(post_off, post)?;
                Ok([h_res, h_pre, h_post])
            }
        }
    }

    fn build<'g>(
        &'g self,
        g: &mut Graph<'g>,
        tokens: &[usize],
        opts: &RunOptions<'_>,
    ) -> Result<Built> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        if let Some(fr) = opts.frozen_routing {
            if fr.len() != cfg.layers {
                return Err(Error::Contract(format!(
                    "frozen routing has {} layers, model has {}",
                    fr.len(),
                    cfg.layers
                )));
            }
        }
        let (first_layer, mut x) = match opts.start {
            Some((layer, state)) => {
                if layer > cfg.layers {
                    return Err(Error::Contract(format!(
                        "start layer {layer} > {}",
                        cfg.layers
                    )));
                }
                let want = [tokens.len(), cfg.streams, cfg.model_dim];
                if state.values().shape() != want {
                    return Err(Error::shape("start state", state.values().shape(), &want));
                }
                (layer, g.constant(state.values().clone()))
            }
            None => {
                let wte = self.p(g, self.ids.wte);
                let wpe = self.p(g, self.ids.wpe);
                let tok = g.embedding(wte, tokens)?;
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let pos = g.embedding(wpe, &positions)?;
                let emb = g.add(tok, pos)?;
                (0, streams::expand_on(g, emb, cfg.streams)?)
            }
        };

        let mut residuals = Vec::with_capacity(cfg.layers + 1 - first_layer);
        let mut routing = Vec::with_capacity(cfg.layers - first_layer);
        for layer in first_layer..cfg.layers {
            if let Some((at, edit)) = opts.edit {
                if at == layer {
                    let mut state = StreamState::new(g.value(x).clone())?;
                    edit(&mut state);
                    x = g.constant(state.into_values());
                }
            }
            residuals.push(x);
            let ids = &self.ids.layers[layer];
            let frozen = opts.frozen_routing.map(|fr| &fr[layer]);
            let [h_res, h_pre, h_post] = self.routing_vars(g, ids, x, frozen)?;
            routing.push([h_res, h_pre, h_post]);
            let u = streams::combine_on(g, x, h_pre)?;
            let f = self.layer_fn(g, ids, u)?;
            let mixed = streams::mix_on(g, x, h_res)?;
            let spread = streams::spread_on(g, f, h_post)?;
            x = g.add(mixed, spread)?;
        }
        if let Some((at, edit)) = opts.edit {
            if at == cfg.layers {
                let mut state = StreamState::new(g.value(x).clone())?;
                edit(&mut state);
                x = g.constant(state.into_values());
            }
        }
        residuals.push(x);

        let cw = self.p(g, self.ids.collapse);
        let collapsed = streams::combine_on(g, x, cw)?;
        let [fg, fb] = self.ids.ln_f.map(|id| self.p(g, id));
        let h = g.layer_norm(collapsed, fg, fb)?;
        let wte = self.p(g, self.ids.wte);
        let logits = g.matmul_nt(h, wte)?;
        Ok(Built {
            logits,
            residuals,
            routing,
            first_layer,
        })
    }

    /// Forward pass with full control over start point, routing and edits.
    pub fn run(&self, tokens: &[usize], opts: &RunOptions<'_>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let built = self.build(&mut g, tokens, opts)?;
        let logits = g.value(built.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let cache = if opts.want_cache {
            let residuals = built
                .residuals
                .iter()
                .map(|&v| StreamState::new(g.value(v).clone()))
                .collect::<Result<Vec<_>>>()?;
            let routing = built
                .routing
                .iter()
                .map(|&[r, p, q]| RealizedRouting {
                    h_res: g.value(r).clone(),
                    h_pre: g.value(p).clone(),
                    h_post: g.value(q).clone(),
                })
                .collect();
            Some(ActivationCache {
                first_layer: built.first_layer,
                residuals,
                routing,
                logits: logits.clone(),
            })
        } else {
            None
        };
        Ok(ForwardOutput { logits, cache })
    }

    /// Logits `[T, V]` for `tokens`, optionally with the activation cache.
    pub fn forward(
        &self,
        tokens: &[usize],
        want_cache: bool,
    ) -> Result<(Tensor, Option<ActivationCache>)> {
        let out = self.run(
            tokens,
            &RunOptions {
                want_cache,
                ..RunOptions::default()
            },
        )?;
        Ok((out.logits, out.cache))
    }

    /// Resume from the state entering `layer`, reusing frozen routing.
    pub fn forward_from(
        &self,
        tokens: &[usize],
        layer: usize,
        state: &StreamState,
        routing: &[RealizedRouting],
    ) -> Result<ForwardOutput> {
        self.run(
            tokens,
            &RunOptions {
                start: Some((layer, state)),
                frozen_routing: Some(routing),
                want_cache: true,
                ..RunOptions::default()
            },
        )
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`.
    pub fn loss(&self, inputs: &[usize], targets: &[usize]) -> Result<f32> {
        let mut g = Graph::new();
        let built = self.build(&mut g, inputs, &RunOptions::default())?;
        let loss = g.cross_entropy(built.logits, targets)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss plus gradients for every trainable parameter.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<(f32, Vec<(ParamId, Tensor)>)> {
        let mut g = Graph::new();
        let built = self.build(&mut g, inputs, &RunOptions::default())?;
        let loss = g.cross_entropy(built.logits, targets)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let grads = g.backward(loss)?;
        Ok((value, grads.into_params()))
    }
}

/// `KL(softmax(p) ‖ softmax(q))` in nats, computed in log space.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    assert_eq!(
        p_logits.len(),
        q_logits.len(),
        "logit vectors differ in length"
    );
    let lp = log_softmax_f64(p_logits);
    let lq = log_softmax_f64(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum();
    kl.max(0.0)
}

/// Mean per-position KL between two `[T, V]` logit tensors.
pub fn mean_token_kl(p_logits: &Tensor, q_logits: &Tensor) -> f64 {
    let rows = p_logits.dim(0);
    p_logits
        .rows()
        .zip(q_logits.rows())
        .map(|(p, q)| kl_divergence(p, q))
        .sum::<f64>()
        / rows as f64
}
