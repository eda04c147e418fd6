use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::merge::interp::{lerp_models, slerp_models};
use crate::merge::router::{route_tape, BoundRouter, ExpertRef, Router, RouterKind};
use crate::model::{
    attention_sublayer, check_tokens, embed, final_logits, hash_tensor, hex, mlp_forward, mlp_input, validation_loss,
    LanguageModel, MlpExpert, ModelConfig, TrainPolicy, TransformerModel,
};
use crate::numerics::{seeded, AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MergeMethod {
    Lerp {
        alpha: f64,
    },
    Slerp {
        alpha: f64,
    },
    ActivationInterp {
        alpha: f64,
    },
    SingleRouter,
    FullRouter,
    FullRouterBase,
    /// Each layer routes over the experts of itself and the `k - 1` layers above it.
    MultiLayer {
        k: usize,
    },
}

impl MergeMethod {
    /// Builds a method from its config name; `alpha` is required exactly for
    /// the static methods and `k` exactly for `multi_layer`.
    pub fn from_parts(name: &str, alpha: Option<f64>, k: Option<usize>) -> Result<Self> {
        let static_alpha = |alpha: Option<f64>| match alpha {
            Some(a) if (0.0..=1.0).contains(&a) => Ok(a),
            Some(a) => Err(Error::Config(format!("{name}: alpha {a} outside [0, 1]"))),
            None => Err(Error::Config(format!("{name} requires alpha"))),
        };
        let m = match name {
            "lerp" => Self::Lerp {
                alpha: static_alpha(alpha)?,
            },
            "slerp" => Self::Slerp {
                alpha: static_alpha(alpha)?,
            },
            "activation_interp" => Self::ActivationInterp {
                alpha: static_alpha(alpha)?,
            },
            "single_router" => Self::SingleRouter,
            "full_router" => Self::FullRouter,
            "full_router_base" => Self::FullRouterBase,
            "multi_layer" => match k {
                Some(k @ 1..=3) => Self::MultiLayer { k },
                Some(k) => return Err(Error::Config(format!("multi_layer k = {k} outside 1..=3"))),
                None => return Err(Error::Config("multi_layer requires k".into())),
            },
            other => return Err(Error::Config(format!("unknown merge method {other:?}"))),
        };
        if !m.is_static() && alpha.is_some() {
            return Err(Error::Config(format!("{name} does not take alpha")));
        }
        if !matches!(m, Self::MultiLayer { .. }) && k.is_some() {
            return Err(Error::Config(format!("{name} does not take k")));
        }
        Ok(m)
    }

    pub fn is_static(self) -> bool {
        matches!(
            self,
            Self::Lerp { .. } | Self::Slerp { .. } | Self::ActivationInterp { .. }
        )
    }

    pub fn alpha(self) -> Option<f64> {
        match self {
            Self::Lerp { alpha } | Self::Slerp { alpha } | Self::ActivationInterp { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn k(self) -> Option<usize> {
        match self {
            Self::FullRouter | Self::FullRouterBase => Some(1),
            Self::MultiLayer { k } => Some(k),
            _ => None,
        }
    }

    pub fn includes_base(self) -> bool {
        matches!(self, Self::FullRouterBase)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lerp { .. } => "lerp",
            Self::Slerp { .. } => "slerp",
            Self::ActivationInterp { .. } => "activation_interp",
            Self::SingleRouter => "single_router",
            Self::FullRouter => "full_router",
            Self::FullRouterBase => "full_router_base",
            Self::MultiLayer { .. } => "multi_layer",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MultiLayer { k } => write!(f, "multi_layer_{k}"),
            m => f.write_str(m.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub router: RouterKind,
    /// Seeds the random first layer of `mlp2` routers.
    pub seed: u64,
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            router: RouterKind::Linear,
            seed: 0,
        }
    }
}

/// How the MLP sublayer of one layer is computed.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerMixing {
    /// The trunk's own MLP (weight-space merges).
    Own,
    Static {
        roster: Vec<ExpertRef>,
        weights: Vec<f64>,
    },
    /// Weights come from `routers[router]`; a router shared by several layers
    /// is evaluated once, at the first layer that uses it.
    Routed {
        router: usize,
        roster: Vec<ExpertRef>,
    },
}

impl LayerMixing {
    pub fn roster(&self) -> &[ExpertRef] {
        match self {
            Self::Own => &[],
            Self::Static { roster, .. } | Self::Routed { roster, .. } => roster,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergedModel {
    pub spec: MergeSpec,
    /// Embeddings, attention and layernorms shared by every source.
    pub trunk: TransformerModel,
    /// `experts[source][layer]`; when the base participates it is the last source.
    pub experts: Vec<Vec<MlpExpert>>,
    pub mixing: Vec<LayerMixing>,
    pub routers: Vec<Router>,
}

pub struct MergedForward {
    pub logits: Var,
    /// Mixture weights `[rows, N]` per layer (`None` for unmixed layers).
    pub routing: Vec<Option<Var>>,
    pub routers: Vec<BoundRouter>,
}

fn check_shared_trunk(models: &[TransformerModel], base: &TransformerModel) -> Result<()> {
    let want = base.trunk_hash();
    for (i, m) in models.iter().enumerate() {
        if m.config != base.config {
            return Err(Error::IncompatibleModels(format!(
                "source {i} configuration differs from the base"
            )));
        }
        if m.trunk_hash() != want {
            return Err(Error::IncompatibleModels(format!(
                "source {i} attention/embedding/layernorm stack differs from the base"
            )));
        }
    }
    Ok(())
}

pub fn build_merged(spec: MergeSpec, models: &[TransformerModel], base: &TransformerModel) -> Result<MergedModel> {
    if models.is_empty() {
        return Err(Error::contract("merge needs at least one source model"));
    }
    check_shared_trunk(models, base)?;
    let n_layers = base.config.n_layers;
    let d = base.config.d_model;
    let pair = || -> Result<(&TransformerModel, &TransformerModel)> {
        match models {
            [a, b] => Ok((a, b)),
            _ => Err(Error::contract(format!(
                "{} merges exactly two models, got {}",
                spec.method,
                models.len()
            ))),
        }
    };
    let mut merged = MergedModel {
        spec,
        trunk: base.clone(),
        experts: Vec::new(),
        mixing: vec![LayerMixing::Own; n_layers],
        routers: Vec::new(),
    };
    match spec.method {
        MergeMethod::Lerp { alpha } => {
            let (a, b) = pair()?;
            merged.trunk = lerp_models(a, b, alpha)?;
            return Ok(merged);
        }
        MergeMethod::Slerp { alpha } => {
            let (a, b) = pair()?;
            merged.trunk = slerp_models(a, b, alpha)?;
            return Ok(merged);
        }
        _ => {}
    }

    let mut sources: Vec<&TransformerModel> = models.iter().collect();
    if spec.method.includes_base() {
        sources.push(base);
    }
    merged.experts = sources
        .iter()
        .map(|m| m.blocks.iter().map(|b| b.mlp.clone()).collect())
        .collect();
    let n_src = sources.len();
    let at = |layers: std::ops::Range<usize>| -> Vec<ExpertRef> {
        layers
            .flat_map(|layer| (0..n_src).map(move |source| ExpertRef { source, layer }))
            .collect()
    };
    let mut rng = seeded(spec.seed, "router-init");

    match spec.method {
        MergeMethod::ActivationInterp { alpha } => {
            pair()?;
            for (l, mix) in merged.mixing.iter_mut().enumerate() {
                *mix = LayerMixing::Static {
                    roster: at(l..l + 1),
                    weights: vec![alpha, 1.0 - alpha],
                };
            }
        }
        MergeMethod::SingleRouter => {
            merged.routers.push(Router::new(spec.router, d, at(0..1), &mut rng)?);
            for (l, mix) in merged.mixing.iter_mut().enumerate() {
                *mix = LayerMixing::Routed {
                    router: 0,
                    roster: at(l..l + 1),
                };
            }
        }
        MergeMethod::FullRouter | MergeMethod::FullRouterBase | MergeMethod::MultiLayer { .. } => {
            let k = spec.method.k().unwrap_or(1);
            for l in 0..n_layers {
                let roster = at(l..(l + k).min(n_layers));
                merged
                    .routers
                    .push(Router::new(spec.router, d, roster.clone(), &mut rng)?);
                merged.mixing[l] = LayerMixing::Routed { router: l, roster };
            }
        }
        MergeMethod::Lerp { .. } | MergeMethod::Slerp { .. } => unreachable!(),
    }
    Ok(merged)
}

/// `y = Σ_i weights[:, i] · E_i(x)` for hidden states `x` `[rows, d]`.
pub fn moe_forward(experts: &[&MlpExpert], weights: &Tensor, x: &Tensor) -> Result<Tensor> {
    if weights.shape().len() != 2 || weights.cols() != experts.len() || weights.rows() != x.rows() {
        return Err(Error::Dimension {
            op: "moe_forward",
            left: weights.shape().to_vec(),
            right: vec![x.rows(), experts.len()],
        });
    }
    let mut tape = Tape::new();
    let h = tape.constant(x.clone());
    let ys = experts
        .iter()
        .map(|e| {
            let bound = e.map("", &mut |_, _, t| tape.constant(t.clone()));
            mlp_forward(&mut tape, &bound, h)
        })
        .collect::<Result<Vec<_>>>()?;
    let w = tape.constant(weights.clone());
    let y = tape.weighted_sum(w, &ys)?;
    Ok(tape.value(y).clone())
}

/// Logits of the static activation blend `alpha * E_A + (1 - alpha) * E_B` at every layer.
pub fn activation_interp_forward(
    a: &TransformerModel,
    b: &TransformerModel,
    alpha: f64,
    tokens: &[usize],
    batch: usize,
) -> Result<Tensor> {
    if a.config != b.config || a.trunk_hash() != b.trunk_hash() {
        return Err(Error::Composition(
            "activation interpolation needs models that share a trunk".into(),
        ));
    }
    let merged = build_merged(
        MergeSpec::new(MergeMethod::ActivationInterp { alpha }),
        &[a.clone(), b.clone()],
        a,
    )?;
    merged.forward(tokens, batch)
}

impl MergedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.trunk.config
    }

    /// Parameters updated by router training.
    pub fn trainable_param_count(&self) -> usize {
        self.routers.iter().map(Router::param_count).sum()
    }

    pub fn router_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.routers.iter_mut().flat_map(Router::tensors_mut).collect()
    }

    /// Hash of every frozen tensor: trunk plus all experts.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.trunk.full_hash().as_bytes());
        for (s, src) in self.experts.iter().enumerate() {
            for (l, e) in src.iter().enumerate() {
                e.visit(&format!("experts.{s}.{l}"), &mut |name, _, t| {
                    hash_tensor(&mut h, name, t)
                });
            }
        }
        hex(&h.finalize())
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        train_routers: bool,
    ) -> Result<MergedForward> {
        let cfg = &self.trunk.config;
        let seq = check_tokens(cfg, tokens, batch)?;
        let params = self.trunk.bind(tape, TrainPolicy::RouterOnly);
        let experts: Vec<Vec<MlpExpert<Var>>> = self
            .experts
            .iter()
            .map(|src| {
                src.iter()
                    .map(|e| e.map("", &mut |_, _, t| tape.constant(t.clone())))
                    .collect()
            })
            .collect();
        let routers: Vec<BoundRouter> = self.routers.iter().map(|r| r.bind(tape, train_routers)).collect();
        let mut cache: Vec<Option<Var>> = vec![None; routers.len()];
        let rows = batch * seq;

        let mut x = embed(tape, &params, tokens, batch, seq)?;
        let mut routing = Vec::with_capacity(params.blocks.len());
        for (l, block) in params.blocks.iter().enumerate() {
            x = attention_sublayer(tape, block, x, batch, seq, cfg.n_heads)?;
            let h = mlp_input(tape, block, x)?;
            let run = |tape: &mut Tape, roster: &[ExpertRef]| {
                roster
                    .iter()
                    .map(|e| mlp_forward(tape, &experts[e.source][e.layer], h))
                    .collect::<Result<Vec<_>>>()
            };
            let (y, w) = match &self.mixing[l] {
                LayerMixing::Own => (mlp_forward(tape, &block.mlp, h)?, None),
                LayerMixing::Static { roster, weights } => {
                    let ys = run(tape, roster)?;
                    let wt = Tensor::from_fn(&[rows, weights.len()], |i| weights[i % weights.len()]);
                    let w = tape.constant(wt);
                    (tape.weighted_sum(w, &ys)?, Some(w))
                }
                LayerMixing::Routed { router, roster } => {
                    let w = match cache[*router] {
                        Some(w) => w,
                        None => {
                            let w = route_tape(tape, &routers[*router], h)?;
                            cache[*router] = Some(w);
                            w
                        }
                    };
                    let ys = run(tape, roster)?;
                    (tape.weighted_sum(w, &ys)?, Some(w))
                }
            };
            routing.push(w);
            x = tape.add(x, y)?;
        }
        let logits = final_logits(tape, &params, x)?;
        Ok(MergedForward {
            logits,
            routing,
            routers,
        })
    }

    /// Logits `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens, batch, false)?;
        let seq = tokens.len() / batch;
        tape.value(fwd.logits)
            .clone()
            .reshape(&[batch, seq, self.trunk.config.vocab_size])
    }

    /// Per-layer mixture weights `[batch * seq, N]`.
    pub fn routing_weights(&self, tokens: &[usize], batch: usize) -> Result<Vec<Option<Tensor>>> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens, batch, false)?;
        Ok(fwd.routing.iter().map(|w| w.map(|v| tape.value(v).clone())).collect())
    }
}

impl LanguageModel for MergedModel {
    fn config(&self) -> &ModelConfig {
        &self.trunk.config
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        self.forward(tokens, batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    /// Validation loss is recorded every this many steps (and at 0 and the end).
    pub eval_every: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

/// Trains only the router tensors on `corpus`; returns the validation curve.
pub fn train_router(merged: &mut MergedModel, corpus: &Corpus, cfg: &RouterTrainConfig) -> Result<Vec<CurvePoint>> {
    let eval = |m: &MergedModel| validation_loss(m, corpus, cfg.batch_size, cfg.eval_batches, cfg.seed);
    let mut curve = vec![CurvePoint {
        step: 0,
        loss: eval(merged)?,
    }];
    if cfg.steps == 0 {
        return Ok(curve);
    }
    if merged.routers.is_empty() {
        return Err(Error::contract(format!(
            "{} has no router to train",
            merged.spec.method
        )));
    }
    let seq = merged.config().context_length;
    let mut opt = AdamState::new(cfg.optim);
    let stream = corpus.batches(Split::Train, cfg.batch_size, seq, cfg.seed)?;
    for (i, b) in stream.take(cfg.steps).enumerate() {
        let mut tape = Tape::new();
        let fwd = merged.forward_tape(&mut tape, &b.tokens, b.batch, true)?;
        let loss = tape.cross_entropy(fwd.logits, &b.targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("router loss {value} at step {i}")));
        }
        tape.backward(loss)?;
        for (r, bound) in merged.routers.iter_mut().zip(&fwd.routers) {
            r.w.zero_grad();
            if let Some(w2) = r.w2.as_mut() {
                w2.zero_grad();
            }
            r.accumulate_grads(&tape, bound)?;
        }
        opt.step(&mut merged.router_tensors_mut())?;
        let step = i + 1;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            curve.push(CurvePoint {
                step,
                loss: eval(merged)?,
            });
        }
    }
    Ok(curve)
}
