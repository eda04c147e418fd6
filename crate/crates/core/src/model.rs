//! Pre-LN decoder-only transformer whose MLP sublayers act as experts.
//!
//! Parameter containers are generic over their storage: `T = Tensor` for an
//! owned model, `T = Var` once the same layout has been bound onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::numerics::{seeded, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Initialization seed; the experiment harness overrides it with the run seed.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_mlp: 512,
            vocab_size: 96,
            context_length: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [self.n_layers, self.n_heads, self.d_model, self.d_mlp, self.vocab_size];
        if extents.contains(&0) {
            return Err(Error::Config(format!("model extents must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model={} not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        Ok(())
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Attention,
    LayerNorm,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T = Tensor> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
}

/// One MLP sublayer: `gelu(h·W_in + b_in)·W_out + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpExpert<T = Tensor> {
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = Tensor> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_mlp: LayerNorm<T>,
    pub mlp: MlpExpert<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T = Tensor> {
    pub config: ModelConfig,
    pub wte: T,
    pub wpe: T,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
}

type Visitor<'a, 's, T> = dyn FnMut(&str, ParamGroup, &'s T) + 'a;
type VisitorMut<'a, T> = dyn FnMut(&str, ParamGroup, &mut T) + 'a;
type Mapper<'a, T, U> = dyn FnMut(&str, ParamGroup, &T) -> U + 'a;

impl<T> LayerNorm<T> {
    fn map<U>(&self, prefix: &str, f: &mut Mapper<T, U>) -> LayerNorm<U> {
        LayerNorm {
            gain: f(&format!("{prefix}.gain"), ParamGroup::LayerNorm, &self.gain),
            bias: f(&format!("{prefix}.bias"), ParamGroup::LayerNorm, &self.bias),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut Visitor<'_, 's, T>) {
        f(&format!("{prefix}.gain"), ParamGroup::LayerNorm, &self.gain);
        f(&format!("{prefix}.bias"), ParamGroup::LayerNorm, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<T>) {
        f(&format!("{prefix}.gain"), ParamGroup::LayerNorm, &mut self.gain);
        f(&format!("{prefix}.bias"), ParamGroup::LayerNorm, &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, prefix: &str, f: &mut Mapper<T, U>) -> Attention<U> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), ParamGroup::Attention, t);
        Attention {
            w_q: g("w_q", &self.w_q),
            b_q: g("b_q", &self.b_q),
            w_k: g("w_k", &self.w_k),
            b_k: g("b_k", &self.b_k),
            w_v: g("w_v", &self.w_v),
            b_v: g("b_v", &self.b_v),
            w_o: g("w_o", &self.w_o),
            b_o: g("b_o", &self.b_o),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut Visitor<'_, 's, T>) {
        let mut g = |name: &str, t: &'s T| f(&format!("{prefix}.{name}"), ParamGroup::Attention, t);
        g("w_q", &self.w_q);
        g("b_q", &self.b_q);
        g("w_k", &self.w_k);
        g("b_k", &self.b_k);
        g("w_v", &self.w_v);
        g("b_v", &self.b_v);
        g("w_o", &self.w_o);
        g("b_o", &self.b_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<T>) {
        let mut g = |name: &str, t: &mut T| f(&format!("{prefix}.{name}"), ParamGroup::Attention, t);
        g("w_q", &mut self.w_q);
        g("b_q", &mut self.b_q);
        g("w_k", &mut self.w_k);
        g("b_k", &mut self.b_k);
        g("w_v", &mut self.w_v);
        g("b_v", &mut self.b_v);
        g("w_o", &mut self.w_o);
        g("b_o", &mut self.b_o);
    }
}

impl<T> MlpExpert<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<T, U>) -> MlpExpert<U> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), ParamGroup::Mlp, t);
        MlpExpert {
            w_in: g("w_in", &self.w_in),
            b_in: g("b_in", &self.b_in),
            w_out: g("w_out", &self.w_out),
            b_out: g("b_out", &self.b_out),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut Visitor<'_, 's, T>) {
        let mut g = |name: &str, t: &'s T| f(&format!("{prefix}.{name}"), ParamGroup::Mlp, t);
        g("w_in", &self.w_in);
        g("b_in", &self.b_in);
        g("w_out", &self.w_out);
        g("b_out", &self.b_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<T>) {
        let mut g = |name: &str, t: &mut T| f(&format!("{prefix}.{name}"), ParamGroup::Mlp, t);
        g("w_in", &mut self.w_in);
        g("b_in", &mut self.b_in);
        g("w_out", &mut self.w_out);
        g("b_out", &mut self.b_out);
    }

    pub fn tensors(&self) -> [&T; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }
}

impl<T> Block<T> {
    fn map<U>(&self, prefix: &str, f: &mut Mapper<T, U>) -> Block<U> {
        Block {
            ln_attn: self.ln_attn.map(&format!("{prefix}.ln_attn"), f),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            ln_mlp: self.ln_mlp.map(&format!("{prefix}.ln_mlp"), f),
            mlp: self.mlp.map(&format!("{prefix}.mlp"), f),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut Visitor<'_, 's, T>) {
        self.ln_attn.visit(&format!("{prefix}.ln_attn"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln_mlp.visit(&format!("{prefix}.ln_mlp"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<T>) {
        self.ln_attn.visit_mut(&format!("{prefix}.ln_attn"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln_mlp.visit_mut(&format!("{prefix}.ln_mlp"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

impl<T> TransformerModel<T> {
    /// Maps every parameter (in canonical order) to a new container.
    pub fn map<U>(&self, f: &mut Mapper<T, U>) -> TransformerModel<U> {
        TransformerModel {
            config: self.config,
            wte: f("wte", ParamGroup::Embedding, &self.wte),
            wpe: f("wpe", ParamGroup::Embedding, &self.wpe),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(&format!("blocks.{l}"), f))
                .collect(),
            ln_final: self.ln_final.map("ln_final", f),
        }
    }

    pub fn visit<'s>(&'s self, f: &mut Visitor<'_, 's, T>) {
        f("wte", ParamGroup::Embedding, &self.wte);
        f("wpe", ParamGroup::Embedding, &self.wpe);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{l}"), f);
        }
        self.ln_final.visit("ln_final", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<T>) {
        f("wte", ParamGroup::Embedding, &mut self.wte);
        f("wpe", ParamGroup::Embedding, &mut self.wpe);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{l}"), f);
        }
        self.ln_final.visit_mut("ln_final", f);
    }
}

/// Which parameters a training phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPolicy {
    MlpOnly,
    /// MLP tensors plus every layernorm gain/bias.
    MlpAndLayerNorm,
    RouterOnly,
    All,
}

impl TrainPolicy {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            TrainPolicy::MlpOnly => group == ParamGroup::Mlp,
            TrainPolicy::MlpAndLayerNorm => {
                matches!(group, ParamGroup::Mlp | ParamGroup::LayerNorm)
            }
            TrainPolicy::RouterOnly => false,
            TrainPolicy::All => true,
        }
    }

    pub fn mlp_only(train_layernorm: bool) -> Self {
        if train_layernorm {
            TrainPolicy::MlpAndLayerNorm
        } else {
            TrainPolicy::MlpOnly
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Per-layer MLP sublayer outputs (before the residual add) at unmasked positions.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub layers: Vec<Tensor>,
    pub mask: Vec<bool>,
}

/// A forward pass recorded on a tape.
pub struct TapeForward {
    pub logits: Var,
    pub mlp_outputs: Vec<Var>,
    pub params: TransformerModel<Var>,
}

impl TransformerModel {
    /// GPT-2 style initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed, "model-init");
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| Tensor::randn(shape, std, &mut rng);
        let wte = normal(&[config.vocab_size, d], INIT_STD);
        let wpe = normal(&[config.context_length, d], INIT_STD);
        let ln = || LayerNorm {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = Attention {
                w_q: normal(&[d, d], INIT_STD),
                b_q: Tensor::zeros(&[d]),
                w_k: normal(&[d, d], INIT_STD),
                b_k: Tensor::zeros(&[d]),
                w_v: normal(&[d, d], INIT_STD),
                b_v: Tensor::zeros(&[d]),
                w_o: normal(&[d, d], resid_std),
                b_o: Tensor::zeros(&[d]),
            };
            let mlp = MlpExpert {
                w_in: normal(&[d, config.d_mlp], INIT_STD),
                b_in: Tensor::zeros(&[config.d_mlp]),
                w_out: normal(&[config.d_mlp, d], resid_std),
                b_out: Tensor::zeros(&[d]),
            };
            blocks.push(Block {
                ln_attn: ln(),
                attn,
                ln_mlp: ln(),
                mlp,
            });
        }
        Ok(Self {
            config,
            wte,
            wpe,
            blocks,
            ln_final: ln(),
        })
    }

    /// Draws fresh MLP weights for every block, leaving the trunk untouched.
    pub fn reinit_mlps<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let resid_std = INIT_STD / (2.0 * self.config.n_layers as f64).sqrt();
        for b in &mut self.blocks {
            b.mlp.w_in = Tensor::randn(b.mlp.w_in.shape(), INIT_STD, rng);
            b.mlp.w_out = Tensor::randn(b.mlp.w_out.shape(), resid_std, rng);
            b.mlp.b_in = Tensor::zeros(b.mlp.b_in.shape());
            b.mlp.b_out = Tensor::zeros(b.mlp.b_out.shape());
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, group, t| out.push((name.to_string(), group, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn partition_params(&self, policy: TrainPolicy) -> Partition {
        let mut p = Partition::default();
        for (name, group, _) in self.named_params() {
            if policy.trains(group) {
                p.trainable.push(name);
            } else {
                p.frozen.push(name);
            }
        }
        p
    }

    /// SHA-256 over names, shapes and little-endian payloads of the selected groups.
    pub fn hash_groups(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for (name, group, t) in self.named_params() {
            if groups.contains(&group) {
                hash_tensor(&mut h, &name, t);
            }
        }
        hex(&h.finalize())
    }

    /// Hash of everything that is not an MLP expert: embeddings, attention and layernorms.
    pub fn trunk_hash(&self) -> String {
        self.hash_groups(&[ParamGroup::Embedding, ParamGroup::Attention, ParamGroup::LayerNorm])
    }

    pub fn mlp_hash(&self) -> String {
        self.hash_groups(&[ParamGroup::Mlp])
    }

    pub fn full_hash(&self) -> String {
        self.hash_groups(&[
            ParamGroup::Embedding,
            ParamGroup::Attention,
            ParamGroup::LayerNorm,
            ParamGroup::Mlp,
        ])
    }

    /// Binds all parameters onto `tape`; those selected by `policy` require gradients.
    pub fn bind(&self, tape: &mut Tape, policy: TrainPolicy) -> TransformerModel<Var> {
        self.map(&mut |_, group, t| {
            if policy.trains(group) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        policy: TrainPolicy,
    ) -> Result<TapeForward> {
        let params = self.bind(tape, policy);
        let seq = check_tokens(&self.config, tokens, batch)?;
        let mut x = embed(tape, &params, tokens, batch, seq)?;
        let mut mlp_outputs = Vec::with_capacity(params.blocks.len());
        for block in &params.blocks {
            x = attention_sublayer(tape, block, x, batch, seq, self.config.n_heads)?;
            let h = mlp_input(tape, block, x)?;
            let y = mlp_forward(tape, &block.mlp, h)?;
            mlp_outputs.push(y);
            x = tape.add(x, y)?;
        }
        let logits = final_logits(tape, &params, x)?;
        Ok(TapeForward {
            logits,
            mlp_outputs,
            params,
        })
    }

    /// Logits shaped `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens, batch, TrainPolicy::RouterOnly)?;
        let seq = tokens.len() / batch;
        tape.value(fwd.logits)
            .clone()
            .reshape(&[batch, seq, self.config.vocab_size])
    }

    pub fn forward_with_trace(
        &self,
        tokens: &[usize],
        batch: usize,
        mask: Option<&[bool]>,
    ) -> Result<(Tensor, ActivationTrace)> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens, batch, TrainPolicy::RouterOnly)?;
        let seq = tokens.len() / batch;
        let mask = resolve_mask(mask, tokens.len())?;
        let layers = fwd
            .mlp_outputs
            .iter()
            .map(|&v| select_rows(tape.value(v), &mask))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape
            .value(fwd.logits)
            .clone()
            .reshape(&[batch, seq, self.config.vocab_size])?;
        Ok((logits, ActivationTrace { layers, mask }))
    }

    /// Adds tape gradients of the bound trainable parameters into this model.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &TransformerModel<Var>) -> Result<()> {
        let mut vars = Vec::new();
        bound.visit(&mut |_, _, v| vars.push(*v));
        let mut i = 0;
        let mut err = None;
        self.visit_mut(&mut |_, _, t| {
            if let Some(g) = tape.grad(vars[i]) {
                if let Err(e) = t.accumulate_grad(g) {
                    err = Some(e);
                }
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    /// Mutable handles to the parameters `policy` trains, in canonical order.
    pub fn trainable_mut(&mut self, policy: TrainPolicy) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let TransformerModel {
            wte,
            wpe,
            blocks,
            ln_final,
            ..
        } = self;
        if policy.trains(ParamGroup::Embedding) {
            out.extend([wte, wpe]);
        }
        for b in blocks.iter_mut() {
            let Block {
                ln_attn,
                attn,
                ln_mlp,
                mlp,
            } = b;
            if policy.trains(ParamGroup::LayerNorm) {
                out.extend([&mut ln_attn.gain, &mut ln_attn.bias]);
            }
            if policy.trains(ParamGroup::Attention) {
                out.extend([
                    &mut attn.w_q,
                    &mut attn.b_q,
                    &mut attn.w_k,
                    &mut attn.b_k,
                    &mut attn.w_v,
                    &mut attn.b_v,
                    &mut attn.w_o,
                    &mut attn.b_o,
                ]);
            }
            if policy.trains(ParamGroup::LayerNorm) {
                out.extend([&mut ln_mlp.gain, &mut ln_mlp.bias]);
            }
            if policy.trains(ParamGroup::Mlp) {
                out.extend([&mut mlp.w_in, &mut mlp.b_in, &mut mlp.w_out, &mut mlp.b_out]);
            }
        }
        if policy.trains(ParamGroup::LayerNorm) {
            out.extend([&mut ln_final.gain, &mut ln_final.bias]);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, _, t| t.zero_grad());
    }

    /// Flattened `(name, tensor)` table in canonical order.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, _, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n, t)
            })
            .collect()
    }

    /// Rebuilds a model from a named table; names and shapes must match `config`.
    pub fn from_named_tensors(config: ModelConfig, table: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected = model.named_params().len();
        if table.len() != expected {
            return Err(Error::Integrity(format!(
                "expected {expected} tensors, found {}",
                table.len()
            )));
        }
        let mut i = 0;
        let mut err = None;
        model.visit_mut(&mut |name, _, t| {
            let (n, src) = &table[i];
            i += 1;
            if err.is_some() {
                return;
            }
            if n != name || src.shape() != t.shape() {
                err = Some(Error::Integrity(format!(
                    "tensor {n} {:?} does not match expected {name} {:?}",
                    src.shape(),
                    t.shape()
                )));
                return;
            }
            *t = src.clone();
        });
        err.map_or(Ok(model), Err)
    }
}

/// Anything that maps token windows to next-token logits `[batch, seq, vocab]`.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor>;
}

impl LanguageModel for TransformerModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        self.forward(tokens, batch)
    }
}

/// Mean next-token cross-entropy (nats) of `logits` against `targets`.
pub fn cross_entropy_of(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = logits.cols();
    let rows = logits.len() / v;
    let flat = logits.clone().reshape(&[rows, v])?;
    let mut tape = Tape::new();
    let l = tape.constant(flat);
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean validation CE over `n_batches` fixed windows of the validation slice.
pub fn validation_loss(
    model: &impl LanguageModel,
    corpus: &Corpus,
    batch: usize,
    n_batches: usize,
    seed: u64,
) -> Result<f64> {
    let seq = model.config().context_length;
    let mut total = 0.0;
    for b in corpus.batches(Split::Validation, batch, seq, seed)?.take(n_batches) {
        let logits = model.logits(&b.tokens, b.batch)?;
        total += cross_entropy_of(&logits, &b.targets)?;
    }
    let loss = total / n_batches.max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("validation loss {loss}")));
    }
    Ok(loss)
}

pub(crate) fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_le_bytes());
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Validates a `[batch × seq]` token grid and returns `seq`.
pub fn check_tokens(config: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(Error::Dimension {
            op: "forward",
            left: vec![tokens.len()],
            right: vec![batch],
        });
    }
    let seq = tokens.len() / batch;
    if seq > config.context_length {
        return Err(Error::contract(format!(
            "sequence length {seq} exceeds context length {}",
            config.context_length
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            op: "forward",
            index: bad,
            bound: config.vocab_size,
        });
    }
    Ok(seq)
}

pub(crate) fn resolve_mask(mask: Option<&[bool]>, n: usize) -> Result<Vec<bool>> {
    match mask {
        Some(m) if m.len() != n => Err(Error::Dimension {
            op: "mask",
            left: vec![n],
            right: vec![m.len()],
        }),
        Some(m) => Ok(m.to_vec()),
        None => Ok(vec![true; n]),
    }
}

pub(crate) fn select_rows(t: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let cols = t.cols();
    let mut data = Vec::new();
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            data.extend_from_slice(t.row(r));
        }
    }
    let rows = data.len() / cols;
    if rows == 0 {
        return Err(Error::contract("mask selects no positions"));
    }
    Tensor::new(&[rows, cols], data)
}

pub fn embed(tape: &mut Tape, p: &TransformerModel<Var>, tokens: &[usize], batch: usize, seq: usize) -> Result<Var> {
    let tok = tape.embedding(p.wte, tokens)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = tape.embedding(p.wpe, &positions)?;
    tape.add(tok, pos)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `x + Attn(LN(x))`
pub fn attention_sublayer(
    tape: &mut Tape,
    block: &Block<Var>,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let a = &block.attn;
    let h = tape.layernorm(x, block.ln_attn.gain, block.ln_attn.bias, LN_EPS)?;
    let q = linear(tape, h, a.w_q, a.b_q)?;
    let k = linear(tape, h, a.w_k, a.b_k)?;
    let v = linear(tape, h, a.w_v, a.b_v)?;
    let att = tape.causal_attention(q, k, v, batch, seq, heads)?;
    let o = linear(tape, att, a.w_o, a.b_o)?;
    tape.add(x, o)
}

/// The normalized hidden state every MLP expert at this block consumes.
pub fn mlp_input(tape: &mut Tape, block: &Block<Var>, x: Var) -> Result<Var> {
    tape.layernorm(x, block.ln_mlp.gain, block.ln_mlp.bias, LN_EPS)
}

pub fn mlp_forward(tape: &mut Tape, mlp: &MlpExpert<Var>, h: Var) -> Result<Var> {
    let u = linear(tape, h, mlp.w_in, mlp.b_in)?;
    let u = tape.gelu(u);
    linear(tape, u, mlp.w_out, mlp.b_out)
}

/// Final layernorm and tied unembedding.
pub fn final_logits(tape: &mut Tape, p: &TransformerModel<Var>, x: Var) -> Result<Var> {
    let h = tape.layernorm(x, p.ln_final.gain, p.ln_final.bias, LN_EPS)?;
    tape.matmul_nt(h, p.wte)
}
