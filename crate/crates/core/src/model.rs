//! Mini decoder-only transformer.
//!
//! Pre-norm blocks in the Llama style: RMS normalization, multi-head causal
//! attention, a SiLU-gated feed-forward network, and learned absolute
//! position embeddings. Linear weights are stored `out×in`, so a projection
//! is `x · Wᵀ`.
//!
//! The block output of layer `l` is the residual stream after the layer's
//! second residual addition. Hooks registered at `l` rewrite selected rows
//! of that value before layer `l + 1` reads it.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Four layers of width 128 over the byte vocabulary, 256 positions.
    pub fn desk_scale() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        Ok(())
    }
}

/// Names of the linear projections in one layer, in schema order.
pub const LAYER_LINEARS: [&str; 7] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
];

pub fn layer_weight_name(layer: usize, local: &str) -> String {
    format!("layers.{layer}.{local}")
}

/// Every weight name with its shape, in a fixed schema order.
pub fn weight_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = vec![
        ("tok_embedding".to_string(), vec![v, d]),
        ("pos_embedding".to_string(), vec![config.max_seq, d]),
    ];
    for l in 0..config.n_layers {
        let shapes: [(&str, Vec<usize>); 9] = [
            ("attn_norm", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("ffn_norm", vec![d]),
            ("ffn.w_gate", vec![f, d]),
            ("ffn.w_up", vec![f, d]),
            ("ffn.w_down", vec![d, f]),
        ];
        out.extend(
            shapes
                .into_iter()
                .map(|(name, shape)| (layer_weight_name(l, name), shape)),
        );
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembedding".to_string(), vec![d, v]));
    out
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_norm")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Seeded Gaussian initialization (std 0.02) with unit normalization gains.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = weight_schema(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = if is_gain(&name) {
                Tensor::ones(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            (name, t)
        })
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        tensors,
    })
}

impl ModelWeights {
    /// Assembles weights from named tensors, checking names and shapes
    /// against the schema implied by `config`.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in weight_schema(&config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("weight", &shape, t.shape()));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected weight `{extra}`")));
        }
        Ok(Self {
            config,
            tensors: out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces one weight, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown weight `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// SHA-256 over names, shapes, and the bit patterns of every weight.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every weight on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundModel {
        let vars: BTreeMap<String, Var> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundModel::from_vars(&self.config, &vars).expect("weights follow their own schema")
    }
}

struct BoundLayer {
    attn_norm: Var,
    ffn_norm: Var,
    // Same order as LAYER_LINEARS.
    linears: [(String, Var); 7],
}

/// Model weights placed on a tape.
pub struct BoundModel {
    config: ModelConfig,
    tok_embedding: Var,
    pos_embedding: Var,
    layers: Vec<BoundLayer>,
    final_norm: Var,
    unembedding: Var,
}

impl BoundModel {
    pub fn from_vars(config: &ModelConfig, vars: &BTreeMap<String, Var>) -> Result<Self> {
        let get = |name: &str| {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let linear = |i: usize| -> Result<(String, Var)> {
                let name = layer_weight_name(l, LAYER_LINEARS[i]);
                let v = get(&name)?;
                Ok((name, v))
            };
            layers.push(BoundLayer {
                attn_norm: get(&layer_weight_name(l, "attn_norm"))?,
                ffn_norm: get(&layer_weight_name(l, "ffn_norm"))?,
                linears: [
                    linear(0)?,
                    linear(1)?,
                    linear(2)?,
                    linear(3)?,
                    linear(4)?,
                    linear(5)?,
                    linear(6)?,
                ],
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_embedding: get("tok_embedding")?,
            pos_embedding: get("pos_embedding")?,
            layers,
            final_norm: get("final_norm")?,
            unembedding: get("unembedding")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Rewrites the output of a named linear projection; used by adapters that
/// act in weight space.
pub trait LinearAdapter {
    /// `input` is what the projection consumed, `base` what it produced.
    fn adapt(&self, tape: &Tape, name: &str, input: Var, base: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    BlockOutput,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Positions {
    All,
    At(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookPoint {
    pub layer: usize,
    pub component: Component,
    pub positions: Positions,
}

impl HookPoint {
    pub fn block_output(layer: usize, positions: Positions) -> Self {
        Self {
            layer,
            component: Component::BlockOutput,
            positions,
        }
    }
}

type HookFn<'a> = dyn Fn(&Tape, Var) -> Result<Var> + 'a;

/// A transform applied to the addressed rows (`positions × d_model`) of a
/// block output.
pub struct Hook<'a> {
    pub point: HookPoint,
    transform: Box<HookFn<'a>>,
}

impl<'a> Hook<'a> {
    pub fn new(point: HookPoint, transform: impl Fn(&Tape, Var) -> Result<Var> + 'a) -> Self {
        Self {
            point,
            transform: Box::new(transform),
        }
    }

    pub fn identity(point: HookPoint) -> Self {
        Self::new(point, |_, rows| Ok(rows))
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub block_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub block_outputs: Vec<Tensor>,
    pub logits: Tensor,
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq,
        });
    }
    tokens
        .iter()
        .map(|&t| {
            let t = t as usize;
            if t >= config.vocab_size {
                Err(Error::Index {
                    what: "token id",
                    index: t,
                    bound: config.vocab_size,
                })
            } else {
                Ok(t)
            }
        })
        .collect()
}

fn check_hooks(config: &ModelConfig, seq_len: usize, hooks: &[Hook<'_>]) -> Result<()> {
    for hook in hooks {
        if hook.point.layer >= config.n_layers {
            return Err(Error::Index {
                what: "hook layer",
                index: hook.point.layer,
                bound: config.n_layers,
            });
        }
        if let Positions::At(ps) = &hook.point.positions {
            if let Some(&p) = ps.iter().find(|&&p| p >= seq_len) {
                return Err(Error::Index {
                    what: "hook position",
                    index: p,
                    bound: seq_len,
                });
            }
        }
    }
    Ok(())
}

fn linear(
    tape: &Tape,
    adapter: Option<&dyn LinearAdapter>,
    (name, w): &(String, Var),
    x: Var,
) -> Result<Var> {
    let y = tape.matmul_nt(x, *w)?;
    match adapter {
        Some(a) => a.adapt(tape, name, x, y),
        None => Ok(y),
    }
}

/// Runs the transformer on `tokens`, recording every step on `tape`.
pub fn forward_on_tape(
    tape: &Tape,
    model: &BoundModel,
    tokens: &[u32],
    adapter: Option<&dyn LinearAdapter>,
    hooks: &[Hook<'_>],
    capture: bool,
) -> Result<ForwardPass> {
    let config = &model.config;
    let ids = check_tokens(config, tokens)?;
    check_hooks(config, ids.len(), hooks)?;
    let positions: Vec<usize> = (0..ids.len()).collect();

    let tok = tape.embedding(model.tok_embedding, &ids)?;
    let pos = tape.embedding(model.pos_embedding, &positions)?;
    let mut h = tape.add(tok, pos)?;
    let mut block_outputs = Vec::new();

    for (l, layer) in model.layers.iter().enumerate() {
        let [wq, wk, wv, wo, w_gate, w_up, w_down] = &layer.linears;

        let x = tape.rms_norm(h, layer.attn_norm, NORM_EPS)?;
        let q = linear(tape, adapter, wq, x)?;
        let k = linear(tape, adapter, wk, x)?;
        let v = linear(tape, adapter, wv, x)?;
        let attn = tape.causal_attention(q, k, v, config.n_heads)?;
        let attn = linear(tape, adapter, wo, attn)?;
        h = tape.add(h, attn)?;

        let x = tape.rms_norm(h, layer.ffn_norm, NORM_EPS)?;
        let gate = linear(tape, adapter, w_gate, x)?;
        let up = linear(tape, adapter, w_up, x)?;
        let act = tape.silu(gate)?;
        let mixed = tape.mul_elem(act, up)?;
        let ffn = linear(tape, adapter, w_down, mixed)?;
        h = tape.add(h, ffn)?;

        for hook in hooks.iter().filter(|hk| hk.point.layer == l) {
            let rows = match &hook.point.positions {
                Positions::All => positions.clone(),
                Positions::At(ps) => ps.clone(),
            };
            if rows.is_empty() {
                continue;
            }
            let selected = tape.gather_rows(h, &rows)?;
            let edited = (hook.transform)(tape, selected)?;
            let (want, got) = (tape.shape(selected)?, tape.shape(edited)?);
            if want != got {
                return Err(Error::shape("hook", &want, &got));
            }
            h = tape.replace_rows(h, &rows, edited)?;
        }
        if capture {
            block_outputs.push(h);
        }
    }

    let x = tape.rms_norm(h, model.final_norm, NORM_EPS)?;
    let logits = tape.matmul(x, model.unembedding)?;
    Ok(ForwardPass {
        logits,
        block_outputs,
    })
}

/// Evaluation-mode forward pass; block outputs are captured only when
/// `trace` is set.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    hooks: &[Hook<'_>],
    trace: bool,
) -> Result<ForwardTrace> {
    let tape = Tape::new();
    let bound = weights.bind(&tape, false);
    let pass = forward_on_tape(&tape, &bound, tokens, None, hooks, trace)?;
    Ok(ForwardTrace {
        block_outputs: pass
            .block_outputs
            .into_iter()
            .map(|v| tape.value(v))
            .collect::<Result<_>>()?,
        logits: tape.value(pass.logits)?,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Returns only the appended tokens. Stops after
/// `max_new` tokens, after emitting `eos`, or when the context is full.
/// Hooks address absolute positions, so prompt-anchored hooks apply on
/// every step.
pub fn generate_greedy(
    weights: &ModelWeights,
    prompt: &[u32],
    max_new: usize,
    hooks: &[Hook<'_>],
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Config("generation needs a non-empty prompt".into()));
    }
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let max_seq = weights.config().max_seq;
    if prompt.len() > max_seq {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: max_seq,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < max_seq {
        let trace = forward(weights, &seq, hooks, false)?;
        let (rows, _) = trace.logits.dims2()?;
        let next = argmax(trace.logits.row(rows - 1)?) as u32;
        seq.push(next);
        out.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(out)
}
