//! Low-rank adapters on linear projections.
//!
//! For a frozen weight `W₀` (`d×k`, stored `out×in`) an adapter holds
//! `A: r×k` and `B: d×r`; the adapted projection is
//! `h = W₀x + (α/r)·B·A·x`. `A` starts Gaussian and `B` at zero, so a fresh
//! adapter contributes exact zeros. Merging folds `(α/r)·B·A` into `W₀`.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, layer_weight_name, LinearAdapter, ModelWeights, LAYER_LINEARS,
};
use crate::tensor::Tensor;
use crate::training::Trainable;

pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Weight-name patterns; `*` matches any run of characters.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 32.0,
            dropout_p: 0.05,
            targets: LAYER_LINEARS
                .iter()
                .map(|local| format!("layers.*.{local}"))
                .collect(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "LoRA alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "LoRA dropout must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Glob match where `*` stands for any (possibly empty) substring.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let (p, n) = (pattern.as_bytes(), name.as_bytes());
    let (mut pi, mut ni) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            backtrack = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((bp, bn)) = backtrack {
            pi = bp + 1;
            ni = bn + 1;
            backtrack = Some((bp, bn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub target: String,
    /// `r×k`
    pub a: Tensor,
    /// `d×r`
    pub b: Tensor,
}

pub fn a_name(target: &str) -> String {
    format!("lora.{target}.A")
}

pub fn b_name(target: &str) -> String {
    format!("lora.{target}.B")
}

#[derive(Clone, Debug)]
pub struct LoraModel {
    base: ModelWeights,
    layers: BTreeMap<String, LoraLayer>,
    config: LoraConfig,
}

fn linear_names(base: &ModelWeights) -> Vec<String> {
    (0..base.config().n_layers)
        .flat_map(|l| {
            LAYER_LINEARS
                .iter()
                .map(move |local| layer_weight_name(l, local))
        })
        .collect()
}

/// Wraps `base` with fresh adapters on every linear projection matched by
/// `config.targets`.
pub fn attach_lora(base: ModelWeights, config: LoraConfig, seed: u64) -> Result<LoraModel> {
    config.validate()?;
    let candidates = linear_names(&base);
    let mut targets: Vec<String> = Vec::new();
    for pattern in &config.targets {
        let matched: Vec<&String> = candidates
            .iter()
            .filter(|n| wildcard_match(pattern, n))
            .collect();
        if matched.is_empty() {
            return Err(Error::UnmatchedTarget(pattern.clone()));
        }
        targets.extend(matched.into_iter().cloned());
    }
    // Schema order, each target once.
    let targets: Vec<String> = candidates
        .into_iter()
        .filter(|c| targets.contains(c))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = BTreeMap::new();
    for target in targets {
        let w = base
            .get(&target)
            .expect("candidate names come from the schema");
        let (d, k) = w.dims2()?;
        if config.r > d.min(k) {
            return Err(Error::RankTooLarge {
                target,
                rank: config.r,
                max: d.min(k),
            });
        }
        let layer = LoraLayer {
            a: Tensor::randn(&[config.r, k], A_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d, config.r]),
            target: target.clone(),
        };
        layers.insert(target, layer);
    }
    Ok(LoraModel {
        base,
        layers,
        config,
    })
}

fn dropout_mask<R: Rng>(shape: &[usize], p: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask matches its shape")
}

fn delta_on_tape(
    tape: &Tape,
    a: Var,
    b: Var,
    x: Var,
    scale: f64,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let x = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let mask = tape.constant(dropout_mask(&tape.shape(x)?, p, rng));
            tape.mul_elem(x, mask)?
        }
        _ => x,
    };
    let ax = tape.matmul_nt(x, a)?;
    let bax = tape.matmul_nt(ax, b)?;
    tape.scale(bax, scale)
}

/// `(α/r)·B·A·x̃` for rows `x` (`n×k`, or a single `k`-vector), where `x̃`
/// is `x` under inverted dropout in training mode and `x` otherwise.
pub fn lora_forward_delta(
    layer: &LoraLayer,
    x: &Tensor,
    alpha: f64,
    r: usize,
    dropout_p: f64,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let vector = x.rank() == 1;
    let rows = if vector {
        x.reshape(&[1, x.len()])?
    } else {
        x.clone()
    };
    let tape = Tape::new();
    let (a, b) = (
        tape.constant(layer.a.clone()),
        tape.constant(layer.b.clone()),
    );
    let xv = tape.constant(rows);
    let dropout = train_mode.then_some((dropout_p, rng));
    let out = tape.value(delta_on_tape(&tape, a, b, xv, alpha / r as f64, dropout)?)?;
    if vector {
        out.reshape(&[out.len()])
    } else {
        Ok(out)
    }
}

/// Adapter tensors placed on a tape.
pub struct BoundLora {
    layers: BTreeMap<String, (Var, Var)>,
    scale: f64,
    dropout_p: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl LinearAdapter for BoundLora {
    fn adapt(&self, tape: &Tape, name: &str, input: Var, base: Var) -> Result<Var> {
        let Some(&(a, b)) = self.layers.get(name) else {
            return Ok(base);
        };
        let delta = match &self.rng {
            Some(rng) => {
                let mut rng = rng.borrow_mut();
                delta_on_tape(
                    tape,
                    a,
                    b,
                    input,
                    self.scale,
                    Some((self.dropout_p, &mut rng)),
                )?
            }
            None => delta_on_tape(tape, a, b, input, self.scale, None)?,
        };
        tape.add(base, delta)
    }
}

impl LoraModel {
    pub fn base(&self) -> &ModelWeights {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &LoraLayer> {
        self.layers.values()
    }

    pub fn layer(&self, target: &str) -> Option<&LoraLayer> {
        self.layers.get(target)
    }

    pub fn layer_mut(&mut self, target: &str) -> Option<&mut LoraLayer> {
        self.layers.get_mut(target)
    }

    /// Adapter vars looked up by their `lora.<target>.A/B` names. With
    /// `dropout_seed` set, the adapter runs in training mode.
    pub fn bind_vars(
        &self,
        vars: &BTreeMap<String, Var>,
        dropout_seed: Option<u64>,
    ) -> Result<BoundLora> {
        let mut layers = BTreeMap::new();
        for target in self.layers.keys() {
            let get = |n: String| {
                vars.get(&n)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("missing adapter tensor `{n}`")))
            };
            layers.insert(target.clone(), (get(a_name(target))?, get(b_name(target))?));
        }
        Ok(BoundLora {
            layers,
            scale: self.config.scale(),
            dropout_p: self.config.dropout_p,
            rng: dropout_seed.map(|s| RefCell::new(ChaCha8Rng::seed_from_u64(s))),
        })
    }

    /// Evaluation-mode adapter with every tensor as a tape constant.
    pub fn bind_constant(&self, tape: &Tape) -> BoundLora {
        let vars = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, tape.constant(t)))
            .collect();
        self.bind_vars(&vars, None)
            .expect("names come from this model")
    }

    /// Evaluation-mode logits of the unmerged model (dropout off).
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.base.bind(&tape, false);
        let adapter = self.bind_constant(&tape);
        let pass = forward_on_tape(&tape, &bound, tokens, Some(&adapter), &[], false)?;
        tape.value(pass.logits)
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.layers
            .values()
            .flat_map(|l| {
                [
                    (a_name(&l.target), l.a.clone()),
                    (b_name(&l.target), l.b.clone()),
                ]
            })
            .collect()
    }

    /// The trainable `A` and `B` tensors with their total scalar count.
    pub fn trainable_parameters(&self) -> (Vec<(String, &Tensor)>, usize) {
        let list: Vec<(String, &Tensor)> = self
            .layers
            .values()
            .flat_map(|l| [(a_name(&l.target), &l.a), (b_name(&l.target), &l.b)])
            .collect();
        let total = list.iter().map(|(_, t)| t.len()).sum();
        (list, total)
    }

    /// Base weights with `(α/r)·B·A` folded into every targeted projection.
    pub fn merge_and_unload(&self) -> Result<ModelWeights> {
        let scale = self.config.scale();
        let mut merged = self.base.clone();
        for layer in self.layers.values() {
            let ba = layer.b.matmul(&layer.a)?;
            let w0 = self.base.get(&layer.target).expect("targets exist in base");
            merged.set(&layer.target, w0.zip_map(&ba, |w, d| w + scale * d)?)?;
        }
        Ok(merged)
    }
}

impl Trainable for LoraModel {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (target, which) = name.strip_prefix("lora.")?.rsplit_once('.')?;
        let layer = self.layers.get_mut(target)?;
        match which {
            "A" => Some(&mut layer.a),
            "B" => Some(&mut layer.b),
            _ => None,
        }
    }
}
