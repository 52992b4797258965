//! Low-rank linear subspace interventions on block outputs.
//!
//! The edit applied to a hidden vector `h` is
//!
//! ```text
//! Φ(h) = h + Rᵀ((W(Rh) + b) − Rh)
//! ```
//!
//! with `R: r×d`, `W: r×r`, `b: r`. `R` starts with orthonormal rows, `W` at
//! the identity and `b` at zero, which makes a fresh intervention an exact
//! no-op. Only the final prompt position of the configured layer is edited.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    forward, generate_greedy, Component, ForwardTrace, Hook, HookPoint, ModelConfig, ModelWeights,
    Positions,
};
use crate::tensor::Tensor;
use crate::training::Trainable;

pub const R_NAME: &str = "reft.R";
pub const W_NAME: &str = "reft.W";
pub const B_NAME: &str = "reft.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    LastPrompt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReftConfig {
    pub layer: usize,
    pub component: Component,
    pub low_rank_dimension: usize,
    pub position_rule: PositionRule,
}

impl ReftConfig {
    /// Intervention at the depth-scaled layer of `model`.
    pub fn for_model(model: &ModelConfig, low_rank_dimension: usize) -> Self {
        Self {
            layer: select_reft_layer(model.n_layers),
            component: Component::BlockOutput,
            low_rank_dimension,
            position_rule: PositionRule::LastPrompt,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.layer >= model.n_layers {
            return Err(Error::Index {
                what: "intervention layer",
                index: self.layer,
                bound: model.n_layers,
            });
        }
        if self.low_rank_dimension == 0 || self.low_rank_dimension > model.d_model {
            return Err(Error::RankTooLarge {
                target: "reft".into(),
                rank: self.low_rank_dimension,
                max: model.d_model,
            });
        }
        Ok(())
    }
}

/// Layer 15 of a 32-layer model, scaled to `n_layers` and clamped.
pub fn select_reft_layer(n_layers: usize) -> usize {
    (n_layers * 15 / 32).min(n_layers.saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoreftParams {
    /// Projection `R`, `r×d`.
    pub projection: Tensor,
    /// Subspace transform `W`, `r×r`.
    pub transform: Tensor,
    /// Subspace bias `b`, length `r`.
    pub bias: Tensor,
}

/// Orthonormalizes the rows of `rows` with modified Gram–Schmidt. Returns
/// `None` if the rows are (numerically) linearly dependent.
pub fn gram_schmidt(rows: &Tensor) -> Option<Tensor> {
    let (r, d) = rows.dims2().ok()?;
    let mut out = rows.data().to_vec();
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = (0..d).map(|c| out[i * d + c] * out[j * d + c]).sum();
            for c in 0..d {
                out[i * d + c] -= dot * out[j * d + c];
            }
        }
        let norm = (0..d).map(|c| out[i * d + c].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return None;
        }
        for c in 0..d {
            out[i * d + c] /= norm;
        }
    }
    Tensor::matrix(r, d, out).ok()
}

pub fn init_loreft(d_model: usize, r: usize, seed: u64) -> Result<LoreftParams> {
    if r == 0 || r > d_model {
        return Err(Error::RankTooLarge {
            target: "reft".into(),
            rank: r,
            max: d_model,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = loop {
        if let Some(q) = gram_schmidt(&Tensor::randn(&[r, d_model], 1.0, &mut rng)) {
            break q;
        }
    };
    Ok(LoreftParams {
        projection,
        transform: Tensor::eye(r),
        bias: Tensor::zeros(&[r]),
    })
}

/// Intervention tensors placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLoreft {
    pub projection: Var,
    pub transform: Var,
    pub bias: Var,
}

impl BoundLoreft {
    /// Applies the edit to each row of `rows` (`n×d`).
    pub fn apply(&self, tape: &Tape, rows: Var) -> Result<Var> {
        let rh = tape.matmul_nt(rows, self.projection)?;
        let wrh = tape.matmul_nt(rh, self.transform)?;
        let target = tape.add(wrh, self.bias)?;
        let diff = tape.sub(target, rh)?;
        let edit = tape.matmul(diff, self.projection)?;
        tape.add(rows, edit)
    }

    pub fn from_vars(vars: &BTreeMap<String, Var>) -> Result<Self> {
        let get = |n: &str| {
            vars.get(n)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing intervention tensor `{n}`")))
        };
        Ok(Self {
            projection: get(R_NAME)?,
            transform: get(W_NAME)?,
            bias: get(B_NAME)?,
        })
    }
}

impl LoreftParams {
    pub fn low_rank_dimension(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.projection.len() + self.transform.len() + self.bias.len()
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let r = self.projection.shape().first().copied().unwrap_or(0);
        if self.projection.shape() != [r, d_model]
            || self.transform.shape() != [r, r]
            || self.bias.shape() != [r]
        {
            return Err(Error::shape(
                "loreft",
                self.projection.shape(),
                &[r, d_model],
            ));
        }
        Ok(())
    }

    pub fn bind_constant(&self, tape: &Tape) -> BoundLoreft {
        BoundLoreft {
            projection: tape.constant(self.projection.clone()),
            transform: tape.constant(self.transform.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }

    /// Named tensors, as stored in checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            (R_NAME.to_string(), self.projection.clone()),
            (W_NAME.to_string(), self.transform.clone()),
            (B_NAME.to_string(), self.bias.clone()),
        ]
    }

    pub fn from_named(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |n: &str| {
            tensors
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing intervention tensor `{n}`")))
        };
        let params = Self {
            projection: get(R_NAME)?,
            transform: get(W_NAME)?,
            bias: get(B_NAME)?,
        };
        let (_, d) = params.projection.dims2()?;
        params.validate(d)?;
        Ok(params)
    }
}

impl Trainable for LoreftParams {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            R_NAME => Some(&mut self.projection),
            W_NAME => Some(&mut self.transform),
            B_NAME => Some(&mut self.bias),
            _ => None,
        }
    }
}

/// `Φ(h)` for a vector `h` of length `d`, or row-wise for an `n×d` matrix.
pub fn apply_loreft(params: &LoreftParams, h: &Tensor) -> Result<Tensor> {
    let d = params.d_model();
    let vector = h.rank() == 1;
    let rows = if vector {
        h.reshape(&[1, h.len()])?
    } else {
        h.clone()
    };
    if rows.rank() != 2 || rows.shape()[1] != d {
        return Err(Error::shape(
            "apply_loreft",
            h.shape(),
            params.projection.shape(),
        ));
    }
    params.validate(d)?;
    let tape = Tape::new();
    let bound = params.bind_constant(&tape);
    let x = tape.constant(rows);
    let out = tape.value(bound.apply(&tape, x)?)?;
    if vector {
        out.reshape(&[d])
    } else {
        Ok(out)
    }
}

/// A frozen base model with an attached intervention.
#[derive(Clone)]
pub struct IntervenedModel<'a> {
    base: &'a ModelWeights,
    config: ReftConfig,
    params: LoreftParams,
}

pub fn attach_intervention<'a>(
    base: &'a ModelWeights,
    config: ReftConfig,
    params: LoreftParams,
) -> Result<IntervenedModel<'a>> {
    config.validate(base.config())?;
    params.validate(base.config().d_model)?;
    if params.low_rank_dimension() != config.low_rank_dimension {
        return Err(Error::Config(format!(
            "intervention rank {} does not match configured {}",
            params.low_rank_dimension(),
            config.low_rank_dimension
        )));
    }
    Ok(IntervenedModel {
        base,
        config,
        params,
    })
}

/// Hook point for the configured layer at the last prompt position.
pub fn hook_point(config: &ReftConfig, last_position: usize) -> HookPoint {
    HookPoint {
        layer: config.layer,
        component: config.component,
        positions: match config.position_rule {
            PositionRule::LastPrompt => Positions::At(vec![last_position]),
        },
    }
}

impl<'a> IntervenedModel<'a> {
    pub fn base(&self) -> &ModelWeights {
        self.base
    }

    pub fn config(&self) -> &ReftConfig {
        &self.config
    }

    pub fn params(&self) -> &LoreftParams {
        &self.params
    }

    pub fn into_params(self) -> LoreftParams {
        self.params
    }

    /// `r·d + r² + r`.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Evaluation hook anchored at `last_position`; binds the intervention
    /// as constants on whichever tape runs the forward pass.
    pub fn hook(&self, last_position: usize) -> Hook<'_> {
        let params = &self.params;
        Hook::new(
            hook_point(&self.config, last_position),
            move |tape, rows| params.bind_constant(tape).apply(tape, rows),
        )
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        last_position: usize,
        trace: bool,
    ) -> Result<ForwardTrace> {
        forward(self.base, tokens, &[self.hook(last_position)], trace)
    }

    /// Greedy continuation of `prompt`, intervening at its last position
    /// on every decoding step.
    pub fn generate(&self, prompt: &[u32], max_new: usize, eos: Option<u32>) -> Result<Vec<u32>> {
        let last = prompt
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Config("generation needs a non-empty prompt".into()))?;
        generate_greedy(self.base, prompt, max_new, &[self.hook(last)], eos)
    }
}

impl Trainable for IntervenedModel<'_> {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.params.parameters()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.parameter_mut(name)
    }
}
