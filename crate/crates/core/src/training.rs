//! Optimizer, the two loss regimes, and the two-stage orchestration.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{attach_lora, LoraConfig, LoraModel};
use crate::model::{forward_on_tape, BoundModel, ModelWeights};
use crate::reft::{attach_intervention, init_loreft, IntervenedModel, LoreftParams, ReftConfig};
use crate::tasks::SupervisedRecord;
use crate::tensor::Tensor;

/// Something whose named tensors an optimizer can update.
pub trait Trainable {
    /// Trainable tensors in a fixed order.
    fn parameters(&self) -> Vec<(String, Tensor)>;
    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor>;

    fn trainable_parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Trainable for ModelWeights {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

/// A trainable object that can also produce logits on a tape, given its
/// trainable tensors already bound there as `vars`.
pub trait StageTarget: Trainable {
    /// `dropout_seed` is set in training mode.
    fn logits(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        tokens: &[u32],
        last_position: usize,
        dropout_seed: Option<u64>,
    ) -> Result<Var>;
}

impl StageTarget for ModelWeights {
    fn logits(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        tokens: &[u32],
        _last_position: usize,
        _dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let bound = BoundModel::from_vars(self.config(), vars)?;
        Ok(forward_on_tape(tape, &bound, tokens, None, &[], false)?.logits)
    }
}

impl StageTarget for LoraModel {
    fn logits(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        tokens: &[u32],
        _last_position: usize,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let base = self.base().bind(tape, false);
        let adapter = self.bind_vars(vars, dropout_seed)?;
        Ok(forward_on_tape(tape, &base, tokens, Some(&adapter), &[], false)?.logits)
    }
}

impl StageTarget for IntervenedModel<'_> {
    fn logits(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        tokens: &[u32],
        last_position: usize,
        _dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let base = self.base().bind(tape, false);
        let bound = crate::reft::BoundLoreft::from_vars(vars)?;
        let hook = crate::model::Hook::new(
            crate::reft::hook_point(self.config(), last_position),
            move |tape, rows| bound.apply(tape, rows),
        );
        Ok(forward_on_tape(tape, &base, tokens, None, &[hook], false)?.logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 1,
            batch_size: 1,
            grad_accum: 1,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Stage-1 batching: one sequence per micro-batch, 32 accumulated.
    pub fn lora_stage() -> Self {
        Self {
            batch_size: 1,
            grad_accum: 32,
            ..Self::default()
        }
    }

    /// Stage-2 batching: 8 per micro-batch, 4 accumulated.
    pub fn reft_stage() -> Self {
        Self {
            batch_size: 8,
            grad_accum: 4,
            ..Self::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "batch_size and grad_accum must be at least 1".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Optimizer steps for `n` records: `epochs · ⌈n / effective batch⌉`.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.effective_batch())
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update over every parameter that has a gradient. All
/// gradients are checked before anything is written.
pub fn adamw_step<M: Trainable + ?Sized>(
    model: &mut M,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of `{name}`"),
                step: state.step as usize,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    for (name, g) in grads {
        let p = model
            .parameter_mut(name)
            .ok_or_else(|| Error::Config(format!("no trainable parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if config.weight_decay != 0.0 {
                pd[i] -= lr * config.weight_decay * pd[i];
            }
            pd[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Which tokens carry supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Next-token prediction over prompt, answer and `EOS`.
    FullSequence,
    /// The answer token at the last prompt position only.
    LastPosition,
    /// Full-sequence loss with the answer prediction counted again, weighted
    /// like the whole sequence, so it carries half the objective. Teaches a
    /// base model the answer format during pretraining.
    FullSequenceAnswer,
}

impl LossKind {
    /// Number of predictions the loss sums over for `record`.
    pub fn supervised_elements(self, record: &SupervisedRecord) -> usize {
        match self {
            LossKind::FullSequence | LossKind::FullSequenceAnswer => record.prompt_tokens.len() + 1,
            LossKind::LastPosition => 1,
        }
    }
}

/// Summed (not averaged) loss of one record with `vars` already bound.
pub fn record_loss<M: StageTarget + ?Sized>(
    model: &M,
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    record: &SupervisedRecord,
    kind: LossKind,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    match kind {
        LossKind::FullSequence => {
            sequence_loss(model, tape, vars, &record.full_sequence(), dropout_seed)
        }
        LossKind::LastPosition => {
            let logits = model.logits(
                tape,
                vars,
                &record.prompt_tokens,
                record.last_position,
                dropout_seed,
            )?;
            let row = tape.gather_rows(logits, &[record.last_position])?;
            tape.cross_entropy_sum(row, &[record.answer_token as usize])
        }
        LossKind::FullSequenceAnswer => {
            let seq = record.full_sequence();
            let n = seq.len();
            let logits = model.logits(tape, vars, &seq[..n - 1], n - 3, dropout_seed)?;
            let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
            let lm = tape.cross_entropy_sum(logits, &targets)?;
            let row = tape.gather_rows(logits, &[record.last_position])?;
            let answer = tape.cross_entropy_sum(row, &[record.answer_token as usize])?;
            let answer = tape.scale(answer, (record.prompt_tokens.len() + 1) as f64)?;
            tape.add(lm, answer)
        }
    }
}

/// Summed next-token loss over an arbitrary token sequence. Hooks anchored at
/// the last prompt position see the second-to-last input token.
pub fn sequence_loss<M: StageTarget + ?Sized>(
    model: &M,
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    seq: &[u32],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    if seq.len() < 3 {
        return Err(Error::Config(format!(
            "sequence of {} tokens is too short",
            seq.len()
        )));
    }
    let n = seq.len();
    let logits = model.logits(tape, vars, &seq[..n - 1], n - 3, dropout_seed)?;
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    tape.cross_entropy_sum(logits, &targets)
}

/// Places every trainable tensor of `model` on `tape` as a parameter.
pub fn bind_parameters<M: Trainable + ?Sized>(model: &M, tape: &Tape) -> BTreeMap<String, Var> {
    model
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, tape.param(t)))
        .collect()
}

#[derive(Clone, Copy)]
enum Item<'a> {
    Record(&'a SupervisedRecord, LossKind),
    Sequence(&'a [u32]),
}

impl Item<'_> {
    fn elements(self) -> usize {
        match self {
            Item::Record(r, kind) => kind.supervised_elements(r),
            Item::Sequence(s) => s.len().saturating_sub(1),
        }
    }

    fn loss<M: StageTarget + ?Sized>(
        self,
        model: &M,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        match self {
            Item::Record(r, kind) => record_loss(model, tape, vars, r, kind, dropout_seed),
            Item::Sequence(s) => sequence_loss(model, tape, vars, s, dropout_seed),
        }
    }
}

fn items_mean_loss<M: StageTarget + ?Sized>(model: &M, items: &[Item<'_>]) -> Result<f64> {
    let mut sum = 0.0;
    for item in items {
        let tape = Tape::new();
        let vars: BTreeMap<String, Var> = model
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, tape.constant(t)))
            .collect();
        let loss = item.loss(model, &tape, &vars, None)?;
        sum += tape.value(loss)?.item()?;
    }
    let total: usize = items.iter().map(|i| i.elements()).sum();
    Ok(sum / total as f64)
}

fn items_gradients<M: StageTarget + ?Sized>(
    model: &M,
    items: &[Item<'_>],
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let total: usize = items.iter().map(|i| i.elements()).sum();
    let seeds = dropout_seed.map(|s| record_seeds(s, items.len()));
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut sum = 0.0;
    for (i, item) in items.iter().enumerate() {
        let (l, g) = item_gradients(model, *item, seeds.as_ref().map(|s| s[i]), total)?;
        sum += l;
        accumulate(&mut grads, g)?;
    }
    Ok((sum / total as f64, grads))
}

fn record_items(records: &[SupervisedRecord], kind: LossKind) -> Vec<Item<'_>> {
    records.iter().map(|r| Item::Record(r, kind)).collect()
}

/// Mean loss of `records` in evaluation mode.
pub fn mean_loss<M: StageTarget + ?Sized>(
    model: &M,
    records: &[SupervisedRecord],
    kind: LossKind,
) -> Result<f64> {
    items_mean_loss(model, &record_items(records, kind))
}

/// Mean next-token loss of the model over one token sequence.
pub fn loss_full_sequence(model: &(impl StageTarget + ?Sized), tokens: &[u32]) -> Result<f64> {
    items_mean_loss(model, &[Item::Sequence(tokens)])
}

/// Answer-token loss at the last prompt position.
pub fn loss_last_position(
    model: &(impl StageTarget + ?Sized),
    record: &SupervisedRecord,
) -> Result<f64> {
    mean_loss(model, std::slice::from_ref(record), LossKind::LastPosition)
}

/// Mean loss over `records` and its gradient for every trainable tensor.
/// `dropout_seed` switches on training mode; each record gets a distinct
/// stream derived from it.
pub fn loss_and_gradients<M: StageTarget + ?Sized>(
    model: &M,
    records: &[SupervisedRecord],
    kind: LossKind,
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    items_gradients(model, &record_items(records, kind), dropout_seed)
}

/// Like [`loss_and_gradients`] with full-sequence loss over raw token
/// sequences, for models whose vocabulary is not the byte tokenizer's.
pub fn sequence_loss_and_gradients<M: StageTarget + ?Sized>(
    model: &M,
    sequences: &[Vec<u32>],
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let items: Vec<Item<'_>> = sequences.iter().map(|s| Item::Sequence(s)).collect();
    items_gradients(model, &items, dropout_seed)
}

/// Evaluation-mode mean loss over raw token sequences.
pub fn sequence_mean_loss<M: StageTarget + ?Sized>(
    model: &M,
    sequences: &[Vec<u32>],
) -> Result<f64> {
    let items: Vec<Item<'_>> = sequences.iter().map(|s| Item::Sequence(s)).collect();
    items_mean_loss(model, &items)
}

fn record_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, add: BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in add {
        match into.get_mut(&name) {
            Some(acc) => {
                let dst = acc.data_mut();
                for (a, b) in dst.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Summed loss of one item, and gradients of `loss / normalizer`.
fn item_gradients<M: StageTarget + ?Sized>(
    model: &M,
    item: Item<'_>,
    dropout_seed: Option<u64>,
    normalizer: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let vars = bind_parameters(model, &tape);
    let loss = item.loss(model, &tape, &vars, dropout_seed)?;
    let value = tape.value(loss)?.item()?;
    let scaled = tape.scale(loss, 1.0 / normalizer as f64)?;
    let grads = tape.backward(scaled)?;
    let mut out = BTreeMap::new();
    for (name, v) in &vars {
        out.insert(name.clone(), grads.get_or_zeros(&tape, *v)?);
    }
    Ok((value, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Lora,
    Reft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs_run: usize,
    pub optimizer_steps: usize,
    /// Mean per-token loss over the final epoch.
    pub final_mean_loss: f64,
    pub wall_seconds: f64,
    pub trainable_param_count: usize,
}

/// Epoch order for `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `model` on `records` with AdamW. Each optimizer step takes
/// `batch_size · grad_accum` records; their summed losses are divided by
/// the step's total number of supervised predictions, so the split between
/// micro-batches and accumulation does not change the update.
pub fn train_stage<M: StageTarget + ?Sized>(
    stage: Stage,
    model: &mut M,
    records: &[SupervisedRecord],
    config: &TrainConfig,
    kind: LossKind,
) -> Result<StageReport> {
    config.validate()?;
    let start = Instant::now();
    let trainable_param_count = model.trainable_parameter_count();
    if config.epochs > 0 && records.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let dropout = stage != Stage::Reft;
    let mut state = AdamState::default();
    let mut final_mean_loss = 0.0;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, records.len());
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for chunk in order.chunks(config.effective_batch()) {
            let batch: Vec<SupervisedRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let seed = dropout.then(|| step_seed(config.seed, step));
            let (mean, grads) = loss_and_gradients(&*model, &batch, kind, seed)?;
            if !mean.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step,
                });
            }
            let count: usize = batch.iter().map(|r| kind.supervised_elements(r)).sum();
            epoch_sum += mean * count as f64;
            epoch_count += count;
            adamw_step(model, &grads, &mut state, config)?;
            step += 1;
        }
        final_mean_loss = epoch_sum / epoch_count as f64;
        log::debug!("{stage:?} epoch {} loss {final_mean_loss:.5}", epoch + 1);
    }
    Ok(StageReport {
        stage,
        epochs_run: config.epochs,
        optimizer_steps: step,
        final_mean_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        trainable_param_count,
    })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - step as u64);
    rng.gen()
}

/// Trains every base weight under `kind`.
pub fn pretrain(
    weights: &mut ModelWeights,
    records: &[SupervisedRecord],
    config: &TrainConfig,
    kind: LossKind,
) -> Result<StageReport> {
    train_stage(Stage::Pretrain, weights, records, config, kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeftPlan {
    pub lora_epochs: usize,
    pub reft_epochs: usize,
    pub lora_config: LoraConfig,
    pub reft_config: ReftConfig,
    /// Optimizer settings per stage; their `epochs` are replaced by the
    /// plan's counts.
    pub lora_train: TrainConfig,
    pub reft_train: TrainConfig,
}

impl HeftPlan {
    /// Default adapter, intervention and batching for `model`.
    pub fn new(model: &crate::model::ModelConfig, lora_epochs: usize, reft_epochs: usize) -> Self {
        Self {
            lora_epochs,
            reft_epochs,
            lora_config: LoraConfig::default(),
            reft_config: ReftConfig::for_model(model, 4),
            lora_train: TrainConfig::lora_stage(),
            reft_train: TrainConfig::reft_stage(),
        }
    }

    pub fn validate(&self, model: &crate::model::ModelConfig) -> Result<()> {
        self.lora_config.validate()?;
        self.reft_config.validate(model)?;
        self.lora_train.validate()?;
        self.reft_train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct HeftOutcome {
    /// Stage-1 weights merged into the base (the base itself when Stage 1
    /// is skipped).
    pub merged: ModelWeights,
    pub intervention: LoreftParams,
    /// One report per stage that ran.
    pub reports: Vec<StageReport>,
}

/// LoRA on full-sequence loss, merge, then LoReFT on last-position loss
/// over the frozen merged weights. A stage with zero epochs is skipped and
/// leaves its no-op initialization in place.
pub fn run_heft(
    base: &ModelWeights,
    plan: &HeftPlan,
    data: &[SupervisedRecord],
) -> Result<HeftOutcome> {
    plan.validate(base.config())?;
    let mut reports = Vec::new();

    let merged = if plan.lora_epochs > 0 {
        let mut lora = attach_lora(base.clone(), plan.lora_config.clone(), plan.lora_train.seed)?;
        let cfg = TrainConfig {
            epochs: plan.lora_epochs,
            ..plan.lora_train.clone()
        };
        reports.push(train_stage(
            Stage::Lora,
            &mut lora,
            data,
            &cfg,
            LossKind::FullSequence,
        )?);
        lora.merge_and_unload()?
    } else {
        base.clone()
    };

    let params = init_loreft(
        base.config().d_model,
        plan.reft_config.low_rank_dimension,
        plan.reft_train.seed,
    )?;
    let mut intervened = attach_intervention(&merged, plan.reft_config.clone(), params)?;
    if plan.reft_epochs > 0 {
        let cfg = TrainConfig {
            epochs: plan.reft_epochs,
            ..plan.reft_train.clone()
        };
        reports.push(train_stage(
            Stage::Reft,
            &mut intervened,
            data,
            &cfg,
            LossKind::LastPosition,
        )?);
    }
    let intervention = intervened.into_params();
    Ok(HeftOutcome {
        merged,
        intervention,
        reports,
    })
}
