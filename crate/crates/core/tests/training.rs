//! Loss regimes, the optimizer loop, and the two-stage orchestration.

use heft_core::autodiff::Tape;
use heft_core::gradcheck::{fd_gradient, relative_error};
use heft_core::lora::{attach_lora, LoraConfig, LoraModel};
use heft_core::model::{forward, init_model, ModelConfig, ModelWeights};
use heft_core::reft::{attach_intervention, init_loreft, IntervenedModel, ReftConfig};
use heft_core::synth::{synth_generate, Chain};
use heft_core::tasks::{build_supervised_record, SupervisedRecord};
use heft_core::tokenizer::ByteTokenizer;
use heft_core::training::*;
use heft_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 261,
        max_seq: 160,
        seed: 21,
    }
}

fn data(n: usize, seed: u64) -> Vec<SupervisedRecord> {
    synth_generate(seed, n, 6, 3, Chain::Two)
        .unwrap()
        .iter()
        .map(|e| build_supervised_record(e, &ByteTokenizer, 160).unwrap())
        .collect()
}

fn intervened(base: &ModelWeights) -> IntervenedModel<'_> {
    let cfg = ReftConfig::for_model(base.config(), 2);
    attach_intervention(base, cfg, init_loreft(16, 2, 5).unwrap()).unwrap()
}

fn bits(m: &impl Trainable) -> Vec<Tensor> {
    m.parameters().into_iter().map(|(_, t)| t).collect()
}

fn same_bits(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_eq(y))
}

fn fast(epochs: usize, batch_size: usize, grad_accum: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs,
        batch_size,
        grad_accum,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut w = init_model(&config()).unwrap();
    w.set("unembedding", Tensor::zeros(&[16, 261])).unwrap();
    let rec = &data(2, 1)[0];
    let loss = loss_full_sequence(&w, &rec.full_sequence()).unwrap();
    assert!((loss - (261f64).ln()).abs() < 1e-12, "{loss}");
    let loss = loss_last_position(&intervened(&w), rec).unwrap();
    assert!((loss - (261f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_answer_has_vanishing_loss() {
    let tape = Tape::new();
    let mut row = vec![0.0; 261];
    row[7] = 50.0;
    let logits = tape.constant(Tensor::matrix(1, 261, row).unwrap());
    let loss = tape
        .value(tape.cross_entropy_sum(logits, &[7]).unwrap())
        .unwrap()
        .item()
        .unwrap();
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn batch_loss_is_the_mean_of_record_losses() {
    let w = init_model(&config()).unwrap();
    let iv = intervened(&w);
    let recs = data(4, 2);
    let each: Vec<f64> = recs
        .iter()
        .map(|r| loss_last_position(&iv, r).unwrap())
        .collect();
    let mean = mean_loss(&iv, &recs, LossKind::LastPosition).unwrap();
    assert!((mean - each.iter().sum::<f64>() / 4.0).abs() < 1e-14);
}

/// Gradient of every trainable tensor against finite differences of the
/// evaluation-mode mean loss.
fn fd_audit<M: StageTarget + Clone>(model: &M, recs: &[SupervisedRecord], kind: LossKind) {
    let (_, grads) = loss_and_gradients(model, recs, kind, None).unwrap();
    for (name, value) in model.parameters() {
        let numeric = fd_gradient(
            |x| {
                let mut m = model.clone();
                *m.parameter_mut(&name).unwrap() = x.clone();
                mean_loss(&m, recs, kind)
            },
            &value,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&grads[&name], &numeric).unwrap();
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        vocab_size: 261,
        max_seq: 160,
        seed: 4,
    }
}

#[test]
fn lora_gradients_match_finite_differences() {
    let base = init_model(&tiny()).unwrap();
    let cfg = LoraConfig {
        r: 2,
        targets: vec!["layers.1.*".into()],
        ..LoraConfig::default()
    };
    let mut lora: LoraModel = attach_lora(base, cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, t) in lora.parameters() {
        *lora.parameter_mut(&name).unwrap() = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    fd_audit(&lora, &data(2, 3)[..1], LossKind::FullSequence);
}

#[test]
fn answer_weighted_loss_gradients_match_finite_differences() {
    let base = init_model(&tiny()).unwrap();
    let cfg = LoraConfig {
        r: 2,
        targets: vec!["layers.1.*".into()],
        ..LoraConfig::default()
    };
    let mut lora: LoraModel = attach_lora(base, cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (name, t) in lora.parameters() {
        *lora.parameter_mut(&name).unwrap() = Tensor::randn(t.shape(), 0.05, &mut rng);
    }
    fd_audit(&lora, &data(2, 4)[..1], LossKind::FullSequenceAnswer);
}

#[test]
fn answer_weighted_loss_is_sequence_loss_plus_scaled_answer_loss() {
    let w = init_model(&config()).unwrap();
    let rec = &data(2, 9)[0];
    let both = mean_loss(&w, std::slice::from_ref(rec), LossKind::FullSequenceAnswer).unwrap();
    let full = mean_loss(&w, std::slice::from_ref(rec), LossKind::FullSequence).unwrap();
    let last = mean_loss(&w, std::slice::from_ref(rec), LossKind::LastPosition).unwrap();
    assert!(
        (both - (full + last)).abs() < 1e-12,
        "{both} vs {full} + {last}"
    );
}

#[derive(Clone)]
struct OwnedIntervention {
    base: ModelWeights,
    params: heft_core::reft::LoreftParams,
}

impl Trainable for OwnedIntervention {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.params.parameters()
    }
    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.parameter_mut(name)
    }
}

impl StageTarget for OwnedIntervention {
    fn logits(
        &self,
        tape: &Tape,
        vars: &std::collections::BTreeMap<String, heft_core::Var>,
        tokens: &[u32],
        last: usize,
        seed: Option<u64>,
    ) -> heft_core::Result<heft_core::Var> {
        let cfg = ReftConfig::for_model(self.base.config(), 2);
        attach_intervention(&self.base, cfg, self.params.clone())?
            .logits(tape, vars, tokens, last, seed)
    }
}

#[test]
fn reft_gradients_match_finite_differences() {
    let base = init_model(&tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = init_loreft(8, 2, 3).unwrap();
    params.transform = Tensor::randn(&[2, 2], 1.0, &mut rng);
    params.bias = Tensor::randn(&[2], 1.0, &mut rng);
    fd_audit(
        &OwnedIntervention { base, params },
        &data(4, 4)[..2],
        LossKind::LastPosition,
    );
}

#[test]
fn pretraining_gradients_match_finite_differences_on_a_sample() {
    // Every base tensor, checked on a handful of coordinates each.
    let w = init_model(&tiny()).unwrap();
    let recs = &data(2, 5)[..1];
    let (_, grads) = loss_and_gradients(&w, recs, LossKind::FullSequence, None).unwrap();
    for (name, value) in w.parameters() {
        for &i in &[0, value.len() / 2, value.len() - 1] {
            let f = |x: f64| {
                let mut m = w.clone();
                m.get_mut(&name).unwrap().data_mut()[i] = x;
                mean_loss(&m, recs, LossKind::FullSequence).unwrap()
            };
            let v = value.data()[i];
            let numeric = (f(v + 1e-5) - f(v - 1e-5)) / 2e-5;
            let analytic = grads[&name].data()[i];
            // Single coordinates can be tiny, so rounding in the
            // difference quotient gets an absolute allowance.
            let tol = 1e-6 * numeric.abs().max(analytic.abs()) + 1e-9;
            assert!(
                (numeric - analytic).abs() < tol,
                "{name}[{i}]: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn intervention_gradients_reach_only_its_tensors() {
    let w = init_model(&config()).unwrap();
    let mut iv = intervened(&w);
    iv.parameter_mut("reft.b").unwrap().data_mut()[0] = 0.5;
    let (_, grads) = loss_and_gradients(&iv, &data(2, 6), LossKind::LastPosition, None).unwrap();
    let names: Vec<&str> = grads.keys().map(|k| k.as_str()).collect();
    assert_eq!(names, ["reft.R", "reft.W", "reft.b"]);
    assert!(grads.values().all(|g| g.norm() > 0.0));
}

#[test]
fn zero_epochs_change_nothing() {
    let w = init_model(&config()).unwrap();
    let mut lora = attach_lora(w.clone(), LoraConfig::default(), 0).unwrap();
    let before = bits(&lora);
    let report = train_stage(
        Stage::Lora,
        &mut lora,
        &[],
        &fast(0, 1, 1),
        LossKind::FullSequence,
    )
    .unwrap();
    assert_eq!(report.optimizer_steps, 0);
    assert!(same_bits(&before, &bits(&lora)));
}

#[test]
fn step_count_follows_effective_batch() {
    let w = init_model(&config()).unwrap();
    let mut iv = intervened(&w);
    let report = train_stage(
        Stage::Reft,
        &mut iv,
        &data(64, 7),
        &fast(1, 8, 4),
        LossKind::LastPosition,
    )
    .unwrap();
    assert_eq!(report.optimizer_steps, 2);
    assert_eq!(report.trainable_param_count, 2 * 16 + 4 + 2);
    assert!(report.final_mean_loss.is_finite() && report.wall_seconds >= 0.0);
}

#[test]
fn accumulation_split_does_not_change_the_update() {
    let w = init_model(&config()).unwrap();
    let recs = data(12, 8);
    let run = |batch, accum| {
        let mut lora = attach_lora(w.clone(), LoraConfig::default(), 2).unwrap();
        train_stage(
            Stage::Lora,
            &mut lora,
            &recs,
            &fast(2, batch, accum),
            LossKind::FullSequence,
        )
        .unwrap();
        bits(&lora)
    };
    let a = run(1, 4);
    assert!(same_bits(&a, &run(4, 1)));
    assert!(same_bits(&a, &run(2, 2)));
    assert!(!same_bits(&a, &run(1, 3)));
}

#[test]
fn training_is_deterministic() {
    let w = init_model(&config()).unwrap();
    let recs = data(8, 9);
    let run = || {
        let mut lora = attach_lora(w.clone(), LoraConfig::default(), 3).unwrap();
        train_stage(
            Stage::Lora,
            &mut lora,
            &recs,
            &fast(1, 2, 1),
            LossKind::FullSequence,
        )
        .unwrap();
        bits(&lora)
    };
    assert!(same_bits(&run(), &run()));
}

#[test]
fn memorization_set_loss_falls() {
    let mut w = init_model(&config()).unwrap();
    let recs = data(16, 10);
    let before = mean_loss(&w, &recs, LossKind::FullSequence).unwrap();
    let report = pretrain(&mut w, &recs, &fast(50, 16, 1), LossKind::FullSequence).unwrap();
    assert_eq!(report.optimizer_steps, 50);
    let after = mean_loss(&w, &recs, LossKind::FullSequence).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn non_finite_loss_reports_its_step() {
    let mut w = init_model(&config()).unwrap();
    w.get_mut("final_norm").unwrap().data_mut()[0] = f64::NAN;
    let err = pretrain(&mut w, &data(4, 11), &fast(1, 2, 1), LossKind::FullSequence).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
}

#[test]
fn stages_leave_their_base_untouched() {
    let w = init_model(&config()).unwrap();
    let recs = data(8, 12);
    let mut lora = attach_lora(w.clone(), LoraConfig::default(), 0).unwrap();
    let before = lora.base().fingerprint();
    train_stage(
        Stage::Lora,
        &mut lora,
        &recs,
        &fast(1, 4, 1),
        LossKind::FullSequence,
    )
    .unwrap();
    assert_eq!(lora.base().fingerprint(), before);
    assert_ne!(lora.merge_and_unload().unwrap().fingerprint(), before);

    let mut iv = intervened(&w);
    train_stage(
        Stage::Reft,
        &mut iv,
        &recs,
        &fast(1, 4, 1),
        LossKind::LastPosition,
    )
    .unwrap();
    assert_eq!(iv.base().fingerprint(), before);
}

#[test]
fn empty_plan_is_the_base_model() {
    let w = init_model(&config()).unwrap();
    let plan = HeftPlan::new(w.config(), 0, 0);
    let out = run_heft(&w, &plan, &data(4, 13)).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.merged.fingerprint(), w.fingerprint());
    let iv = attach_intervention(&out.merged, plan.reft_config.clone(), out.intervention).unwrap();
    let tokens = &data(2, 13)[0].prompt_tokens;
    let want = forward(&w, tokens, &[], false).unwrap().logits;
    assert!(iv
        .forward(tokens, tokens.len() - 1, false)
        .unwrap()
        .logits
        .bits_eq(&want));
}

#[test]
fn single_stage_plans_degenerate_cleanly() {
    let w = init_model(&config()).unwrap();
    let recs = data(8, 14);
    let mut plan = HeftPlan::new(w.config(), 0, 1);
    plan.reft_train = fast(0, 4, 1);
    let reft_only = run_heft(&w, &plan, &recs).unwrap();
    assert_eq!(reft_only.merged.fingerprint(), w.fingerprint());
    assert_eq!(reft_only.reports.len(), 1);
    assert_eq!(reft_only.reports[0].stage, Stage::Reft);

    let mut plan = HeftPlan::new(w.config(), 1, 0);
    plan.lora_train = fast(0, 4, 1);
    let lora_only = run_heft(&w, &plan, &recs).unwrap();
    let init = init_loreft(16, 4, plan.reft_train.seed).unwrap();
    assert!(lora_only.intervention.transform.bits_eq(&init.transform));
    assert!(lora_only.intervention.bias.bits_eq(&init.bias));
    assert_eq!(lora_only.reports[0].stage, Stage::Lora);
}

#[test]
fn two_stage_runs_are_reproducible() {
    let w = init_model(&config()).unwrap();
    let recs = data(8, 15);
    let mut plan = HeftPlan::new(w.config(), 1, 1);
    plan.lora_train = fast(0, 4, 1);
    plan.reft_train = fast(0, 4, 1);
    let a = run_heft(&w, &plan, &recs).unwrap();
    let b = run_heft(&w, &plan, &recs).unwrap();
    assert_eq!(a.merged.fingerprint(), b.merged.fingerprint());
    assert!(same_bits(&bits(&a.intervention), &bits(&b.intervention)));
    assert_ne!(a.merged.fingerprint(), w.fingerprint());
}
