//! Experiment grids: one shared base, several two-stage plans.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::{write_atomic, ModelArtifact};
use crate::harness::eval::evaluate;
use crate::harness::results::{
    comparison_csv, emit_plot_data, read_results, write_results, Method, RunRecord,
};
use crate::lora::LoraConfig;
use crate::model::{init_model, ModelConfig, ModelWeights};
use crate::reft::{attach_intervention, ReftConfig};
use crate::synth::{synth_generate, Chain};
use crate::tasks::{build_supervised_record, load_boolq_jsonl, BoolExample, SupervisedRecord};
use crate::tokenizer::ByteTokenizer;
use crate::training::{pretrain, run_heft, HeftPlan, LossKind, StageReport, TrainConfig};

/// Where examples come from. Synthetic sets can be sliced so that train
/// and evaluation splits share one generated world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Jsonl {
        path: PathBuf,
    },
    Synth {
        seed: u64,
        n: usize,
        n_entities: usize,
        n_properties: usize,
        chain: Chain,
        #[serde(default)]
        skip: usize,
        #[serde(default)]
        take: Option<usize>,
    },
}

impl DatasetSpec {
    /// Relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Vec<BoolExample>> {
        match self {
            DatasetSpec::Jsonl { path } => load_boolq_jsonl(base_dir.join(path)),
            DatasetSpec::Synth {
                seed,
                n,
                n_entities,
                n_properties,
                chain,
                skip,
                take,
            } => {
                let all = synth_generate(*seed, *n, *n_entities, *n_properties, *chain)?;
                let end = take.map_or(all.len(), |t| skip.saturating_add(t));
                if *skip >= all.len() || end > all.len() {
                    return Err(Error::Experiment(format!(
                        "slice {skip}..{end} is outside the {} generated examples",
                        all.len()
                    )));
                }
                Ok(all[*skip..end].to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub data: DatasetSpec,
    pub train: TrainConfig,
    #[serde(default = "default_pretrain_loss")]
    pub loss: LossKind,
}

fn default_pretrain_loss() -> LossKind {
    LossKind::FullSequence
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub lora_epochs: usize,
    pub reft_epochs: usize,
}

fn default_reft_rank() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Trains the base from its seeded initialization before any plan.
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
    pub train_data: DatasetSpec,
    pub eval_data: DatasetSpec,
    pub plans: Vec<PlanSpec>,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default = "default_reft_rank")]
    pub reft_rank: usize,
    #[serde(default = "TrainConfig::lora_stage")]
    pub lora_train: TrainConfig,
    #[serde(default = "TrainConfig::reft_stage")]
    pub reft_train: TrainConfig,
    /// Also score the base model with both stages skipped.
    #[serde(default = "default_true")]
    pub include_baseline: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.plans.is_empty() {
            return Err(Error::Experiment("no plans".into()));
        }
        for p in &self.plans {
            self.plan(p).validate(&self.model)?;
        }
        if let Some(pre) = &self.pretrain {
            pre.train.validate()?;
        }
        Ok(())
    }

    pub fn plan(&self, spec: &PlanSpec) -> HeftPlan {
        HeftPlan {
            lora_epochs: spec.lora_epochs,
            reft_epochs: spec.reft_epochs,
            lora_config: self.lora.clone(),
            reft_config: ReftConfig::for_model(&self.model, self.reft_rank),
            lora_train: self.lora_train.clone(),
            reft_train: self.reft_train.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    /// Successful runs in plan order, the baseline first when requested.
    pub records: Vec<RunRecord>,
    /// Plans that failed, with their error messages.
    pub failures: Vec<(PlanSpec, String)>,
    pub pretrain_report: Option<StageReport>,
    /// Wall time of the plan grid, pretraining excluded.
    pub grid_seconds: f64,
}

pub const BASE_CHECKPOINT: &str = "base.heft";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const PLOT_DATA: &str = "plot.dat";

pub fn results_path(out_dir: &Path, lora_epochs: usize, reft_epochs: usize) -> PathBuf {
    let method = Method::for_epochs(lora_epochs, reft_epochs);
    out_dir.join(format!(
        "results_{}_{lora_epochs}_{reft_epochs}.json",
        method.label()
    ))
}

fn model_path(out_dir: &Path, lora_epochs: usize, reft_epochs: usize) -> PathBuf {
    out_dir.join(format!("model_{lora_epochs}_{reft_epochs}.heft"))
}

fn records(examples: &[BoolExample], max_seq: usize) -> Result<Vec<SupervisedRecord>> {
    let tok = ByteTokenizer;
    examples
        .iter()
        .map(|e| build_supervised_record(e, &tok, max_seq))
        .collect()
}

/// Sidecar written next to a cached base, so a changed model or
/// pretraining section invalidates the cache.
#[derive(Serialize, Deserialize, PartialEq)]
struct BaseKey {
    model: ModelConfig,
    pretrain: Option<PretrainSpec>,
}

fn prepare_base(
    config: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<(ModelWeights, Option<StageReport>)> {
    let key = BaseKey {
        model: config.model.clone(),
        pretrain: config.pretrain.clone(),
    };
    let ckpt = out_dir.join(BASE_CHECKPOINT);
    let key_path = out_dir.join("base.json");
    if let (Ok(artifact), Ok(text)) = (ModelArtifact::load(&ckpt), std::fs::read(&key_path)) {
        if serde_json::from_slice::<BaseKey>(&text).ok().as_ref() == Some(&key) {
            log::info!("reusing cached base {}", ckpt.display());
            return Ok((artifact.weights, None));
        }
    }
    let mut weights = init_model(&config.model)?;
    let report = match &config.pretrain {
        Some(pre) => {
            let data = records(&pre.data.load(data_dir)?, config.model.max_seq)?;
            log::info!("pretraining on {} examples", data.len());
            Some(pretrain(&mut weights, &data, &pre.train, pre.loss)?)
        }
        None => None,
    };
    ModelArtifact::base(weights.clone()).save(&ckpt)?;
    write_atomic(&key_path, &serde_json::to_vec_pretty(&key)?)?;
    Ok((weights, report))
}

fn run_plan(
    config: &ExperimentConfig,
    spec: &PlanSpec,
    base: &ModelWeights,
    train: &[SupervisedRecord],
    eval_set: &[BoolExample],
    out_dir: &Path,
) -> Result<RunRecord> {
    let plan = config.plan(spec);
    let outcome = run_heft(base, &plan, train)?;
    let intervened = attach_intervention(
        &outcome.merged,
        plan.reft_config.clone(),
        outcome.intervention.clone(),
    )?;
    let eval = evaluate(&outcome.merged, Some(&intervened), eval_set, &ByteTokenizer)?;
    ModelArtifact {
        weights: outcome.merged.clone(),
        intervention: Some((plan.reft_config.clone(), outcome.intervention.clone())),
        lora_epochs: spec.lora_epochs,
        reft_epochs: spec.reft_epochs,
    }
    .save(model_path(out_dir, spec.lora_epochs, spec.reft_epochs))?;
    Ok(RunRecord::new(
        plan,
        outcome.reports,
        eval,
        config.model.seed,
    ))
}

/// Runs every plan from one shared base and writes one results file per
/// run, `comparison.csv` and `plot.dat` into `out_dir`. Plans whose
/// results file already exists are loaded instead of rerun; a failing plan
/// is reported and the rest continue. `data_dir` anchors relative dataset
/// paths.
pub fn run_experiment(
    config: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train = records(&config.train_data.load(data_dir)?, config.model.max_seq)?;
    let eval_set = config.eval_data.load(data_dir)?;
    let (base, pretrain_report) = prepare_base(config, data_dir, out_dir)?;

    let start = Instant::now();
    let mut specs = Vec::new();
    if config.include_baseline {
        specs.push(PlanSpec {
            lora_epochs: 0,
            reft_epochs: 0,
        });
    }
    specs.extend(config.plans.iter().copied());

    let mut out = Vec::new();
    let mut failures = Vec::new();
    for spec in &specs {
        let path = results_path(out_dir, spec.lora_epochs, spec.reft_epochs);
        if let Ok(done) = read_results(&path) {
            if done.plan == config.plan(spec) {
                log::info!("reusing {}", path.display());
                out.push(done);
                continue;
            }
        }
        log::info!("running plan {}+{}", spec.lora_epochs, spec.reft_epochs);
        match run_plan(config, spec, &base, &train, &eval_set, out_dir).and_then(|r| {
            write_results(&path, &r)?;
            Ok(r)
        }) {
            Ok(r) => {
                log::info!(
                    "plan {}+{}: {:.2}% ({}/{})",
                    spec.lora_epochs,
                    spec.reft_epochs,
                    r.eval.accuracy_percent,
                    r.eval.correct_predictions,
                    r.eval.num_validation_samples
                );
                out.push(r);
            }
            Err(e) => {
                log::error!("plan {}+{} failed: {e}", spec.lora_epochs, spec.reft_epochs);
                failures.push((*spec, e.to_string()));
            }
        }
    }
    write_atomic(
        &out_dir.join(COMPARISON_CSV),
        comparison_csv(&out).as_bytes(),
    )?;
    write_atomic(&out_dir.join(PLOT_DATA), emit_plot_data(&out).as_bytes())?;
    Ok(ExperimentSummary {
        records: out,
        failures,
        pretrain_report,
        grid_seconds: start.elapsed().as_secs_f64(),
    })
}
