use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use heft_core::harness::checkpoint::ModelArtifact;
use heft_core::harness::eval::evaluate;
use heft_core::harness::experiment::{run_experiment, ExperimentConfig};
use heft_core::harness::results::{write_results, Method, RunRecord};
use heft_core::lora::LoraConfig;
use heft_core::model::{init_model, ModelConfig};
use heft_core::reft::{attach_intervention, ReftConfig};
use heft_core::synth::{synth_generate, Chain};
use heft_core::tasks::{build_supervised_record, load_boolq_jsonl, write_boolq_jsonl};
use heft_core::tokenizer::ByteTokenizer;
use heft_core::training::{run_heft, HeftPlan, TrainConfig};

/// Two-stage LoRA-then-LoReFT fine-tuning on a small from-scratch transformer.
#[derive(Parser)]
#[command(name = "heft", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic yes/no dataset as JSONL.
    GenData(GenDataArgs),
    /// Train one plan and save the resulting model.
    Train(TrainArgs),
    /// Score a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Run a plan grid described by a JSON config.
    Experiment(ExperimentArgs),
    /// Describe a checkpoint.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Reasoning depth: 1 (membership) or 2 (membership then rule).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    chain: u8,
    #[arg(long, default_value_t = 8)]
    entities: usize,
    #[arg(long, default_value_t = 4)]
    properties: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Lora,
    Reft,
    Heft,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Heft)]
    method: MethodArg,
    /// Defaults: 3 for heft, 20 for lora.
    #[arg(long)]
    lora_epochs: Option<usize>,
    /// Defaults: 3 for heft, 20 for reft.
    #[arg(long)]
    reft_epochs: Option<usize>,
    /// Training set (JSONL with question, passage, answer).
    #[arg(long)]
    data: PathBuf,
    /// Starting weights; a freshly initialized desk-scale model otherwise.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Seed of the fresh model when no --base is given.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Run record path; defaults to the checkpoint path with `.json`.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
    #[arg(long, default_value_t = 4)]
    reft_rank: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Learning rate for the LoReFT stage; --lr if unset.
    #[arg(long)]
    reft_lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where to write the results file.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, results, table and plot data.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let chain = Chain::try_from(args.chain).map_err(anyhow::Error::msg)?;
    let examples = synth_generate(args.seed, args.n, args.entities, args.properties, chain)?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_boolq_jsonl(BufWriter::new(file), &examples)?;
    println!(
        "wrote {} examples to {}",
        examples.len(),
        args.out.display()
    );
    Ok(())
}

fn epochs_for(args: &TrainArgs) -> Result<(usize, usize)> {
    let (lora, reft) = match args.method {
        MethodArg::Heft => (args.lora_epochs.unwrap_or(3), args.reft_epochs.unwrap_or(3)),
        MethodArg::Lora => (
            args.lora_epochs.unwrap_or(20),
            args.reft_epochs.unwrap_or(0),
        ),
        MethodArg::Reft => (
            args.lora_epochs.unwrap_or(0),
            args.reft_epochs.unwrap_or(20),
        ),
    };
    let ok = match args.method {
        MethodArg::Heft => lora > 0 && reft > 0,
        MethodArg::Lora => lora > 0 && reft == 0,
        MethodArg::Reft => lora == 0 && reft > 0,
    };
    if !ok {
        bail!("epochs {lora}+{reft} do not fit the chosen method");
    }
    Ok((lora, reft))
}

fn train(args: TrainArgs) -> Result<()> {
    let (lora_epochs, reft_epochs) = epochs_for(&args)?;
    let base = match &args.base {
        Some(p) => {
            ModelArtifact::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .weights
        }
        None => init_model(&ModelConfig {
            seed: args.model_seed,
            ..ModelConfig::desk_scale()
        })?,
    };
    let config = base.config().clone();
    let examples =
        load_boolq_jsonl(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let tok = ByteTokenizer;
    let data = examples
        .iter()
        .map(|e| build_supervised_record(e, &tok, config.max_seq))
        .collect::<heft_core::Result<Vec<_>>>()?;

    let plan = HeftPlan {
        lora_epochs,
        reft_epochs,
        lora_config: LoraConfig {
            r: args.rank,
            alpha: args.alpha,
            dropout_p: args.dropout,
            ..LoraConfig::default()
        },
        reft_config: ReftConfig::for_model(&config, args.reft_rank),
        lora_train: TrainConfig {
            learning_rate: args.lr,
            seed: args.seed,
            ..TrainConfig::lora_stage()
        },
        reft_train: TrainConfig {
            learning_rate: args.reft_lr.unwrap_or(args.lr),
            seed: args.seed,
            ..TrainConfig::reft_stage()
        },
    };
    let outcome = run_heft(&base, &plan, &data)?;
    ModelArtifact {
        weights: outcome.merged,
        intervention: Some((plan.reft_config.clone(), outcome.intervention)),
        lora_epochs,
        reft_epochs,
    }
    .save(&args.out)?;

    let record_path = args
        .record
        .clone()
        .unwrap_or_else(|| args.out.with_extension("json"));
    let record = serde_json::json!({
        "method": Method::for_epochs(lora_epochs, reft_epochs),
        "lora_epochs": lora_epochs,
        "reft_epochs": reft_epochs,
        "plan": plan,
        "stage_reports": outcome.reports,
        "seed": args.seed,
    });
    std::fs::write(&record_path, serde_json::to_string_pretty(&record)? + "\n")?;
    println!(
        "trained {}+{} epochs; model {} record {}",
        lora_epochs,
        reft_epochs,
        args.out.display(),
        record_path.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let artifact = ModelArtifact::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let examples =
        load_boolq_jsonl(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let weights = &artifact.weights;
    let intervened = match &artifact.intervention {
        Some((cfg, params)) => Some(attach_intervention(weights, cfg.clone(), params.clone())?),
        None => None,
    };
    let report = evaluate(weights, intervened.as_ref(), &examples, &ByteTokenizer)?;
    println!(
        "accuracy {:.2}% ({}/{}, {} unknown)",
        report.accuracy_percent,
        report.correct_predictions,
        report.num_validation_samples,
        report.unknown_predictions
    );
    if let Some(path) = &args.results {
        let mut plan = HeftPlan::new(weights.config(), artifact.lora_epochs, artifact.reft_epochs);
        if let Some((cfg, _)) = &artifact.intervention {
            plan.reft_config = cfg.clone();
        }
        let record = RunRecord::new(plan, Vec::new(), report, weights.config().seed);
        write_results(path, &record)?;
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = ExperimentConfig::from_json(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let data_dir = args.config.parent().unwrap_or(Path::new("."));
    let summary = run_experiment(&config, data_dir, &args.out)?;
    for r in &summary.records {
        println!(
            "{:<10} {:>3}+{:<3} {:>6.2}%",
            r.method.label(),
            r.plan.lora_epochs,
            r.plan.reft_epochs,
            r.eval.accuracy_percent
        );
    }
    if !summary.failures.is_empty() {
        let failed: Vec<String> = summary
            .failures
            .iter()
            .map(|(p, e)| format!("{}+{}: {e}", p.lora_epochs, p.reft_epochs))
            .collect();
        bail!("{} plan(s) failed: {}", failed.len(), failed.join("; "));
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let a = ModelArtifact::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    println!("model: {}", serde_json::to_string(a.weights.config())?);
    println!("epochs: lora {} reft {}", a.lora_epochs, a.reft_epochs);
    for (name, t) in a.weights.iter() {
        println!("  {name} {:?}", t.shape());
    }
    println!("parameters: {}", a.weights.parameter_count());
    println!("fingerprint: {}", a.weights.fingerprint());
    match &a.intervention {
        Some((cfg, params)) => println!(
            "intervention: {} ({} parameters)",
            serde_json::to_string(cfg)?,
            params.parameter_count()
        ),
        None => println!("intervention: none"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
