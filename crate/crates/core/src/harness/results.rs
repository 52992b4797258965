//! Run records, results files, the comparison table and plot data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::{accuracy_percent, EvalReport};
use crate::training::{HeftPlan, StageReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Untrained reference: both stages skipped.
    Base,
    LoraOnly,
    ReftOnly,
    Heft,
}

impl Method {
    pub fn for_epochs(lora_epochs: usize, reft_epochs: usize) -> Self {
        match (lora_epochs > 0, reft_epochs > 0) {
            (false, false) => Method::Base,
            (true, false) => Method::LoraOnly,
            (false, true) => Method::ReftOnly,
            (true, true) => Method::Heft,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::LoraOnly => "lora_only",
            Method::ReftOnly => "reft_only",
            Method::Heft => "heft",
        }
    }
}

/// Everything known about one trained and evaluated plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub plan: HeftPlan,
    pub stage_reports: Vec<StageReport>,
    pub eval: EvalReport,
    pub seed: u64,
    /// RFC 3339 creation time.
    pub created: String,
}

impl RunRecord {
    pub fn new(
        plan: HeftPlan,
        stage_reports: Vec<StageReport>,
        eval: EvalReport,
        seed: u64,
    ) -> Self {
        Self {
            method: Method::for_epochs(plan.lora_epochs, plan.reft_epochs),
            eval: eval.with_epochs(plan.lora_epochs, plan.reft_epochs),
            plan,
            stage_reports,
            seed,
            created: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn training_seconds(&self) -> f64 {
        self.stage_reports.iter().map(|r| r.wall_seconds).sum()
    }

    pub fn check(&self) -> Result<()> {
        if self.method != Method::for_epochs(self.plan.lora_epochs, self.plan.reft_epochs) {
            return Err(Error::Experiment(format!(
                "method {} does not match plan {}+{}",
                self.method.label(),
                self.plan.lora_epochs,
                self.plan.reft_epochs
            )));
        }
        let e = &self.eval;
        if e.correct_predictions > e.num_validation_samples
            || e.accuracy_percent
                != accuracy_percent(e.correct_predictions, e.num_validation_samples)
        {
            return Err(Error::Experiment(
                "stored accuracy does not match its counts".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk results object: the five flat fields plus everything else
/// under `heft`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub lora_epochs: usize,
    pub reft_epochs: usize,
    pub num_validation_samples: usize,
    pub correct_predictions: usize,
    /// Percentage rounded to two decimals.
    pub accuracy: f64,
    pub heft: RunRecord,
}

impl From<&RunRecord> for ResultsFile {
    fn from(r: &RunRecord) -> Self {
        Self {
            lora_epochs: r.plan.lora_epochs,
            reft_epochs: r.plan.reft_epochs,
            num_validation_samples: r.eval.num_validation_samples,
            correct_predictions: r.eval.correct_predictions,
            accuracy: r.eval.accuracy_percent,
            heft: r.clone(),
        }
    }
}

pub fn write_results(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&ResultsFile::from(record))?;
    text.push('\n');
    crate::harness::checkpoint::write_atomic(path.as_ref(), text.as_bytes())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<RunRecord> {
    let file: ResultsFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let r = file.heft;
    if (file.lora_epochs, file.reft_epochs) != (r.plan.lora_epochs, r.plan.reft_epochs)
        || file.correct_predictions != r.eval.correct_predictions
        || file.num_validation_samples != r.eval.num_validation_samples
        || file.accuracy != r.eval.accuracy_percent
    {
        return Err(Error::Experiment(
            "results file fields disagree with its record".into(),
        ));
    }
    r.check()?;
    Ok(r)
}

pub const CSV_HEADER: &str = "method,lora_epochs,reft_epochs,accuracy,minutes";

/// One row per record; minutes are training wall time.
pub fn comparison_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2}\n",
            r.method.label(),
            r.plan.lora_epochs,
            r.plan.reft_epochs,
            r.eval.accuracy_percent,
            r.training_seconds() / 60.0
        ));
    }
    out
}

/// Marker class for the accuracy-versus-time scatter: the cheapest HEFT
/// run is `a`, ReFT-only `b`, LoRA-only `c`, any other HEFT run `d`.
/// The untrained reference has no class and gets no row.
pub fn plot_labels(records: &[RunRecord]) -> Vec<Option<char>> {
    let cheapest_heft = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.method == Method::Heft)
        .min_by_key(|(_, r)| r.plan.lora_epochs + r.plan.reft_epochs)
        .map(|(i, _)| i);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| match r.method {
            Method::Base => None,
            Method::ReftOnly => Some('b'),
            Method::LoraOnly => Some('c'),
            Method::Heft if Some(i) == cheapest_heft => Some('a'),
            Method::Heft => Some('d'),
        })
        .collect()
}

/// `minutes accuracy label` rows with minutes rounded to whole numbers.
pub fn emit_plot_data(records: &[RunRecord]) -> String {
    records
        .iter()
        .zip(plot_labels(records))
        .filter_map(|(r, label)| {
            label.map(|l| {
                format!(
                    "{} {:.2} {l}\n",
                    (r.training_seconds() / 60.0).round(),
                    r.eval.accuracy_percent
                )
            })
        })
        .collect()
}
