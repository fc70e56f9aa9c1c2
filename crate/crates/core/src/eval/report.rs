use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audit::AuditSummary;
use super::config::ExperimentConfig;
use super::stats::stars;
use crate::datamodel::Cohort;
use crate::error::Result;
use crate::prediction::{write_predictions_csv, PredictionRow};

pub const REPORT_SCHEMA: u32 = 1;

/// Task name of the next-frame comparison.
pub const NEXT_FRAME: &str = "next_frame";
/// Task name of the per-repeat average over traits.
pub const MEAN_TASK: &str = "mean";

/// method → task → metric → value
pub type Metrics = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub cohort: Cohort,
    pub subjects: usize,
    pub dims: [usize; 3],
    pub runs: usize,
    pub t_passive: usize,
    pub t_active: usize,
    /// Train, eval and test subject counts of every repeat.
    pub split: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub crate_version: String,
    pub dataset: DatasetSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// Stage labels from outermost to innermost, joined by `/`.
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub index: usize,
    pub seed: u64,
    pub failure: Option<Failure>,
    pub metrics: Metrics,
    pub audit: AuditSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub single_sample: bool,
}

/// `a − b` per repeat, tested with the corrected resampled t-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: String,
    pub metric: String,
    pub a: String,
    pub b: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    /// Why `t` is missing.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub repeats: Vec<RepeatRecord>,
    pub incomplete_repeats: usize,
    pub aggregates: Vec<AggregateRow>,
    pub comparisons: Vec<Comparison>,
    pub audit: AuditSummary,
}

impl EvalReport {
    pub fn aggregate(&self, method: &str, task: &str, metric: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.task == task && a.metric == metric)
    }

    pub fn comparison(&self, task: &str, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.task == task && c.a == a && c.b == b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn csv_rows(report: &EvalReport, keep: impl Fn(&AggregateRow) -> bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "task", "metric", "mean", "sd", "n"])?;
    for a in report.aggregates.iter().filter(|a| keep(a)) {
        w.write_record([
            a.method.clone(),
            a.task.clone(),
            a.metric.clone(),
            a.mean.to_string(),
            a.sd.to_string(),
            a.n.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// Bar-chart data for the next-frame comparison: one row per method.
pub fn next_frame_csv(report: &EvalReport) -> Result<String> {
    csv_rows(report, |a| a.task == NEXT_FRAME)
}

/// Bar-chart data for trait accuracy: one row per method and trait.
pub fn traits_csv(report: &EvalReport) -> Result<String> {
    csv_rows(report, |a| a.task != NEXT_FRAME && a.task != MEAN_TASK && a.metric == "accuracy")
}

fn p_cell(c: &Comparison) -> String {
    match (c.t, c.p) {
        (Some(t), Some(p)) => format!("t = {t:8.3}  p = {p:.4} {}", stars(p)),
        _ => c.note.clone().unwrap_or_default(),
    }
}

/// Plain-text tables with significance stars (`*` p < 0.05, `**` p < 0.01).
pub fn render_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    let _ = writeln!(s, "dataset      {} ({:?}, {} subjects)", p.dataset.source, p.dataset.cohort, p.dataset.subjects);
    let _ = writeln!(s, "seed         {}", p.seed);
    let _ = writeln!(s, "config hash  {}", p.config_hash);
    let complete = report.repeats.len() - report.incomplete_repeats;
    let _ = writeln!(s, "repeats      {complete} of {} complete", report.repeats.len());
    for r in report.repeats.iter().filter(|r| r.failure.is_some()) {
        let f = r.failure.as_ref().unwrap();
        let _ = writeln!(s, "  repeat {} failed in {}: {}", r.index, f.stage, f.message);
    }

    let frame: Vec<&AggregateRow> = report.aggregates.iter().filter(|a| a.task == NEXT_FRAME).collect();
    if !frame.is_empty() {
        let _ = writeln!(s, "\nnext-frame MSE on test subjects (mean ± sd)");
        for a in &frame {
            let _ = writeln!(s, "  {:<22} {:>12.6} ± {:<12.6}", a.method, a.mean, a.sd);
        }
        for c in report.comparisons.iter().filter(|c| c.task == NEXT_FRAME) {
            let _ = writeln!(s, "  {:>12} vs {:<12} Δ = {:>+10.6}  {}", c.a, c.b, c.mean_diff, p_cell(c));
        }
    }

    let mut tasks: Vec<&str> = Vec::new();
    for a in report.aggregates.iter().filter(|a| a.task != NEXT_FRAME && a.metric == "accuracy") {
        if !tasks.contains(&a.task.as_str()) {
            tasks.push(&a.task);
        }
    }
    if !tasks.is_empty() {
        let mut methods: Vec<&str> = Vec::new();
        for a in report.aggregates.iter().filter(|a| a.task != NEXT_FRAME) {
            if !methods.contains(&a.method.as_str()) {
                methods.push(&a.method);
            }
        }
        let _ = writeln!(s, "\ntest accuracy (mean ± sd)");
        let _ = write!(s, "  {:<22}", "method");
        for t in &tasks {
            let _ = write!(s, " {t:>15}");
        }
        s.push('\n');
        for m in methods {
            let _ = write!(s, "  {m:<22}");
            for t in &tasks {
                match report.aggregate(m, t, "accuracy") {
                    Some(a) => {
                        let _ = write!(s, " {:>7.3} ± {:<5.3}", a.mean, a.sd);
                    }
                    None => {
                        let _ = write!(s, " {:>15}", "-");
                    }
                }
            }
            s.push('\n');
        }
        for c in report.comparisons.iter().filter(|c| c.task == MEAN_TASK) {
            let _ = writeln!(s, "  {:>19} vs {:<19} Δ = {:>+7.3}  {}", c.a, c.b, c.mean_diff, p_cell(c));
        }
    }

    let a = &report.audit;
    let _ = writeln!(
        s,
        "\nlabel audit  train {}  eval {}  test before scoring {}  test at scoring {}  test predictors {}",
        a.train_target_reads,
        a.eval_target_reads,
        a.test_target_reads_before_scoring,
        a.test_target_reads_at_scoring,
        a.test_predictor_reads
    );
    let _ = writeln!(s, "\nresolved config");
    s.push_str(&serde_json::to_string_pretty(&p.config).expect("config serializes"));
    s.push('\n');
    s
}

/// Writes `report.json`, `next_frame.csv`, `traits.csv`, `summary.txt`
/// and, when given, `predictions.csv` into `dir`.
pub fn emit_report(report: &EvalReport, predictions: Option<&[PredictionRow]>, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    put("report.json", report.to_json()?)?;
    put("next_frame.csv", next_frame_csv(report)?)?;
    put("traits.csv", traits_csv(report)?)?;
    put("summary.txt", render_summary(report))?;
    if let Some(rows) = predictions {
        let mut buf = Vec::new();
        write_predictions_csv(rows, &mut buf)?;
        put("predictions.csv", String::from_utf8(buf).expect("csv is utf-8"))?;
    }
    Ok(written)
}
