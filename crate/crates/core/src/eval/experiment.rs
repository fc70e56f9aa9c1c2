use std::collections::BTreeMap;

use rayon::prelude::*;

use super::audit::AuditSummary;
use super::config::ExperimentConfig;
use super::context::RepeatContext;
use super::registry::{Registry, Selection, TraitOutput};
use super::report::{
    AggregateRow, Comparison, DatasetSummary, EvalReport, Failure, Metrics, Provenance, RepeatRecord, MEAN_TASK,
    NEXT_FRAME, REPORT_SCHEMA,
};
use super::stats::{aggregate, corrected_resampled_ttest};
use crate::datamodel::{split_indices, split_sizes, Dataset, SubjectSequences, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::SeedStream;
use crate::prediction::{accuracy, rmse, value_label, PredictionRow};

/// A finished run: the report plus every test prediction of every
/// complete repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRow>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let dataset = config.data.load().map_err(|e| e.in_stage("load data"))?;
    run_on_dataset(config, &dataset, &Registry::standard())
}

/// Runs every repeat on `dataset`, normalized here, with methods resolved
/// from `registry`. A failing repeat is recorded and skipped; the error
/// is only returned for problems that affect every repeat.
pub fn run_on_dataset(config: &ExperimentConfig, dataset: &Dataset, registry: &Registry) -> Result<ExperimentOutput> {
    config.validate()?;
    dataset.validate()?;
    let selection = registry.select(&config.methods)?;
    let dataset = dataset.normalized();
    let sequences = dataset.sequences()?;
    let (n_train, n_eval, n_test) = split_sizes(dataset.len())?;
    let master = SeedStream::new(config.seed).derive_named("repeat");

    let run = |r: usize| -> (RepeatRecord, Vec<PredictionRow>) {
        let seed = master.child_seed(r as u64);
        match run_repeat(r, seed, config, &dataset, &sequences, &selection) {
            Ok((metrics, predictions, audit)) => (
                RepeatRecord {
                    index: r,
                    seed,
                    failure: None,
                    metrics,
                    audit,
                },
                predictions,
            ),
            Err((e, audit)) => (
                RepeatRecord {
                    index: r,
                    seed,
                    failure: Some(failure(&e)),
                    metrics: Metrics::new(),
                    audit,
                },
                Vec::new(),
            ),
        }
    };
    let threads = config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(config.repeats);
    let results: Vec<(RepeatRecord, Vec<PredictionRow>)> = if threads <= 1 {
        (0..config.repeats).map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| (0..config.repeats).into_par_iter().map(run).collect())
    };

    let mut repeats = Vec::with_capacity(results.len());
    let mut predictions = Vec::new();
    let mut audit = AuditSummary::default();
    for (rec, preds) in results {
        audit.merge(&rec.audit);
        repeats.push(rec);
        predictions.extend(preds);
    }
    let method_order: Vec<&str> = config.methods.iter().map(String::as_str).collect();
    let aggregates = aggregate_rows(&repeats, &method_order)?;
    let frame_methods: Vec<&str> = selection.frame.iter().map(|m| m.name()).collect();
    let trait_methods: Vec<&str> = selection.traits.iter().map(|m| m.name()).collect();
    let mut tasks: Vec<String> = config
        .traits
        .iter()
        .filter(|&&k| dataset.cohort.allows(k))
        .map(|k| k.name().to_string())
        .collect();
    tasks.push(MEAN_TASK.to_string());
    let comparisons = comparisons(&repeats, &frame_methods, &trait_methods, &tasks, n_train, n_test);

    let report = EvalReport {
        schema_version: REPORT_SCHEMA,
        provenance: Provenance {
            seed: config.seed,
            config: config.resolved(),
            config_hash: config.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: DatasetSummary {
                source: config.data.describe(),
                cohort: dataset.cohort,
                subjects: dataset.len(),
                dims: dataset.shape.dims.as_array(),
                runs: dataset.shape.runs,
                t_passive: dataset.shape.t_passive,
                t_active: dataset.shape.t_active,
                split: [n_train, n_eval, n_test],
            },
        },
        incomplete_repeats: repeats.iter().filter(|r| r.failure.is_some()).count(),
        repeats,
        aggregates,
        comparisons,
        audit,
    };
    Ok(ExperimentOutput { report, predictions })
}

fn failure(e: &Error) -> Failure {
    let mut stages = Vec::new();
    let mut cur = e;
    while let Error::Stage { stage, source } = cur {
        stages.push(stage.as_str());
        cur = source;
    }
    Failure {
        stage: if stages.is_empty() { "repeat".into() } else { stages.join("/") },
        message: cur.to_string(),
    }
}

type RepeatResult = std::result::Result<(Metrics, Vec<PredictionRow>, AuditSummary), (Error, AuditSummary)>;

fn run_repeat(
    index: usize,
    seed: u64,
    config: &ExperimentConfig,
    dataset: &Dataset,
    sequences: &[SubjectSequences],
    selection: &Selection,
) -> RepeatResult {
    let ctx = split_indices(dataset.len(), seed)
        .and_then(|split| RepeatContext::new(index, SeedStream::new(seed), config, dataset, sequences, split))
        .map_err(|e| (e.in_stage("split"), AuditSummary::default()))?;
    match evaluate(&ctx, selection) {
        Ok((metrics, predictions)) => Ok((metrics, predictions, ctx.vault.summary())),
        Err(e) => Err((e, ctx.vault.summary())),
    }
}

fn put(metrics: &mut Metrics, method: &str, task: &str, metric: &str, value: f64) {
    metrics
        .entry(method.to_string())
        .or_default()
        .entry(task.to_string())
        .or_default()
        .insert(metric.to_string(), value);
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fits and predicts with every selected method, then opens the vault and
/// scores. Test targets are read only in the scoring phase.
fn evaluate(ctx: &RepeatContext, selection: &Selection) -> Result<(Metrics, Vec<PredictionRow>)> {
    let mut metrics = Metrics::new();
    for m in &selection.frame {
        let mse = m.evaluate(ctx).map_err(|e| e.in_stage(m.name()))?;
        put(&mut metrics, m.name(), NEXT_FRAME, "mse", mean(&mse));
    }
    let mut outputs: Vec<(&str, TraitKind, Vec<TraitOutput>)> = Vec::new();
    for m in &selection.traits {
        for &k in &ctx.traits {
            let out = m.predict(ctx, k).map_err(|e| e.in_stage(format!("{}.{k}", m.name())))?;
            if out.len() != ctx.test().len() {
                return Err(Error::Data(format!("{} returned {} predictions for {} test subjects", m.name(), out.len(), ctx.test().len())));
            }
            outputs.push((m.name(), k, out));
        }
    }

    ctx.vault.open_scoring();
    let ids = ctx.test_ids();
    let mut truth: BTreeMap<TraitKind, Vec<Option<(usize, f64)>>> = BTreeMap::new();
    for &k in &ctx.traits {
        let bins = if outputs.iter().any(|o| o.1 == k) { ctx.bins(k)? } else { None };
        let column = ctx
            .test()
            .iter()
            .map(|&i| match ctx.vault.target(i, k)? {
                Some(v) => Ok(Some((value_label(k, v, bins)?, v))),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("scoring"))?;
        truth.insert(k, column);
    }

    let mut predictions = Vec::new();
    let mut per_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (method, k, out) in &outputs {
        let column = &truth[k];
        let scored: Vec<usize> = (0..out.len()).filter(|&s| column[s].is_some()).collect();
        if scored.is_empty() {
            continue;
        }
        let pred: Vec<usize> = scored.iter().map(|&s| out[s].label).collect();
        let labels: Vec<usize> = scored.iter().map(|&s| column[s].unwrap().0).collect();
        let acc = accuracy(&pred, &labels);
        put(&mut metrics, method, k.name(), "accuracy", acc);
        per_method.entry(method).or_default().push(acc);
        if out.iter().all(|o| o.value.is_some()) {
            let p: Vec<f64> = scored.iter().map(|&s| out[s].value.unwrap()).collect();
            let t: Vec<f64> = scored.iter().map(|&s| column[s].unwrap().1).collect();
            put(&mut metrics, method, k.name(), "rmse", rmse(&p, &t));
        }
        for (s, o) in out.iter().enumerate() {
            predictions.push(PredictionRow {
                repeat: ctx.index,
                subject_id: ids[s].clone(),
                method: method.to_string(),
                trait_kind: *k,
                true_label: column[s].map(|c| c.0),
                predicted_label: o.label,
                scores: o.scores.clone(),
            });
        }
    }
    for (method, accs) in per_method {
        put(&mut metrics, method, MEAN_TASK, "accuracy", mean(&accs));
    }
    Ok((metrics, predictions))
}

fn values<'r>(repeats: &'r [RepeatRecord], method: &str, task: &str, metric: &str) -> Vec<(usize, f64)> {
    repeats
        .iter()
        .filter_map(|r| Some((r.index, *r.metrics.get(method)?.get(task)?.get(metric)?)))
        .collect()
}

/// Mean and SD of every (method, task, metric) seen in a complete repeat,
/// methods in config order.
pub fn aggregate_rows(repeats: &[RepeatRecord], method_order: &[&str]) -> Result<Vec<AggregateRow>> {
    let mut keys: Vec<(usize, String, String, String)> = Vec::new();
    for r in repeats {
        for (m, tasks) in &r.metrics {
            let pos = method_order.iter().position(|o| o == m).unwrap_or(method_order.len());
            for (t, metrics) in tasks {
                for k in metrics.keys() {
                    let key = (pos, m.clone(), t.clone(), k.clone());
                    if !keys.contains(&key) {
                        keys.push(key);
                    }
                }
            }
        }
    }
    let task_rank = |t: &str| match t {
        NEXT_FRAME => (0, None),
        MEAN_TASK => (2, None),
        t => (1, TraitKind::parse(t)),
    };
    keys.sort_by(|a, b| (a.0, &a.1, task_rank(&a.2), &a.3).cmp(&(b.0, &b.1, task_rank(&b.2), &b.3)));
    keys.into_iter()
        .map(|(_, method, task, metric)| {
            let v: Vec<f64> = values(repeats, &method, &task, &metric).into_iter().map(|x| x.1).collect();
            let s = aggregate(&v)?;
            Ok(AggregateRow {
                method,
                task,
                metric,
                mean: s.mean,
                sd: s.sd,
                n: s.n,
                single_sample: s.single_sample,
            })
        })
        .collect()
}

fn compare(repeats: &[RepeatRecord], task: &str, metric: &str, a: &str, b: &str, n_train: usize, n_test: usize) -> Option<Comparison> {
    let vb: BTreeMap<usize, f64> = values(repeats, b, task, metric).into_iter().collect();
    let diffs: Vec<f64> = values(repeats, a, task, metric)
        .into_iter()
        .filter_map(|(r, v)| vb.get(&r).map(|w| v - w))
        .collect();
    if diffs.is_empty() {
        return None;
    }
    let (t, p, note) = match corrected_resampled_ttest(&diffs, n_train, n_test) {
        Ok(r) => (Some(r.t), Some(r.p), None),
        Err(e) => (None, None, Some(e.root().to_string())),
    };
    Some(Comparison {
        task: task.to_string(),
        metric: metric.to_string(),
        a: a.to_string(),
        b: b.to_string(),
        n: diffs.len(),
        mean_diff: mean(&diffs),
        t,
        p,
        note,
    })
}

/// Every pair of frame methods (later-listed minus earlier-listed), every
/// trait method against `dummy`, and `embedding_linear` against every
/// other trait method, on each trait and on the mean over traits.
fn comparisons(
    repeats: &[RepeatRecord],
    frame: &[&str],
    traits: &[&str],
    tasks: &[String],
    n_train: usize,
    n_test: usize,
) -> Vec<Comparison> {
    let mut out = Vec::new();
    for j in 0..frame.len() {
        for i in 0..j {
            out.extend(compare(repeats, NEXT_FRAME, "mse", frame[j], frame[i], n_train, n_test));
        }
    }
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    if traits.contains(&"dummy") {
        pairs.extend(traits.iter().filter(|&&m| m != "dummy").map(|&m| (m, "dummy")));
    }
    if traits.contains(&"embedding_linear") {
        pairs.extend(
            traits
                .iter()
                .filter(|&&m| m != "embedding_linear" && m != "dummy")
                .map(|&m| ("embedding_linear", m)),
        );
    }
    for task in tasks {
        for (a, b) in &pairs {
            out.extend(compare(repeats, task, "accuracy", a, b, n_train, n_test));
        }
    }
    out
}
