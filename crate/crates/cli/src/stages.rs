//! Staged training (`φ`, then `ψ` with `χ`, then `ρ`) and single-subject
//! embedding fits. Bundles namespace their tensors: `phi/` for the
//! translator, `psi/` for the next-frame network, `chi/table` for the
//! embedding table and `rho/<trait>.{g,b}` for the classifier heads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use nfembed::datamodel::{fit_bins, load_dataset, split_subjects, Dataset, QuantizationBins, SplitSpec, SubjectSequences, TraitKind};
use nfembed::eval::ExperimentConfig;
use nfembed::numerics::{SeedStream, Tensor};
use nfembed::pipeline::{
    fit_new_subject_embedding, read_bundle, train_next_frame, train_p2a, write_bundle, EmbeddingTable, FitConfig,
    LossCurve, LstmVariant, ModelBundle, NextFrameLstm, P2ATranslator, PhiSequences,
};
use nfembed::prediction::{accuracy, train_classifier, value_label, TraitLabels};
use nfembed::Error;

use crate::error::{CliError, Result};

/// Metadata stored in every bundle. Later stages copy the split and the
/// translator geometry forward and keep the upstream record whole.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data: String,
    pub split: SplitSpec,
    pub frame_size: usize,
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<LstmVariant>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bins: BTreeMap<TraitKind, QuantizationBins>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accuracy: BTreeMap<TraitKind, SplitAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream: Option<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    /// `None` when no subject in the split carries the trait.
    pub train: Option<f64>,
    pub eval: Option<f64>,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub subject_id: String,
    pub dim: usize,
    pub embedding: Vec<f64>,
    /// Per-frame next-frame loss with the fitted embedding.
    pub loss: f64,
    /// The same loss with the subject's trained table row, when it has one.
    pub table_loss: Option<f64>,
    pub fit: FitConfig,
    pub model: String,
    pub data: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

struct Loaded {
    dataset: Dataset,
    sequences: Vec<SubjectSequences>,
    path: String,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let dataset = load_dataset(path)
            .map_err(|e| e.in_stage(format!("loading {}", path.display())))?
            .normalized();
        let sequences = dataset.sequences()?;
        Ok(Loaded {
            dataset,
            sequences,
            path: path.display().to_string(),
        })
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.dataset
            .index_of(id)
            .ok_or_else(|| Error::Lookup(format!("subject {id} is not in {}", self.path)).into())
    }

    fn phi(&self, translator: &P2ATranslator, ids: &[String]) -> Result<Vec<PhiSequences>> {
        ids.iter()
            .map(|id| Ok(PhiSequences::build(translator, id, &self.sequences[self.index(id)?])?))
            .collect()
    }
}

fn require(path: Option<&Path>, kind: &'static str, needed_by: &str) -> Result<(ModelBundle, StageRecord)> {
    let missing = |detail: String| CliError::Missing { stage: kind, detail };
    let path = path.ok_or_else(|| missing(format!("the {needed_by} step needs one via --model-in")))?;
    if !path.exists() {
        return Err(missing(format!("nothing at {}", path.display())));
    }
    let bundle = read_bundle(path)?;
    if bundle.kind != kind {
        return Err(missing(format!(
            "{} holds a {} bundle, the {needed_by} step needs {kind}",
            path.display(),
            bundle.kind
        )));
    }
    let record: StageRecord = serde_json::from_value(bundle.metadata.clone())
        .map_err(|e| Error::Format {
            offset: 0,
            message: format!("bundle metadata in {}: {e}", path.display()),
        })?;
    Ok((bundle, record))
}

fn translator_of(bundle: &ModelBundle, record: &StageRecord) -> Result<P2ATranslator> {
    Ok(P2ATranslator::from_params(record.frame_size, record.dropout, bundle.store("phi/"))?)
}

fn table_of(bundle: &ModelBundle, record: &StageRecord, path: &Path, needed_by: &str) -> Result<EmbeddingTable> {
    if record.variant != Some(LstmVariant::Conditioned) {
        return Err(CliError::Missing {
            stage: "lstm",
            detail: format!(
                "{} is a vanilla lstm bundle without embeddings; the {needed_by} step needs --variant conditioned",
                path.display()
            ),
        });
    }
    Ok(EmbeddingTable::from_matrix(record.table_ids.clone(), bundle.tensor("chi/table")?.clone())?)
}

fn write_outputs(bundle: &ModelBundle, model_out: &Path, curve_out: Option<&Path>, curve: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
    if let Some(dir) = model_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_bundle(model_out, bundle)?;
    let curve_path = curve_out.map(Path::to_path_buf).unwrap_or_else(|| model_out.with_extension("curve.csv"));
    let mut buf = Vec::new();
    curve(&mut buf)?;
    std::fs::write(&curve_path, buf)?;
    Ok(curve_path)
}

fn write_curve(curve: &LossCurve) -> impl FnOnce(&mut Vec<u8>) -> Result<()> + '_ {
    move |buf| Ok(curve.write_csv(buf)?)
}

pub struct TrainRequest<'a> {
    pub config: ExperimentConfig,
    pub data: &'a Path,
    pub model_in: Option<&'a Path>,
    pub model_out: &'a Path,
    pub curve_out: Option<&'a Path>,
    pub variant: LstmVariant,
}

pub fn train_p2a_stage(req: &TrainRequest) -> Result<StageRecord> {
    let data = Loaded::open(req.data)?;
    let split = split_subjects(&data.dataset.subject_ids(), req.config.seed)?;
    let pick = |ids: &[String]| -> Result<Vec<SubjectSequences>> {
        ids.iter().map(|id| Ok(data.sequences[data.index(id)?].clone())).collect()
    };
    let (translator, curve) = train_p2a(
        &pick(&split.train)?,
        &pick(&split.eval)?,
        &req.config.p2a,
        &SeedStream::new(req.config.seed).derive_named("p2a"),
    )
    .map_err(|e| e.in_stage("p2a"))?;
    let record = StageRecord {
        stage: "p2a".into(),
        seed: req.config.seed,
        config: req.config.resolved(),
        data: data.path.clone(),
        split,
        frame_size: translator.frame_size(),
        dropout: translator.dropout(),
        variant: None,
        table_ids: Vec::new(),
        best_eval_loss: Some(curve.best_eval()),
        bins: BTreeMap::new(),
        accuracy: BTreeMap::new(),
        upstream: None,
    };
    let mut bundle = ModelBundle::new("p2a", serde_json::to_value(&record)?);
    bundle.add_store("phi/", &translator.params);
    let curve_path = write_outputs(&bundle, req.model_out, req.curve_out, write_curve(&curve))?;
    println!(
        "p2a: best eval loss {:.6} ({} epochs); wrote {} and {}",
        curve.best_eval(),
        curve.train.len(),
        req.model_out.display(),
        curve_path.display()
    );
    Ok(record)
}

pub fn train_lstm_stage(req: &TrainRequest) -> Result<StageRecord> {
    let (upstream, up) = require(req.model_in, "p2a", "lstm")?;
    let translator = translator_of(&upstream, &up)?;
    let data = Loaded::open(req.data)?;
    let train = data.phi(&translator, &up.split.train)?;
    let eval = data.phi(&translator, &up.split.eval)?;
    let stage = format!("lstm.{}", req.variant.name());
    let trained = train_next_frame(
        req.variant,
        &train,
        &eval,
        &req.config.lstm,
        &SeedStream::new(req.config.seed).derive_named(&stage),
    )
    .map_err(|e| e.in_stage(stage))?;

    let record = StageRecord {
        stage: "lstm".into(),
        seed: req.config.seed,
        config: req.config.resolved(),
        data: data.path.clone(),
        split: up.split.clone(),
        frame_size: up.frame_size,
        dropout: up.dropout,
        variant: Some(req.variant),
        table_ids: trained.table.as_ref().map(|t| t.ids().to_vec()).unwrap_or_default(),
        best_eval_loss: Some(trained.curve.best_eval()),
        bins: BTreeMap::new(),
        accuracy: BTreeMap::new(),
        upstream: Some(upstream.metadata.clone()),
    };
    let mut bundle = ModelBundle::new("lstm", serde_json::to_value(&record)?);
    bundle.add_store("phi/", &translator.params);
    bundle.add_store("psi/", &trained.model.params);
    if let Some(table) = &trained.table {
        bundle.tensors.push(("chi/table".into(), table.matrix().clone()));
    }
    let curve_path = write_outputs(&bundle, req.model_out, req.curve_out, write_curve(&trained.curve))?;
    println!(
        "lstm ({}): best eval loss {:.6} ({} epochs); wrote {} and {}",
        req.variant.name(),
        trained.curve.best_eval(),
        trained.curve.train.len(),
        req.model_out.display(),
        curve_path.display()
    );
    Ok(record)
}

fn labels_for(data: &Loaded, ids: &[String], kind: TraitKind, bins: Option<&QuantizationBins>) -> Result<TraitLabels> {
    ids.iter()
        .map(|id| {
            let record = &data.dataset.subjects[data.index(id)?].traits;
            Ok(match record.value(kind) {
                Some(v) => Some(value_label(kind, v, bins)?),
                None => None,
            })
        })
        .collect()
}

fn labeled_accuracy(predicted: &[usize], truth: &TraitLabels) -> (Option<f64>, usize) {
    let (p, t): (Vec<usize>, Vec<usize>) = predicted
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| t.map(|t| (*p, t)))
        .unzip();
    ((!t.is_empty()).then(|| accuracy(&p, &t)), t.len())
}

/// Trains `ρ` on the trained table rows and scores it on eval subjects whose
/// embeddings are fitted against the frozen network.
pub fn train_classifier_stage(req: &TrainRequest) -> Result<StageRecord> {
    let (upstream, up) = require(req.model_in, "lstm", "classifier")?;
    let table = table_of(&upstream, &up, req.model_in.expect("required above"), "classifier")?;
    let translator = translator_of(&upstream, &up)?;
    let model = NextFrameLstm::from_params(upstream.store("psi/"))?;
    let data = Loaded::open(req.data)?;
    let train_ids = table.ids().to_vec();
    let eval_ids = up.split.eval.clone();

    let kinds: Vec<TraitKind> = req
        .config
        .traits
        .iter()
        .copied()
        .filter(|k| data.dataset.cohort.allows(*k))
        .collect();
    let mut bins = BTreeMap::new();
    let mut train_labels = BTreeMap::new();
    for &kind in &kinds {
        let b = if kind.is_binned() {
            let values: Vec<f64> = train_ids
                .iter()
                .map(|id| Ok(data.dataset.subjects[data.index(id)?].traits.value(kind)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            Some(fit_bins(&values).map_err(|e| e.in_stage(format!("bins.{kind}")))?)
        } else {
            None
        };
        train_labels.insert(kind, labels_for(&data, &train_ids, kind, b.as_ref())?);
        if let Some(b) = b {
            bins.insert(kind, b);
        }
    }
    let train_features = table.matrix().clone();
    let classifier = train_classifier(&train_features, &train_labels, &req.config.classifier)
        .map_err(|e| e.in_stage("classifier"))?;

    let eval_phi = data.phi(&translator, &eval_ids)?;
    let eval_refs: Vec<&PhiSequences> = eval_phi.iter().collect();
    let eval_features = if eval_refs.is_empty() {
        Tensor::zeros(&[0, table.dim()])
    } else {
        fit_new_subject_embedding(&model, &table, &eval_refs, &req.config.lstm.fit)
            .map_err(|e| e.in_stage("embedding fit"))?
            .0
    };

    let mut scores = BTreeMap::new();
    for &kind in &kinds {
        let head = classifier.head(kind)?;
        let predict = |features: &Tensor, n: usize| -> Result<Vec<usize>> {
            (0..n).map(|i| Ok(head.predict(features.row(i))?.label)).collect()
        };
        let (train, n_train) = labeled_accuracy(&predict(&train_features, train_ids.len())?, &train_labels[&kind]);
        let eval_truth = labels_for(&data, &eval_ids, kind, bins.get(&kind))?;
        let (eval, n_eval) = labeled_accuracy(&predict(&eval_features, eval_ids.len())?, &eval_truth);
        scores.insert(
            kind,
            SplitAccuracy {
                train,
                eval,
                n_train,
                n_eval,
            },
        );
    }

    let record = StageRecord {
        stage: "classifier".into(),
        seed: req.config.seed,
        config: req.config.resolved(),
        data: data.path.clone(),
        split: up.split.clone(),
        frame_size: up.frame_size,
        dropout: up.dropout,
        variant: up.variant,
        table_ids: Vec::new(),
        best_eval_loss: None,
        bins,
        accuracy: scores.clone(),
        upstream: Some(upstream.metadata.clone()),
    };
    let mut bundle = ModelBundle::new("classifier", serde_json::to_value(&record)?);
    for (kind, head) in &classifier.heads {
        bundle.tensors.push((format!("rho/{kind}.g"), head.g.clone()));
        bundle.tensors.push((format!("rho/{kind}.b"), Tensor::vector(head.b.clone())));
    }
    let curve_path = write_outputs(&bundle, req.model_out, req.curve_out, |buf| {
        let mut w = String::from("trait,classes,train_accuracy,eval_accuracy,n_train,n_eval\n");
        for (kind, s) in &scores {
            w.push_str(&format!(
                "{kind},{},{},{},{},{}\n",
                kind.n_classes(),
                cell(s.train, 6),
                cell(s.eval, 6),
                s.n_train,
                s.n_eval
            ));
        }
        buf.extend_from_slice(w.as_bytes());
        Ok(())
    })?;
    println!("{:<14} {:>8} {:>8}", "trait", "train", "eval");
    for (kind, s) in &scores {
        println!("{:<14} {:>8} {:>8}", kind.name(), cell(s.train, 3), cell(s.eval, 3));
    }
    println!("wrote {} and {}", req.model_out.display(), curve_path.display());
    Ok(record)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

pub struct FitRequest<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub subject_id: &'a str,
    pub out: &'a Path,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

/// Fits one subject's embedding with the network frozen, starting from the
/// centroid of the trained table.
pub fn fit_embedding(req: &FitRequest) -> Result<EmbeddingRecord> {
    let (bundle, record) = require(Some(req.model), "lstm", "fit-embedding")?;
    let table = table_of(&bundle, &record, req.model, "fit-embedding")?;
    let translator = translator_of(&bundle, &record)?;
    let model = NextFrameLstm::from_params(bundle.store("psi/"))?;
    let data = Loaded::open(req.data)?;
    let phi = data.phi(&translator, &[req.subject_id.to_string()])?;

    let mut fit = record.config.lstm.fit.clone();
    if let Some(s) = req.steps {
        fit.steps = s;
    }
    if let Some(lr) = req.lr {
        fit.lr = lr;
    }
    let (e, losses) = fit_new_subject_embedding(&model, &table, &[&phi[0]], &fit).map_err(|e| e.in_stage("embedding fit"))?;
    let table_loss = match table.index_of(req.subject_id) {
        Ok(i) => {
            let row = Tensor::matrix(1, table.dim(), table.row(i).to_vec())?;
            Some(model.subject_losses(&[&phi[0]], Some(&row))?[0])
        }
        Err(_) => None,
    };
    let out = EmbeddingRecord {
        subject_id: req.subject_id.to_string(),
        dim: table.dim(),
        embedding: e.data().to_vec(),
        loss: losses[0],
        table_loss,
        fit,
        model: req.model.display().to_string(),
        data: data.path.clone(),
        seed: record.seed,
        config: record.config.clone(),
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    std::fs::write(req.out, text)?;
    match out.table_loss {
        Some(t) => println!("{}: loss {:.6} (table row {:.6}); wrote {}", out.subject_id, out.loss, t, req.out.display()),
        None => println!("{}: loss {:.6}; wrote {}", out.subject_id, out.loss, req.out.display()),
    }
    Ok(out)
}
