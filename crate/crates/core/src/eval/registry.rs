//! Named, runtime-selectable evaluation methods.
//!
//! Two families share the registry: frame methods score next-frame
//! prediction on the test subjects, trait methods predict one trait for
//! every test subject. An experiment names the methods it wants and the
//! registry resolves them; unknown names are config errors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::context::RepeatContext;
use crate::datamodel::{SubjectSequences, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::LstmVariant;
use crate::prediction::{
    cnn_frames, fit_dummy, stats_features, train_head, train_regressor, value_label, ClinicalSvr, LinearHead,
    TraitLabels,
};

/// One test subject's prediction for one trait.
#[derive(Clone, Debug, PartialEq)]
pub struct TraitOutput {
    pub label: usize,
    /// Class probabilities; empty when the method has none.
    pub scores: Vec<f64>,
    /// Raw-scale prediction for methods that regress the value.
    pub value: Option<f64>,
}

pub trait FrameMethod: Send + Sync {
    fn name(&self) -> &'static str;
    /// Per-voxel mean squared error of each test subject, in split order.
    fn evaluate(&self, ctx: &RepeatContext) -> Result<Vec<f64>>;
}

pub trait TraitMethod: Send + Sync {
    fn name(&self) -> &'static str;
    /// Predictions for every test subject, in split order. Must not read
    /// test targets; the vault refuses them until scoring.
    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>>;
}

#[derive(Default)]
pub struct Registry {
    frame: BTreeMap<&'static str, Box<dyn FrameMethod>>,
    traits: BTreeMap<&'static str, Box<dyn TraitMethod>>,
}

/// Methods an experiment resolved to, in the order it named them.
pub struct Selection<'r> {
    pub frame: Vec<&'r dyn FrameMethod>,
    pub traits: Vec<&'r dyn TraitMethod>,
}

impl Registry {
    pub fn standard() -> Self {
        let mut r = Registry::default();
        r.register_frame(Box::new(P2AOnly));
        r.register_frame(Box::new(LstmFrames(LstmVariant::Vanilla)));
        r.register_frame(Box::new(LstmFrames(LstmVariant::Conditioned)));
        r.register_trait(Box::new(EmbeddingLinear { shuffled: false }));
        r.register_trait(Box::new(EmbeddingLinear { shuffled: true }));
        r.register_trait(Box::new(EmbeddingRegressor));
        r.register_trait(Box::new(CnnBaseline));
        r.register_trait(Box::new(StatsBaseline));
        r.register_trait(Box::new(ClinicalBaseline));
        r.register_trait(Box::new(Dummy));
        r
    }

    /// Replaces any method of the same name.
    pub fn register_frame(&mut self, m: Box<dyn FrameMethod>) {
        self.frame.insert(m.name(), m);
    }

    pub fn register_trait(&mut self, m: Box<dyn TraitMethod>) {
        self.traits.insert(m.name(), m);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.frame.keys().chain(self.traits.keys()).copied().collect()
    }

    pub fn select(&self, names: &[String]) -> Result<Selection<'_>> {
        let mut sel = Selection {
            frame: Vec::new(),
            traits: Vec::new(),
        };
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("method {n} listed twice")));
            }
            if let Some(m) = self.frame.get(n.as_str()) {
                sel.frame.push(m.as_ref());
            } else if let Some(m) = self.traits.get(n.as_str()) {
                sel.traits.push(m.as_ref());
            } else {
                return Err(Error::Config(format!(
                    "unknown method {n}; registered: {}",
                    self.names().join(", ")
                )));
            }
        }
        Ok(sel)
    }
}

fn mse_rows(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

struct P2AOnly;

impl FrameMethod for P2AOnly {
    fn name(&self) -> &'static str {
        "p2a_only"
    }

    fn evaluate(&self, ctx: &RepeatContext) -> Result<Vec<f64>> {
        Ok(ctx.phi_of(ctx.test())?.iter().map(|s| mse_rows(&s.phi, &s.active)).collect())
    }
}

struct LstmFrames(LstmVariant);

impl FrameMethod for LstmFrames {
    fn name(&self) -> &'static str {
        match self.0 {
            LstmVariant::Conditioned => "cond_lstm",
            LstmVariant::Vanilla => "vanilla_lstm",
        }
    }

    fn evaluate(&self, ctx: &RepeatContext) -> Result<Vec<f64>> {
        let trained = ctx.lstm(self.0)?;
        let losses = match self.0 {
            LstmVariant::Conditioned => ctx.test_embeddings()?.1.clone(),
            LstmVariant::Vanilla => trained.model.subject_losses(&ctx.phi_of(ctx.test())?, None)?,
        };
        let f = trained.model.frame_size() as f64;
        Ok(losses.into_iter().map(|l| l / f).collect())
    }
}

fn stack(rows: Vec<Tensor>) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len();
    Tensor::new(vec![n, d], rows.into_iter().flat_map(|r| r.into_data()).collect())
}

fn head_outputs(head: &LinearHead, features: &Tensor) -> Result<Vec<TraitOutput>> {
    (0..features.as_rows().0)
        .map(|i| {
            let p = head.predict(features.row(i))?;
            Ok(TraitOutput {
                label: p.label,
                scores: p.probabilities,
                value: None,
            })
        })
        .collect()
}

fn value_outputs(ctx: &RepeatContext, kind: TraitKind, values: Vec<f64>) -> Result<Vec<TraitOutput>> {
    let bins = ctx.bins(kind)?;
    values
        .into_iter()
        .map(|v| {
            Ok(TraitOutput {
                label: value_label(kind, v, bins)?,
                scores: Vec::new(),
                value: Some(v),
            })
        })
        .collect()
}

/// Linear softmax probe on the learned embeddings. The shuffled variant
/// permutes training labels across subjects first.
struct EmbeddingLinear {
    shuffled: bool,
}

impl TraitMethod for EmbeddingLinear {
    fn name(&self) -> &'static str {
        if self.shuffled {
            "embedding_shuffled"
        } else {
            "embedding_linear"
        }
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let mut labels = ctx.train_labels(kind)?;
        if self.shuffled {
            labels.shuffle(&mut ctx.rng(&format!("shuffle.{kind}")));
        }
        let head = train_head(&ctx.train_embeddings()?, &labels, kind.n_classes(), &ctx.config.classifier)?;
        head_outputs(&head, &ctx.test_embeddings()?.0)
    }
}

/// Least-squares regression of the raw trait value on the embedding,
/// quantized with the training bins for the accuracy scale.
struct EmbeddingRegressor;

impl TraitMethod for EmbeddingRegressor {
    fn name(&self) -> &'static str {
        "embedding_regressor"
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let reg = train_regressor(&ctx.train_embeddings()?, &ctx.train_values(kind)?)?;
        let test = &ctx.test_embeddings()?.0;
        let values = (0..test.as_rows().0).map(|i| reg.predict(test.row(i))).collect::<Result<Vec<_>>>()?;
        value_outputs(ctx, kind, values)
    }
}

struct CnnBaseline;

impl TraitMethod for CnnBaseline {
    fn name(&self) -> &'static str {
        "fmri_cnn"
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let cnn = ctx.cnn()?;
        ctx.test()
            .iter()
            .map(|&i| {
                let mut p = cnn.predict(&cnn_frames(&ctx.sequences[i])?)?;
                let p = p
                    .remove(&kind)
                    .ok_or_else(|| Error::Lookup(format!("cnn has no head for {kind}")))?;
                Ok(TraitOutput {
                    label: p.label,
                    scores: p.probabilities,
                    value: None,
                })
            })
            .collect()
    }
}

fn stats_matrix(sequences: &[SubjectSequences], idx: &[usize]) -> Result<Tensor> {
    stack(idx.iter().map(|&i| stats_features(&sequences[i])).collect::<Result<Vec<_>>>()?)
}

/// Affine softmax layer on per-frame spatial mean and SD.
struct StatsBaseline;

impl TraitMethod for StatsBaseline {
    fn name(&self) -> &'static str {
        "fmri_stats"
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let train = stats_matrix(ctx.sequences, ctx.train())?;
        let head = train_head(&train, &ctx.train_labels(kind)?, kind.n_classes(), &ctx.config.classifier)?;
        head_outputs(&head, &stats_matrix(ctx.sequences, ctx.test())?)
    }
}

/// Support-vector regression of the trait on the subject's other traits.
struct ClinicalBaseline;

impl TraitMethod for ClinicalBaseline {
    fn name(&self) -> &'static str {
        "clinical_svr"
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let train = ctx.train().iter().map(|&i| ctx.vault.record(i)).collect::<Result<Vec<_>>>()?;
        let svr = ClinicalSvr::fit(&train, ctx.dataset.cohort, kind, &ctx.config.svr)?;
        let values = ctx
            .test()
            .iter()
            .map(|&i| svr.predict(&ctx.vault.predictors(i, kind)?))
            .collect::<Result<Vec<_>>>()?;
        value_outputs(ctx, kind, values)
    }
}

/// Most frequent training label.
struct Dummy;

impl TraitMethod for Dummy {
    fn name(&self) -> &'static str {
        "dummy"
    }

    fn predict(&self, ctx: &RepeatContext, kind: TraitKind) -> Result<Vec<TraitOutput>> {
        let labels: TraitLabels = ctx.train_labels(kind)?;
        let label = fit_dummy(&labels.into_iter().flatten().collect::<Vec<_>>())?;
        let mut scores = vec![0.0; kind.n_classes()];
        scores[label] = 1.0;
        Ok(vec![
            TraitOutput {
                label,
                scores,
                value: None,
            };
            ctx.test().len()
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_names_resolve_in_order() {
        let r = Registry::standard();
        let names: Vec<String> = ["dummy", "cond_lstm", "fmri_stats", "p2a_only"].iter().map(|s| s.to_string()).collect();
        let sel = r.select(&names).unwrap();
        assert_eq!(sel.frame.iter().map(|m| m.name()).collect::<Vec<_>>(), ["cond_lstm", "p2a_only"]);
        assert_eq!(sel.traits.iter().map(|m| m.name()).collect::<Vec<_>>(), ["dummy", "fmri_stats"]);
        for n in super::super::config::STANDARD_METHODS {
            assert!(r.names().contains(&n), "{n}");
        }
    }

    #[test]
    fn unknown_and_repeated_names_are_config_errors() {
        let r = Registry::standard();
        assert!(matches!(r.select(&["svm".to_string()]), Err(Error::Config(_))));
        assert!(matches!(r.select(&["dummy".to_string(), "dummy".to_string()]), Err(Error::Config(_))));
    }

    struct Zero;

    impl FrameMethod for Zero {
        fn name(&self) -> &'static str {
            "zero"
        }

        fn evaluate(&self, ctx: &RepeatContext) -> Result<Vec<f64>> {
            Ok(vec![0.0; ctx.test().len()])
        }
    }

    #[test]
    fn custom_methods_can_be_registered() {
        let mut r = Registry::standard();
        r.register_frame(Box::new(Zero));
        assert_eq!(r.select(&["zero".to_string()]).unwrap().frame[0].name(), "zero");
    }
}
