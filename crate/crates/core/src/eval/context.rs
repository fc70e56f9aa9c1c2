use std::cell::OnceCell;
use std::collections::BTreeMap;

use super::audit::LabelVault;
use super::config::ExperimentConfig;
use crate::datamodel::{fit_bins, Dataset, QuantizationBins, SubjectSequences, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::{Rng64, SeedStream, Tensor};
use crate::pipeline::{
    fit_new_subject_embedding, train_next_frame, train_p2a, LstmVariant, P2ATranslator, PhiSequences, TrainedLstm,
};
use crate::prediction::{cnn_frames, train_cnn, value_label, FmriCnn, TraitLabels};

fn cached<T>(cell: &OnceCell<T>, make: impl FnOnce() -> Result<T>) -> Result<&T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = make()?;
    Ok(cell.get_or_init(|| v))
}

/// Everything one repeat shares between methods. Models are trained on
/// first use, so a run that selects only baselines never trains the
/// translator or the recurrent models.
pub struct RepeatContext<'a> {
    pub index: usize,
    pub seeds: SeedStream,
    pub config: &'a ExperimentConfig,
    pub dataset: &'a Dataset,
    pub sequences: &'a [SubjectSequences],
    /// Train, eval and test indices into the dataset.
    pub split: [Vec<usize>; 3],
    /// Requested traits the cohort records.
    pub traits: Vec<TraitKind>,
    pub vault: LabelVault,
    translator: OnceCell<P2ATranslator>,
    phi: OnceCell<Vec<PhiSequences>>,
    vanilla: OnceCell<TrainedLstm>,
    conditioned: OnceCell<TrainedLstm>,
    test_fit: OnceCell<(Tensor, Vec<f64>)>,
    bins: OnceCell<BTreeMap<TraitKind, Option<QuantizationBins>>>,
    cnn: OnceCell<FmriCnn>,
}

impl<'a> RepeatContext<'a> {
    pub fn new(
        index: usize,
        seeds: SeedStream,
        config: &'a ExperimentConfig,
        dataset: &'a Dataset,
        sequences: &'a [SubjectSequences],
        split: [Vec<usize>; 3],
    ) -> Result<Self> {
        let vault = LabelVault::new(dataset.subjects.iter().map(|s| s.traits.clone()).collect(), &split)?;
        let traits = config.traits.iter().copied().filter(|&k| dataset.cohort.allows(k)).collect();
        Ok(RepeatContext {
            index,
            seeds,
            config,
            dataset,
            sequences,
            split,
            traits,
            vault,
            translator: OnceCell::new(),
            phi: OnceCell::new(),
            vanilla: OnceCell::new(),
            conditioned: OnceCell::new(),
            test_fit: OnceCell::new(),
            bins: OnceCell::new(),
            cnn: OnceCell::new(),
        })
    }

    pub fn train(&self) -> &[usize] {
        &self.split[0]
    }

    pub fn eval(&self) -> &[usize] {
        &self.split[1]
    }

    pub fn test(&self) -> &[usize] {
        &self.split[2]
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test().iter().map(|&i| self.dataset.subjects[i].subject_id.clone()).collect()
    }

    pub fn rng(&self, label: &str) -> Rng64 {
        self.seeds.derive_named(label).rng(0)
    }

    fn pick(&self, idx: &[usize]) -> Vec<SubjectSequences> {
        idx.iter().map(|&i| self.sequences[i].clone()).collect()
    }

    pub fn translator(&self) -> Result<&P2ATranslator> {
        cached(&self.translator, || {
            let (t, _) = train_p2a(
                &self.pick(self.train()),
                &self.pick(self.eval()),
                &self.config.p2a,
                &self.seeds.derive_named("p2a"),
            )
            .map_err(|e| e.in_stage("p2a"))?;
            Ok(t)
        })
    }

    /// Translated sequences of every subject, in dataset order.
    pub fn phi(&self) -> Result<&[PhiSequences]> {
        cached(&self.phi, || {
            let t = self.translator()?;
            self.dataset
                .subjects
                .iter()
                .zip(self.sequences)
                .map(|(s, seq)| PhiSequences::build(t, &s.subject_id, seq))
                .collect()
        })
        .map(|v| v.as_slice())
    }

    pub fn phi_of(&self, idx: &[usize]) -> Result<Vec<&PhiSequences>> {
        let phi = self.phi()?;
        Ok(idx.iter().map(|&i| &phi[i]).collect())
    }

    pub fn lstm(&self, variant: LstmVariant) -> Result<&TrainedLstm> {
        let cell = match variant {
            LstmVariant::Conditioned => &self.conditioned,
            LstmVariant::Vanilla => &self.vanilla,
        };
        cached(cell, || {
            let phi = self.phi()?;
            let owned = |idx: &[usize]| idx.iter().map(|&i| phi[i].clone()).collect::<Vec<_>>();
            let stage = format!("lstm.{}", variant.name());
            train_next_frame(
                variant,
                &owned(self.train()),
                &owned(self.eval()),
                &self.config.lstm,
                &self.seeds.derive_named(&stage),
            )
            .map_err(|e| e.in_stage(stage))
        })
    }

    /// Rows of the trained table for the training subjects, in split order.
    pub fn train_embeddings(&self) -> Result<Tensor> {
        let trained = self.lstm(LstmVariant::Conditioned)?;
        let table = trained
            .table
            .as_ref()
            .ok_or_else(|| Error::Usage("conditioned model without a table".into()))?;
        let ids: Vec<&str> = self.train().iter().map(|&i| self.dataset.subjects[i].subject_id.as_str()).collect();
        table.rows_for(&ids)
    }

    /// Embeddings fitted to the test subjects against the frozen network,
    /// and each subject's next-frame loss under its embedding.
    pub fn test_embeddings(&self) -> Result<&(Tensor, Vec<f64>)> {
        cached(&self.test_fit, || {
            let trained = self.lstm(LstmVariant::Conditioned)?;
            let table = trained
                .table
                .as_ref()
                .ok_or_else(|| Error::Usage("conditioned model without a table".into()))?;
            fit_new_subject_embedding(&trained.model, table, &self.phi_of(self.test())?, &self.config.lstm.fit)
                .map_err(|e| e.in_stage("embedding fit"))
        })
    }

    /// Bins fitted on the training subjects' values; `None` for unbinned
    /// traits.
    pub fn bins(&self, kind: TraitKind) -> Result<Option<&QuantizationBins>> {
        let all = cached(&self.bins, || {
            let mut out = BTreeMap::new();
            for &k in &self.traits {
                let b = if k.is_binned() {
                    let values: Vec<f64> = self.train_values(k)?.into_iter().flatten().collect();
                    Some(fit_bins(&values).map_err(|e| e.in_stage(format!("bins.{k}")))?)
                } else {
                    None
                };
                out.insert(k, b);
            }
            Ok(out)
        })?;
        all.get(&kind)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Lookup(format!("{kind} is not scored in this run")))
    }

    pub fn train_values(&self, kind: TraitKind) -> Result<Vec<Option<f64>>> {
        self.train().iter().map(|&i| self.vault.target(i, kind)).collect()
    }

    pub fn train_labels(&self, kind: TraitKind) -> Result<TraitLabels> {
        let bins = self.bins(kind)?;
        self.train_values(kind)?
            .into_iter()
            .map(|v| v.map(|v| value_label(kind, v, bins)).transpose())
            .collect()
    }

    pub fn cnn(&self) -> Result<&FmriCnn> {
        cached(&self.cnn, || {
            let frames = self.train().iter().map(|&i| cnn_frames(&self.sequences[i])).collect::<Result<Vec<_>>>()?;
            let labels = self.traits.iter().map(|&k| Ok((k, self.train_labels(k)?))).collect::<Result<_>>()?;
            train_cnn(self.dataset.shape, &frames, &labels, &self.config.cnn, &self.seeds.derive_named("cnn"))
                .map_err(|e| e.in_stage("cnn"))
        })
    }
}
