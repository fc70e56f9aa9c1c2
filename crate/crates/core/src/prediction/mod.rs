//! Trait prediction from frozen subject embeddings, the comparison
//! baselines and prediction export.

mod cnn;
mod linear;
mod regress;
mod svr;

use serde::{Deserialize, Serialize};

pub use cnn::{cnn_frames, train_cnn, CnnConfig, FmriCnn};
pub use linear::{head_loss_with, predict_traits, train_classifier, train_head, ClassifierConfig, LinearClassifier, LinearHead};
pub use regress::{rmse, train_regressor, LinearRegressor};
pub use svr::{eps_insensitive, ClinicalSvr, LinearSvr, SvrConfig};

use crate::datamodel::{QuantizationBins, SubjectSequences, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-subject class labels for one trait; `None` where unrecorded.
pub type TraitLabels = Vec<Option<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitPrediction {
    pub label: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Class label of a raw trait value: binned traits use the training-split
/// bins, experience levels are rounded and clamped.
pub fn value_label(kind: TraitKind, value: f64, bins: Option<&QuantizationBins>) -> Result<usize> {
    match (kind.is_binned(), bins) {
        (true, Some(b)) => b.quantize(value),
        (true, None) => Err(Error::Usage(format!("{kind} needs fitted bins"))),
        (false, _) if value.is_nan() => Err(Error::Label(format!("{kind} value is NaN"))),
        (false, _) => Ok(value.round().clamp(0.0, (kind.n_classes() - 1) as f64) as usize),
    }
}

/// Modal label with ties going to the lowest label.
pub fn fit_dummy(labels: &[usize]) -> Result<usize> {
    let max = *labels.iter().max().ok_or_else(|| Error::Label("dummy needs at least one label".into()))?;
    let mut counts = vec![0usize; max + 1];
    labels.iter().for_each(|&l| counts[l] += 1);
    Ok(counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best }))
}

/// Spatial mean and standard deviation of every frame, laid out as
/// `(2M, 2, T)` and flattened: passive runs first, then active runs.
pub fn stats_features(seq: &SubjectSequences) -> Result<Tensor> {
    let (m, t) = (seq.shape.runs, seq.shape.t_active);
    if seq.shape.t_passive != t {
        return Err(Error::Config("frame summaries need equal passive and active lengths".into()));
    }
    let mut out = Vec::with_capacity(2 * m * 2 * t);
    for phase in [&seq.passive, &seq.active] {
        for run in 0..m {
            let frames: Vec<&[f64]> = (0..t).map(|s| phase.row(run * t + s)).collect();
            let stats: Vec<(f64, f64)> = frames
                .iter()
                .map(|f| {
                    let n = f.len() as f64;
                    let mean = f.iter().sum::<f64>() / n;
                    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (mean, var.sqrt())
                })
                .collect();
            out.extend(stats.iter().map(|s| s.0));
            out.extend(stats.iter().map(|s| s.1));
        }
    }
    Tensor::new(vec![2 * m * 2 * t], out)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// One exported prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub repeat: usize,
    pub subject_id: String,
    pub method: String,
    pub trait_kind: TraitKind,
    pub true_label: Option<usize>,
    pub predicted_label: usize,
    /// Class probabilities; empty for methods without scores.
    pub scores: Vec<f64>,
}

/// CSV with `repeat,subject_id,method,trait,true_label,predicted_label,scores`;
/// scores are `;`-separated.
pub fn write_predictions_csv<W: std::io::Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["repeat", "subject_id", "method", "trait", "true_label", "predicted_label", "scores"])?;
    for r in rows {
        let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.6}")).collect();
        w.write_record([
            r.repeat.to_string(),
            r.subject_id.clone(),
            r.method.clone(),
            r.trait_kind.name().to_string(),
            r.true_label.map(|l| l.to_string()).unwrap_or_default(),
            r.predicted_label.to_string(),
            scores.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{FrameDims, SequenceShape};

    #[test]
    fn dummy_mode_and_ties() {
        assert_eq!(fit_dummy(&[2, 2, 3]).unwrap(), 2);
        assert_eq!(fit_dummy(&[0, 1]).unwrap(), 0);
        assert_eq!(fit_dummy(&[4, 1, 4, 1]).unwrap(), 1);
        assert!(fit_dummy(&[]).is_err());
        // Test accuracy equals the empirical frequency of the chosen label.
        let test = [2, 0, 2, 1, 2];
        let acc = accuracy(&[2; 5], &test);
        assert_eq!(acc, 3.0 / 5.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn value_labels() {
        let bins = QuantizationBins::new(0.0, 1.0).unwrap();
        assert_eq!(value_label(TraitKind::Tas20, 1.0, Some(&bins)).unwrap(), 2);
        assert_eq!(value_label(TraitKind::NfExperience, 2.7, None).unwrap(), 2);
        assert_eq!(value_label(TraitKind::NfExperience, -0.4, None).unwrap(), 0);
        assert!(value_label(TraitKind::Age, 1.0, None).is_err());
    }

    fn sequences(passive: Vec<f64>, active: Vec<f64>) -> SubjectSequences {
        let shape = SequenceShape {
            dims: FrameDims::new(2, 1, 1),
            t_passive: 2,
            t_active: 2,
            runs: 1,
        };
        SubjectSequences {
            passive: Tensor::new(vec![2, 2], passive).unwrap(),
            active: Tensor::new(vec![2, 2], active).unwrap(),
            shape,
        }
    }

    #[test]
    fn stats_layout_and_constant_frames() {
        let s = sequences(vec![1.0, 3.0, 5.0, 5.0], vec![0.0, 0.0, -2.0, 2.0]);
        let z = stats_features(&s).unwrap();
        // (block, channel, t)
        assert_eq!(z.data(), &[2.0, 5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let flat = sequences(vec![7.0; 4], vec![-1.0; 4]);
        let z = stats_features(&flat).unwrap();
        assert_eq!(&z.data()[2..4], &[0.0, 0.0]);
        assert_eq!(&z.data()[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn default_stats_shape() {
        let shape = SequenceShape {
            dims: FrameDims::new(6, 5, 6),
            t_passive: 14,
            t_active: 14,
            runs: 3,
        };
        let s = SubjectSequences {
            passive: Tensor::zeros(&[42, 180]),
            active: Tensor::zeros(&[42, 180]),
            shape,
        };
        assert_eq!(stats_features(&s).unwrap().len(), 6 * 2 * 14);
    }

    #[test]
    fn csv_export() {
        let rows = vec![PredictionRow {
            repeat: 1,
            subject_id: "s1".into(),
            method: "dummy".into(),
            trait_kind: TraitKind::Stai,
            true_label: None,
            predicted_label: 2,
            scores: vec![0.25, 0.75],
        }];
        let mut buf = Vec::new();
        write_predictions_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "repeat,subject_id,method,trait,true_label,predicted_label,scores\n1,s1,dummy,stai,,2,0.250000;0.750000\n"
        );
    }
}
