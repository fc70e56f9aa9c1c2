use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{argmax, TraitLabels, TraitPrediction};
use crate::datamodel::{mean_sd, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::{ops, Optimizer, OptimizerConfig, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    /// Full-batch gradient steps.
    pub epochs: usize,
    /// L2 penalty on `G`, not on `b`.
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 1e-2,
            epochs: 500,
            weight_decay: 1e-1,
        }
    }
}

/// One affine softmax head, `scores = Gᵀx + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `[d, classes]`
    pub g: Tensor,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearHead {
            g: Tensor::zeros(&[dim, classes]),
            b: vec![0.0; classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim(
                "linear_head",
                format!("input of width {} for a head of width {}", x.len(), self.dim()),
            ));
        }
        let mut out = self.b.clone();
        for (j, xv) in x.iter().enumerate() {
            for (o, gv) in out.iter_mut().zip(self.g.row(j)) {
                *o += gv * xv;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f64]) -> Result<TraitPrediction> {
        let logits = self.logits(x)?;
        Ok(TraitPrediction {
            label: argmax(&logits),
            probabilities: ops::softmax(&logits),
            logits,
        })
    }
}

/// Independent linear heads, one per trait.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub heads: BTreeMap<TraitKind, LinearHead>,
}

impl LinearClassifier {
    pub fn head(&self, kind: TraitKind) -> Result<&LinearHead> {
        self.heads
            .get(&kind)
            .ok_or_else(|| Error::Lookup(format!("classifier has no head for {kind}")))
    }
}

/// Labels for `ρ(e) = Gᵀe + b`, one entry per trained head.
pub fn predict_traits(classifier: &LinearClassifier, e: &[f64]) -> Result<BTreeMap<TraitKind, TraitPrediction>> {
    classifier.heads.iter().map(|(k, h)| Ok((*k, h.predict(e)?))).collect()
}

/// Fits one softmax head per trait on the rows where that trait is labeled.
/// Features are standardized during training and the scaling is folded back
/// into `G` and `b`, so the result is affine in the raw features.
pub fn train_classifier(
    features: &Tensor,
    labels: &BTreeMap<TraitKind, TraitLabels>,
    config: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let heads = labels
        .iter()
        .map(|(kind, l)| Ok((*kind, train_head(features, l, kind.n_classes(), config)?)))
        .collect::<Result<_>>()?;
    Ok(LinearClassifier { heads })
}

/// Training objective of one head: softmax cross-entropy of `Wx + b` plus
/// `weight_decay·‖W‖²`. `W` is `[classes, d]` and `b` is `[classes]`.
pub fn head_loss_with<'a>(
    params: &'a ParamStore,
    tape: &mut Tape<'a>,
    (w, b): (ParamId, ParamId),
    x: &Tensor,
    targets: &[usize],
    weight_decay: f64,
) -> Result<Var> {
    let xv = tape.input(x.clone());
    let (wv, bv) = (tape.param(params, w), tape.param(params, b));
    let logits = tape.affine(xv, wv, Some(bv))?;
    let ce = tape.cross_entropy(logits, targets)?;
    let penalty = tape.sum_squares(wv);
    let penalty = tape.scale(penalty, weight_decay);
    tape.add(ce, penalty)
}

pub fn train_head(features: &Tensor, labels: &TraitLabels, classes: usize, config: &ClassifierConfig) -> Result<LinearHead> {
    let (n, d) = features.as_rows();
    if labels.len() != n {
        return Err(Error::dim("train_classifier", format!("{} label slots for {n} rows", labels.len())));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Label("no labeled rows to train a head".into()));
    }
    let targets: Vec<usize> = rows.iter().map(|&i| labels[i].unwrap()).collect();
    if let Some(bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(Error::Label(format!("label {bad} outside {classes} classes")));
    }

    let (mu, sd): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|&i| features.row(i)[j]).collect();
            let (m, s) = mean_sd(&col);
            (m, if s > 1e-12 { s } else { 1.0 })
        })
        .unzip();
    let mut x = Vec::with_capacity(rows.len() * d);
    for &i in &rows {
        x.extend(features.row(i).iter().zip(mu.iter().zip(&sd)).map(|(v, (m, s))| (v - m) / s));
    }
    let x = Tensor::new(vec![rows.len(), d], x)?;

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[classes, d]));
    let b = store.add("b", Tensor::zeros(&[classes]));
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr));
    for _ in 0..config.epochs {
        let grads = {
            let mut tape = Tape::new();
            let loss = head_loss_with(&store, &mut tape, (w, b), &x, &targets, config.weight_decay)?;
            tape.gradients(loss, &store)?
        };
        opt.step(&mut store, &grads, &[w, b])?;
    }

    // Fold the standardization: Gᵀ((x − μ)/σ) + b = (G/σ)ᵀx + (b − (G/σ)ᵀμ).
    let (wt, bt) = (store.get(w), store.get(b));
    let mut g = vec![0.0; d * classes];
    let mut bias = bt.data().to_vec();
    for c in 0..classes {
        for j in 0..d {
            let v = wt.row(c)[j] / sd[j];
            g[j * classes + c] = v;
            bias[c] -= v * mu[j];
        }
    }
    Ok(LinearHead {
        g: Tensor::new(vec![d, classes], g)?,
        b: bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_head_ties_to_lowest_label() {
        let h = LinearHead::zeros(12, 5);
        let p = h.predict(&[0.3; 12]).unwrap();
        assert_eq!(p.label, 0);
        for v in &p.probabilities {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn bias_alone_decides() {
        let mut h = LinearHead::zeros(12, 5);
        h.b[3] = 10.0;
        for s in [-5.0, 0.0, 7.0] {
            assert_eq!(h.predict(&[s; 12]).unwrap().label, 3);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let c = LinearClassifier {
            heads: BTreeMap::from([(TraitKind::Tas20, LinearHead::zeros(12, 5))]),
        };
        assert!(matches!(predict_traits(&c, &[0.0; 11]), Err(Error::Dimension { .. })));
    }

    fn two_clusters() -> (Tensor, TraitLabels) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let side = (i % 2) as f64;
            x.extend([side * 2.0 - 1.0 + 0.01 * i as f64, 0.5 - 0.02 * i as f64]);
            y.push(Some(if i % 2 == 0 { 1 } else { 4 }));
        }
        (Tensor::new(vec![20, 2], x).unwrap(), y)
    }

    #[test]
    fn separable_clusters_are_fit_exactly() {
        let (x, y) = two_clusters();
        let clf = train_classifier(&x, &BTreeMap::from([(TraitKind::Stai, y.clone())]), &ClassifierConfig::default()).unwrap();
        for i in 0..20 {
            assert_eq!(Some(clf.heads[&TraitKind::Stai].predict(x.row(i)).unwrap().label), y[i]);
        }
    }

    #[test]
    fn missing_labels_are_skipped() {
        let (x, mut y) = two_clusters();
        y[0] = None;
        y[5] = None;
        let h = train_head(&x, &y, 5, &ClassifierConfig::default()).unwrap();
        assert_eq!(h.predict(x.row(0)).unwrap().label, 1);
        assert!(matches!(train_head(&x, &vec![None; 20], 5, &ClassifierConfig::default()), Err(Error::Label(_))));
        let bad = vec![Some(7); 20];
        assert!(matches!(train_head(&x, &bad, 5, &ClassifierConfig::default()), Err(Error::Label(_))));
    }

    proptest! {
        #[test]
        fn scores_are_affine_and_argmax_scale_invariant(
            g in prop::collection::vec(-2.0f64..2.0, 15),
            b in prop::collection::vec(-1.0f64..1.0, 5),
            e1 in prop::collection::vec(-3.0f64..3.0, 3),
            e2 in prop::collection::vec(-3.0f64..3.0, 3),
            scale in 0.01f64..100.0,
        ) {
            let h = LinearHead { g: Tensor::new(vec![3, 5], g.clone()).unwrap(), b: b.clone() };
            let sum: Vec<f64> = e1.iter().zip(&e2).map(|(a, c)| a + c).collect();
            let (s1, s2, s12) = (h.logits(&e1).unwrap(), h.logits(&e2).unwrap(), h.logits(&sum).unwrap());
            for c in 0..5 {
                prop_assert!((s12[c] - (s1[c] + s2[c] - b[c])).abs() < 1e-9);
            }
            let unbiased = LinearHead { g: Tensor::new(vec![3, 5], g).unwrap(), b: vec![0.0; 5] };
            let scaled: Vec<f64> = e1.iter().map(|v| v * scale).collect();
            prop_assert_eq!(unbiased.predict(&e1).unwrap().label, unbiased.predict(&scaled).unwrap().label);
        }
    }
}
