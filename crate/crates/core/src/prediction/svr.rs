use serde::{Deserialize, Serialize};

use crate::datamodel::{mean_sd, Cohort, TraitKind, TraitRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    /// Tube half-width, in target standard deviations.
    pub epsilon: f64,
    pub c: f64,
    pub epochs: usize,
    /// Initial step; step `t` uses `lr / √t`.
    pub lr: f64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        SvrConfig {
            epsilon: 0.1,
            c: 1.0,
            epochs: 2000,
            lr: 0.1,
        }
    }
}

/// `max(0, |r| − ε)` and a subgradient in `r`; zero inside the tube.
pub fn eps_insensitive(residual: f64, epsilon: f64) -> (f64, f64) {
    let excess = residual.abs() - epsilon;
    if excess > 0.0 {
        (excess, residual.signum())
    } else {
        (0.0, 0.0)
    }
}

/// Linear ε-insensitive regression fitted by full-batch subgradient
/// descent on `½‖w‖² + C Σ max(0, |y − wᵀx − b| − ε)`, with inputs and
/// target standardized on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvr {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub y_mean: f64,
    pub y_sd: f64,
}

fn nonzero(sd: f64) -> f64 {
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

impl LinearSvr {
    /// Missing inputs (NaN) are replaced by the training mean.
    pub fn fit(x: &[Vec<f64>], y: &[f64], config: &SvrConfig) -> Result<Self> {
        let n = x.len();
        if n == 0 || y.len() != n {
            return Err(Error::Config(format!("svr needs matching nonempty rows, got {n} and {}", y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::dim("svr", "ragged input rows"));
        }
        let mut x_mean = Vec::with_capacity(d);
        let mut x_sd = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = x.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
            if col.is_empty() {
                return Err(Error::Config(format!("svr input column {j} has no values")));
            }
            let (m, s) = mean_sd(&col);
            x_mean.push(m);
            x_sd.push(nonzero(s));
        }
        let (y_mean, y_sd) = mean_sd(y);
        let y_sd = nonzero(y_sd);
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..d).map(|j| if r[j].is_nan() { 0.0 } else { (r[j] - x_mean[j]) / x_sd[j] }).collect())
            .collect();
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_sd).collect();

        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for t in 1..=config.epochs {
            let mut gw = w.clone();
            let mut gb = 0.0;
            for (xi, yi) in xs.iter().zip(&ys) {
                let r = yi - dot(&w, xi) - b;
                let (_, s) = eps_insensitive(r, config.epsilon);
                if s != 0.0 {
                    gw.iter_mut().zip(xi).for_each(|(g, xv)| *g -= config.c * s * xv);
                    gb -= config.c * s;
                }
            }
            let step = config.lr / (t as f64).sqrt() / n as f64;
            w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= step * g);
            b -= step * gb;
        }
        Ok(LinearSvr {
            x_mean,
            x_sd,
            w,
            b,
            y_mean,
            y_sd,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::dim("svr", format!("input of width {} for {} weights", x.len(), self.w.len())));
        }
        let z: f64 = (0..x.len())
            .map(|j| if x[j].is_nan() { 0.0 } else { self.w[j] * (x[j] - self.x_mean[j]) / self.x_sd[j] })
            .sum();
        Ok(self.y_mean + self.y_sd * (z + self.b))
    }

    /// Training objective in standardized units.
    pub fn objective(&self, x: &[Vec<f64>], y: &[f64], config: &SvrConfig) -> Result<f64> {
        let mut total = 0.5 * dot(&self.w, &self.w);
        for (xi, yi) in x.iter().zip(y) {
            let r = (yi - self.predict(xi)?) / self.y_sd;
            total += config.c * eps_insensitive(r, config.epsilon).0;
        }
        Ok(total)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Predicts one trait from the subject's other recorded traits. Input
/// columns are the other traits the cohort records that appear at least
/// once in the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSvr {
    pub target: TraitKind,
    pub inputs: Vec<TraitKind>,
    pub model: LinearSvr,
}

impl ClinicalSvr {
    pub fn fit(train: &[TraitRecord], cohort: Cohort, target: TraitKind, config: &SvrConfig) -> Result<Self> {
        let inputs: Vec<TraitKind> = TraitKind::ALL
            .into_iter()
            .filter(|&k| k != target && cohort.allows(k) && train.iter().any(|r| r.value(k).is_some()))
            .collect();
        if inputs.is_empty() {
            return Err(Error::Config(format!("no other traits available to predict {target} in {cohort:?} cohort")));
        }
        let rows: Vec<&TraitRecord> = train.iter().filter(|r| r.value(target).is_some()).collect();
        if rows.is_empty() {
            return Err(Error::Config(format!("trait {target} has no training values")));
        }
        let x: Vec<Vec<f64>> = rows.iter().map(|r| row(r, &inputs)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.value(target).unwrap()).collect();
        Ok(ClinicalSvr {
            target,
            model: LinearSvr::fit(&x, &y, config)?,
            inputs,
        })
    }

    pub fn predict(&self, record: &TraitRecord) -> Result<f64> {
        self.model.predict(&row(record, &self.inputs))
    }
}

fn row(r: &TraitRecord, inputs: &[TraitKind]) -> Vec<f64> {
    inputs.iter().map(|&k| r.value(k).unwrap_or(f64::NAN)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::fit_bins;

    #[test]
    fn tube_is_flat() {
        assert_eq!(eps_insensitive(0.0, 0.1), (0.0, 0.0));
        assert_eq!(eps_insensitive(0.05, 0.1), (0.0, 0.0));
        let (l, g) = eps_insensitive(-0.3, 0.1);
        assert!((l - 0.2).abs() < 1e-15);
        assert_eq!(g, -1.0);
    }

    fn records(f: impl Fn(f64) -> f64) -> Vec<TraitRecord> {
        // Fitted bins land near ±0.99 and ±1.98, so every value sits about
        // half an SD from the nearest edge.
        let mut zs = vec![0.0; 18];
        zs.extend([-1.5, -1.5, 1.5, 1.5, -2.6, 2.6]);
        zs.iter()
            .map(|&z| TraitRecord {
                stai: Some(40.0 + 10.0 * z),
                tas20: Some(f(z)),
                ..TraitRecord::default()
            })
            .collect()
    }

    #[test]
    fn realizable_target_gives_perfect_quantized_accuracy() {
        let train = records(|z| 50.0 + 8.0 * z);
        let m = ClinicalSvr::fit(&train, Cohort::Fibromyalgia, TraitKind::Tas20, &SvrConfig::default()).unwrap();
        assert_eq!(m.inputs, vec![TraitKind::Stai]);
        let truth: Vec<f64> = train.iter().map(|r| r.tas20.unwrap()).collect();
        let bins = fit_bins(&truth).unwrap();
        for (r, y) in train.iter().zip(&truth) {
            let p = m.predict(r).unwrap();
            assert_eq!(bins.quantize(p).unwrap(), bins.quantize(*y).unwrap(), "{p} vs {y}");
        }
    }

    #[test]
    fn objective_decreases_from_zero_model() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| 3.0 * i as f64 + 1.0).collect();
        let cfg = SvrConfig::default();
        let fitted = LinearSvr::fit(&x, &y, &cfg).unwrap();
        let zero = LinearSvr {
            w: vec![0.0; 2],
            b: 0.0,
            ..fitted.clone()
        };
        assert!(fitted.objective(&x, &y, &cfg).unwrap() < 0.2 * zero.objective(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn missing_columns_are_config_errors() {
        let train = vec![TraitRecord {
            tas20: Some(1.0),
            ..TraitRecord::default()
        }];
        assert!(matches!(
            ClinicalSvr::fit(&train, Cohort::Fibromyalgia, TraitKind::Tas20, &SvrConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ClinicalSvr::fit(&train, Cohort::Fibromyalgia, TraitKind::Stai, &SvrConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn absent_inputs_use_the_training_mean() {
        let x = vec![vec![1.0], vec![3.0], vec![f64::NAN]];
        let m = LinearSvr::fit(&x, &[1.0, 3.0, 2.0], &SvrConfig::default()).unwrap();
        assert_eq!(m.x_mean, vec![2.0]);
        assert_eq!(m.predict(&[f64::NAN]).unwrap(), m.predict(&[2.0]).unwrap());
    }
}
