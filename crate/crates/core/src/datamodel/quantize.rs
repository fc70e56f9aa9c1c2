use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_BINS: usize = 5;

/// Five ordinal bins around a fitted mean:
/// `(-∞, μ−2σ]`, `(μ−2σ, μ−σ]`, `(μ−σ, μ+σ]`, `(μ+σ, μ+2σ]`, `(μ+2σ, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationBins {
    pub mu: f64,
    pub sigma: f64,
    pub edges: [f64; 4],
}

impl QuantizationBins {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Degenerate(format!(
                "bins need finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        let edges = [mu - 2.0 * sigma, mu - sigma, mu + sigma, mu + 2.0 * sigma];
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Degenerate(format!(
                "sigma {sigma} too small to separate edges around {mu}"
            )));
        }
        Ok(QuantizationBins { mu, sigma, edges })
    }

    /// Label of the unique range containing `value`; upper edges are inclusive.
    pub fn quantize(&self, value: f64) -> Result<usize> {
        if value.is_nan() {
            return Err(Error::Label("cannot quantize NaN".into()));
        }
        Ok(self
            .edges
            .iter()
            .position(|&e| value <= e)
            .unwrap_or(N_BINS - 1))
    }
}

/// Sample mean and unbiased (n−1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn fit_bins(values: &[f64]) -> Result<QuantizationBins> {
    if values.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 values to fit bins, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Label("non-finite value in bin fit".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::Degenerate(format!(
            "all {} values equal {}",
            values.len(),
            values[0]
        )));
    }
    let (mu, sigma) = mean_sd(values);
    QuantizationBins::new(mu, sigma)
}
