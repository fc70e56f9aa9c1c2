use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameDims, FrameTensor};
use crate::error::{Error, Result};
use crate::numerics::init::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Shared recurrence coefficient α, in (0, 1).
    pub alpha: f64,
    /// Scale γ of the passive-driven term.
    pub gamma: f64,
    /// Gain is `1 + gain_spread·tanh(G z)`.
    pub gain_spread: f64,
    /// Baseline is `baseline_scale·B z`.
    pub baseline_scale: f64,
    /// Gaussian length scale, in voxels, of the mixing map `s`.
    pub mixing_length: f64,
    /// Gaussian length scale of the gain/baseline patterns and passive fields.
    pub pattern_length: f64,
    /// AR(1) coefficient of the passive signal.
    pub passive_ar: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            alpha: 0.5,
            gamma: 1.0,
            gain_spread: 0.5,
            baseline_scale: 0.5,
            mixing_length: 1.0,
            pattern_length: 1.5,
            passive_ar: 0.8,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64, want: &str| Err(Error::Config(format!("dynamics.{field} = {v}: must be {want}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", self.alpha, "in (0, 1)");
        }
        if !self.gamma.is_finite() {
            return bad("gamma", self.gamma, "finite");
        }
        if !(self.gain_spread >= 0.0 && self.gain_spread < 1.0) {
            return bad("gain_spread", self.gain_spread, "in [0, 1)");
        }
        if !self.baseline_scale.is_finite() {
            return bad("baseline_scale", self.baseline_scale, "finite");
        }
        if !(self.mixing_length > 0.0 && self.mixing_length.is_finite()) {
            return bad("mixing_length", self.mixing_length, "positive");
        }
        if !(self.pattern_length > 0.0 && self.pattern_length.is_finite()) {
            return bad("pattern_length", self.pattern_length, "positive");
        }
        if !(self.passive_ar >= 0.0 && self.passive_ar < 1.0) {
            return bad("passive_ar", self.passive_ar, "in [0, 1)");
        }
        Ok(())
    }
}

/// A subject's latent vector and the voxelwise maps it induces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub z: Vec<f64>,
    /// `g(z) = 1 + spread·tanh(G z)`
    pub gain: Vec<f64>,
    /// `b(z) = scale·B z`
    pub baseline: Vec<f64>,
}

/// Closed-form active-phase generator
///
/// ```text
/// a_t = b(z) + α·a_{t−1} + γ·g(z) ⊙ tanh(S p_t) + ε,   ε ~ N(0, noise_std²)
/// ```
///
/// `S` is a row-normalized Gaussian kernel over voxel coordinates; `B`
/// and `G` hold smooth random spatial patterns, one column per latent
/// coordinate, shared by every subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub dims: FrameDims,
    pub config: DynamicsConfig,
    pub latent_dim: usize,
    /// `[F, F]`, rows sum to 1.
    mixing: Vec<f64>,
    /// `[F, F]`, rows have unit L2 norm, so smoothed white noise keeps unit variance.
    smoothing: Vec<f64>,
    /// `[F, latent_dim]`
    baseline_patterns: Vec<f64>,
    /// `[F, latent_dim]`
    gain_patterns: Vec<f64>,
}

fn coords(dims: FrameDims) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dims.voxels());
    for i in 0..dims.h {
        for j in 0..dims.w {
            for k in 0..dims.d {
                out.push([i as f64, j as f64, k as f64]);
            }
        }
    }
    out
}

fn gaussian_kernel(dims: FrameDims, length: f64) -> Vec<f64> {
    let c = coords(dims);
    let f = c.len();
    let mut k = vec![0.0; f * f];
    for (r, a) in c.iter().enumerate() {
        for (s, b) in c.iter().enumerate() {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            k[r * f + s] = (-d2 / (2.0 * length * length)).exp();
        }
    }
    k
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl Dynamics {
    /// Draws the shared spatial maps.
    pub fn new<R: Rng + ?Sized>(dims: FrameDims, latent_dim: usize, config: DynamicsConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = dims.voxels();
        if f == 0 || latent_dim == 0 {
            return Err(Error::Config("frame and latent dimensions must be positive".into()));
        }
        let mut mixing = gaussian_kernel(dims, config.mixing_length);
        for row in mixing.chunks_mut(f) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut smoothing = gaussian_kernel(dims, config.pattern_length);
        for row in smoothing.chunks_mut(f) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }

        // Columns are smooth fields rescaled to RMS 1/√d, so B z and G z have
        // roughly unit variance per voxel for z ~ N(0, I).
        let pattern = |rng: &mut R| {
            let mut cols = vec![0.0; f * latent_dim];
            for j in 0..latent_dim {
                let noise: Vec<f64> = (0..f).map(|_| standard_normal(rng)).collect();
                let field = matvec(&smoothing, f, f, &noise);
                let rms = (field.iter().map(|v| v * v).sum::<f64>() / f as f64).sqrt();
                let scale = 1.0 / (rms * (latent_dim as f64).sqrt());
                for (r, v) in field.iter().enumerate() {
                    cols[r * latent_dim + j] = v * scale;
                }
            }
            cols
        };
        let baseline_patterns = pattern(rng);
        let gain_patterns = pattern(rng);
        Ok(Dynamics {
            dims,
            config,
            latent_dim,
            mixing,
            smoothing,
            baseline_patterns,
            gain_patterns,
        })
    }

    pub fn frame_size(&self) -> usize {
        self.dims.voxels()
    }

    pub fn profile(&self, z: Vec<f64>) -> Result<LatentProfile> {
        if z.len() != self.latent_dim {
            return Err(Error::dim(
                "latent_profile",
                format!("z has {} coordinates, expected {}", z.len(), self.latent_dim),
            ));
        }
        let f = self.frame_size();
        let bz = matvec(&self.baseline_patterns, f, self.latent_dim, &z);
        let gz = matvec(&self.gain_patterns, f, self.latent_dim, &z);
        Ok(LatentProfile {
            baseline: bz.iter().map(|v| self.config.baseline_scale * v).collect(),
            gain: gz.iter().map(|v| 1.0 + self.config.gain_spread * v.tanh()).collect(),
            z,
        })
    }

    /// `s(p) = tanh(S p)`
    pub fn mix(&self, p: &[f64]) -> Vec<f64> {
        let f = self.frame_size();
        matvec(&self.mixing, f, f, p).into_iter().map(f64::tanh).collect()
    }

    /// Unit-variance smooth spatial field.
    pub fn smooth_field<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let f = self.frame_size();
        let noise: Vec<f64> = (0..f).map(|_| standard_normal(rng)).collect();
        matvec(&self.smoothing, f, f, &noise)
    }

    /// Noiseless part of the next active frame.
    pub fn mean_next(&self, p: &[f64], a_prev: &[f64], profile: &LatentProfile) -> Result<Vec<f64>> {
        let f = self.frame_size();
        if p.len() != f || a_prev.len() != f || profile.gain.len() != f {
            return Err(Error::dim(
                "oracle_next_frame",
                format!(
                    "passive {}, previous active {}, profile {} for frame size {f}",
                    p.len(),
                    a_prev.len(),
                    profile.gain.len()
                ),
            ));
        }
        let s = self.mix(p);
        let (alpha, gamma) = (self.config.alpha, self.config.gamma);
        Ok((0..f)
            .map(|v| profile.baseline[v] + alpha * a_prev[v] + gamma * profile.gain[v] * s[v])
            .collect())
    }

    pub fn oracle_next_frame<R: Rng + ?Sized>(
        &self,
        p_t: &FrameTensor,
        a_prev: &FrameTensor,
        profile: &LatentProfile,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<FrameTensor> {
        if p_t.dims != self.dims || a_prev.dims != self.dims {
            return Err(Error::dim(
                "oracle_next_frame",
                format!("frames {:?} / {:?} vs generator {:?}", p_t.dims, a_prev.dims, self.dims),
            ));
        }
        let mut a = self.mean_next(&p_t.values, &a_prev.values, profile)?;
        if noise_std > 0.0 {
            a.iter_mut().for_each(|v| *v += noise_std * standard_normal(rng));
        }
        FrameTensor::new(self.dims, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;

    fn dynamics() -> Dynamics {
        Dynamics::new(FrameDims::new(3, 2, 3), 4, DynamicsConfig::default(), &mut SeedStream::new(5).rng(0)).unwrap()
    }

    #[test]
    fn zero_everything_gives_zero_frame() {
        let d = dynamics();
        let prof = d.profile(vec![0.0; 4]).unwrap();
        assert!(prof.gain.iter().all(|&g| g == 1.0));
        assert!(prof.baseline.iter().all(|&b| b == 0.0));
        let zero = FrameTensor::zeros(d.dims);
        let a = d.oracle_next_frame(&zero, &zero, &prof, 0.0, &mut SeedStream::new(1).rng(0)).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_calls_repeat() {
        let d = dynamics();
        let prof = d.profile(vec![0.3, -1.0, 0.2, 0.9]).unwrap();
        let p = FrameTensor::new(d.dims, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a0 = FrameTensor::new(d.dims, (0..18).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let mut rng = SeedStream::new(2).rng(0);
        let x = d.oracle_next_frame(&p, &a0, &prof, 0.0, &mut rng).unwrap();
        let y = d.oracle_next_frame(&p, &a0, &prof, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn subjects_differ_by_closed_form() {
        let d = dynamics();
        let p1 = d.profile(vec![1.0, 0.0, -0.5, 0.2]).unwrap();
        let p2 = d.profile(vec![-0.4, 0.7, 0.0, 1.1]).unwrap();
        let p = FrameTensor::new(d.dims, (0..18).map(|i| (i as f64 * 0.5).sin()).collect()).unwrap();
        let a0 = FrameTensor::new(d.dims, vec![0.25; 18]).unwrap();
        let mut rng = SeedStream::new(2).rng(0);
        let x = d.oracle_next_frame(&p, &a0, &p1, 0.0, &mut rng).unwrap();
        let y = d.oracle_next_frame(&p, &a0, &p2, 0.0, &mut rng).unwrap();
        // Independent evaluation: the α·a_prev term cancels in the difference.
        let s = d.mix(&p.values);
        for v in 0..18 {
            let want = (p1.baseline[v] - p2.baseline[v]) + d.config.gamma * (p1.gain[v] - p2.gain[v]) * s[v];
            assert!((x.values[v] - y.values[v] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = dynamics();
        let prof = d.profile(vec![0.0; 4]).unwrap();
        let small = FrameTensor::zeros(FrameDims::new(1, 1, 1));
        let ok = FrameTensor::zeros(d.dims);
        let r = d.oracle_next_frame(&small, &ok, &prof, 0.0, &mut SeedStream::new(1).rng(0));
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert!(d.profile(vec![0.0; 3]).is_err());
    }

    #[test]
    fn smoothed_noise_has_unit_variance() {
        let d = dynamics();
        let mut rng = SeedStream::new(8).rng(0);
        let n = 4000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += d.smooth_field(&mut rng).iter().map(|v| v * v).sum::<f64>();
        }
        let var = acc / (n * 18) as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
