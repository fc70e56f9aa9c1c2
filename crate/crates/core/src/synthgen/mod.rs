//! Synthetic cohorts with planted per-subject latents.
//!
//! Each subject draws `z ~ N(0, I)`. The latent sets a voxelwise baseline
//! and gain in the active-phase recurrence (see [`Dynamics`]) and, through
//! `trait_weights`, every trait score. Passive frames are a smooth AR(1)
//! field that ignores `z`.

mod dynamics;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dynamics::{Dynamics, DynamicsConfig, LatentProfile};

use crate::datamodel::{
    Cohort, Dataset, FrameDims, Run, SequenceShape, SubjectRecord, TraitKind, TraitRecord,
};
use crate::error::{Error, Result};
use crate::numerics::init::standard_normal;
use crate::numerics::SeedStream;

/// Standard-normal tertile cut, Φ⁻¹(2/3).
pub const TERTILE_Z: f64 = 0.430_727_299_295_457_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub dims: FrameDims,
    pub runs: usize,
    pub t_passive: usize,
    pub t_active: usize,
    /// Per-voxel SD of the active-phase innovation.
    pub noise_std: f64,
    pub latent_dim: usize,
    pub dynamics: DynamicsConfig,
    /// One row per trait in the order tas20, stai, caps5, age, nf_experience.
    pub trait_weights: Vec<Vec<f64>>,
    /// Trait noise SD as a fraction of the trait's signal SD.
    pub trait_noise_ratio: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_subjects: 60,
            dims: FrameDims::new(6, 5, 6),
            runs: 3,
            t_passive: 14,
            t_active: 14,
            noise_std: 0.1,
            latent_dim: 4,
            dynamics: DynamicsConfig::default(),
            trait_weights: vec![
                vec![0.8, 0.6, 0.0, 0.0],
                vec![0.0, 0.8, 0.6, 0.0],
                vec![0.0, 0.0, 0.8, 0.6],
                vec![0.6, 0.0, 0.0, 0.8],
                vec![0.5, 0.5, 0.5, 0.5],
            ],
            trait_noise_ratio: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Small geometry for smoke tests.
    pub fn tiny() -> Self {
        GeneratorConfig {
            n_subjects: 10,
            dims: FrameDims::new(3, 3, 3),
            runs: 2,
            t_passive: 6,
            t_active: 6,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("generator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn shape(&self) -> SequenceShape {
        SequenceShape {
            dims: self.dims,
            t_passive: self.t_passive,
            t_active: self.t_active,
            runs: self.runs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 5 {
            return Err(Error::Config(format!("n_subjects = {}: must be at least 5", self.n_subjects)));
        }
        if self.dims.voxels() == 0 {
            return Err(Error::Config(format!("dims {:?}: every axis must be positive", self.dims)));
        }
        for (name, v) in [("runs", self.runs), ("t_passive", self.t_passive), ("t_active", self.t_active), ("latent_dim", self.latent_dim)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dims.h > u16::MAX as usize || self.dims.w > u16::MAX as usize || self.dims.d > u16::MAX as usize {
            return Err(Error::Config(format!("dims {:?} exceed the container limit", self.dims)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std = {}: must be finite and >= 0", self.noise_std)));
        }
        if !(self.trait_noise_ratio >= 0.0 && self.trait_noise_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "trait_noise_ratio = {}: must be finite and >= 0",
                self.trait_noise_ratio
            )));
        }
        if self.trait_weights.len() != TraitKind::ALL.len()
            || self.trait_weights.iter().any(|r| r.len() != self.latent_dim || r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config(format!(
                "trait_weights must be {} finite rows of length latent_dim = {}",
                TraitKind::ALL.len(),
                self.latent_dim
            )));
        }
        self.dynamics.validate()
    }
}

/// A generated cohort plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub latents: Vec<LatentProfile>,
    pub dynamics: Dynamics,
}

/// Maps one latent trait score `t` (zero-mean, SD `sd`) onto the recorded scale.
fn trait_value(kind: TraitKind, t: f64, sd: f64) -> f64 {
    match kind {
        TraitKind::Tas20 => 50.0 + 10.0 * t,
        TraitKind::Stai => 40.0 + 10.0 * t,
        TraitKind::Caps5 => 30.0 + 12.0 * t,
        TraitKind::Age => (44.0 + 8.0 * t).clamp(18.0, 70.0),
        TraitKind::NfExperience => {
            let cut = TERTILE_Z * sd;
            if t < -cut {
                0.0
            } else if t > cut {
                2.0
            } else {
                1.0
            }
        }
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Synthetic> {
    config.validate()?;
    let seeds = SeedStream::new(config.seed);
    let dynamics = Dynamics::new(
        config.dims,
        config.latent_dim,
        config.dynamics.clone(),
        &mut seeds.derive_named("dynamics").rng(0),
    )?;
    let subject_seeds = seeds.derive_named("subjects");

    let subjects: Vec<(SubjectRecord, LatentProfile)> = (0..config.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(config, &dynamics, i, &mut subject_seeds.rng(i as u64)))
        .collect::<Result<_>>()?;
    let (subjects, latents): (Vec<_>, Vec<_>) = subjects.into_iter().unzip();

    let dataset = Dataset {
        shape: config.shape(),
        cohort: Cohort::Synthetic,
        subjects,
        provenance: serde_json::json!({
            "generator": "nfembed-synthgen",
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        }),
    };
    dataset.validate()?;
    Ok(Synthetic {
        dataset,
        latents,
        dynamics,
    })
}

fn generate_subject(
    config: &GeneratorConfig,
    dynamics: &Dynamics,
    index: usize,
    rng: &mut crate::numerics::Rng64,
) -> Result<(SubjectRecord, LatentProfile)> {
    let z: Vec<f64> = (0..config.latent_dim).map(|_| standard_normal(rng)).collect();
    let profile = dynamics.profile(z)?;

    let mut traits = TraitRecord::default();
    for (kind, w) in TraitKind::ALL.into_iter().zip(&config.trait_weights) {
        let signal_sd = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let signal: f64 = w.iter().zip(&profile.z).map(|(a, b)| a * b).sum();
        let noise_sd = config.trait_noise_ratio * signal_sd;
        let t = signal + noise_sd * standard_normal(rng);
        let total_sd = (signal_sd * signal_sd + noise_sd * noise_sd).sqrt();
        traits.set(kind, Some(trait_value(kind, t, total_sd)));
    }

    let f = dynamics.frame_size();
    let rho = config.dynamics.passive_ar;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut runs = Vec::with_capacity(config.runs);
    for _ in 0..config.runs {
        let mut passive = Vec::with_capacity(config.t_passive * f);
        let mut p = dynamics.smooth_field(rng);
        for t in 0..config.t_passive {
            if t > 0 {
                let e = dynamics.smooth_field(rng);
                p.iter_mut().zip(e).for_each(|(v, e)| *v = rho * *v + innovation * e);
            }
            passive.extend(p.iter().map(|&v| v as f32));
        }

        let mut active = Vec::with_capacity(config.t_active * f);
        let mut a_prev = vec![0.0; f];
        for t in 0..config.t_active {
            // Active phases longer than the passive one reuse its last frame.
            let tp = t.min(config.t_passive - 1);
            let p_t: Vec<f64> = passive[tp * f..(tp + 1) * f].iter().map(|&v| f64::from(v)).collect();
            let mut a = dynamics.mean_next(&p_t, &a_prev, &profile)?;
            if config.noise_std > 0.0 {
                a.iter_mut().for_each(|v| *v += config.noise_std * standard_normal(rng));
            }
            active.extend(a.iter().map(|&v| v as f32));
            a_prev = a;
        }
        runs.push(Run { passive, active });
    }

    Ok((
        SubjectRecord {
            subject_id: format!("syn-{index:04}"),
            cohort: Cohort::Synthetic,
            runs,
            traits,
        },
        profile,
    ))
}
