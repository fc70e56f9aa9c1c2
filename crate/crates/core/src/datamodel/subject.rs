use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl FrameDims {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        FrameDims { h, w, d }
    }

    /// Flattened frame size `H·W·D`.
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }
}

/// One fMRI frame, flattened in (H, W, D) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    pub dims: FrameDims,
    pub values: Vec<f64>,
}

impl FrameTensor {
    pub fn new(dims: FrameDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.voxels() {
            return Err(Error::dim(
                "frame",
                format!("{} values for dims {:?}", values.len(), dims),
            ));
        }
        Ok(FrameTensor { dims, values })
    }

    pub fn zeros(dims: FrameDims) -> Self {
        FrameTensor {
            dims,
            values: vec![0.0; dims.voxels()],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Ptsd,
    Fibromyalgia,
    Control,
    Synthetic,
}

impl Cohort {
    pub fn code(self) -> u8 {
        match self {
            Cohort::Ptsd => 0,
            Cohort::Fibromyalgia => 1,
            Cohort::Control => 2,
            Cohort::Synthetic => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Cohort::Ptsd,
            1 => Cohort::Fibromyalgia,
            2 => Cohort::Control,
            3 => Cohort::Synthetic,
            _ => return None,
        })
    }

    /// Traits that may be recorded for this cohort.
    pub fn allows(self, kind: TraitKind) -> bool {
        match kind {
            TraitKind::Tas20 | TraitKind::Stai => true,
            TraitKind::Caps5 => matches!(self, Cohort::Ptsd | Cohort::Synthetic),
            TraitKind::Age | TraitKind::NfExperience => {
                matches!(self, Cohort::Control | Cohort::Synthetic)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NfExperience {
    None,
    TwoSessions,
    SixSessions,
}

impl NfExperience {
    pub fn level(self) -> usize {
        match self {
            NfExperience::None => 0,
            NfExperience::TwoSessions => 1,
            NfExperience::SixSessions => 2,
        }
    }

    pub fn from_level(level: usize) -> Option<Self> {
        Some(match level {
            0 => NfExperience::None,
            1 => NfExperience::TwoSessions,
            2 => NfExperience::SixSessions,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitKind {
    Tas20,
    Stai,
    Caps5,
    Age,
    NfExperience,
}

impl TraitKind {
    pub const ALL: [TraitKind; 5] = [
        TraitKind::Tas20,
        TraitKind::Stai,
        TraitKind::Caps5,
        TraitKind::Age,
        TraitKind::NfExperience,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraitKind::Tas20 => "tas20",
            TraitKind::Stai => "stai",
            TraitKind::Caps5 => "caps5",
            TraitKind::Age => "age",
            TraitKind::NfExperience => "nf_experience",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TraitKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Continuous scores are quantized into five bins; experience is
    /// already a three-level category.
    pub fn is_binned(self) -> bool {
        self != TraitKind::NfExperience
    }

    pub fn n_classes(self) -> usize {
        if self.is_binned() {
            5
        } else {
            3
        }
    }
}

impl std::fmt::Display for TraitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraitRecord {
    pub tas20: Option<f64>,
    pub stai: Option<f64>,
    pub caps5: Option<f64>,
    pub age: Option<f64>,
    pub nf_experience: Option<NfExperience>,
}

impl TraitRecord {
    /// Raw value of a trait; experience is reported as its level 0..=2.
    pub fn value(&self, kind: TraitKind) -> Option<f64> {
        match kind {
            TraitKind::Tas20 => self.tas20,
            TraitKind::Stai => self.stai,
            TraitKind::Caps5 => self.caps5,
            TraitKind::Age => self.age,
            TraitKind::NfExperience => self.nf_experience.map(|e| e.level() as f64),
        }
    }

    pub fn set(&mut self, kind: TraitKind, value: Option<f64>) {
        match kind {
            TraitKind::Tas20 => self.tas20 = value,
            TraitKind::Stai => self.stai = value,
            TraitKind::Caps5 => self.caps5 = value,
            TraitKind::Age => self.age = value,
            TraitKind::NfExperience => {
                self.nf_experience = value.and_then(|v| NfExperience::from_level(v.round() as usize))
            }
        }
    }

    /// Drops every trait the cohort does not record.
    pub fn masked(&self, cohort: Cohort) -> TraitRecord {
        let mut out = TraitRecord::default();
        for k in TraitKind::ALL {
            if cohort.allows(k) {
                out.set(k, self.value(k));
            }
        }
        out
    }

    pub fn check(&self, cohort: Cohort) -> Result<()> {
        for k in TraitKind::ALL {
            match self.value(k) {
                Some(v) if !cohort.allows(k) => {
                    return Err(Error::Data(format!("{k} = {v} recorded for {cohort:?} cohort")))
                }
                Some(v) if !v.is_finite() => return Err(Error::Data(format!("{k} is not finite"))),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Sequence geometry shared by every subject in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceShape {
    pub dims: FrameDims,
    /// Passive frames per run.
    pub t_passive: usize,
    /// Active frames per run.
    pub t_active: usize,
    pub runs: usize,
}

impl SequenceShape {
    pub fn frame_size(&self) -> usize {
        self.dims.voxels()
    }
}

/// Frames of one passive/active run, each phase row-major `[time, voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub passive: Vec<f32>,
    pub active: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub cohort: Cohort,
    pub runs: Vec<Run>,
    pub traits: TraitRecord,
}

impl SubjectRecord {
    pub fn validate(&self, shape: &SequenceShape) -> Result<()> {
        let f = shape.frame_size();
        if self.runs.len() != shape.runs {
            return Err(Error::Data(format!(
                "subject {}: {} runs, expected {}",
                self.subject_id,
                self.runs.len(),
                shape.runs
            )));
        }
        for (i, r) in self.runs.iter().enumerate() {
            if r.passive.len() != shape.t_passive * f || r.active.len() != shape.t_active * f {
                return Err(Error::Data(format!(
                    "subject {} run {}: phase lengths do not match {}x{} / {}x{}",
                    self.subject_id, i, shape.t_passive, f, shape.t_active, f
                )));
            }
            if r.passive.iter().chain(&r.active).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "subject {} run {}: non-finite voxel value",
                    self.subject_id, i
                )));
            }
        }
        self.traits.check(self.cohort)
    }

    /// Z-scores both phases with the mean and standard deviation of this
    /// subject's passive frames. A constant passive signal is only centered.
    pub fn normalized(&self) -> SubjectRecord {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for r in &self.runs {
            sum += r.passive.iter().map(|&v| f64::from(v)).sum::<f64>();
            n += r.passive.len();
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let var = self
            .runs
            .iter()
            .flat_map(|r| r.passive.iter())
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n.max(1) as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z = |v: &f32| ((f64::from(*v) - mean) / sd) as f32;
        SubjectRecord {
            subject_id: self.subject_id.clone(),
            cohort: self.cohort,
            runs: self
                .runs
                .iter()
                .map(|r| Run {
                    passive: r.passive.iter().map(z).collect(),
                    active: r.active.iter().map(z).collect(),
                })
                .collect(),
            traits: self.traits.clone(),
        }
    }
}

/// Passive and active sequences with runs concatenated in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSequences {
    /// `[runs·t_passive, F]`
    pub passive: Tensor,
    /// `[runs·t_active, F]`
    pub active: Tensor,
    pub shape: SequenceShape,
}

impl SubjectSequences {
    pub fn len_active(&self) -> usize {
        self.shape.runs * self.shape.t_active
    }

    pub fn passive_frame(&self, t: usize) -> &[f64] {
        self.passive.row(t)
    }

    pub fn active_frame(&self, t: usize) -> &[f64] {
        self.active.row(t)
    }

    /// True when `t` is the first active frame of a run.
    pub fn is_run_start(&self, t: usize) -> bool {
        t % self.shape.t_active == 0
    }
}

pub fn concat_runs(subject: &SubjectRecord, shape: &SequenceShape) -> Result<SubjectSequences> {
    subject.validate(shape)?;
    let f = shape.frame_size();
    let widen = |v: &f32| f64::from(*v);
    let passive: Vec<f64> = subject.runs.iter().flat_map(|r| r.passive.iter().map(widen)).collect();
    let active: Vec<f64> = subject.runs.iter().flat_map(|r| r.active.iter().map(widen)).collect();
    Ok(SubjectSequences {
        passive: Tensor::new(vec![shape.runs * shape.t_passive, f], passive)?,
        active: Tensor::new(vec![shape.runs * shape.t_active, f], active)?,
        shape: *shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(shape: &SequenceShape, fill: impl Fn(usize, usize, usize) -> f32) -> SubjectRecord {
        let f = shape.frame_size();
        SubjectRecord {
            subject_id: "s".into(),
            cohort: Cohort::Synthetic,
            runs: (0..shape.runs)
                .map(|r| Run {
                    passive: (0..shape.t_passive * f).map(|i| fill(0, r, i)).collect(),
                    active: (0..shape.t_active * f).map(|i| fill(1, r, i)).collect(),
                })
                .collect(),
            traits: TraitRecord::default(),
        }
    }

    #[test]
    fn concat_lengths_follow_runs() {
        let shape = SequenceShape {
            dims: FrameDims::new(2, 1, 1),
            t_passive: 14,
            t_active: 14,
            runs: 3,
        };
        let s = subject(&shape, |_, _, _| 0.0);
        let seq = concat_runs(&s, &shape).unwrap();
        assert_eq!(seq.passive.shape(), &[42, 2]);
        assert_eq!(seq.len_active(), 42);
    }

    #[test]
    fn single_run_is_identity() {
        let shape = SequenceShape {
            dims: FrameDims::new(1, 1, 3),
            t_passive: 4,
            t_active: 4,
            runs: 1,
        };
        let s = subject(&shape, |p, _, i| (p * 100 + i) as f32);
        let seq = concat_runs(&s, &shape).unwrap();
        let expect: Vec<f64> = s.runs[0].passive.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(seq.passive.data(), expect.as_slice());
    }

    #[test]
    fn run_order_preserved() {
        let shape = SequenceShape {
            dims: FrameDims::new(1, 1, 1),
            t_passive: 2,
            t_active: 2,
            runs: 3,
        };
        let s = subject(&shape, |p, r, _| (p * 10 + r) as f32);
        let seq = concat_runs(&s, &shape).unwrap();
        assert_eq!(seq.passive.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(seq.active.data(), &[10.0, 10.0, 11.0, 11.0, 12.0, 12.0]);
    }

    #[test]
    fn availability_mask() {
        let mut t = TraitRecord {
            caps5: Some(30.0),
            age: Some(40.0),
            ..Default::default()
        };
        assert!(t.check(Cohort::Synthetic).is_ok());
        assert!(t.check(Cohort::Control).is_err());
        assert!(t.check(Cohort::Ptsd).is_err());
        t = t.masked(Cohort::Ptsd);
        assert_eq!(t.age, None);
        assert_eq!(t.caps5, Some(30.0));
    }

    #[test]
    fn normalization_uses_passive_stats() {
        let shape = SequenceShape {
            dims: FrameDims::new(1, 1, 2),
            t_passive: 2,
            t_active: 1,
            runs: 1,
        };
        let mut s = subject(&shape, |_, _, _| 0.0);
        s.runs[0].passive = vec![1.0, 3.0, 1.0, 3.0];
        s.runs[0].active = vec![2.0, 5.0];
        let n = s.normalized();
        assert_eq!(n.runs[0].passive, vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(n.runs[0].active, vec![0.0, 3.0]);
    }
}
