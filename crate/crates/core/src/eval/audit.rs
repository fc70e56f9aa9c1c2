use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};

use crate::datamodel::{TraitKind, TraitRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Eval,
    Test,
}

/// Label accesses of one or more repeats, by partition and phase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub train_target_reads: usize,
    pub eval_target_reads: usize,
    /// Attempts on test-subject targets while models were being fit. Every
    /// one is refused; a nonzero count means a method tried to leak.
    pub test_target_reads_before_scoring: usize,
    pub test_target_reads_at_scoring: usize,
    /// Other-trait columns of test subjects, read by methods whose input
    /// is the remaining traits.
    pub test_predictor_reads: usize,
}

impl AuditSummary {
    pub fn merge(&mut self, other: &AuditSummary) {
        self.train_target_reads += other.train_target_reads;
        self.eval_target_reads += other.eval_target_reads;
        self.test_target_reads_before_scoring += other.test_target_reads_before_scoring;
        self.test_target_reads_at_scoring += other.test_target_reads_at_scoring;
        self.test_predictor_reads += other.test_predictor_reads;
    }
}

/// Gatekeeper for trait values within one repeat. Test-subject targets
/// stay sealed until [`LabelVault::open_scoring`].
#[derive(Debug)]
pub struct LabelVault {
    records: Vec<TraitRecord>,
    partition: Vec<Option<Partition>>,
    scoring: Cell<bool>,
    summary: RefCell<AuditSummary>,
}

impl LabelVault {
    /// `records` are indexed like the dataset; `split` holds train, eval
    /// and test indices.
    pub fn new(records: Vec<TraitRecord>, split: &[Vec<usize>; 3]) -> Result<Self> {
        let mut partition = vec![None; records.len()];
        for (part, idx) in [Partition::Train, Partition::Eval, Partition::Test].into_iter().zip(split) {
            for &i in idx {
                let slot = partition
                    .get_mut(i)
                    .ok_or_else(|| Error::Index(format!("split index {i} for {} subjects", records.len())))?;
                if slot.is_some() {
                    return Err(Error::Data(format!("subject {i} appears in two partitions")));
                }
                *slot = Some(part);
            }
        }
        Ok(LabelVault {
            records,
            partition,
            scoring: Cell::new(false),
            summary: RefCell::new(AuditSummary::default()),
        })
    }

    fn part(&self, subject: usize) -> Result<Partition> {
        self.partition
            .get(subject)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Index(format!("subject {subject} is in no partition")))
    }

    /// Raw value of a trait the subject is to be scored on.
    pub fn target(&self, subject: usize, kind: TraitKind) -> Result<Option<f64>> {
        let part = self.part(subject)?;
        let mut s = self.summary.borrow_mut();
        match part {
            Partition::Train => s.train_target_reads += 1,
            Partition::Eval => s.eval_target_reads += 1,
            Partition::Test if self.scoring.get() => s.test_target_reads_at_scoring += 1,
            Partition::Test => {
                s.test_target_reads_before_scoring += 1;
                return Err(Error::Usage(format!(
                    "test subject {subject}: {kind} requested before scoring"
                )));
            }
        }
        Ok(self.records[subject].value(kind))
    }

    /// Every recorded trait of a non-test subject.
    pub fn record(&self, subject: usize) -> Result<TraitRecord> {
        let mut out = TraitRecord::default();
        for k in TraitKind::ALL {
            out.set(k, self.target(subject, k)?);
        }
        Ok(out)
    }

    /// The subject's traits with `exclude` removed, for methods that predict
    /// one trait from the others. Test reads are allowed and logged.
    pub fn predictors(&self, subject: usize, exclude: TraitKind) -> Result<TraitRecord> {
        if self.part(subject)? != Partition::Test {
            let mut r = self.record(subject)?;
            r.set(exclude, None);
            return Ok(r);
        }
        let mut r = self.records[subject].clone();
        r.set(exclude, None);
        let present = TraitKind::ALL.into_iter().filter(|&k| r.value(k).is_some()).count();
        self.summary.borrow_mut().test_predictor_reads += present;
        Ok(r)
    }

    pub fn open_scoring(&self) {
        self.scoring.set(true);
    }

    pub fn summary(&self) -> AuditSummary {
        self.summary.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vault() -> LabelVault {
        let records = (0..5)
            .map(|i| TraitRecord {
                tas20: Some(i as f64),
                stai: Some(10.0 * i as f64),
                ..TraitRecord::default()
            })
            .collect();
        LabelVault::new(records, &[vec![0, 1, 2], vec![3], vec![4]]).unwrap()
    }

    #[test]
    fn test_targets_are_sealed_until_scoring() {
        let v = vault();
        assert_eq!(v.target(1, TraitKind::Tas20).unwrap(), Some(1.0));
        assert!(v.target(4, TraitKind::Tas20).is_err());
        assert_eq!(v.summary().test_target_reads_before_scoring, 1);
        v.open_scoring();
        assert_eq!(v.target(4, TraitKind::Tas20).unwrap(), Some(4.0));
        let s = v.summary();
        assert_eq!((s.train_target_reads, s.test_target_reads_at_scoring), (1, 1));
    }

    #[test]
    fn predictors_hide_the_target() {
        let v = vault();
        let r = v.predictors(4, TraitKind::Tas20).unwrap();
        assert_eq!((r.tas20, r.stai), (None, Some(40.0)));
        let s = v.summary();
        assert_eq!((s.test_predictor_reads, s.test_target_reads_before_scoring), (1, 0));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let r = vec![TraitRecord::default(); 3];
        assert!(LabelVault::new(r, &[vec![0, 1], vec![1], vec![2]]).is_err());
    }
}
