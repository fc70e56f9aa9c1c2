use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeedStream;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);
pub const MIN_SUBJECTS: usize = 5;

/// Subject-disjoint train/eval/test partition. Each list holds subject ids
/// in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub test: Vec<String>,
}

/// Partition sizes: `floor(0.2·n)` each for eval and test, the rest to train.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < MIN_SUBJECTS {
        return Err(Error::Config(format!(
            "a three-way split needs at least {MIN_SUBJECTS} subjects, got {n}"
        )));
    }
    let held = (n as f64 * SPLIT_RATIOS.1).floor() as usize;
    Ok((n - 2 * held, held, held))
}

/// Index form of [`split_subjects`]: each partition sorted ascending.
pub fn split_indices(n: usize, seed: u64) -> Result<[Vec<usize>; 3]> {
    let (_, n_eval, n_test) = split_sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).derive_named("split").rng(0));
    let mut eval = order[..n_eval].to_vec();
    let mut test = order[n_eval..n_eval + n_test].to_vec();
    let mut train = order[n_eval + n_test..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    test.sort_unstable();
    Ok([train, eval, test])
}

pub fn split_subjects(subject_ids: &[String], seed: u64) -> Result<SplitSpec> {
    let [train, eval, test] = split_indices(subject_ids.len(), seed)?;
    let names = |idx: Vec<usize>| idx.into_iter().map(|i| subject_ids[i].clone()).collect();
    Ok(SplitSpec {
        seed,
        ratios: SPLIT_RATIOS,
        train: names(train),
        eval: names(eval),
        test: names(test),
    })
}
