//! Passive-to-active translation, next-frame recurrent models and
//! per-subject embeddings.

mod bundle;
mod lstm;
mod p2a;

use serde::{Deserialize, Serialize};

pub use bundle::{read_bundle, write_bundle, ModelBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use lstm::{
    fit_embeddings, fit_new_subject_embedding, train_next_frame, EmbeddingTable, FitConfig, LstmConfig, LstmVariant,
    NextFrameLstm, PhiSequences, TrainedLstm,
};
pub use p2a::{frame_pairs, train_p2a, P2AConfig, P2ATranslator};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Checkpoint-selection loss before the first update.
    pub initial_eval: f64,
    pub train: Vec<f64>,
    /// NaN for epochs where no eval pass ran.
    pub eval: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl LossCurve {
    pub fn new(initial_eval: f64) -> Self {
        LossCurve {
            initial_eval,
            train: Vec::new(),
            eval: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn push(&mut self, train: f64, eval: f64) {
        self.train.push(train);
        self.eval.push(eval);
    }

    pub fn best_eval(&self) -> f64 {
        self.best_epoch.map(|e| self.eval[e]).unwrap_or(self.initial_eval)
    }

    /// `epoch,train_loss,eval_loss`; epoch 0 is the untrained model.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "eval_loss"])?;
        w.write_record(["0", "", &self.initial_eval.to_string()])?;
        for (i, (t, e)) in self.train.iter().zip(&self.eval).enumerate() {
            let e = if e.is_nan() { String::new() } else { e.to_string() };
            w.write_record([(i + 1).to_string(), t.to_string(), e])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tracks the best eval loss and stops after `patience` epochs without
/// improvement.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
        }
    }

    /// Returns true when `loss` is a new best.
    pub(crate) fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    pub(crate) fn should_stop(&self, epoch: usize) -> bool {
        let since = match self.best_epoch {
            Some(b) => epoch - b,
            None => epoch + 1,
        };
        since >= self.patience.max(1)
    }

    pub(crate) fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_waits_for_patience() {
        let mut s = EarlyStopping::new(2);
        assert!(s.update(0, 1.0));
        assert!(!s.update(1, 1.5));
        assert!(!s.should_stop(1));
        assert!(!s.update(2, 1.0));
        assert!(s.should_stop(2));
        assert_eq!(s.best_epoch(), Some(0));
    }

    #[test]
    fn curve_csv() {
        let mut c = LossCurve::new(4.0);
        c.push(3.0, 2.0);
        c.push(1.0, f64::NAN);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,eval_loss\n0,,4\n1,3,2\n2,1,\n"
        );
    }
}
