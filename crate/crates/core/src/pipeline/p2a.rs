use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EarlyStopping, LossCurve};
use crate::datamodel::SubjectSequences;
use crate::error::{Error, Result};
use crate::numerics::{init, ops, Activation, Mode, Optimizer, OptimizerConfig, ParamId, ParamStore, SeedStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P2AConfig {
    /// Output width of each affine layer as a multiple of the frame size.
    /// The last entry must be 1.
    pub width_multipliers: Vec<usize>,
    pub dropout: f64,
    pub optimizer: OptimizerConfig,
    /// Frames per minibatch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for P2AConfig {
    fn default() -> Self {
        P2AConfig {
            width_multipliers: vec![2, 3, 4, 8, 4, 3, 2, 1],
            dropout: 0.2,
            optimizer: OptimizerConfig::default(),
            batch_size: 128,
            max_epochs: 300,
            patience: 30,
        }
    }
}

impl P2AConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_multipliers.last() != Some(&1) || self.width_multipliers.contains(&0) {
            return Err(Error::Config(
                "p2a.width_multipliers must be positive and end with 1".into(),
            ));
        }
        ops::check_dropout_p(self.dropout)?;
        if self.batch_size == 0 {
            return Err(Error::Config("p2a.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// What follows affine layer `i` (all but the last): dropout after even
/// layers, ReLU after odd ones.
fn separator(i: usize) -> Option<Activation> {
    if i % 2 == 0 {
        None
    } else {
        Some(Activation::Relu)
    }
}

/// Subject-agnostic map from a passive frame to its coupled active frame.
#[derive(Clone, Debug)]
pub struct P2ATranslator {
    frame_size: usize,
    dropout: f64,
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl P2ATranslator {
    pub fn new<R: Rng + ?Sized>(frame_size: usize, config: &P2AConfig, rng: &mut R) -> Result<Self> {
        Self::build(frame_size, config, |shape, fan_in| init::uniform_fan_in(rng, shape, fan_in))
    }

    pub fn zeros(frame_size: usize, config: &P2AConfig) -> Result<Self> {
        Self::build(frame_size, config, |shape, _| Tensor::zeros(shape))
    }

    fn build(frame_size: usize, config: &P2AConfig, mut make: impl FnMut(&[usize], usize) -> Tensor) -> Result<Self> {
        config.validate()?;
        if frame_size == 0 {
            return Err(Error::Config("frame size must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = frame_size;
        for (i, m) in config.width_multipliers.iter().enumerate() {
            let out = m * frame_size;
            let w = params.add(format!("p2a.l{i}.w"), make(&[out, fan_in], fan_in));
            let b = params.add(format!("p2a.l{i}.b"), make(&[out], fan_in));
            layers.push((w, b));
            fan_in = out;
        }
        Ok(P2ATranslator {
            frame_size,
            dropout: config.dropout,
            params,
            layers,
        })
    }

    /// Rebuilds a translator around stored parameters.
    pub fn from_params(frame_size: usize, dropout: f64, params: ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        let mut fan_in = frame_size;
        for i in 0.. {
            let (Some(w), Some(b)) = (params.find(&format!("p2a.l{i}.w")), params.find(&format!("p2a.l{i}.b"))) else {
                break;
            };
            let ws = params.get(w).shape();
            if ws.len() != 2 || ws[1] != fan_in || params.get(b).shape() != [ws[0]] {
                return Err(Error::dim("p2a_load", format!("layer {i} has shape {ws:?} after width {fan_in}")));
            }
            fan_in = ws[0];
            layers.push((w, b));
        }
        if layers.is_empty() || fan_in != frame_size || layers.len() * 2 != params.len() {
            return Err(Error::dim("p2a_load", "parameters do not form a frame-to-frame translator"));
        }
        ops::check_dropout_p(dropout)?;
        Ok(P2ATranslator {
            frame_size,
            dropout,
            params,
            layers,
        })
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|(w, _)| self.params.get(*w).shape()[0]).collect()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        let (_, cols) = x.as_rows();
        if cols != self.frame_size {
            return Err(Error::dim(
                "p2a_forward",
                format!("frame width {cols}, translator expects {}", self.frame_size),
            ));
        }
        Ok(())
    }

    /// Records the forward pass of a `[N, F]` batch on `tape`.
    pub fn forward_tape<'a, R: Rng + ?Sized>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        self.forward_tape_with(&self.params, tape, x, mode, rng)
    }

    /// [`forward_tape`](Self::forward_tape) reading weights from `params`,
    /// which must share this translator's layout.
    pub fn forward_tape_with<'a, R: Rng + ?Sized>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_width(tape.value(x))?;
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(params, w), tape.param(params, b));
            h = tape.affine(h, wv, Some(bv))?;
            if i < last {
                h = match separator(i) {
                    Some(act) => tape.activation(h, act),
                    None => tape.dropout(h, self.dropout, mode, rng)?,
                };
            }
        }
        Ok(h)
    }

    /// Eval-mode forward of a `[N, F]` batch (or a single `[F]` frame).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = ops::affine(&h, self.params.get(w), Some(self.params.get(b)))?;
            if i < last {
                if let Some(act) = separator(i) {
                    h = ops::activation(&h, act);
                }
            }
        }
        Ok(h)
    }

    /// Mean over frames of the summed squared error, eval mode.
    pub fn loss(&self, passive: &Tensor, active: &Tensor) -> Result<f64> {
        let pred = self.forward(passive)?;
        let (rows, _) = active.as_rows();
        Ok(ops::squared_error(pred.data(), active.data()) / rows.max(1) as f64)
    }
}

/// Stacks the frame pairs `(p[t], a[t])` of every subject.
pub fn frame_pairs(subjects: &[SubjectSequences]) -> Result<(Tensor, Tensor)> {
    let Some(first) = subjects.first() else {
        return Ok((Tensor::zeros(&[0, 0]), Tensor::zeros(&[0, 0])));
    };
    let f = first.shape.frame_size();
    let (mut p, mut a) = (Vec::new(), Vec::new());
    for s in subjects {
        if s.shape.t_passive != s.shape.t_active {
            return Err(Error::Config(format!(
                "frame pairing needs equal passive and active lengths, got {} and {}",
                s.shape.t_passive, s.shape.t_active
            )));
        }
        if s.shape.frame_size() != f {
            return Err(Error::dim("frame_pairs", "subjects have different frame sizes"));
        }
        p.extend_from_slice(s.passive.data());
        a.extend_from_slice(s.active.data());
    }
    let n = p.len() / f;
    Ok((Tensor::new(vec![n, f], p)?, Tensor::new(vec![n, f], a)?))
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let (_, f) = t.as_rows();
    let mut data = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), f], data).expect("row gather")
}

/// Minimizes the per-frame reconstruction loss `‖a[t] − φ(p[t])‖²` and
/// returns the checkpoint with the lowest eval loss. Subject identity is
/// never used; frames are pooled and shuffled.
pub fn train_p2a(
    train: &[SubjectSequences],
    eval: &[SubjectSequences],
    config: &P2AConfig,
    seeds: &SeedStream,
) -> Result<(P2ATranslator, LossCurve)> {
    config.validate()?;
    let (train_p, train_a) = frame_pairs(train)?;
    let (n, f) = train_p.as_rows();
    if train.is_empty() || n == 0 {
        return Err(Error::Config("p2a training needs at least one training subject".into()));
    }
    let (eval_p, eval_a) = frame_pairs(eval)?;
    let has_eval = eval_p.as_rows().0 > 0;

    let mut model = P2ATranslator::new(f, config, &mut seeds.derive_named("p2a.init").rng(0))?;
    let mut rng = seeds.derive_named("p2a.train").rng(0);
    let mut opt = Optimizer::new(config.optimizer);
    let ids: Vec<ParamId> = model.params.ids().collect();

    let score = |m: &P2ATranslator| {
        if has_eval {
            m.loss(&eval_p, &eval_a)
        } else {
            m.loss(&train_p, &train_a)
        }
    };
    let initial = score(&model)?;
    let mut curve = LossCurve::new(initial);
    let mut stop = EarlyStopping::new(config.patience);
    let mut best = model.params.clone();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = rows(&train_p, batch);
            let yb = rows(&train_a, batch);
            let grads = {
                let mut tape = Tape::new();
                let x = tape.input(xb);
                let y = tape.input(yb);
                let pred = model.forward_tape(&mut tape, x, Mode::Train, &mut rng)?;
                let sq = tape.squared_error(pred, y)?;
                let loss = tape.scale(sq, 1.0 / batch.len() as f64);
                total += tape.value(sq).item();
                tape.gradients(loss, &model.params)?
            };
            opt.step(&mut model.params, &grads, &ids)?;
        }
        let eval_loss = score(&model)?;
        curve.push(total / n as f64, eval_loss);
        if stop.update(epoch, eval_loss) {
            best.copy_from(&model.params)?;
        }
        if stop.should_stop(epoch) {
            break;
        }
    }
    curve.best_epoch = stop.best_epoch();
    if stop.best_epoch().is_some() {
        model.params.copy_from(&best)?;
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{FrameDims, SequenceShape};
    use crate::numerics::grad_check;

    fn small_cfg() -> P2AConfig {
        P2AConfig {
            width_multipliers: vec![2, 3, 1],
            ..P2AConfig::default()
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = P2ATranslator::zeros(5, &P2AConfig::default()).unwrap();
        let x = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 - 3.0).collect()).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.widths(), vec![10, 15, 20, 40, 20, 15, 10, 5]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_matches_tape() {
        let m = P2ATranslator::new(4, &small_cfg(), &mut SeedStream::new(3).rng(0)).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = m.forward(&x).unwrap();
        assert_eq!(a, m.forward(&x).unwrap());
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = m.forward_tape(&mut tape, xv, Mode::Eval, &mut SeedStream::new(9).rng(0)).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = P2ATranslator::zeros(4, &small_cfg()).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = P2ATranslator::new(3, &small_cfg(), &mut SeedStream::new(4).rng(0)).unwrap();
        for t in m.params.ids().collect::<Vec<_>>() {
            let shape = m.params.get(t).shape().to_vec();
            m.params.set(t, init::normal(&mut SeedStream::new(5).rng(t.index() as u64), &shape, 0.5)).unwrap();
        }
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap();
        let y = Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.3, 0.0, 0.5, 0.2]).unwrap();
        let layout = m.clone();
        let mut rng = SeedStream::new(6).rng(0);
        let report = grad_check(&mut m.params, 1e-5, |s, want| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let yv = tape.input(y.clone());
            let h = layout.forward_tape_with(s, &mut tape, xv, Mode::Eval, &mut rng)?;
            let l = tape.squared_error(h, yv)?;
            tape.evaluate(l, s, want)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    fn constant_subject(value: f64, f: usize) -> SubjectSequences {
        let shape = SequenceShape {
            dims: FrameDims::new(f, 1, 1),
            t_passive: 4,
            t_active: 4,
            runs: 1,
        };
        let frames = Tensor::new(vec![4, f], vec![value; 4 * f]).unwrap();
        SubjectSequences {
            passive: frames.clone(),
            active: frames,
            shape,
        }
    }

    #[test]
    fn learns_constant_identity() {
        let subj = constant_subject(0.7, 3);
        let cfg = P2AConfig {
            width_multipliers: vec![2, 2, 1],
            dropout: 0.0,
            max_epochs: 300,
            optimizer: OptimizerConfig::adam(1e-2),
            ..P2AConfig::default()
        };
        let (m, curve) = train_p2a(std::slice::from_ref(&subj), &[], &cfg, &SeedStream::new(1)).unwrap();
        assert!(m.loss(&subj.passive, &subj.active).unwrap() < 1e-4, "{:?}", curve.eval.last());
        // Running minimum never increases.
        let mut best = f64::INFINITY;
        for v in &curve.eval {
            best = best.min(*v);
        }
        assert!(best <= curve.initial_eval);
    }

    #[test]
    fn empty_training_set_is_a_config_error() {
        let r = train_p2a(&[], &[], &P2AConfig::default(), &SeedStream::new(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn restores_from_params() {
        let m = P2ATranslator::new(4, &small_cfg(), &mut SeedStream::new(3).rng(0)).unwrap();
        let back = P2ATranslator::from_params(4, 0.2, m.params.clone()).unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert!(P2ATranslator::from_params(5, 0.2, m.params.clone()).is_err());
    }
}
