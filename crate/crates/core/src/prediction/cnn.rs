use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, TraitLabels, TraitPrediction};
use crate::datamodel::{SequenceShape, SubjectSequences, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::{
    init, ops, ConvGeometry, Optimizer, OptimizerConfig, ParamId, ParamStore, SeedStream, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub filters: usize,
    /// Hidden widths of the per-trait MLP; the output layer is added.
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub weight_decay: f64,
    /// Subjects per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            filters: 10,
            hidden: vec![140, 64],
            optimizer: OptimizerConfig::default(),
            weight_decay: 1e-3,
            batch_size: 8,
            epochs: 100,
        }
    }
}

/// All frames of a subject, passive runs then active runs, `[2M·T, F]`.
pub fn cnn_frames(seq: &SubjectSequences) -> Result<Tensor> {
    if seq.shape.t_passive != seq.shape.t_active {
        return Err(Error::Config("frame summaries need equal passive and active lengths".into()));
    }
    let (rows, f) = seq.passive.as_rows();
    let mut data = seq.passive.data().to_vec();
    data.extend_from_slice(seq.active.data());
    Tensor::new(vec![2 * rows, f], data)
}

/// Shared 3-D convolution with spatial mean pooling into a
/// `(2M, k, T)` summary, followed by one MLP head per trait.
#[derive(Clone, Debug)]
pub struct FmriCnn {
    shape: SequenceShape,
    filters: usize,
    pub params: ParamStore,
    conv: (ParamId, ParamId),
    heads: Vec<(TraitKind, Vec<(ParamId, ParamId)>)>,
}

impl FmriCnn {
    pub fn new(shape: SequenceShape, traits: &[TraitKind], config: &CnnConfig, seeds: &SeedStream) -> Result<Self> {
        let dims = shape.dims.as_array();
        if dims.iter().any(|&d| d < 3) {
            return Err(Error::Config(format!("frame {dims:?} smaller than the 3x3x3 kernel")));
        }
        if shape.t_passive != shape.t_active {
            return Err(Error::Config("frame summaries need equal passive and active lengths".into()));
        }
        if config.filters == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("cnn widths must be positive".into()));
        }
        let mut rng = seeds.derive_named("cnn.init").rng(0);
        let mut params = ParamStore::new();
        let k = config.filters;
        let conv = (
            params.add("conv.w", init::uniform_fan_in(&mut rng, &[k, ops::KERNEL_VOLUME], ops::KERNEL_VOLUME)),
            params.add("conv.b", init::uniform_fan_in(&mut rng, &[k], ops::KERNEL_VOLUME)),
        );
        let summary = 2 * shape.runs * k * shape.t_active;
        let mut heads = Vec::new();
        for &trait_kind in traits {
            let mut widths = vec![summary];
            widths.extend(&config.hidden);
            widths.push(trait_kind.n_classes());
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let name = format!("{}.{i}", trait_kind.name());
                    (
                        params.add(format!("{name}.w"), init::uniform_fan_in(&mut rng, &[w[1], w[0]], w[0])),
                        params.add(format!("{name}.b"), init::uniform_fan_in(&mut rng, &[w[1]], w[0])),
                    )
                })
                .collect();
            heads.push((trait_kind, layers));
        }
        Ok(FmriCnn {
            shape,
            filters: k,
            params,
            conv,
            heads,
        })
    }

    /// `(2M, k, T)`
    pub fn summary_shape(&self) -> [usize; 3] {
        [2 * self.shape.runs, self.filters, self.shape.t_active]
    }

    pub fn traits(&self) -> Vec<TraitKind> {
        self.heads.iter().map(|(k, _)| *k).collect()
    }

    /// Pooled conv features `[B, 2M·k·T]` laid out as `(2M, k, T)`.
    pub fn summary_with<'a>(&self, params: &'a ParamStore, tape: &mut Tape<'a>, frames: &[&Tensor]) -> Result<Var> {
        let [h, w, d] = self.shape.dims.as_array();
        let (blocks, k, t) = (2 * self.shape.runs, self.filters, self.shape.t_active);
        let per = blocks * t;
        let mut data = Vec::with_capacity(frames.len() * per * h * w * d);
        for f in frames {
            if f.shape() != [per, h * w * d] {
                return Err(Error::dim("fmri_cnn", format!("frames {:?}, expected [{per}, {}]", f.shape(), h * w * d)));
            }
            data.extend_from_slice(f.data());
        }
        let n = frames.len();
        let x = tape.input(Tensor::new(vec![n * per, h, w, d], data)?);
        let (cw, cb) = (tape.param(params, self.conv.0), tape.param(params, self.conv.1));
        let conv = tape.conv3d(x, cw, cb, ConvGeometry { dims: [h, w, d] })?;
        let act = tape.relu(conv);
        // Pooled values arrive as (subject, block, t, filter).
        let pooled = tape.mean_rows(act, h * w * d)?;
        let mut order = Vec::with_capacity(n * per * k);
        for s in 0..n {
            for blk in 0..blocks {
                for f in 0..k {
                    for step in 0..t {
                        order.push(((s * blocks + blk) * t + step) * k + f);
                    }
                }
            }
        }
        tape.take(pooled, &order, &[n, per * k])
    }

    fn head_logits<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        summary: Var,
        layers: &[(ParamId, ParamId)],
    ) -> Result<Var> {
        let mut h = summary;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let (wv, bv) = (tape.param(params, w), tape.param(params, b));
            h = tape.affine(h, wv, Some(bv))?;
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Summed per-head mean cross-entropy over labeled subjects plus weight
    /// decay on every weight matrix.
    pub fn loss_with<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        frames: &[&Tensor],
        labels: &[BTreeMap<TraitKind, usize>],
        weight_decay: f64,
    ) -> Result<Var> {
        let summary = self.summary_with(params, tape, frames)?;
        let mut total: Option<Var> = None;
        for (kind, layers) in &self.heads {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].contains_key(kind)).collect();
            if rows.is_empty() {
                continue;
            }
            let logits = self.head_logits(params, tape, summary, layers)?;
            let classes = kind.n_classes();
            let idx: Vec<usize> = rows.iter().flat_map(|&r| r * classes..(r + 1) * classes).collect();
            let picked = tape.take(logits, &idx, &[rows.len(), classes])?;
            let targets: Vec<usize> = rows.iter().map(|&r| labels[r][kind]).collect();
            let ce = tape.cross_entropy(picked, &targets)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        let mut total = total.ok_or_else(|| Error::Label("no labeled subjects in batch".into()))?;
        if weight_decay > 0.0 {
            let weights: Vec<ParamId> = std::iter::once(self.conv.0)
                .chain(self.heads.iter().flat_map(|(_, l)| l.iter().map(|p| p.0)))
                .collect();
            for w in weights {
                let wv = tape.param(params, w);
                let sq = tape.sum_squares(wv);
                let sq = tape.scale(sq, weight_decay);
                total = tape.add(total, sq)?;
            }
        }
        Ok(total)
    }

    pub fn predict(&self, frames: &Tensor) -> Result<BTreeMap<TraitKind, TraitPrediction>> {
        let mut tape = Tape::new();
        let summary = self.summary_with(&self.params, &mut tape, &[frames])?;
        let mut out = BTreeMap::new();
        for (kind, layers) in &self.heads {
            let logits = self.head_logits(&self.params, &mut tape, summary, layers)?;
            let logits = tape.value(logits).data().to_vec();
            out.insert(
                *kind,
                TraitPrediction {
                    label: argmax(&logits),
                    probabilities: ops::softmax(&logits),
                    logits,
                },
            );
        }
        Ok(out)
    }
}

/// Trains the network on `frames` (from [`cnn_frames`]) with minibatch
/// updates; subjects missing a trait's label do not contribute to that head.
pub fn train_cnn(
    shape: SequenceShape,
    frames: &[Tensor],
    labels: &BTreeMap<TraitKind, TraitLabels>,
    config: &CnnConfig,
    seeds: &SeedStream,
) -> Result<FmriCnn> {
    if config.batch_size == 0 {
        return Err(Error::Config("cnn.batch_size must be positive".into()));
    }
    let traits: Vec<TraitKind> = labels.keys().copied().collect();
    let mut model = FmriCnn::new(shape, &traits, config, seeds)?;
    let per_subject: Vec<BTreeMap<TraitKind, usize>> = (0..frames.len())
        .map(|i| {
            labels
                .iter()
                .filter_map(|(k, l)| l.get(i).copied().flatten().map(|y| (*k, y)))
                .collect()
        })
        .collect();
    if labels.values().any(|l| l.len() != frames.len()) {
        return Err(Error::dim("train_cnn", "label vectors must match the subject count"));
    }
    let mut rng = seeds.derive_named("cnn.train").rng(0);
    let mut opt = Optimizer::new(config.optimizer);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut order: Vec<usize> = (0..frames.len()).filter(|&i| !per_subject[i].is_empty()).collect();
    if order.is_empty() {
        return Err(Error::Label("no labeled subjects for the cnn".into()));
    }
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &frames[i]).collect();
            let lab: Vec<BTreeMap<TraitKind, usize>> = chunk.iter().map(|&i| per_subject[i].clone()).collect();
            let grads = {
                let mut tape = Tape::new();
                let loss = model.loss_with(&model.params, &mut tape, &batch, &lab, config.weight_decay)?;
                tape.gradients(loss, &model.params)?
            };
            opt.step(&mut model.params, &grads, &ids)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::FrameDims;
    use crate::numerics::grad_check;

    fn shape(h: usize, runs: usize, t: usize) -> SequenceShape {
        SequenceShape {
            dims: FrameDims::new(h, h, h),
            t_passive: t,
            t_active: t,
            runs,
        }
    }

    #[test]
    fn default_summary_shape() {
        let s = SequenceShape {
            dims: FrameDims::new(6, 5, 6),
            t_passive: 14,
            t_active: 14,
            runs: 3,
        };
        let m = FmriCnn::new(s, &[TraitKind::Tas20], &CnnConfig::default(), &SeedStream::new(0)).unwrap();
        assert_eq!(m.summary_shape(), [6, 10, 14]);
        let frames = Tensor::full(&[84, 180], 0.5);
        let mut tape = Tape::new();
        let z = m.summary_with(&m.params, &mut tape, &[&frames]).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 840]);
    }

    #[test]
    fn small_frames_are_rejected() {
        let err = FmriCnn::new(shape(2, 1, 2), &[TraitKind::Tas20], &CnnConfig::default(), &SeedStream::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn summary_layout_is_block_filter_time() {
        let cfg = CnnConfig {
            filters: 2,
            hidden: vec![3],
            ..CnnConfig::default()
        };
        let m = FmriCnn::new(shape(3, 1, 2), &[TraitKind::Tas20], &cfg, &SeedStream::new(1)).unwrap();
        let frames = Tensor::new(vec![4, 27], (0..108).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let z = m.summary_with(&m.params, &mut tape, &[&frames]).unwrap();
        let got = tape.value(z).data().to_vec();
        let conv = ops::conv3d(
            &frames.clone().reshape(&[4, 3, 3, 3]).unwrap(),
            m.params.get(m.conv.0),
            m.params.get(m.conv.1),
            ConvGeometry { dims: [3, 3, 3] },
        )
        .unwrap();
        // Frame index = block·T + t; conv output is [frame, filter, voxels].
        for blk in 0..2 {
            for f in 0..2 {
                for t in 0..2 {
                    let frame = blk * 2 + t;
                    let vals = &conv.data()[(frame * 2 + f) * 27..(frame * 2 + f + 1) * 27];
                    let mean = vals.iter().map(|v| v.max(0.0)).sum::<f64>() / 27.0;
                    assert!((got[(blk * 2 + f) * 2 + t] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = CnnConfig {
            filters: 2,
            hidden: vec![4, 3],
            weight_decay: 1e-3,
            ..CnnConfig::default()
        };
        let m = FmriCnn::new(shape(3, 1, 2), &[TraitKind::Tas20, TraitKind::NfExperience], &cfg, &SeedStream::new(2)).unwrap();
        let f1 = Tensor::new(vec![4, 27], (0..108).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let f2 = Tensor::new(vec![4, 27], (0..108).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap();
        let labels = vec![
            BTreeMap::from([(TraitKind::Tas20, 3), (TraitKind::NfExperience, 1)]),
            BTreeMap::from([(TraitKind::Tas20, 0)]),
        ];
        let mut store = m.params.clone();
        let report = grad_check(&mut store, 1e-5, |s, want| {
            let mut tape = Tape::new();
            let l = m.loss_with(s, &mut tape, &[&f1, &f2], &labels, 1e-3)?;
            tape.evaluate(l, s, want)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn constant_input_predicts_majority() {
        let cfg = CnnConfig {
            filters: 2,
            hidden: vec![4],
            epochs: 150,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(1e-2),
            ..CnnConfig::default()
        };
        let frames = vec![Tensor::full(&[4, 27], 0.3); 6];
        let labels = BTreeMap::from([(TraitKind::Stai, vec![Some(2), Some(2), Some(2), Some(4), Some(1), None])]);
        let m = train_cnn(shape(3, 1, 2), &frames, &labels, &cfg, &SeedStream::new(3)).unwrap();
        assert_eq!(m.predict(&frames[0]).unwrap()[&TraitKind::Stai].label, 2);
    }
}
