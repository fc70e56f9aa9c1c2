use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EarlyStopping, LossCurve, P2ATranslator};
use crate::datamodel::SubjectSequences;
use crate::error::{Error, Result};
use crate::numerics::{init, Optimizer, OptimizerConfig, ParamId, ParamStore, SeedStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmVariant {
    Conditioned,
    Vanilla,
}

impl LstmVariant {
    pub fn name(self) -> &'static str {
        match self {
            LstmVariant::Conditioned => "conditioned",
            LstmVariant::Vanilla => "vanilla",
        }
    }
}

/// Embedding fit for subjects outside the trained table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { lr: 1e-2, steps: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub optimizer: OptimizerConfig,
    /// Learning rate of the embedding table; same optimizer kind as the network.
    pub embedding_lr: f64,
    /// Subjects per minibatch.
    pub batch_subjects: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Epochs between eval passes.
    pub eval_every: usize,
    /// Warm-started embedding steps for eval subjects before each eval pass.
    pub eval_fit_steps: usize,
    pub fit: FitConfig,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            hidden: 64,
            embedding_dim: 12,
            optimizer: OptimizerConfig::default(),
            embedding_lr: 1e-2,
            batch_subjects: 12,
            max_epochs: 300,
            patience: 30,
            eval_every: 1,
            eval_fit_steps: 20,
            fit: FitConfig::default(),
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("lstm.hidden and lstm.embedding_dim must be positive".into()));
        }
        if self.batch_subjects == 0 || self.eval_every == 0 {
            return Err(Error::Config("lstm.batch_subjects and lstm.eval_every must be positive".into()));
        }
        if !(self.embedding_lr >= 0.0) || !(self.fit.lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// φ outputs and ground-truth active frames of one subject, runs
/// concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiSequences {
    pub subject_id: String,
    /// `[L, F]`, `φ(p[t])`
    pub phi: Tensor,
    /// `[L, F]`, `a[t]`
    pub active: Tensor,
    /// Frames per run; the recurrence restarts at multiples of this.
    pub run_len: usize,
}

impl PhiSequences {
    pub fn build(translator: &P2ATranslator, subject_id: &str, seq: &SubjectSequences) -> Result<Self> {
        if seq.shape.t_passive != seq.shape.t_active {
            return Err(Error::Config(format!(
                "next-frame models need equal passive and active lengths, got {} and {}",
                seq.shape.t_passive, seq.shape.t_active
            )));
        }
        Ok(PhiSequences {
            subject_id: subject_id.to_string(),
            phi: translator.forward(&seq.passive)?,
            active: seq.active.clone(),
            run_len: seq.shape.t_active,
        })
    }

    pub fn len(&self) -> usize {
        self.active.as_rows().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const GATES: [&str; 4] = ["f", "i", "u", "o"];

/// LSTM over `x_t = (φ(p[t]), a[t−1])` with an optional per-subject
/// conditioning vector appended to every gate input, plus an affine
/// readout from the hidden state to the next active frame.
///
/// ```text
/// z   = (x_t, h_{t−1}, e)
/// f   = σ(W_f z + b_f)    i = σ(W_i z + b_i)
/// u   = tanh(W_u z + b_u) o = σ(W_o z + b_o)
/// c_t = f ⊙ c_{t−1} + u ⊙ i
/// h_t = o ⊙ tanh(c_t)
/// â_t = W_r h_t + b_r
/// ```
///
/// With `cond_dim == 0` this is the unconditioned model.
#[derive(Clone, Debug)]
pub struct NextFrameLstm {
    frame_size: usize,
    hidden: usize,
    cond_dim: usize,
    pub params: ParamStore,
    gates: [(ParamId, ParamId); 4],
    readout: (ParamId, ParamId),
}

impl NextFrameLstm {
    pub fn new<R: Rng + ?Sized>(frame_size: usize, hidden: usize, cond_dim: usize, rng: &mut R) -> Self {
        Self::build(frame_size, hidden, cond_dim, |shape, fan_in| init::uniform_fan_in(rng, shape, fan_in))
    }

    pub fn zeros(frame_size: usize, hidden: usize, cond_dim: usize) -> Self {
        Self::build(frame_size, hidden, cond_dim, |shape, _| Tensor::zeros(shape))
    }

    fn build(frame_size: usize, hidden: usize, cond_dim: usize, mut make: impl FnMut(&[usize], usize) -> Tensor) -> Self {
        let width = 2 * frame_size + hidden + cond_dim;
        let mut params = ParamStore::new();
        let gates = GATES.map(|g| {
            let w = params.add(format!("lstm.w_{g}"), make(&[hidden, width], width));
            let b = params.add(format!("lstm.b_{g}"), make(&[hidden], width));
            (w, b)
        });
        let rw = params.add("lstm.readout.w", make(&[frame_size, hidden], hidden));
        let rb = params.add("lstm.readout.b", make(&[frame_size], hidden));
        NextFrameLstm {
            frame_size,
            hidden,
            cond_dim,
            params,
            gates,
            readout: (rw, rb),
        }
    }

    /// Rebuilds a model around stored parameters, inferring its widths.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let find = |name: &str| params.find(name).ok_or_else(|| Error::Lookup(format!("missing parameter {name}")));
        let rw = find("lstm.readout.w")?;
        let rb = find("lstm.readout.b")?;
        let rs = params.get(rw).shape().to_vec();
        if rs.len() != 2 {
            return Err(Error::dim("lstm_load", format!("readout shape {rs:?}")));
        }
        let (frame_size, hidden) = (rs[0], rs[1]);
        let mut gates = [(ParamId(0), ParamId(0)); 4];
        let mut width = None;
        for (slot, g) in gates.iter_mut().zip(GATES) {
            let (w, b) = (find(&format!("lstm.w_{g}"))?, find(&format!("lstm.b_{g}"))?);
            let ws = params.get(w).shape();
            if ws.len() != 2 || ws[0] != hidden || params.get(b).shape() != [hidden] || *width.get_or_insert(ws[1]) != ws[1] {
                return Err(Error::dim("lstm_load", format!("gate {g} has shape {ws:?}")));
            }
            *slot = (w, b);
        }
        let width = width.expect("four gates");
        if width < 2 * frame_size + hidden || params.get(rb).shape() != [frame_size] || params.len() != 10 {
            return Err(Error::dim("lstm_load", "parameters do not form a next-frame LSTM"));
        }
        Ok(NextFrameLstm {
            frame_size,
            hidden,
            cond_dim: width - 2 * frame_size - hidden,
            params,
            gates,
            readout: (rw, rb),
        })
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Gate input width `2F + R + cond_dim`.
    pub fn input_width(&self) -> usize {
        2 * self.frame_size + self.hidden + self.cond_dim
    }

    pub fn gate_params(&self) -> [(ParamId, ParamId); 4] {
        self.gates
    }

    pub fn readout_params(&self) -> (ParamId, ParamId) {
        self.readout
    }

    /// One recurrence step on a batch: `x [B, 2F]`, `h, c [B, R]`,
    /// `e [B, cond_dim]`.
    pub fn cell_with<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        h: Var,
        c: Var,
        e: Option<Var>,
    ) -> Result<(Var, Var)> {
        let mut parts = vec![x, h];
        parts.extend(e);
        let z = tape.concat_last(&parts)?;
        let width = tape.value(z).as_rows().1;
        if width != self.input_width() || e.is_some() != (self.cond_dim > 0) {
            return Err(Error::dim(
                "lstm_cell",
                format!("gate input width {width}, model expects {}", self.input_width()),
            ));
        }
        let mut out = [z; 4];
        for (k, &(w, b)) in self.gates.iter().enumerate() {
            let (wv, bv) = (tape.param(params, w), tape.param(params, b));
            let pre = tape.affine(z, wv, Some(bv))?;
            out[k] = if k == 2 { tape.tanh(pre) } else { tape.sigmoid(pre) };
        }
        let [f, i, u, o] = out;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(u, i)?;
        let c_new = tape.add(keep, write)?;
        let squashed = tape.tanh(c_new);
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// Single-sample cell update on plain vectors.
    pub fn cond_lstm_cell(
        &self,
        x_t: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        e: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let e_len = e.map_or(0, <[f64]>::len);
        if x_t.len() != 2 * self.frame_size || h_prev.len() != self.hidden || c_prev.len() != self.hidden || e_len != self.cond_dim {
            return Err(Error::dim(
                "lstm_cell",
                format!(
                    "x {}, h {}, c {}, e {} vs expected {}, {}, {}, {}",
                    x_t.len(),
                    h_prev.len(),
                    c_prev.len(),
                    e_len,
                    2 * self.frame_size,
                    self.hidden,
                    self.hidden,
                    self.cond_dim
                ),
            ));
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
        let h = tape.input(Tensor::new(vec![1, self.hidden], h_prev.to_vec())?);
        let c = tape.input(Tensor::new(vec![1, self.hidden], c_prev.to_vec())?);
        let e = match e {
            Some(e) => Some(tape.input(Tensor::new(vec![1, e.len()], e.to_vec())?)),
            None => None,
        };
        let (h, c) = self.cell_with(&self.params, &mut tape, x, h, c, e)?;
        Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
    }

    fn leaf<'a>(params: &'a ParamStore, tape: &mut Tape<'a>, id: ParamId, frozen: bool) -> Var {
        if frozen {
            tape.frozen(params, id)
        } else {
            tape.param(params, id)
        }
    }

    fn check_batch(&self, batch: &[&PhiSequences]) -> Result<(usize, usize)> {
        let first = batch.first().ok_or_else(|| Error::Data("empty subject batch".into()))?;
        let (len, run) = (first.len(), first.run_len);
        for s in batch {
            let (rows, cols) = s.phi.as_rows();
            if s.active.shape() != s.phi.shape() || cols != self.frame_size {
                return Err(Error::dim(
                    "lstm_sequence",
                    format!("subject {}: frames {:?} for frame size {}", s.subject_id, s.phi.shape(), self.frame_size),
                ));
            }
            if rows != len || s.run_len != run {
                return Err(Error::dim("lstm_sequence", "subjects in one batch must share sequence geometry"));
            }
            if rows == 0 || run == 0 {
                return Err(Error::Data(format!("subject {} has no frames", s.subject_id)));
            }
        }
        Ok((len, run))
    }

    /// Teacher-forced unroll over the first `steps` frames of each subject.
    /// Returns the predictions stacked time-major, `[steps·B, F]` with row
    /// `t·B + b` holding subject `b` at step `t`.
    ///
    /// Same arithmetic as repeated [`cell_with`](Self::cell_with) calls, but
    /// the gate projection of the data part `(φ(p_t), a_{t−1})` runs once
    /// for all steps, as does the readout.
    pub fn unroll_with<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[&PhiSequences],
        e: Option<Var>,
        steps: usize,
    ) -> Result<Var> {
        self.unroll_inner(params, tape, batch, e, steps, false, None)
    }

    /// Gate weights fused to `[4R, W]` and split into recurrent columns and
    /// the data projection `[steps·B, 4R]` of every step's `(φ(p_t), a_{t−1})`
    /// plus gate biases. A cached projection skips the data gemm.
    fn project<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[&PhiSequences],
        steps: usize,
        frozen: bool,
        cached: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let (n, f, r) = (batch.len(), self.frame_size, self.hidden);
        let width = self.input_width();
        let run = batch[0].run_len;
        let mut ws = Vec::with_capacity(4);
        let mut bs = Vec::with_capacity(4);
        for &(w, b) in &self.gates {
            ws.push(Self::leaf(params, tape, w, frozen));
            bs.push(Self::leaf(params, tape, b, frozen));
        }
        let w_all = tape.concat(&ws, 0)?;
        let rec_cols: Vec<usize> = (0..4 * r).flat_map(|row| (2 * f..width).map(move |c| row * width + c)).collect();
        let w_rec = tape.take(w_all, &rec_cols, &[4 * r, width - 2 * f])?;
        if let Some(p) = cached {
            if p.shape() != [steps * n, 4 * r] || !frozen {
                return Err(Error::dim("lstm_sequence", "cached projection does not match the batch"));
            }
            return Ok((w_rec, tape.input(p.clone())));
        }
        let b_all = tape.concat(&bs, 0)?;
        let data_cols: Vec<usize> = (0..4 * r).flat_map(|row| (0..2 * f).map(move |c| row * width + c)).collect();
        let w_data = tape.take(w_all, &data_cols, &[4 * r, 2 * f])?;
        let mut x = Vec::with_capacity(steps * n * 2 * f);
        for t in 0..steps {
            for s in batch {
                x.extend_from_slice(s.phi.row(t));
                if t % run == 0 {
                    x.extend(std::iter::repeat_n(0.0, f));
                } else {
                    x.extend_from_slice(s.active.row(t - 1));
                }
            }
        }
        let x = tape.input(Tensor::new(vec![steps * n, 2 * f], x)?);
        Ok((w_rec, tape.affine(x, w_data, Some(b_all))?))
    }

    /// Data projection for a full unroll with frozen weights.
    fn cached_projection(&self, batch: &[&PhiSequences]) -> Result<Tensor> {
        let len = self.check_batch(batch)?.0;
        let mut tape = Tape::new();
        let (_, p) = self.project(&self.params, &mut tape, batch, len, true, None)?;
        Ok(tape.value(p).clone())
    }

    fn unroll_inner<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[&PhiSequences],
        e: Option<Var>,
        steps: usize,
        frozen: bool,
        cached: Option<&Tensor>,
    ) -> Result<Var> {
        let (len, run) = self.check_batch(batch)?;
        if steps > len || steps == 0 {
            return Err(Error::Index(format!("{steps} steps of a {len}-frame sequence")));
        }
        if e.is_some() != (self.cond_dim > 0) {
            return Err(Error::dim("lstm_sequence", format!("model expects {}-wide embeddings", self.cond_dim)));
        }
        let (n, r) = (batch.len(), self.hidden);
        let (w_rec, projected) = self.project(params, tape, batch, steps, frozen, cached)?;

        let gate_cols: Vec<Vec<usize>> = (0..4)
            .map(|k| (0..n).flat_map(|b| (0..r).map(move |j| b * 4 * r + k * r + j)).collect())
            .collect();
        let zeros = tape.input(Tensor::zeros(&[n, r]));
        let mut state = (zeros, zeros);
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            if t % run == 0 {
                state = (zeros, zeros);
            }
            let (h, c) = state;
            let rows: Vec<usize> = (t * n * 4 * r..(t + 1) * n * 4 * r).collect();
            let data_part = tape.take(projected, &rows, &[n, 4 * r])?;
            let mut parts = vec![h];
            parts.extend(e);
            let z = tape.concat_last(&parts)?;
            let rec_part = tape.affine(z, w_rec, None)?;
            let pre = tape.add(data_part, rec_part)?;
            let mut g = [pre; 4];
            for (k, cols) in gate_cols.iter().enumerate() {
                let slice = tape.take(pre, cols, &[n, r])?;
                g[k] = if k == 2 { tape.tanh(slice) } else { tape.sigmoid(slice) };
            }
            let [fg, ig, ug, og] = g;
            let keep = tape.mul(fg, c)?;
            let write = tape.mul(ug, ig)?;
            let c_new = tape.add(keep, write)?;
            let squashed = tape.tanh(c_new);
            let h_new = tape.mul(og, squashed)?;
            hs.push(h_new);
            state = (h_new, c_new);
        }
        let h_all = tape.concat(&hs, 0)?;
        let rw = Self::leaf(params, tape, self.readout.0, frozen);
        let rb = Self::leaf(params, tape, self.readout.1, frozen);
        tape.affine(h_all, rw, Some(rb))
    }

    /// Summed squared error over subjects, frames and voxels.
    pub fn sequence_loss_with<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[&PhiSequences],
        e: Option<Var>,
    ) -> Result<Var> {
        self.loss_inner(params, tape, batch, e, false, None)
    }

    fn loss_inner<'a>(
        &self,
        params: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[&PhiSequences],
        e: Option<Var>,
        frozen: bool,
        cached: Option<&Tensor>,
    ) -> Result<Var> {
        let len = self.check_batch(batch)?.0;
        let preds = self.unroll_inner(params, tape, batch, e, len, frozen, cached)?;
        let mut target = Vec::with_capacity(len * batch.len() * self.frame_size);
        for t in 0..len {
            for s in batch {
                target.extend_from_slice(s.active.row(t));
            }
        }
        let y = tape.input(Tensor::new(vec![len * batch.len(), self.frame_size], target)?);
        tape.squared_error(preds, y)
    }

    fn embedding_input<'a>(&self, tape: &mut Tape<'a>, n: usize, e: Option<&Tensor>) -> Result<Option<Var>> {
        match (e, self.cond_dim) {
            (None, 0) => Ok(None),
            (Some(t), c) if c > 0 && t.shape() == [n, c] => Ok(Some(tape.input(t.clone()))),
            (Some(t), _) => Err(Error::dim(
                "lstm_embedding",
                format!("embeddings {:?} for {n} subjects of width {}", t.shape(), self.cond_dim),
            )),
            (None, c) => Err(Error::dim("lstm_embedding", format!("model needs {c}-wide embeddings"))),
        }
    }

    /// Teacher-forced next-frame predictions `[L, F]` for each subject.
    pub fn predict(&self, batch: &[&PhiSequences], e: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let (len, _) = self.check_batch(batch)?;
        let mut tape = Tape::new();
        let ev = self.embedding_input(&mut tape, batch.len(), e)?;
        let preds = self.unroll_inner(&self.params, &mut tape, batch, ev, len, true, None)?;
        let stacked = tape.value(preds);
        let n = batch.len();
        Ok((0..n)
            .map(|b| {
                let data = (0..len).flat_map(|t| stacked.row(t * n + b).iter().copied()).collect();
                Tensor::new(vec![len, self.frame_size], data).expect("prediction shape")
            })
            .collect())
    }

    /// Prediction of `a[t]` from the recurrence run up to step `t`.
    pub fn predict_next_active(&self, seq: &PhiSequences, e: Option<&[f64]>, t: usize) -> Result<Vec<f64>> {
        if t >= seq.len() {
            return Err(Error::Index(format!("frame {t} of a {}-frame sequence", seq.len())));
        }
        let mut tape = Tape::new();
        let e = e.map(|v| Tensor::new(vec![1, v.len()], v.to_vec())).transpose()?;
        let ev = self.embedding_input(&mut tape, 1, e.as_ref())?;
        let preds = self.unroll_inner(&self.params, &mut tape, &[seq], ev, t + 1, true, None)?;
        Ok(tape.value(preds).row(t).to_vec())
    }

    /// Per-subject mean over frames of the summed squared error.
    pub fn subject_losses(&self, batch: &[&PhiSequences], e: Option<&Tensor>) -> Result<Vec<f64>> {
        let preds = self.predict(batch, e)?;
        Ok(preds
            .iter()
            .zip(batch)
            .map(|(p, s)| crate::numerics::ops::squared_error(p.data(), s.active.data()) / s.len() as f64)
            .collect())
    }
}

/// Trainable lookup table of per-subject vectors.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    pub params: ParamStore,
    table: ParamId,
}

impl EmbeddingTable {
    /// Rows drawn from N(0, 0.01²).
    pub fn new<R: Rng + ?Sized>(ids: Vec<String>, dim: usize, rng: &mut R) -> Result<Self> {
        let t = init::normal(rng, &[ids.len(), dim], 0.01);
        Self::from_matrix(ids, t)
    }

    pub fn from_matrix(ids: Vec<String>, matrix: Tensor) -> Result<Self> {
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Data("duplicate subject id in embedding table".into()));
        }
        if matrix.shape().len() != 2 || matrix.shape()[0] != ids.len() {
            return Err(Error::dim(
                "embedding_table",
                format!("{:?} for {} subjects", matrix.shape(), ids.len()),
            ));
        }
        let mut params = ParamStore::new();
        let table = params.add("chi", matrix);
        Ok(EmbeddingTable { ids, params, table })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.table).shape()[1]
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    pub fn matrix(&self) -> &Tensor {
        self.params.get(self.table)
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Lookup(format!("subject {id} has no embedding")))
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix().row(index)
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        Ok(self.row(self.index_of(id)?))
    }

    /// Rows for `ids`, stacked `[n, dim]`.
    pub fn rows_for(&self, ids: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for id in ids {
            data.extend_from_slice(self.get(id)?);
        }
        Tensor::new(vec![ids.len(), self.dim()], data)
    }

    pub fn centroid(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        for i in 0..self.len() {
            c.iter_mut().zip(self.row(i)).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|v| *v /= self.len().max(1) as f64);
        c
    }
}

/// Minimizes each subject's next-frame loss over its embedding only, all
/// subjects at once. Rows are independent: the summed loss gives each row
/// exactly its own subject's gradient. Returns the embeddings and the
/// per-subject losses at the end.
pub fn fit_embeddings(
    model: &NextFrameLstm,
    batch: &[&PhiSequences],
    init: Tensor,
    fit: &FitConfig,
) -> Result<(Tensor, Vec<f64>)> {
    if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
        return Err(Error::Data("embedding fit needs nonempty sequences".into()));
    }
    if model.cond_dim == 0 {
        return Err(Error::Usage("an unconditioned model has no embedding to fit".into()));
    }
    if init.shape() != [batch.len(), model.cond_dim] {
        return Err(Error::dim(
            "fit_embeddings",
            format!("init {:?} for {} subjects of width {}", init.shape(), batch.len(), model.cond_dim),
        ));
    }
    let len = batch[0].len() as f64;
    let projection = model.cached_projection(batch)?;
    let mut store = ParamStore::new();
    let id = store.add("e", init);
    let mut opt = Optimizer::new(OptimizerConfig::adam(fit.lr));
    for _ in 0..fit.steps {
        let grads = {
            let mut tape = Tape::new();
            let e = tape.param(&store, id);
            let sum = model.loss_inner(&model.params, &mut tape, batch, Some(e), true, Some(&projection))?;
            let loss = tape.scale(sum, 1.0 / len);
            tape.backward(loss)?.take_gradients(&tape, &store)
        };
        opt.step(&mut store, &grads, &[id])?;
    }
    let e = store.get(id).clone();
    let losses = model.subject_losses(batch, Some(&e))?;
    Ok((e, losses))
}

/// Embeddings for unseen subjects, each started at the centroid of the
/// trained table. The network is only read.
pub fn fit_new_subject_embedding(
    model: &NextFrameLstm,
    table: &EmbeddingTable,
    batch: &[&PhiSequences],
    fit: &FitConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let c = table.centroid();
    let init = Tensor::new(vec![batch.len(), c.len()], c.repeat(batch.len()))?;
    fit_embeddings(model, batch, init, fit)
}

#[derive(Clone, Debug)]
pub struct TrainedLstm {
    pub variant: LstmVariant,
    pub model: NextFrameLstm,
    /// Present for the conditioned variant.
    pub table: Option<EmbeddingTable>,
    pub curve: LossCurve,
}

fn check_uniform(seqs: &[PhiSequences]) -> Result<()> {
    if let Some(first) = seqs.first() {
        if seqs.iter().any(|s| s.phi.shape() != first.phi.shape() || s.run_len != first.run_len) {
            return Err(Error::dim("train_next_frame", "all subjects must share sequence geometry"));
        }
    }
    Ok(())
}

/// Trains the network (and, for the conditioned variant, the embedding
/// table) on teacher-forced next-frame prediction. `φ` is already applied
/// and receives no gradient. Returns the checkpoint with the best eval
/// loss; conditioned eval losses use embeddings fitted to the eval
/// subjects, warm-started from the previous eval pass.
pub fn train_next_frame(
    variant: LstmVariant,
    train: &[PhiSequences],
    eval: &[PhiSequences],
    config: &LstmConfig,
    seeds: &SeedStream,
) -> Result<TrainedLstm> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("next-frame training needs at least one training subject".into()))?;
    check_uniform(train)?;
    check_uniform(eval)?;
    let f = first.phi.as_rows().1;
    let cond_dim = match variant {
        LstmVariant::Conditioned => config.embedding_dim,
        LstmVariant::Vanilla => 0,
    };
    let mut model = NextFrameLstm::new(f, config.hidden, cond_dim, &mut seeds.derive_named("lstm.init").rng(0));
    let mut table = match variant {
        LstmVariant::Conditioned => Some(EmbeddingTable::new(
            train.iter().map(|s| s.subject_id.clone()).collect(),
            config.embedding_dim,
            &mut seeds.derive_named("lstm.embedding").rng(0),
        )?),
        LstmVariant::Vanilla => None,
    };
    let mut rng = seeds.derive_named("lstm.train").rng(0);
    let mut opt = Optimizer::new(config.optimizer);
    let mut opt_table = Optimizer::new(OptimizerConfig {
        lr: config.embedding_lr,
        kind: config.optimizer.kind,
    });
    let model_ids: Vec<ParamId> = model.params.ids().collect();

    let train_refs: Vec<&PhiSequences> = train.iter().collect();
    let eval_refs: Vec<&PhiSequences> = eval.iter().collect();
    let frames = first.len() as f64;
    let mut eval_embeddings: Option<Tensor> = None;

    let mut score = |model: &NextFrameLstm, table: &Option<EmbeddingTable>| -> Result<f64> {
        let (refs, e) = if eval_refs.is_empty() {
            let e = table.as_ref().map(|t| t.matrix().clone());
            (&train_refs, e)
        } else if let Some(t) = table {
            let init = match eval_embeddings.take() {
                Some(e) => e,
                None => {
                    let c = t.centroid();
                    Tensor::new(vec![eval_refs.len(), c.len()], c.repeat(eval_refs.len()))?
                }
            };
            let fit = FitConfig {
                lr: config.fit.lr,
                steps: config.eval_fit_steps,
            };
            let (e, _) = fit_embeddings(model, &eval_refs, init, &fit)?;
            eval_embeddings = Some(e.clone());
            (&eval_refs, Some(e))
        } else {
            (&eval_refs, None)
        };
        let losses = model.subject_losses(refs, e.as_ref())?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let initial = score(&model, &table)?;
    let mut curve = LossCurve::new(initial);
    let mut stop = EarlyStopping::new(config.patience);
    let mut best = (model.params.clone(), table.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_subjects) {
            let batch: Vec<&PhiSequences> = chunk.iter().map(|&i| &train[i]).collect();
            let (g_model, g_table) = {
                let mut tape = Tape::new();
                let e = match &table {
                    Some(t) => {
                        let tv = tape.param(&t.params, t.table);
                        Some(tape.gather_rows(tv, chunk)?)
                    }
                    None => None,
                };
                let sum = model.sequence_loss_with(&model.params, &mut tape, &batch, e)?;
                total += tape.value(sum).item();
                let loss = tape.scale(sum, 1.0 / (batch.len() as f64 * frames));
                let mut adj = tape.backward(loss)?;
                let g_model = adj.take_gradients(&tape, &model.params);
                let g_table = table.as_ref().map(|t| adj.take_gradients(&tape, &t.params));
                (g_model, g_table)
            };
            opt.step(&mut model.params, &g_model, &model_ids)?;
            if let (Some(t), Some(g)) = (table.as_mut(), g_table) {
                let id = t.table;
                opt_table.step(&mut t.params, &g, &[id])?;
            }
        }
        let train_loss = total / (train.len() as f64 * frames);
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.max_epochs {
            let eval_loss = score(&model, &table)?;
            curve.push(train_loss, eval_loss);
            if stop.update(epoch, eval_loss) {
                best.0.copy_from(&model.params)?;
                if let (Some(dst), Some(src)) = (best.1.as_mut(), table.as_ref()) {
                    dst.params.copy_from(&src.params)?;
                }
            }
        } else {
            curve.push(train_loss, f64::NAN);
        }
        if stop.should_stop(epoch) {
            break;
        }
    }
    curve.best_epoch = stop.best_epoch();
    if stop.best_epoch().is_some() {
        model.params.copy_from(&best.0)?;
        table = best.1;
    }
    Ok(TrainedLstm {
        variant,
        model,
        table,
        curve,
    })
}
