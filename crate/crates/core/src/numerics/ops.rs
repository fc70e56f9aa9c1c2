//! Forward kernels. The tape records these and adds the backward rules; the
//! free functions here are also the tape-free inference path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output shape of an affine map applied row-wise.
pub(crate) fn affine_shape(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Vec<usize>> {
    if w.shape().len() != 2 {
        return Err(Error::dim(
            "affine",
            format!("weight must be a matrix, got shape {:?}", w.shape()),
        ));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let n_in = x.shape().last().copied().unwrap_or(1);
    if x.shape().is_empty() || n_in != n {
        return Err(Error::dim(
            "affine",
            format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::dim(
                "affine",
                format!("bias {:?} does not match weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Ok(shape)
}

/// `out = x · Wᵀ + b`, row-wise over the leading axes of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let shape = affine_shape(x, w, b)?;
    let (rows, n) = x.as_rows();
    let m = w.shape()[0];
    let mut out = vec![0.0; rows * m];
    gemm(rows, n, m, x.data(), false, w.data(), true, 0.0, &mut out);
    if let Some(b) = b {
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(shape, out)
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::dim("concat", "no operands"))?;
    if axis >= first.len() {
        return Err(Error::dim(
            "concat",
            format!("axis {} out of range for shape {:?}", axis, first),
        ));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        if s.len() != first.len()
            || s.iter()
                .zip(first.iter())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::dim(
                "concat",
                format!("shape {:?} incompatible with {:?} on axis {}", s, first, axis),
            ));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub(crate) fn concat_data(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Vec<f64> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let shape = concat_shape(&shapes, axis)?;
    let data = concat_data(parts, axis, &shape);
    Tensor::new(shape, data)
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_dropout_p(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Loss target: a dense tensor for squared error, a class index for cross-entropy.
#[derive(Clone, Copy, Debug)]
pub enum LossTarget<'a> {
    SquaredL2(&'a Tensor),
    CrossEntropy(usize),
}

/// Σ (pred − target)² or −log softmax(pred)[class].
pub fn loss(pred: &Tensor, target: LossTarget<'_>) -> Result<f64> {
    match target {
        LossTarget::SquaredL2(t) => {
            if t.shape() != pred.shape() {
                return Err(Error::dim(
                    "loss",
                    format!("prediction {:?} vs target {:?}", pred.shape(), t.shape()),
                ));
            }
            Ok(squared_error(pred.data(), t.data()))
        }
        LossTarget::CrossEntropy(class) => {
            let (rows, c) = pred.as_rows();
            if rows != 1 {
                return Err(Error::dim(
                    "loss",
                    format!("cross-entropy expects one logit vector, got {:?}", pred.shape()),
                ));
            }
            if class >= c {
                return Err(Error::Label(format!("class {class} out of range for {c} logits")));
            }
            let lse = log_sum_exp(pred.data());
            Ok(lse - pred.data()[class])
        }
    }
}

pub(crate) fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Spatial geometry of single-channel 3-D convolution with a 3×3×3 kernel,
/// stride 1 and one voxel of zero padding (output keeps the input size).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub dims: [usize; 3],
}

pub const KERNEL_VOLUME: usize = 27;

impl ConvGeometry {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Writes the `voxels × 27` patch matrix of one frame.
    pub(crate) fn im2col(&self, frame: &[f64], patches: &mut [f64]) {
        let [h, w, d] = self.dims;
        let mut row = 0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let dst = &mut patches[row * KERNEL_VOLUME..(row + 1) * KERNEL_VOLUME];
                    let mut c = 0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            for dk in 0..3 {
                                let (ii, jj, kk) = (i + di, j + dj, k + dk);
                                dst[c] = if ii >= 1
                                    && jj >= 1
                                    && kk >= 1
                                    && ii <= h
                                    && jj <= w
                                    && kk <= d
                                {
                                    frame[((ii - 1) * w + (jj - 1)) * d + (kk - 1)]
                                } else {
                                    0.0
                                };
                                c += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patch gradients.
    pub(crate) fn col2im(&self, patches: &[f64], frame: &mut [f64]) {
        let [h, w, d] = self.dims;
        let mut row = 0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let src = &patches[row * KERNEL_VOLUME..(row + 1) * KERNEL_VOLUME];
                    let mut c = 0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            for dk in 0..3 {
                                let (ii, jj, kk) = (i + di, j + dj, k + dk);
                                if ii >= 1 && jj >= 1 && kk >= 1 && ii <= h && jj <= w && kk <= d
                                {
                                    frame[((ii - 1) * w + (jj - 1)) * d + (kk - 1)] += src[c];
                                }
                                c += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `x: [N, H, W, D]`, `w: [k, 27]`, `b: [k]` → `[N, k, H, W, D]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (n, k) = conv3d_check(x, w, b, geom)?;
    let v = geom.voxels();
    let mut out = vec![0.0; n * k * v];
    let mut patches = vec![0.0; v * KERNEL_VOLUME];
    for f in 0..n {
        geom.im2col(&x.data()[f * v..(f + 1) * v], &mut patches);
        let dst = &mut out[f * k * v..(f + 1) * k * v];
        gemm(k, KERNEL_VOLUME, v, w.data(), false, &patches, true, 0.0, dst);
        for (row, bias) in dst.chunks_mut(v).zip(b.data()) {
            row.iter_mut().for_each(|o| *o += bias);
        }
    }
    let [h, ww, d] = geom.dims;
    Tensor::new(vec![n, k, h, ww, d], out)
}

pub(crate) fn conv3d_check(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    geom: ConvGeometry,
) -> Result<(usize, usize)> {
    let [h, ww, d] = geom.dims;
    if h < 3 || ww < 3 || d < 3 {
        return Err(Error::Config(format!(
            "frame {:?} smaller than the 3x3x3 kernel",
            geom.dims
        )));
    }
    if x.shape().len() != 4 || x.shape()[1..] != geom.dims {
        return Err(Error::dim(
            "conv3d",
            format!("input {:?} does not match frame dims {:?}", x.shape(), geom.dims),
        ));
    }
    if w.shape().len() != 2 || w.shape()[1] != KERNEL_VOLUME {
        return Err(Error::dim(
            "conv3d",
            format!("kernel bank must be [k, 27], got {:?}", w.shape()),
        ));
    }
    let k = w.shape()[0];
    if b.shape() != [k] {
        return Err(Error::dim(
            "conv3d",
            format!("bias {:?} for {} filters", b.shape(), k),
        ));
    }
    Ok((x.shape()[0], k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_identity_case() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        let y = affine(&x, &Tensor::identity(2), Some(&b)).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert_eq!(y.shape(), &[2]);
    }

    #[test]
    fn affine_zero_input_passes_bias() {
        let x = Tensor::vector(vec![0.0, 0.0]);
        let w = Tensor::matrix(2, 2, vec![3.7, -1.2, 0.4, 9.0]).unwrap();
        let b = Tensor::vector(vec![5.0, -3.0]);
        assert_eq!(affine(&x, &w, Some(&b)).unwrap().data(), &[5.0, -3.0]);
    }

    #[test]
    fn affine_hand_computed() {
        let x = Tensor::vector(vec![1.0, -1.0]);
        let w = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(affine(&x, &w, Some(&b)).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = affine(&x, &Tensor::identity(2), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine") && msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_abs_diff_eq!(Activation::Sigmoid.apply(2.0), 0.880_797_077_977_882_3, epsilon = 1e-15);
        // large negative inputs stay finite
        assert!(Activation::Sigmoid.apply(-800.0).is_finite());
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        assert_eq!(concat(&[&a, &b], 0).unwrap().data(), &[1.0, 2.0, 3.0]);
        let e = Tensor::vector(vec![]);
        assert_eq!(concat(&[&e, &b], 0).unwrap().data(), &[3.0]);

        let m1 = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m2 = Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap();
        let c = concat(&[&m1, &m2], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert!(concat(&[&m1, &m2], 0).is_err());
    }

    #[test]
    fn gate_input_width() {
        let f = 180;
        let r = 64;
        let x = Tensor::zeros(&[2 * f]);
        let h = Tensor::zeros(&[r]);
        let e = Tensor::zeros(&[12]);
        assert_eq!(concat(&[&x, &h, &e], 0).unwrap().len(), 2 * f + r + 12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeedStream::new(3).rng(0);
        let x = Tensor::vector((0..50).map(f64::from).collect());
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
        assert!(matches!(dropout(&x, -0.1, Mode::Eval, &mut rng), Err(Error::Config(_))));

        let ones = Tensor::full(&[10_000], 1.0);
        let y = dropout(&ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn loss_cases() {
        let x = Tensor::vector(vec![0.3, -2.0]);
        assert_eq!(loss(&x, LossTarget::SquaredL2(&x)).unwrap(), 0.0);
        let p = Tensor::vector(vec![1.0, 2.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(loss(&p, LossTarget::SquaredL2(&z)).unwrap(), 5.0);
        let logits = Tensor::vector(vec![0.0; 5]);
        assert_abs_diff_eq!(
            loss(&logits, LossTarget::CrossEntropy(2)).unwrap(),
            5f64.ln(),
            epsilon = 1e-12
        );
        assert!(matches!(
            loss(&logits, LossTarget::CrossEntropy(5)),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let geom = ConvGeometry { dims: [3, 4, 3] };
        let v = geom.voxels();
        let x = Tensor::new(vec![2, 3, 4, 3], (0..2 * v).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![2, 27], (0..54).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let b = Tensor::vector(vec![0.5, -0.25]);
        let y = conv3d(&x, &w, &b, geom).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 4, 3]);
        let [h, ww, d] = geom.dims;
        for f in 0..2 {
            for k in 0..2 {
                for i in 0..h {
                    for j in 0..ww {
                        for l in 0..d {
                            let mut acc = b.data()[k];
                            for (c, (di, dj, dl)) in (0..3)
                                .flat_map(|a| (0..3).flat_map(move |b| (0..3).map(move |c| (a, b, c))))
                                .enumerate()
                            {
                                let (ii, jj, ll) = (i as isize + di - 1, j as isize + dj - 1, l as isize + dl - 1);
                                if ii < 0 || jj < 0 || ll < 0 || ii >= h as isize || jj >= ww as isize || ll >= d as isize {
                                    continue;
                                }
                                let xi = ((ii as usize * ww + jj as usize) * d + ll as usize) + f * v;
                                acc += w.data()[k * 27 + c] * x.data()[xi];
                            }
                            let yi = ((f * 2 + k) * h + i) * ww * d + j * d + l;
                            assert_abs_diff_eq!(y.data()[yi], acc, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_small_frames() {
        let geom = ConvGeometry { dims: [2, 4, 4] };
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 27]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv3d(&x, &w, &b, geom), Err(Error::Config(_))));
    }
}
