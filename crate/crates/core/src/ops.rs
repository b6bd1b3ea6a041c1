//! Tensor-level entry points for the differentiable primitives, plus the
//! shared numeric helpers the tape uses for their forward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Row-wise softmax along the last axis with max-subtraction.
///
/// `mask[k] == false` hides element `k`; hidden entries come out exactly 0.
/// A row with every entry hidden is a [`Error::DegenerateRow`]; a visible
/// non-finite logit is an [`Error::Domain`].
pub fn softmax_masked(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let cols = *logits.shape().last().expect("tensors have at least one axis");
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::dim(format!("mask has {} entries, logits {}", m.len(), logits.len())));
        }
    }
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for (row, (o, xr)) in out.chunks_mut(cols).zip(x.chunks(cols)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[row * cols + j]);
        if let Some(j) = (0..cols).find(|&j| keep(j) && !xr[j].is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {} at row {row}, column {j}", xr[j])));
        }
        let max = (0..cols).filter(|&j| keep(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row });
        }
        let mut total = 0.0;
        for j in (0..cols).filter(|&j| keep(j)) {
            o[j] = (xr[j] - max).exp();
            total += o[j];
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `−log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

pub(crate) fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: (usize, usize)) -> Result<ConvGeom> {
    if stride.0 < 1 || stride.1 < 1 {
        return Err(Error::param(format!("conv stride {stride:?} must be at least 1")));
    }
    let [c_in, h, w] = input.shape()[..] else {
        return Err(Error::dim(format!("conv input must be C×H×W, got {:?}", input.shape())));
    };
    let [c_out, k_in, kh, kw] = kernel.shape()[..] else {
        return Err(Error::dim(format!("conv kernel must be 4-D, got {:?}", kernel.shape())));
    };
    if k_in != c_in {
        return Err(Error::dim(format!("kernel expects {k_in} input channels, input has {c_in}")));
    }
    Ok(ConvGeom::new([c_in, h, w], [c_out, k_in, kh, kw], stride))
}

/// Same-padded 2-D convolution, output spatial size `ceil(size / stride)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride)?;
    Ok(Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], kernels::conv2d_forward(input.data(), kernel.data(), &g)))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = crate::tape::Tape::new();
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let y = tape.layer_norm(xv, gv, bv, eps)?;
    Ok(tape.value(y).clone())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
