//! Raw slice kernels shared by the tape's forward and backward rules.

/// `C[m×n] = A[m×k] · B[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `C += A · B`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `C += Aᵀ · B` with `A[k×m]`, `B[k×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// `C += A · Bᵀ` with `A[m×k]`, `B[n×k]`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a strided 2-D convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length and leading pad of one axis under same padding:
/// `out = ceil(len / stride)`, total pad split with the extra cell trailing.
pub(crate) fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

impl ConvGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 4], stride: (usize, usize)) -> Self {
        let [c_in, h, w] = input;
        let [c_out, _, kh, kw] = kernel;
        let (out_h, pad_h) = same_padding(h, kh, stride.0);
        let (out_w, pad_w) = same_padding(w, kw, stride.1);
        ConvGeom { c_in, h, w, c_out, kh, kw, sh: stride.0, sw: stride.1, pad_h, pad_w, out_h, out_w }
    }

    /// Input row touched by output row `oh` and kernel row `ki`, if inside the image.
    #[inline]
    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.sh + ki).checked_sub(self.pad_h).filter(|&r| r < self.h)
    }

    /// Range of output columns whose input column for kernel column `kj` is in bounds.
    #[inline]
    fn valid_out_cols(&self, kj: usize) -> std::ops::Range<usize> {
        // iw = ow*sw + kj - pad_w must satisfy 0 <= iw < w
        let lo = if kj >= self.pad_w { 0 } else { (self.pad_w - kj).div_ceil(self.sw) };
        let hi_excl = if self.w + self.pad_w > kj {
            (self.w + self.pad_w - kj).div_ceil(self.sw).min(self.out_w)
        } else {
            0
        };
        lo..hi_excl.max(lo)
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.out_h * g.out_w];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kernel[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = g.valid_out_cols(kj);
                    for oh in 0..g.out_h {
                        let Some(ih) = g.in_row(oh, ki) else { continue };
                        let in_row = &input[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                        let out_row = &mut out[(co * g.out_h + oh) * g.out_w..(co * g.out_h + oh + 1) * g.out_w];
                        for ow in cols.clone() {
                            out_row[ow] += wv * in_row[ow * g.sw + kj - g.pad_w];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a same-padded convolution with respect to input and kernel.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_in = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut d_k = if want_kernel { vec![0.0; kernel.len()] } else { Vec::new() };
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ki) * g.kw + kj;
                    let wv = kernel[widx];
                    let cols = g.valid_out_cols(kj);
                    let mut acc = 0.0;
                    for oh in 0..g.out_h {
                        let Some(ih) = g.in_row(oh, ki) else { continue };
                        let base_in = (ci * g.h + ih) * g.w;
                        let base_out = (co * g.out_h + oh) * g.out_w;
                        for ow in cols.clone() {
                            let iw = ow * g.sw + kj - g.pad_w;
                            let go = grad_out[base_out + ow];
                            if want_kernel {
                                acc += go * input[base_in + iw];
                            }
                            if want_input {
                                d_in[base_in + iw] += go * wv;
                            }
                        }
                    }
                    if want_kernel {
                        d_k[widx] += acc;
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_lengths() {
        assert_eq!(same_padding(100, 5, 2), (50, 1));
        assert_eq!(same_padding(7, 5, 2), (4, 2));
        assert_eq!(same_padding(1, 5, 2), (1, 2));
        assert_eq!(same_padding(10, 5, 1), (10, 2));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut c_tn = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c_tn, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let mut c_nt = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c_nt, 2, 3, 4);
        for k in 0..8 {
            assert!((c[k] - c_tn[k]).abs() < 1e-14);
            assert!((c[k] - c_nt[k]).abs() < 1e-14);
        }
    }
}
