//! Same-size zero-padded convolution (`x * h`), filter-bank convolution
//! (`x ⋆ H`) and the 1×1-convolution form of a matrix product.
//!
//! Indexing: for a filter of height `n`, output row `i` reads input rows
//! `i + k - lead(n)` for `k in 0..n`, where `lead(n) = ceil(n/2) - 1`.
//! Odd filters are centred; even filters lean right (a 1×2 filter reads
//! columns `j` and `j + 1`). Rows or columns outside the signal read as zero.
//! No kernel flip is applied: this is cross-correlation.

use crate::error::{shape_err, Result};
use crate::tensor::numel;
use crate::{Scalar, Tensor};

/// Zero padding in front of the signal for a filter of size `n`.
pub fn lead(n: usize) -> usize {
    n.div_ceil(2) - 1
}

/// Which inner loop evaluates a convolution. Both produce the same values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvKernel {
    /// Direct evaluation of the double sum, one output at a time.
    Naive,
    /// Gathers every zero-padded patch into a row of a patch matrix and
    /// multiplies it by the flattened filters.
    #[default]
    PatchMatrix,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    rows: usize,
    cols: usize,
    chans: usize,
    fh: usize,
    fw: usize,
    filters: usize,
}

fn bank_dims(op: &'static str, x: &[usize], h: &[usize]) -> Result<ConvDims> {
    if x.len() != 3 {
        return shape_err(op, format!("signal must be N×M×d, got {x:?}"));
    }
    if h.len() < 4 {
        return shape_err(op, format!("filter bank must be F×…×n×m×d, got {h:?}"));
    }
    let r = h.len();
    let (fh, fw, hd) = (h[r - 3], h[r - 2], h[r - 1]);
    if hd != x[2] {
        return shape_err(op, format!("channel mismatch: signal d={} filter d={hd}", x[2]));
    }
    if fh > x[0] || fw > x[1] {
        return shape_err(op, format!("filter {fh}×{fw} larger than signal {}×{}", x[0], x[1]));
    }
    Ok(ConvDims {
        rows: x[0],
        cols: x[1],
        chans: x[2],
        fh,
        fw,
        filters: numel(&h[..r - 3]),
    })
}

/// Single-filter convolution: `x` is N×M×d, `h` is n×m×d, output is N×M.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_with(x, h, ConvKernel::default())
}

pub fn conv2d_with<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>, kernel: ConvKernel) -> Result<Tensor<T>> {
    if h.rank() != 3 {
        return shape_err("conv2d", format!("filter must be n×m×d, got {:?}", h.shape()));
    }
    let bank = h.reshape(&[1, h.shape()[0], h.shape()[1], h.shape()[2]])?;
    let out = conv_bank_with(x, &bank, kernel)?;
    out.reshape(&[x.shape()[0], x.shape()[1]])
}

/// Filter-bank convolution: output `[i, j, f_1, …, f_L] = conv2d(x, H[f_1, …, f_L])[i, j]`.
pub fn conv_bank<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    conv_bank_with(x, h, ConvKernel::default())
}

pub fn conv_bank_with<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>, kernel: ConvKernel) -> Result<Tensor<T>> {
    let dims = bank_dims("conv_bank", x.shape(), h.shape())?;
    let data = match kernel {
        ConvKernel::Naive => naive(x.data(), h.data(), dims),
        ConvKernel::PatchMatrix => patch_matrix(x.data(), h.data(), dims),
    };
    let r = h.rank();
    let mut shape = vec![dims.rows, dims.cols];
    shape.extend_from_slice(&h.shape()[..r - 3]);
    Tensor::new(shape, data)
}

fn naive<T: Scalar>(x: &[T], h: &[T], d: ConvDims) -> Vec<T> {
    let (li, lj) = (lead(d.fh), lead(d.fw));
    let fsize = d.fh * d.fw * d.chans;
    let mut out = vec![T::zero(); d.rows * d.cols * d.filters];
    for i in 0..d.rows {
        for j in 0..d.cols {
            for f in 0..d.filters {
                let hf = &h[f * fsize..(f + 1) * fsize];
                let mut acc = T::zero();
                for k in 0..d.fh {
                    let Some(src_i) = (i + k).checked_sub(li).filter(|&s| s < d.rows) else {
                        continue;
                    };
                    for l in 0..d.fw {
                        let Some(src_j) = (j + l).checked_sub(lj).filter(|&s| s < d.cols) else {
                            continue;
                        };
                        let xp = &x[(src_i * d.cols + src_j) * d.chans..][..d.chans];
                        let hp = &hf[(k * d.fw + l) * d.chans..][..d.chans];
                        for c in 0..d.chans {
                            acc += xp[c] * hp[c];
                        }
                    }
                }
                out[(i * d.cols + j) * d.filters + f] = acc;
            }
        }
    }
    out
}

/// Zero-padded patch matrix: row `i*M + j` holds the n×m×d window read by
/// output position `(i, j)`, flattened in (k, l, c) order.
pub(crate) fn patches<T: Scalar>(x: &[T], rows: usize, cols: usize, chans: usize, fh: usize, fw: usize) -> Vec<T> {
    let (li, lj) = (lead(fh), lead(fw));
    let width = fh * fw * chans;
    let mut p = vec![T::zero(); rows * cols * width];
    for i in 0..rows {
        for j in 0..cols {
            let row = &mut p[(i * cols + j) * width..][..width];
            for k in 0..fh {
                let Some(src_i) = (i + k).checked_sub(li).filter(|&s| s < rows) else {
                    continue;
                };
                for l in 0..fw {
                    let Some(src_j) = (j + l).checked_sub(lj).filter(|&s| s < cols) else {
                        continue;
                    };
                    let dst = (k * fw + l) * chans;
                    row[dst..dst + chans].copy_from_slice(&x[(src_i * cols + src_j) * chans..][..chans]);
                }
            }
        }
    }
    p
}

fn patch_matrix<T: Scalar>(x: &[T], h: &[T], d: ConvDims) -> Vec<T> {
    let width = d.fh * d.fw * d.chans;
    let p = patches(x, d.rows, d.cols, d.chans, d.fh, d.fw);
    let mut out = Vec::with_capacity(d.rows * d.cols * d.filters);
    for row in p.chunks_exact(width) {
        for hf in h.chunks_exact(width) {
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(hf) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    out
}

/// Adjoint of [`conv_bank`]: given the output gradient, returns the gradients
/// with respect to the signal and the filter bank.
pub(crate) fn conv_bank_backward<T: Scalar>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = bank_dims("conv_bank_backward", x.shape(), h.shape())?;
    let width = d.fh * d.fw * d.chans;
    let p = patches(x.data(), d.rows, d.cols, d.chans, d.fh, d.fw);
    let g = grad_out.data();
    let hd = h.data();

    let mut dh = vec![T::zero(); h.len()];
    let mut dp = vec![T::zero(); p.len()];
    for pos in 0..d.rows * d.cols {
        let prow = &p[pos * width..][..width];
        let dprow = &mut dp[pos * width..][..width];
        for f in 0..d.filters {
            let go = g[pos * d.filters + f];
            if go == T::zero() {
                continue;
            }
            let hf = &hd[f * width..][..width];
            let dhf = &mut dh[f * width..][..width];
            for q in 0..width {
                dhf[q] += go * prow[q];
                dprow[q] += go * hf[q];
            }
        }
    }

    // scatter patch gradients back onto the signal (transpose of `patches`)
    let (li, lj) = (lead(d.fh), lead(d.fw));
    let mut dx = vec![T::zero(); x.len()];
    for i in 0..d.rows {
        for j in 0..d.cols {
            let row = &dp[(i * d.cols + j) * width..][..width];
            for k in 0..d.fh {
                let Some(src_i) = (i + k).checked_sub(li).filter(|&s| s < d.rows) else {
                    continue;
                };
                for l in 0..d.fw {
                    let Some(src_j) = (j + l).checked_sub(lj).filter(|&s| s < d.cols) else {
                        continue;
                    };
                    let src = (k * d.fw + l) * d.chans;
                    let dst = (src_i * d.cols + src_j) * d.chans;
                    for c in 0..d.chans {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(h.shape().to_vec(), dh)?,
    ))
}

/// Matrix product `W X` computed as a 1×1 filter-bank convolution.
///
/// `X` (d×n) becomes a 1×n×d signal whose pixels are the columns of `X`;
/// `W` (d'×d) becomes d' filters of size 1×1×d. The bank output is 1×n×d',
/// which transposes back to d'×n.
pub fn matmul_via_conv<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() != 2 || w.shape()[1] != x.shape()[0] {
        return shape_err("matmul_via_conv", format!("{:?} × {:?}", w.shape(), x.shape()));
    }
    let (dp, d, n) = (w.shape()[0], w.shape()[1], x.shape()[1]);
    let signal = x.transpose()?.reshape(&[1, n, d])?;
    let bank = w.reshape(&[dp, 1, 1, d])?;
    conv_bank(&signal, &bank)?.reshape(&[n, dp])?.transpose()
}

/// Multiply-accumulate count of a same-size convolution with `filters` filters.
pub fn conv_macs(rows: usize, cols: usize, fh: usize, fw: usize, chans: usize, filters: usize) -> u64 {
    (rows * cols * fh * fw * chans * filters) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn lead_follows_ceil_rule() {
        assert_eq!(lead(1), 0);
        assert_eq!(lead(2), 0);
        assert_eq!(lead(3), 1);
        assert_eq!(lead(4), 1);
        assert_eq!(lead(5), 2);
    }

    #[test]
    fn one_by_one_scaling() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let h = t(&[1, 1, 1], &[2.]);
        for k in [ConvKernel::Naive, ConvKernel::PatchMatrix] {
            let c = conv2d_with(&x, &h, k).unwrap();
            assert_eq!(c.shape(), &[2, 2]);
            assert_eq!(c.data(), &[2., 4., 6., 8.]);
        }
    }

    #[test]
    fn even_filter_leans_right() {
        let x = t(&[1, 2, 1], &[1., 2.]);
        let h = t(&[1, 2, 1], &[1., 1.]);
        for k in [ConvKernel::Naive, ConvKernel::PatchMatrix] {
            assert_eq!(conv2d_with(&x, &h, k).unwrap().data(), &[3., 2.]);
        }
    }

    #[test]
    fn odd_filter_is_centred() {
        // c_j = x[j-1]*1 + x[j]*2 + x[j+1]*3 on [0, 1, 0]
        let x = t(&[1, 3, 1], &[0., 1., 0.]);
        let h = t(&[1, 3, 1], &[1., 2., 3.]);
        assert_eq!(conv2d(&x, &h).unwrap().data(), &[3., 2., 1.]);
    }

    #[test]
    fn shape_errors() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert!(conv2d(&x, &t(&[1, 1, 2], &[1., 1.])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 1, 1]).unwrap()).is_err());
        assert!(conv_bank(&x, &t(&[1, 1, 1], &[1.])).is_err());
        assert!(matmul_via_conv(&t(&[2, 3], &[0.; 6]), &t(&[2, 2], &[0.; 4])).is_err());
    }

    #[test]
    fn identity_bank_selects_channels() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3], |i| (i[0] * 9 + i[1] * 3 + i[2]) as f64).unwrap();
        let h = Tensor::<f64>::from_fn(&[3, 1, 1, 3], |i| if i[0] == i[3] { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(conv_bank(&x, &h).unwrap(), x);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul_via_conv(&eye, &x).unwrap(), x);
        let z = matmul_via_conv(&Tensor::zeros(&[4, 2]).unwrap(), &x).unwrap();
        assert_eq!(z, Tensor::zeros(&[4, 3]).unwrap());
    }
}
