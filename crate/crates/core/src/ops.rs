//! Softmax, concatenation and the attention-specific tensor kernels.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{concat, strides};
use crate::{Scalar, Tensor};

/// For each flat index, the index of its slice once `axes` are collapsed.
/// Returns the group id per element and the number of groups.
pub(crate) fn slice_groups(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return invalid("softmax_over_axes", "empty axis list");
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return invalid(
                "softmax_over_axes",
                format!("axis {a} out of range for rank {}", shape.len()),
            );
        }
        if seen[a] {
            return invalid("softmax_over_axes", format!("axis {a} repeated"));
        }
        seen[a] = true;
    }
    let st = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|&a| !seen[a]).collect();
    let groups: usize = kept.iter().map(|&a| shape[a]).product();
    let n: usize = shape.iter().product();
    let ids = (0..n)
        .map(|flat| kept.iter().fold(0, |g, &a| g * shape[a] + (flat / st[a]) % shape[a]))
        .collect();
    Ok((ids, groups))
}

/// Softmax taken jointly over `axes`, separately for every setting of the
/// remaining axes. The per-slice maximum is subtracted before exponentiating.
pub fn softmax_over_axes<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (ids, groups) = slice_groups(t.shape(), axes)?;
    let mut max = vec![T::neg_infinity(); groups];
    for (&v, &g) in t.data().iter().zip(&ids) {
        max[g] = max[g].max(v);
    }
    let mut out: Vec<T> = t.data().iter().zip(&ids).map(|(&v, &g)| (v - max[g]).exp()).collect();
    let mut sum = vec![T::zero(); groups];
    for (&e, &g) in out.iter().zip(&ids) {
        sum[g] += e;
    }
    for (e, &g) in out.iter_mut().zip(&ids) {
        *e /= sum[g];
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// `log(softmax_over_axes(t, axes))`, evaluated as `x - max - log Σ exp(x - max)`.
pub fn log_softmax_over_axes<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (ids, groups) = slice_groups(t.shape(), axes)?;
    let mut max = vec![T::neg_infinity(); groups];
    for (&v, &g) in t.data().iter().zip(&ids) {
        max[g] = max[g].max(v);
    }
    let mut sum = vec![T::zero(); groups];
    for (&v, &g) in t.data().iter().zip(&ids) {
        sum[g] += (v - max[g]).exp();
    }
    let out = t
        .data()
        .iter()
        .zip(&ids)
        .map(|(&v, &g)| v - max[g] - sum[g].ln())
        .collect();
    Tensor::new(t.shape().to_vec(), out)
}

pub fn concat_last_axis<T: Scalar>(ts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = ts.first() else {
        return invalid("concat_last_axis", "empty tensor list");
    };
    concat(ts, first.rank() - 1)
}

/// Expands a relative positional bias `b` (at least N×M) into the N×M×N×M
/// logit field `B[r, t, i, j] = b[|i - r|, |j - t|]`.
pub fn relative_bias_field<T: Scalar>(b: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    if b.rank() != 2 || b.shape()[0] < rows || b.shape()[1] < cols {
        return shape_err(
            "relative_bias",
            format!("bias {:?} does not cover a {rows}×{cols} image", b.shape()),
        );
    }
    let bw = b.shape()[1];
    let bd = b.data();
    let mut out = Vec::with_capacity(rows * cols * rows * cols);
    for r in 0..rows {
        for t in 0..cols {
            for i in 0..rows {
                for j in 0..cols {
                    out.push(bd[r.abs_diff(i) * bw + t.abs_diff(j)]);
                }
            }
        }
    }
    Tensor::new(vec![rows, cols, rows, cols], out)
}

pub(crate) fn relative_bias_backward<T: Scalar>(
    bias_shape: &[usize],
    rows: usize,
    cols: usize,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let bw = bias_shape[1];
    let mut db = vec![T::zero(); bias_shape[0] * bw];
    let g = grad.data();
    let mut p = 0;
    for r in 0..rows {
        for t in 0..cols {
            for i in 0..rows {
                for j in 0..cols {
                    db[r.abs_diff(i) * bw + t.abs_diff(j)] += g[p];
                    p += 1;
                }
            }
        }
    }
    Tensor::new(bias_shape.to_vec(), db)
}

fn attend_dims(a: &[usize], v: &[usize]) -> Result<(usize, usize)> {
    if a.len() != 4 || v.len() != 3 || a[0] != a[2] || a[1] != a[3] || a[0] != v[0] || a[1] != v[1] {
        return shape_err("sa2d_apply", format!("attention {a:?} with values {v:?}"));
    }
    Ok((a[0] * a[1], v[2]))
}

/// `y[i, j, :] = Σ_{r,t} a[r, t, i, j] · v[r, t, :]`.
pub fn attend<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, c) = attend_dims(a.shape(), v.shape())?;
    let (ad, vd) = (a.data(), v.data());
    let mut y = vec![T::zero(); p * c];
    for src in 0..p {
        let vrow = &vd[src * c..][..c];
        for dst in 0..p {
            let w = ad[src * p + dst];
            let yrow = &mut y[dst * c..][..c];
            for ch in 0..c {
                yrow[ch] += w * vrow[ch];
            }
        }
    }
    Tensor::new(vec![v.shape()[0], v.shape()[1], c], y)
}

pub(crate) fn attend_backward<T: Scalar>(
    a: &Tensor<T>,
    v: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (p, c) = attend_dims(a.shape(), v.shape())?;
    let (ad, vd, g) = (a.data(), v.data(), grad.data());
    let mut da = vec![T::zero(); p * p];
    let mut dv = vec![T::zero(); p * c];
    for src in 0..p {
        let vrow = &vd[src * c..][..c];
        for dst in 0..p {
            let grow = &g[dst * c..][..c];
            let mut acc = T::zero();
            for ch in 0..c {
                acc += grow[ch] * vrow[ch];
            }
            da[src * p + dst] = acc;
            let w = ad[src * p + dst];
            let dvrow = &mut dv[src * c..][..c];
            for ch in 0..c {
                dvrow[ch] += w * grow[ch];
            }
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

/// Plain triple-loop product of two rank-2 tensors.
pub(crate) fn matmul_dense<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return shape_err("matmul", format!("{:?} × {:?}", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = T::zero();
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Mean over the first `k` axes.
pub fn mean_leading<T: Scalar>(t: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 0 || k >= t.rank() {
        return invalid(
            "mean_leading",
            format!("cannot reduce {k} leading axes of {:?}", t.shape()),
        );
    }
    let outer: usize = t.shape()[..k].iter().product();
    let rest = &t.shape()[k..];
    let inner: usize = rest.iter().product();
    let mut out = vec![T::zero(); inner];
    for chunk in t.data().chunks_exact(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let inv = T::one() / T::of(outer as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::new(rest.to_vec(), out)
}

/// Selects rows of a rank-2 table.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return shape_err("gather_rows", format!("table must be rank 2, got {:?}", table.shape()));
    }
    if ids.is_empty() {
        return invalid("gather_rows", "empty id list");
    }
    let (rows, width) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        if id >= rows {
            return invalid("gather_rows", format!("id {id} out of range for {rows} rows"));
        }
        out.extend_from_slice(&table.data()[id * width..][..width]);
    }
    Tensor::new(vec![ids.len(), width], out)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-[y log σ(z) + (1 - y) log(1 - σ(z))]`.
pub fn bce_with_logits<T: Scalar>(z: T, target: T) -> T {
    z.max(T::zero()) - target * z + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let z = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        let s = softmax_over_axes(&z, &[0, 1]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_point_softmax() {
        let x = Tensor::<f64>::from_f64(vec![2], &[0.0, 3f64.ln()]).unwrap();
        let s = softmax_over_axes(&x, &[0]).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(softmax_over_axes(&x, &[]).is_err());
        assert!(softmax_over_axes(&x, &[1, 1]).is_err());
        assert!(softmax_over_axes(&x, &[2]).is_err());
    }

    #[test]
    fn softmax_middle_axis_groups() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i[0] + 2 * i[1] + 5 * i[2]) as f64 * 0.3).unwrap();
        let s = softmax_over_axes(&x, &[1]).unwrap();
        for a in 0..2 {
            for c in 0..2 {
                let tot: f64 = (0..3).map(|b| s.get(&[a, b, c])).sum();
                assert!((tot - 1.0).abs() < 1e-14);
            }
        }
        let ls = log_softmax_over_axes(&x, &[1]).unwrap();
        assert!(ls.max_abs_diff(&s.map(f64::ln)).unwrap() < 1e-14);
    }

    #[test]
    fn bias_field_indexing() {
        let b = Tensor::<f64>::from_fn(&[3, 3], |i| (10 * i[0] + i[1]) as f64).unwrap();
        let f = relative_bias_field(&b, 2, 3).unwrap();
        assert_eq!(f.get(&[0, 0, 1, 2]), 12.0);
        assert_eq!(f.get(&[1, 2, 0, 0]), 12.0);
        assert_eq!(f.get(&[1, 1, 1, 1]), 0.0);
        assert!(relative_bias_field(&b, 4, 1).is_err());
    }

    #[test]
    fn concat_last_axis_errors() {
        let a = Tensor::<f64>::zeros(&[2, 2, 1]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 3, 1]).unwrap();
        assert!(concat_last_axis(&[&a, &b]).is_err());
        assert!(concat_last_axis::<f64>(&[]).is_err());
        assert_eq!(concat_last_axis(&[&a]).unwrap(), a);
    }

    #[test]
    fn logistic_helpers() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((bce_with_logits(0.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logits(-800.0f64, 1.0).is_finite());
    }
}
