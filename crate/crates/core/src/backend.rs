//! The primitive operations the attention operators are composed from.
//!
//! Operators such as [`sa2d`](crate::attention::sa2d) are written once against
//! [`Backend`]. [`Eager`] evaluates them on tensors directly; a
//! [`Graph`](crate::autodiff::Graph) records them for reverse-mode gradients.

use crate::error::{invalid, Result};
use crate::{conv, ops, Scalar, Tensor};

pub trait Backend<T: Scalar> {
    type Value: Clone;

    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    /// `x ⋆ H` (see [`conv::conv_bank`]).
    fn conv_bank(&mut self, x: &Self::Value, h: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value], axis: usize) -> Result<Self::Value>;
    fn transpose(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `W X` through [`conv::matmul_via_conv`].
    fn matmul(&mut self, w: &Self::Value, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, c: T) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axes: &[usize]) -> Result<Self::Value>;
    fn log_softmax(&mut self, x: &Self::Value, axes: &[usize]) -> Result<Self::Value>;
    /// N×M×N×M field `B[r, t, i, j] = b[|i - r|, |j - t|]`.
    fn relative_bias(&mut self, b: &Self::Value, rows: usize, cols: usize) -> Result<Self::Value>;
    /// `y[i, j, :] = Σ a[r, t, i, j] v[r, t, :]`.
    fn attend(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `Σ x ⊙ w` for a fixed weight tensor.
    fn weighted_sum(&mut self, x: &Self::Value, w: &Tensor<T>) -> Result<Self::Value>;
    fn mean_leading(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value>;
    fn gather_rows(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value>;
    /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
    fn nll_mean(&mut self, logp: &Self::Value, targets: &[usize]) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Mean binary cross-entropy of logits against `targets`.
    fn bce_with_logits(&mut self, logits: &Self::Value, targets: &[T]) -> Result<Self::Value>;
}

/// Direct evaluation on tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

pub(crate) fn check_nll<T: Scalar>(logp: &Tensor<T>, targets: &[usize]) -> Result<()> {
    if logp.rank() != 2 || logp.shape()[0] != targets.len() {
        return invalid(
            "nll_mean",
            format!("{} targets for log-probs {:?}", targets.len(), logp.shape()),
        );
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logp.shape()[1]) {
        return invalid("nll_mean", format!("target {t} out of range"));
    }
    Ok(())
}

pub(crate) fn nll_mean<T: Scalar>(logp: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    check_nll(logp, targets)?;
    let v = logp.shape()[1];
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(row, &t)| -logp.data()[row * v + t])
        .sum();
    Ok(Tensor::scalar(total / T::of(targets.len() as f64)))
}

pub(crate) fn bce_mean<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
    if logits.len() != targets.len() {
        return invalid(
            "bce_with_logits",
            format!("{} targets for {} logits", targets.len(), logits.len()),
        );
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&z, &y)| ops::bce_with_logits(z, y))
        .sum();
    Ok(Tensor::scalar(total / T::of(targets.len() as f64)))
}

impl<T: Scalar> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv_bank(&mut self, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        conv::conv_bank(x, h)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshape(shape)
    }

    fn concat(&mut self, xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        crate::tensor::concat(&refs, axis)
    }

    fn transpose(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.transpose()
    }

    fn matmul(&mut self, w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv::matmul_via_conv(w, x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        Ok(x.scale(c))
    }

    fn softmax(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        ops::softmax_over_axes(x, axes)
    }

    fn log_softmax(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        ops::log_softmax_over_axes(x, axes)
    }

    fn relative_bias(&mut self, b: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
        ops::relative_bias_field(b, rows, cols)
    }

    fn attend(&mut self, a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        ops::attend(a, v)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(x.sum()))
    }

    fn weighted_sum(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(x.zip_map(w, |a, b| a * b)?.sum()))
    }

    fn mean_leading(&mut self, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        ops::mean_leading(x, k)
    }

    fn gather_rows(&mut self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        ops::gather_rows(table, ids)
    }

    fn nll_mean(&mut self, logp: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        nll_mean(logp, targets)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(ops::sigmoid))
    }

    fn bce_with_logits(&mut self, logits: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
        bce_mean(logits, targets)
    }
}
