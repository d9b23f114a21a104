//! 1D self attention, 2D self attention with relative positional bias, and
//! multi-head 2D self attention.
//!
//! Every operator comes in two forms: a `*_with` function generic over a
//! [`Backend`] (so it can be recorded on a gradient tape) and a plain
//! function on tensors.

use rand::Rng;

use crate::backend::{Backend, Eager};
use crate::error::{shape_err, Result};
use crate::init;
use crate::params::{ParamKey, ParamTree};
use crate::{Scalar, Tensor};

/// Query, key and value filter banks of one head, plus an optional relative
/// positional bias.
///
/// `hq`, `hk` are `d_a × n × m × d`; `hv` is `d_o × n × m × d`; `bias` is a
/// matrix at least as large as the images the head is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<V> {
    pub hq: V,
    pub hk: V,
    pub hv: V,
    pub bias: Option<V>,
}

/// `C` heads whose concatenated outputs are reduced by the 1×1 bank `hy`
/// (`d_o × 1 × 1 × C·d_o`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams<V> {
    pub heads: Vec<AttentionParams<V>>,
    pub hy: V,
}

/// Sizes shared by every head of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub n: usize,
    pub m: usize,
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    /// Uniform filter initialization; the bias (if requested) starts at zero
    /// and covers `extent = (rows, cols)`.
    pub fn init(rng: &mut impl Rng, s: HeadShape, bias_extent: Option<(usize, usize)>) -> Result<Self> {
        Ok(Self {
            hq: init::filter_bank(rng, &[s.d_a], s.n, s.m, s.d)?,
            hk: init::filter_bank(rng, &[s.d_a], s.n, s.m, s.d)?,
            hv: init::filter_bank(rng, &[s.d_o], s.n, s.m, s.d)?,
            bias: bias_extent.map(|(r, c)| Tensor::zeros(&[r, c])).transpose()?,
        })
    }
}

impl<T: Scalar> MultiHeadParams<Tensor<T>> {
    pub fn init(rng: &mut impl Rng, s: HeadShape, heads: usize, bias_extent: Option<(usize, usize)>) -> Result<Self> {
        let heads = (0..heads)
            .map(|_| AttentionParams::init(rng, s, bias_extent))
            .collect::<Result<Vec<_>>>()?;
        let hy = init::filter_bank(rng, &[s.d_o], 1, 1, heads.len() * s.d_o)?;
        Ok(Self { heads, hy })
    }
}

impl<V> ParamTree<V> for AttentionParams<V> {
    type Rebind<U> = AttentionParams<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> AttentionParams<U> {
        AttentionParams {
            hq: f(&at.role("hq"), &self.hq),
            hk: f(&at.role("hk"), &self.hk),
            hv: f(&at.role("hv"), &self.hv),
            bias: self.bias.as_ref().map(|b| f(&at.role("bias"), b)),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        f(&at.role("hq"), &self.hq);
        f(&at.role("hk"), &self.hk);
        f(&at.role("hv"), &self.hv);
        if let Some(b) = &self.bias {
            f(&at.role("bias"), b);
        }
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        f(&at.role("hq"), &mut self.hq);
        f(&at.role("hk"), &mut self.hk);
        f(&at.role("hv"), &mut self.hv);
        if let Some(b) = &mut self.bias {
            f(&at.role("bias"), b);
        }
    }
}

impl<V> ParamTree<V> for MultiHeadParams<V> {
    type Rebind<U> = MultiHeadParams<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> MultiHeadParams<U> {
        MultiHeadParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, p)| p.map_keyed(&at.head(h), f))
                .collect(),
            hy: f(&at.role("hy"), &self.hy),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        for (h, p) in self.heads.iter().enumerate() {
            p.visit_keyed(&at.head(h), f);
        }
        f(&at.role("hy"), &self.hy);
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        for (h, p) in self.heads.iter_mut().enumerate() {
            p.visit_keyed_mut(&at.head(h), f);
        }
        f(&at.role("hy"), &mut self.hy);
    }
}

fn inv_sqrt<T: Scalar>(d_a: usize) -> T {
    T::one() / T::of(d_a as f64).sqrt()
}

/// `Y = V(X) A(X)ᵀ` with `A = softmax(Q(X)ᵀ K(X) / √d_a)` normalized over
/// keys, so every output column is a convex combination of value columns.
/// All products run through [`Backend::matmul`], i.e. as 1×1 convolutions.
pub fn self_attention_1d_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    wq: &B::Value,
    wk: &B::Value,
    wv: &B::Value,
) -> Result<B::Value> {
    let q = b.matmul(wq, x)?;
    let k = b.matmul(wk, x)?;
    let v = b.matmul(wv, x)?;
    let d_a = b.shape(&q)[0];
    if b.shape(&k)[0] != d_a {
        return shape_err("self_attention_1d", "query and key projections differ in size");
    }
    let qt = b.transpose(&q)?;
    let scores = b.matmul(&qt, &k)?;
    let scaled = b.scale(&scores, inv_sqrt(d_a))?;
    let a = b.softmax(&scaled, &[1])?;
    let at = b.transpose(&a)?;
    b.matmul(&v, &at)
}

pub fn self_attention_1d<T: Scalar>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<Tensor<T>> {
    self_attention_1d_with(&mut Eager, x, wq, wk, wv)
}

/// `q = x ⋆ H_Q`, `k = x ⋆ H_K`, `v = x ⋆ H_V`.
pub fn sa2d_project_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    p: &AttentionParams<B::Value>,
) -> Result<(B::Value, B::Value, B::Value)> {
    let (sq, sk) = (b.shape(&p.hq), b.shape(&p.hk));
    if sq != sk || sq.len() != 4 || b.shape(&p.hv).len() != 4 || b.shape(&p.hv)[1..] != sq[1..] {
        return shape_err(
            "sa2d_project",
            format!("hq {sq:?}, hk {sk:?}, hv {:?} do not share (n, m, d)", b.shape(&p.hv)),
        );
    }
    Ok((b.conv_bank(x, &p.hq)?, b.conv_bank(x, &p.hk)?, b.conv_bank(x, &p.hv)?))
}

pub fn sa2d_project<T: Scalar>(
    x: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    sa2d_project_with(&mut Eager, x, p)
}

/// Unnormalized scores `α[r, t, i, j] = ⟨k[r, t], q[i, j]⟩`, computed by
/// treating every query pixel as a 1×1 filter: `α = k ⋆ q'` with
/// `q' = reshape(q, N×M×1×1×d_a)`.
pub fn sa2d_scores_with<T: Scalar, B: Backend<T>>(b: &mut B, q: &B::Value, k: &B::Value) -> Result<B::Value> {
    let (sq, sk) = (b.shape(q), b.shape(k));
    if sq.len() != 3 || sq != sk {
        return shape_err("sa2d_scores", format!("q {sq:?} vs k {sk:?}"));
    }
    let filters = b.reshape(q, &[sq[0], sq[1], 1, 1, sq[2]])?;
    b.conv_bank(k, &filters)
}

pub fn sa2d_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    sa2d_scores_with(&mut Eager, q, k)
}

/// `a[r, t, i, j] = softmax_{(r, t)}(α[r, t, i, j] / √d_a + b[|i - r|, |j - t|])`.
pub fn sa2d_coefficients_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    alpha: &B::Value,
    d_a: usize,
    bias: Option<&B::Value>,
) -> Result<B::Value> {
    let s = b.shape(alpha);
    if s.len() != 4 || s[0] != s[2] || s[1] != s[3] {
        return shape_err("sa2d_coefficients", format!("scores must be N×M×N×M, got {s:?}"));
    }
    let mut logits = b.scale(alpha, inv_sqrt(d_a))?;
    if let Some(bias) = bias {
        let field = b.relative_bias(bias, s[0], s[1])?;
        logits = b.add(&logits, &field)?;
    }
    b.softmax(&logits, &[0, 1])
}

pub fn sa2d_coefficients<T: Scalar>(alpha: &Tensor<T>, d_a: usize, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    sa2d_coefficients_with(&mut Eager, alpha, d_a, bias)
}

pub fn sa2d_apply_with<T: Scalar, B: Backend<T>>(b: &mut B, a: &B::Value, v: &B::Value) -> Result<B::Value> {
    b.attend(a, v)
}

pub fn sa2d_apply<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    crate::ops::attend(a, v)
}

/// Single-head 2D self attention: project, score, normalize, apply.
pub fn sa2d_with<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, p: &AttentionParams<B::Value>) -> Result<B::Value> {
    let (q, k, v) = sa2d_project_with(b, x, p)?;
    let alpha = sa2d_scores_with(b, &q, &k)?;
    let d_a = b.shape(&q)[2];
    let a = sa2d_coefficients_with(b, &alpha, d_a, p.bias.as_ref())?;
    sa2d_apply_with(b, &a, &v)
}

pub fn sa2d<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<Tensor<T>>) -> Result<Tensor<T>> {
    sa2d_with(&mut Eager, x, p)
}

/// Attention coefficient tensors of every head, in head order.
pub fn head_coefficients<T: Scalar>(x: &Tensor<T>, p: &MultiHeadParams<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
    p.heads
        .iter()
        .map(|h| {
            let (q, k, _) = sa2d_project(x, h)?;
            let alpha = sa2d_scores(&q, &k)?;
            sa2d_coefficients(&alpha, q.shape()[2], h.bias.as_ref())
        })
        .collect()
}

/// Runs every head, concatenates along channels and reduces with `hy`.
pub fn multi_head_sa2d_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    p: &MultiHeadParams<B::Value>,
) -> Result<B::Value> {
    if p.heads.is_empty() {
        return shape_err("multi_head_sa2d", "no heads");
    }
    let ys = p.heads.iter().map(|h| sa2d_with(b, x, h)).collect::<Result<Vec<_>>>()?;
    let widths: Vec<usize> = ys.iter().map(|y| b.shape(y)[2]).collect();
    let hy = b.shape(&p.hy);
    if hy.len() != 4 || hy[3] != widths.iter().sum::<usize>() || hy[1] != 1 || hy[2] != 1 {
        return shape_err(
            "multi_head_sa2d",
            format!("hy {hy:?} does not reduce {} heads of widths {widths:?}", ys.len()),
        );
    }
    let stacked = b.concat(&ys, 2)?;
    b.conv_bank(&stacked, &p.hy)
}

pub fn multi_head_sa2d<T: Scalar>(x: &Tensor<T>, p: &MultiHeadParams<Tensor<T>>) -> Result<Tensor<T>> {
    multi_head_sa2d_with(&mut Eager, x, p)
}
