//! Reverse-mode differentiation over the [`Backend`] primitives.
//!
//! A [`Graph`] is a tape: each node stores its value, the operation that
//! produced it and its parents. Parents always precede their children, so the
//! tape order is a topological order and the graph cannot contain a cycle.

mod check;

pub use check::{finite_diff_grad, grad_check, grad_check_eps, registered_ops, GradReport, DEFAULT_EPS, REL_FLOOR};

use crate::backend::{self, Backend};
use crate::error::{invalid, shape_err, Result};
use crate::ops::{self, slice_groups};
use crate::{conv, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    ConvBank,
    Reshape,
    Concat { axis: usize },
    Transpose,
    MatMul,
    Add,
    Scale(T),
    Softmax { axes: Vec<usize> },
    LogSoftmax { axes: Vec<usize> },
    RelativeBias { rows: usize, cols: usize },
    Attend,
    Sum,
    WeightedSum(Tensor<T>),
    MeanLeading { k: usize },
    GatherRows { ids: Vec<usize> },
    NllMean { targets: Vec<usize> },
    Sigmoid,
    BceWithLogits { targets: Vec<T> },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::ConvBank => "conv_bank",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Transpose => "transpose",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::RelativeBias { .. } => "relative_bias",
            Op::Attend => "attend",
            Op::Sum => "sum",
            Op::WeightedSum(_) => "weighted_sum",
            Op::MeanLeading { .. } => "mean_leading",
            Op::GatherRows { .. } => "gather_rows",
            Op::NllMean { .. } => "nll_mean",
            Op::Sigmoid => "sigmoid",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    parents: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node that influences it.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` does not reach the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()).expect("shape of an existing tensor"))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: Vec<Var>) -> Var {
        self.nodes.push(Node { value, op, parents });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: &Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Propagates `d root / d node` to every node reachable from `root`.
    /// Fan-out contributions are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return invalid("backward", format!("node {} not in graph", root.0));
        }
        if self.nodes[root.0].value.len() != 1 {
            return invalid(
                "backward",
                format!("root must be scalar, has shape {:?}", self.nodes[root.0].value.shape()),
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape())?);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let contributions = self.vjp(node, &g)?;
            for (parent, pg) in node.parents.iter().zip(contributions) {
                debug_assert!(parent.0 < id);
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(T::one(), &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product: gradients for each parent given the node's gradient.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let p = |i: usize| &self.nodes[node.parents[i].0].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::ConvBank => {
                let (dx, dh) = conv::conv_bank_backward(p(0), p(1), g)?;
                vec![dx, dh]
            }
            Op::Reshape => vec![g.reshape(p(0).shape())?],
            Op::Concat { axis } => {
                let sizes: Vec<usize> = node.parents.iter().map(|v| self.val(v).shape()[*axis]).collect();
                crate::tensor::split(g, *axis, &sizes)?
            }
            Op::Transpose => vec![g.transpose()?],
            Op::MatMul => {
                // y = w x
                let dw = ops::matmul_dense(g, &p(1).transpose()?)?;
                let dx = ops::matmul_dense(&p(0).transpose()?, g)?;
                vec![dw, dx]
            }
            Op::Add => vec![g.clone(), g.clone()],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::Softmax { axes } => {
                let (ids, groups) = slice_groups(y.shape(), axes)?;
                let mut dot = vec![T::zero(); groups];
                for ((&gy, &yy), &gid) in g.data().iter().zip(y.data()).zip(&ids) {
                    dot[gid] += gy * yy;
                }
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(&ids)
                    .map(|((&gy, &yy), &gid)| yy * (gy - dot[gid]))
                    .collect();
                vec![Tensor::new(y.shape().to_vec(), dx)?]
            }
            Op::LogSoftmax { axes } => {
                let (ids, groups) = slice_groups(y.shape(), axes)?;
                let mut total = vec![T::zero(); groups];
                for (&gy, &gid) in g.data().iter().zip(&ids) {
                    total[gid] += gy;
                }
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(&ids)
                    .map(|((&gy, &ly), &gid)| gy - ly.exp() * total[gid])
                    .collect();
                vec![Tensor::new(y.shape().to_vec(), dx)?]
            }
            Op::RelativeBias { rows, cols } => {
                vec![ops::relative_bias_backward(p(0).shape(), *rows, *cols, g)?]
            }
            Op::Attend => {
                let (da, dv) = ops::attend_backward(p(0), p(1), g)?;
                vec![da, dv]
            }
            Op::Sum => vec![Tensor::full(p(0).shape(), g.data()[0])?],
            Op::WeightedSum(w) => vec![w.scale(g.data()[0])],
            Op::MeanLeading { k } => {
                let x = p(0);
                let count: usize = x.shape()[..*k].iter().product();
                let inv = T::one() / T::of(count as f64);
                let inner = g.len();
                let dx = (0..x.len()).map(|i| g.data()[i % inner] * inv).collect();
                vec![Tensor::new(x.shape().to_vec(), dx)?]
            }
            Op::GatherRows { ids } => {
                let table = p(0);
                let width = table.shape()[1];
                let mut dt = Tensor::zeros(table.shape())?;
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..width {
                        dt.data_mut()[id * width + c] += g.data()[row * width + c];
                    }
                }
                vec![dt]
            }
            Op::NllMean { targets } => {
                let logp = p(0);
                let v = logp.shape()[1];
                let mut d = Tensor::zeros(logp.shape())?;
                let w = -g.data()[0] / T::of(targets.len() as f64);
                for (row, &t) in targets.iter().enumerate() {
                    d.data_mut()[row * v + t] = w;
                }
                vec![d]
            }
            Op::Sigmoid => vec![g.zip_map(y, |gy, s| gy * s * (T::one() - s))?],
            Op::BceWithLogits { targets } => {
                let z = p(0);
                let w = g.data()[0] / T::of(targets.len() as f64);
                let d = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zz, &t)| w * (ops::sigmoid(zz) - t))
                    .collect();
                vec![Tensor::new(z.shape().to_vec(), d)?]
            }
        })
    }
}

impl<T: Scalar> Backend<T> for Graph<T> {
    type Value = Var;

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.val(v).shape().to_vec()
    }

    fn conv_bank(&mut self, x: &Var, h: &Var) -> Result<Var> {
        let out = conv::conv_bank(self.val(x), self.val(h))?;
        Ok(self.push(out, Op::ConvBank, vec![*x, *h]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape, vec![*x]))
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| self.val(v)).collect();
        let out = crate::tensor::concat(&refs, axis)?;
        Ok(self.push(out, Op::Concat { axis }, xs.to_vec()))
    }

    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let out = self.val(x).transpose()?;
        Ok(self.push(out, Op::Transpose, vec![*x]))
    }

    fn matmul(&mut self, w: &Var, x: &Var) -> Result<Var> {
        let out = conv::matmul_via_conv(self.val(w), self.val(x))?;
        Ok(self.push(out, Op::MatMul, vec![*w, *x]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add, vec![*a, *b]))
    }

    fn scale(&mut self, x: &Var, c: T) -> Result<Var> {
        let out = self.val(x).scale(c);
        Ok(self.push(out, Op::Scale(c), vec![*x]))
    }

    fn softmax(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let out = ops::softmax_over_axes(self.val(x), axes)?;
        Ok(self.push(out, Op::Softmax { axes: axes.to_vec() }, vec![*x]))
    }

    fn log_softmax(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let out = ops::log_softmax_over_axes(self.val(x), axes)?;
        Ok(self.push(out, Op::LogSoftmax { axes: axes.to_vec() }, vec![*x]))
    }

    fn relative_bias(&mut self, b: &Var, rows: usize, cols: usize) -> Result<Var> {
        let out = ops::relative_bias_field(self.val(b), rows, cols)?;
        Ok(self.push(out, Op::RelativeBias { rows, cols }, vec![*b]))
    }

    fn attend(&mut self, a: &Var, v: &Var) -> Result<Var> {
        let out = ops::attend(self.val(a), self.val(v))?;
        Ok(self.push(out, Op::Attend, vec![*a, *v]))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(x).sum());
        Ok(self.push(out, Op::Sum, vec![*x]))
    }

    fn weighted_sum(&mut self, x: &Var, w: &Tensor<T>) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape() != w.shape() {
            return shape_err("weighted_sum", format!("{:?} vs {:?}", xv.shape(), w.shape()));
        }
        let out = Tensor::scalar(xv.zip_map(w, |a, b| a * b)?.sum());
        Ok(self.push(out, Op::WeightedSum(w.clone()), vec![*x]))
    }

    fn mean_leading(&mut self, x: &Var, k: usize) -> Result<Var> {
        let out = ops::mean_leading(self.val(x), k)?;
        Ok(self.push(out, Op::MeanLeading { k }, vec![*x]))
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.val(table), ids)?;
        Ok(self.push(out, Op::GatherRows { ids: ids.to_vec() }, vec![*table]))
    }

    fn nll_mean(&mut self, logp: &Var, targets: &[usize]) -> Result<Var> {
        let out = backend::nll_mean(self.val(logp), targets)?;
        Ok(self.push(
            out,
            Op::NllMean {
                targets: targets.to_vec(),
            },
            vec![*logp],
        ))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = self.val(x).map(ops::sigmoid);
        Ok(self.push(out, Op::Sigmoid, vec![*x]))
    }

    fn bce_with_logits(&mut self, logits: &Var, targets: &[T]) -> Result<Var> {
        let out = backend::bce_mean(self.val(logits), targets)?;
        Ok(self.push(
            out,
            Op::BceWithLogits {
                targets: targets.to_vec(),
            },
            vec![*logits],
        ))
    }
}
