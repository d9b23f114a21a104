//! Full-batch plain gradient descent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::ParamTree;
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Outcome of a monitor call after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// One gradient-descent step: builds the loss on a fresh tape, back-propagates
/// and applies `p -= lr * grad` to every parameter. Returns the loss before
/// the update.
pub fn step<T, P, F>(params: &mut P, lr: T, loss_fn: &F) -> Result<T>
where
    T: Scalar,
    P: ParamTree<Tensor<T>>,
    F: Fn(&mut Graph<T>, &P::Rebind<Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let vars = params.map_params(&mut |_, t| {
        let v = g.leaf(t.clone());
        leaves.push(v);
        v
    });
    let root = loss_fn(&mut g, &vars)?;
    let loss = g.value(root).data()[0];
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = g.backward(root)?;
    // map and visit traverse parameters in the same order
    let mut leaf = 0;
    let mut failure = None;
    params.visit_params_mut(&mut |_, t| {
        if let Some(gr) = grads.get(leaves[leaf]) {
            if let Err(e) = t.axpy(-lr, gr) {
                failure.get_or_insert(e);
            }
        }
        leaf += 1;
    });
    failure.map_or(Ok(loss), Err)
}

/// Runs `config.steps` steps, calling `monitor(step, loss, params)` after
/// each update. A non-finite loss stops training with [`Error::Diverged`],
/// which carries the losses recorded so far.
pub fn train_with_monitor<T, P, F>(
    params: &mut P,
    config: &TrainConfig,
    loss_fn: F,
    mut monitor: impl FnMut(usize, T, &P) -> Flow,
) -> Result<Vec<T>>
where
    T: Scalar,
    P: ParamTree<Tensor<T>>,
    F: Fn(&mut Graph<T>, &P::Rebind<Var>) -> Result<Var>,
{
    if !config.lr.is_finite() || config.lr < 0.0 {
        return invalid(
            "train",
            format!("learning rate must be finite and non-negative, got {}", config.lr),
        );
    }
    if config.steps == 0 {
        return invalid("train", "steps must be positive");
    }
    let lr = T::of(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    for s in 0..config.steps {
        let loss = step(params, lr, &loss_fn)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: s,
                losses: losses.iter().map(|l: &T| l.as_f64()).collect(),
            });
        }
        losses.push(loss);
        if monitor(s, loss, params) == Flow::Stop {
            break;
        }
    }
    Ok(losses)
}

pub fn train<T, P, F>(params: &mut P, config: &TrainConfig, loss_fn: F) -> Result<Vec<T>>
where
    T: Scalar,
    P: ParamTree<Tensor<T>>,
    F: Fn(&mut Graph<T>, &P::Rebind<Var>) -> Result<Var>,
{
    train_with_monitor(params, config, loss_fn, |_, _, _| Flow::Continue)
}
