//! Central finite differences and the randomized gradient-check registry.

use serde::Serialize;

use super::{Graph, Var};
use crate::apps::{lm, similarity};
use crate::attention::{self, AttentionParams, HeadShape, MultiHeadParams};
use crate::backend::Backend;
use crate::error::{invalid, Error, Result};
use crate::init::{self, SeededRng};
use crate::params::ParamTree;
use crate::sac::{self, MsacConfig};
use crate::tensor::rel_err;
use crate::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Worst-case disagreement between reverse-mode and finite-difference
/// gradients over every probed coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub probe_count: usize,
}

/// `(f(x + εe_i) - f(x - εe_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps.is_nan() || eps <= T::zero() {
        return invalid("finite_diff_grad", format!("eps must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad probe {i}")));
        }
        out.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

const OPS: &[&str] = &[
    "conv2d",
    "conv_bank",
    "matmul_via_conv",
    "softmax_over_axes",
    "concat_last_axis",
    "self_attention_1d",
    "sa2d_project",
    "sa2d_scores",
    "sa2d_coefficients",
    "sa2d_apply",
    "sa2d",
    "multi_head_sa2d",
    "sac",
    "msac",
    "msac_1d",
    "lm_forward",
    "similarity_score",
];

/// Names accepted by [`grad_check`].
pub fn registered_ops() -> &'static [&'static str] {
    OPS
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    rng.random_range(lo..=hi)
}

fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor<f64>> {
    init::uniform(rng, shape, -1.0, 1.0)
}

/// Reduces a non-scalar output to a scalar with fixed random weights, so no
/// gradient direction is annihilated the way a plain sum would be.
fn probe_loss(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    g.weighted_sum(&out, weights)
}

fn rebuild<P: ParamTree<Tensor<f64>>>(template: &P, vars: &[Var]) -> P::Rebind<Var> {
    let mut it = vars.iter();
    template.map_params(&mut |_, _| *it.next().expect("one variable per parameter"))
}

fn tree_case<P>(
    rng: &mut SeededRng,
    x: Tensor<f64>,
    params: P,
    out_shape: &[usize],
    f: impl Fn(&mut Graph<f64>, Var, &P::Rebind<Var>) -> Result<Var> + 'static,
) -> Result<Case>
where
    P: ParamTree<Tensor<f64>> + 'static,
{
    let w = rand_t(rng, out_shape)?;
    let mut inputs = vec![x];
    inputs.extend(params.flatten());
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let p = rebuild(&params, &v[1..]);
            let out = f(g, v[0], &p)?;
            probe_loss(g, out, &w)
        }),
    })
}

fn make_case(op: &str, rng: &mut SeededRng) -> Result<Case> {
    let (rows, cols) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let d = dim(rng, 1, 3);
    let (d_a, d_o) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let (n, m) = (dim(rng, 1, rows.min(3)), dim(rng, 1, cols.min(3)));
    let shape = HeadShape { d, d_a, d_o, n, m };
    let case = match op {
        "conv2d" => {
            let w = rand_t(rng, &[rows, cols])?;
            Case {
                inputs: vec![rand_t(rng, &[rows, cols, d])?, rand_t(rng, &[n, m, d])?],
                build: Box::new(move |g, v| {
                    let bank = g.reshape(&v[1], &[1, n, m, d])?;
                    let out = g.conv_bank(&v[0], &bank)?;
                    let out = g.reshape(&out, &[rows, cols])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "conv_bank" => {
            let f = dim(rng, 1, 4);
            let w = rand_t(rng, &[rows, cols, f])?;
            Case {
                inputs: vec![rand_t(rng, &[rows, cols, d])?, rand_t(rng, &[f, n, m, d])?],
                build: Box::new(move |g, v| {
                    let out = g.conv_bank(&v[0], &v[1])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "matmul_via_conv" => {
            let w = rand_t(rng, &[d_o, cols])?;
            Case {
                inputs: vec![rand_t(rng, &[d_o, d])?, rand_t(rng, &[d, cols])?],
                build: Box::new(move |g, v| {
                    let out = g.matmul(&v[0], &v[1])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "softmax_over_axes" => {
            let s = [rows, cols, d + 1];
            let w = rand_t(rng, &s)?;
            let axes = if d.is_multiple_of(2) { vec![0, 1] } else { vec![2] };
            Case {
                inputs: vec![init::uniform(rng, &s, -2.0, 2.0)?],
                build: Box::new(move |g, v| {
                    let out = g.softmax(&v[0], &axes)?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "concat_last_axis" => {
            let w = rand_t(rng, &[rows, cols, 6])?;
            Case {
                inputs: vec![
                    rand_t(rng, &[rows, cols, 1])?,
                    rand_t(rng, &[rows, cols, 2])?,
                    rand_t(rng, &[rows, cols, 3])?,
                ],
                build: Box::new(move |g, v| {
                    let out = g.concat(v, 2)?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "self_attention_1d" => {
            let w = rand_t(rng, &[d_o, cols])?;
            Case {
                inputs: vec![
                    rand_t(rng, &[d, cols])?,
                    rand_t(rng, &[d_a, d])?,
                    rand_t(rng, &[d_a, d])?,
                    rand_t(rng, &[d_o, d])?,
                ],
                build: Box::new(move |g, v| {
                    let out = attention::self_attention_1d_with(g, &v[0], &v[1], &v[2], &v[3])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "sa2d_project" => {
            let x = rand_t(rng, &[rows, cols, d])?;
            let p = AttentionParams::init(rng, shape, None)?;
            let wq = rand_t(rng, &[rows, cols, d_a])?;
            let wk = rand_t(rng, &[rows, cols, d_a])?;
            let wv = rand_t(rng, &[rows, cols, d_o])?;
            let mut inputs = vec![x];
            inputs.extend(p.flatten());
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let pv = rebuild(&p, &v[1..]);
                    let (q, k, val) = attention::sa2d_project_with(g, &v[0], &pv)?;
                    let lq = probe_loss(g, q, &wq)?;
                    let lk = probe_loss(g, k, &wk)?;
                    let lv = probe_loss(g, val, &wv)?;
                    let s = g.add(&lq, &lk)?;
                    g.add(&s, &lv)
                }),
            }
        }
        "sa2d_scores" => {
            let w = rand_t(rng, &[rows, cols, rows, cols])?;
            Case {
                inputs: vec![rand_t(rng, &[rows, cols, d_a])?, rand_t(rng, &[rows, cols, d_a])?],
                build: Box::new(move |g, v| {
                    let out = attention::sa2d_scores_with(g, &v[0], &v[1])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "sa2d_coefficients" => {
            let w = rand_t(rng, &[rows, cols, rows, cols])?;
            Case {
                inputs: vec![
                    init::uniform(rng, &[rows, cols, rows, cols], -2.0, 2.0)?,
                    rand_t(rng, &[rows, cols])?,
                ],
                build: Box::new(move |g, v| {
                    let out = attention::sa2d_coefficients_with(g, &v[0], d_a, Some(&v[1]))?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "sa2d_apply" => {
            let w = rand_t(rng, &[rows, cols, d_o])?;
            let logits = rand_t(rng, &[rows, cols, rows, cols])?;
            Case {
                inputs: vec![
                    crate::ops::softmax_over_axes(&logits, &[0, 1])?,
                    rand_t(rng, &[rows, cols, d_o])?,
                ],
                build: Box::new(move |g, v| {
                    let out = attention::sa2d_apply_with(g, &v[0], &v[1])?;
                    probe_loss(g, out, &w)
                }),
            }
        }
        "sa2d" => {
            let x = rand_t(rng, &[rows, cols, d])?;
            let mut p = AttentionParams::init(rng, shape, Some((rows, cols)))?;
            p.bias = Some(init::uniform(rng, &[rows, cols], -0.5, 0.5)?);
            tree_case(rng, x, p, &[rows, cols, d_o], |g, x, p| attention::sa2d_with(g, &x, p))?
        }
        "multi_head_sa2d" => {
            let x = rand_t(rng, &[rows, cols, d])?;
            let heads = dim(rng, 1, 3);
            let p = MultiHeadParams::init(rng, shape, heads, Some((rows, cols)))?;
            tree_case(rng, x, p, &[rows, cols, d_o], |g, x, p| {
                attention::multi_head_sa2d_with(g, &x, p)
            })?
        }
        "sac" => {
            let x = rand_t(rng, &[rows, cols, d])?;
            let cfg = MsacConfig {
                d,
                d_a,
                d_o,
                heads: dim(rng, 1, 2),
                scales: vec![[n, m]],
                parallel_conv: true,
                bias: true,
                seed: 0,
            };
            let p = cfg.init_with::<f64>(rng, (rows, cols))?.scales.remove(0);
            tree_case(rng, x, p, &[rows, cols, d_o], |g, x, p| sac::sac_with(g, &x, p))?
        }
        "msac" => {
            let x = rand_t(rng, &[rows, cols, d])?;
            let cfg = MsacConfig {
                d,
                d_a,
                d_o,
                heads: dim(rng, 1, 2),
                scales: vec![[1, 1], [n, m], [rows.min(2), cols.min(3)]],
                parallel_conv: true,
                bias: true,
                seed: 0,
            };
            let p = cfg.init_with::<f64>(rng, (rows, cols))?;
            tree_case(rng, x, p, &[rows, cols, d_o], |g, x, p| sac::msac_with(g, &x, p))?
        }
        "msac_1d" => {
            let len = dim(rng, 3, 4);
            let x = rand_t(rng, &[1, len, d])?;
            let cfg = MsacConfig {
                d,
                d_a,
                d_o,
                heads: 1,
                scales: vec![[1, 1], [1, 2], [1, 3]],
                parallel_conv: true,
                bias: true,
                seed: 0,
            };
            let p = cfg.init_with::<f64>(rng, (1, len))?;
            tree_case(rng, x, p, &[1, len, d_o], |g, x, p| sac::msac_1d_with(g, &x, p))?
        }
        "lm_forward" => {
            let vocab = dim(rng, 2, 5);
            let len = dim(rng, 3, 4);
            let cfg = lm::LmConfig {
                vocab,
                d,
                d_a,
                d_o,
                heads: 1,
                scales: vec![[1, 1], [1, 2]],
                layers: 1,
                parallel_conv: true,
                bias: true,
                max_len: len,
                seed: 0,
            };
            let model = lm::ToyLm::<Tensor<f64>>::init_with(&cfg, rng)?;
            let tokens: Vec<usize> = (0..len).map(|_| dim(rng, 0, vocab - 1)).collect();
            let targets: Vec<usize> = (0..len).map(|_| dim(rng, 0, vocab - 1)).collect();
            Case {
                inputs: model.flatten(),
                build: Box::new(move |g, v| {
                    let mv = rebuild(&model, v);
                    let logp = lm::lm_forward_with(g, &tokens, &mv)?;
                    g.nll_mean(&logp, &targets)
                }),
            }
        }
        "similarity_score" => {
            let (rows, cols) = (dim(rng, 1, 3), dim(rng, 1, 2));
            let mode = if d.is_multiple_of(2) {
                similarity::AugmentMode::Additive
            } else {
                similarity::AugmentMode::Channel { d_seg: 1 }
            };
            let cfg = similarity::SimilarityConfig {
                rows,
                cols,
                d,
                d_a,
                d_o,
                heads: 1,
                scales: vec![[1, 1], [rows.min(2), 2]],
                layers: 1,
                parallel_conv: true,
                bias: true,
                augmentation: mode,
                seed: 0,
            };
            let mut model = similarity::SimilarityModel::<Tensor<f64>>::init_with(&cfg, rng)?;
            // non-zero head and segments so every parameter carries gradient
            model.score_w = rand_t(rng, &[d_o])?;
            model.augmentation.x_seg = init::uniform(rng, model.augmentation.x_seg.shape(), -0.5, 0.5)?;
            model.augmentation.z_seg = init::uniform(rng, model.augmentation.z_seg.shape(), -0.5, 0.5)?;
            let label = if d.is_multiple_of(2) { 1.0 } else { 0.0 };
            let mut inputs = vec![rand_t(rng, &[rows, cols, d])?, rand_t(rng, &[rows, cols, d])?];
            inputs.extend(model.flatten());
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let mv = rebuild(&model, &v[2..]);
                    let logit = similarity::similarity_logit_with(g, &v[0], &v[1], &mv)?;
                    g.bce_with_logits(&logit, &[label])
                }),
            }
        }
        other => return Err(Error::UnknownOp(other.to_string())),
    };
    Ok(case)
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = (case.build)(&mut g, &vars)?;
    let v = g.value(root).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    Ok(v)
}

fn check_case(case: &Case, eps: f64, report: &mut GradReport) -> Result<()> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = (case.build)(&mut g, &vars)?;
    let grads = g.backward(root)?;
    for (k, (&var, input)) in vars.iter().zip(&case.inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, input);
        let mut probe = case.inputs.clone();
        let numeric = finite_diff_grad(
            |t| {
                probe[k] = t.clone();
                evaluate(case, &probe)
            },
            input,
            eps,
        )?;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            report.max_rel_error = report.max_rel_error.max(rel_err(a, n, REL_FLOOR));
        }
        report.probe_count += input.len();
    }
    Ok(())
}

/// Compares reverse-mode gradients with central finite differences
/// (`eps = 1e-4`) on `trials` random instances of a registered op.
pub fn grad_check(op: &str, trials: usize, seed: u64) -> Result<GradReport> {
    grad_check_eps(op, trials, seed, DEFAULT_EPS)
}

pub fn grad_check_eps(op: &str, trials: usize, seed: u64, eps: f64) -> Result<GradReport> {
    if !OPS.contains(&op) {
        return Err(Error::UnknownOp(op.to_string()));
    }
    if trials == 0 {
        return invalid("grad_check", "trials must be at least 1");
    }
    if eps.is_nan() || eps <= 0.0 {
        return invalid("grad_check", format!("eps must be positive, got {eps}"));
    }
    let mut rng = init::rng(seed);
    let mut report = GradReport {
        op: op.to_string(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        probe_count: 0,
    };
    for _ in 0..trials {
        let case = make_case(op, &mut rng)?;
        check_case(&case, eps, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.5, -1.0, 4.0]).unwrap();
        for eps in [1e-3, 0.25, 2.0] {
            let g = finite_diff_grad(|t| Ok(2.0 * t.data()[0] - 3.0 * t.data()[2]), &x, eps).unwrap();
            assert!((g.data()[0] - 2.0).abs() < 1e-12);
            assert!(g.data()[1].abs() < 1e-12);
            assert!((g.data()[2] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3).is_err());
    }

    #[test]
    fn unknown_op() {
        assert!(matches!(grad_check("nope", 1, 0), Err(Error::UnknownOp(_))));
        assert!(grad_check("conv2d", 0, 0).is_err());
    }
}
