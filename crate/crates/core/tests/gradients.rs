//! Reverse-mode gradients against central finite differences.

use msac::attention::sa2d_with;
use msac::autodiff::{finite_diff_grad, grad_check, grad_check_eps, registered_ops, DEFAULT_EPS, REL_FLOOR};
use msac::init::{self, rng};
use msac::sac::msac_with;
use msac::{
    rel_err, AttentionParams, Backend, Eager, Error, Graph, HeadShape, MSACParams, MsacConfig, ParamTree, Tensor,
};
use proptest::prelude::*;

fn max_rel(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(n.data())
        .map(|(&a, &n)| rel_err(a, n, REL_FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn every_registered_op_passes() {
    for op in registered_ops() {
        let r = grad_check(op, 3, 42).unwrap();
        assert!(r.max_rel_error < 1e-4, "{op}: {r:?}");
        assert!(r.probe_count > 0);
    }
}

#[test]
fn check_argument_errors() {
    assert!(matches!(grad_check("nope", 1, 0), Err(Error::UnknownOp(_))));
    assert!(grad_check("sa2d", 0, 0).is_err());
    assert!(grad_check_eps("sa2d", 1, 0, 0.0).is_err());
    assert!(grad_check_eps("sa2d", 1, 0, -1e-4).is_err());
}

#[test]
fn sa2d_input_gradient_under_sum_loss() {
    let mut r = rng(21);
    let s = HeadShape {
        d: 2,
        d_a: 2,
        d_o: 2,
        n: 1,
        m: 1,
    };
    let p: AttentionParams<Tensor<f64>> = AttentionParams::init(&mut r, s, None).unwrap();
    let x: Tensor<f64> = init::uniform(&mut r, &[2, 2, 2], -1.0, 1.0).unwrap();

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pv = p.map_params(&mut |_, t| g.leaf(t.clone()));
    let y = sa2d_with(&mut g, &xv, &pv).unwrap();
    let loss = g.sum(&y).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get_or_zeros(xv, &x);

    let numeric = finite_diff_grad(|xp| Ok(sa2d_with(&mut Eager, xp, &p)?.sum()), &x, DEFAULT_EPS).unwrap();
    assert!(max_rel(&analytic, &numeric) < 1e-4);
}

fn msac_param_grads(x: &Tensor<f64>, p: &MSACParams<Tensor<f64>>, w: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pv = p.map_params(&mut |_, t| g.leaf(t.clone()));
    let y = msac_with(&mut g, &xv, &pv).unwrap();
    let loss = g.weighted_sum(&y, w).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut out = Vec::new();
    pv.visit_params(&mut |_, v| out.push(grads.get_or_zeros(*v, g.value(*v))));
    out
}

#[test]
fn msac_parameter_gradients() {
    let cfg = MsacConfig {
        d: 2,
        d_a: 2,
        d_o: 2,
        heads: 2,
        scales: vec![[1, 1], [2, 2]],
        parallel_conv: true,
        bias: true,
        seed: 4,
    };
    let mut r = rng(22);
    let mut p: MSACParams<Tensor<f64>> = cfg.init((3, 3)).unwrap();
    p.visit_params_mut(&mut |_, t| *t = init::uniform(&mut r, t.shape(), -1.0, 1.0).unwrap());
    let x: Tensor<f64> = init::uniform(&mut r, &[3, 3, 2], -1.0, 1.0).unwrap();
    let w: Tensor<f64> = init::uniform(&mut r, &[3, 3, 2], -1.0, 1.0).unwrap();
    let analytic = msac_param_grads(&x, &p, &w);

    let count = analytic.len();
    for k in 0..count {
        let mut slots = Vec::new();
        p.visit_params(&mut |_, t| slots.push(t.clone()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut i = 0;
                let q = p.map_params(&mut |_, t| {
                    i += 1;
                    if i - 1 == k {
                        probe.clone()
                    } else {
                        t.clone()
                    }
                });
                let y = msac_with(&mut Eager, &x, &q)?;
                Ok(y.zip_map(&w, |a, b| a * b)?.sum())
            },
            &slots[k],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(max_rel(&analytic[k], &numeric) < 1e-4, "parameter {k}");
    }

    // bitwise reproducible
    assert_eq!(analytic, msac_param_grads(&x, &p, &w));
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let y = g.add(&x, &x).unwrap();
    let z = g.add(&y, &x).unwrap();
    let loss = g.sum(&z).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::zeros(&[2, 2]).unwrap());
    assert!(g.backward(x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_gradient_slices_sum_to_zero(
        dims in prop::collection::vec(1usize..=4, 2..=4), seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x: Tensor<f64> = init::uniform(&mut r, &dims, -3.0, 3.0).unwrap();
        let w: Tensor<f64> = init::uniform(&mut r, &dims, -1.0, 1.0).unwrap();
        let axes = [0usize, 1];
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let s = g.softmax(&xv, &axes).unwrap();
        let loss = g.weighted_sum(&s, &w).unwrap();
        let grad = g.backward(loss).unwrap().get_or_zeros(xv, &x);
        let inner: usize = dims[2..].iter().product();
        for k in 0..inner {
            let total: f64 = (0..dims[0] * dims[1]).map(|o| grad.data()[o * inner + k]).sum();
            prop_assert!(total.abs() <= 1e-10);
        }
    }
}
