use msac::autodiff::{grad_check_eps, registered_ops};
use msac::{Error, GradReport};

use crate::{failed, usage, CliResult};

/// Checks `op` (or every registered op for `all`) and prints one JSON
/// [`GradReport`] per line.
pub fn run(op: &str, trials: usize, seed: u64, eps: f64, tol: f64) -> CliResult<()> {
    let reports = check(op, trials, seed, eps, tol)?;
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| r.max_rel_error.is_nan() || r.max_rel_error >= tol)
        .map(|r| r.op.as_str())
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(failed(format!("gradients outside tolerance {tol}: {}", bad.join(", "))))
    }
}

pub fn check(op: &str, trials: usize, seed: u64, eps: f64, tol: f64) -> CliResult<Vec<GradReport>> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(usage(format!("--eps must be positive, got {eps}")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(usage(format!("--tol must be positive, got {tol}")));
    }
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let ops: Vec<&str> = if op == "all" {
        registered_ops().to_vec()
    } else {
        vec![op]
    };
    let mut out = Vec::new();
    for name in ops {
        let report = grad_check_eps(name, trials, seed, eps).map_err(|e| match e {
            Error::UnknownOp(o) => usage(format!(
                "unknown op {o:?}; expected `all` or one of: {}",
                registered_ops().join(", ")
            )),
            e => failed(e),
        })?;
        println!("{}", serde_json::to_string(&report).map_err(failed)?);
        out.push(report);
    }
    Ok(out)
}
