use std::path::Path;

use msac::init;
use msac::io::{read_tensor, write_tensor};
use msac::Tensor;

use crate::{failed, usage, CliResult, Dist, TensorAction};

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(s: &str) -> CliResult<Vec<usize>> {
    let dims = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("bad shape {s:?}: {e}")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(usage(format!("bad shape {s:?}: dimensions must be positive")));
    }
    Ok(dims)
}

fn load(path: &Path) -> CliResult<Tensor<f64>> {
    read_tensor(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn info(t: &Tensor<f64>) -> String {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "shape: {}\nelements: {}\nmin: {min:?}\nmax: {max:?}\nmean: {mean:?}\nstd: {:?}\n",
        format_shape(t.shape()),
        t.len(),
        var.sqrt()
    )
}

/// Header line with the shape, then one value per line in a format that
/// parses back to the identical `f64`.
pub fn dump(t: &Tensor<f64>) -> String {
    let mut s = format!("shape: {}\n", format_shape(t.shape()));
    for v in t.data() {
        s.push_str(&format!("{v:?}\n"));
    }
    s
}

pub fn run(action: &TensorAction, seed: u64) -> CliResult<()> {
    match action {
        TensorAction::Info { path } => print!("{}", info(&load(path)?)),
        TensorAction::Dump { path } => print!("{}", dump(&load(path)?)),
        TensorAction::Random { path, shape, dist } => {
            let shape = parse_shape(shape)?;
            let mut r = init::rng(seed);
            let t: Tensor<f64> = match dist {
                Dist::Uniform => init::uniform(&mut r, &shape, -1.0, 1.0),
                Dist::Normal => init::normal(&mut r, &shape, 1.0),
            }
            .map_err(usage)?;
            write_tensor(path, &t).map_err(failed)?;
            println!("wrote {} ({})", path.display(), format_shape(&shape));
        }
    }
    Ok(())
}
