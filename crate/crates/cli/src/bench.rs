//! Wall-time and analytic cost table for the convolution and attention
//! operators.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;

use msac::attention::sa2d;
use msac::conv::{conv2d_with, conv_macs, ConvKernel};
use msac::init::{self, SeededRng};
use msac::sac::{msac, sac};
use msac::{AttentionParams, HeadShape, MSACParams, MsacConfig, Tensor};

use crate::{failed, usage, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Conv2d,
    Sa2d,
    Sac,
    Msac,
    All,
}

/// One timed configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub operator: String,
    #[serde(rename = "N")]
    pub big_n: usize,
    #[serde(rename = "M")]
    pub big_m: usize,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub scales: usize,
    #[serde(rename = "C")]
    pub heads: usize,
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    /// Median over repeats.
    pub wall_ns: u64,
    pub macs: u64,
    /// `(N·M)²` per head for attention operators, 0 for plain convolution.
    pub score_elements: u64,
    pub peak_live_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub op: BenchOp,
    pub sizes: Option<Vec<usize>>,
    pub repeats: usize,
    pub mem_cap_mib: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    /// Configurations left out because of the memory cap.
    pub skipped: Vec<String>,
    /// `(N, naive ns / patch-matrix ns)` for each conv2d size.
    pub conv_ratios: Vec<(usize, f64)>,
}

const D: usize = 4;
const D_A: usize = 4;
const D_O: usize = 4;
const HEADS: usize = 2;
const FILTER: usize = 3;
const MSAC_SCALES: [[usize; 2]; 3] = [[1, 1], [2, 2], [3, 3]];
const WORD: u64 = std::mem::size_of::<f64>() as u64;

fn default_sizes(op: BenchOp) -> Vec<usize> {
    match op {
        BenchOp::Conv2d => vec![8, 16, 32, 64],
        _ => vec![4, 8, 12, 16],
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    big_n: usize,
    big_m: usize,
    n: usize,
    m: usize,
    heads: usize,
    scales: usize,
}

impl Geometry {
    fn pixels(&self) -> u64 {
        (self.big_n * self.big_m) as u64
    }
}

/// `(N·M)²`, the size of one head's score tensor.
pub fn score_elements(big_n: usize, big_m: usize) -> u64 {
    let p = (big_n * big_m) as u64;
    p * p
}

/// Projections, scores `q·k` for every pair of positions, and the weighted
/// sum of values, for one head with `n×m` filters.
pub fn head_macs(big_n: usize, big_m: usize, n: usize, m: usize, d: usize, d_a: usize, d_o: usize) -> u64 {
    let proj = conv_macs(big_n, big_m, n, m, d, 2 * d_a + d_o);
    let s = score_elements(big_n, big_m);
    proj + s * d_a as u64 + s * d_o as u64
}

fn multi_head_macs(g: &Geometry, d: usize) -> u64 {
    g.heads as u64 * head_macs(g.big_n, g.big_m, g.n, g.m, d, D_A, D_O)
        + conv_macs(g.big_n, g.big_m, 1, 1, g.heads * D_O, D_O)
}

fn sac_macs(g: &Geometry) -> u64 {
    multi_head_macs(g, D)
        + conv_macs(g.big_n, g.big_m, g.n, g.m, D, D_O)
        + conv_macs(g.big_n, g.big_m, 1, 1, 2 * D_O, D_O)
}

/// Upper bound on bytes alive at once during one head's forward pass:
/// input, q, k, v, scores, biased logits, coefficients and output.
fn head_bytes(g: &Geometry, d: usize) -> u64 {
    let p = g.pixels();
    (p * d as u64 + p * (2 * D_A + D_O) as u64 + 3 * score_elements(g.big_n, g.big_m) + p * D_O as u64) * WORD
}

fn random(r: &mut SeededRng, shape: &[usize]) -> CliResult<Tensor<f64>> {
    init::uniform(r, shape, -1.0, 1.0).map_err(failed)
}

fn median_ns(repeats: usize, mut f: impl FnMut() -> msac::Result<()>) -> CliResult<u64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f().map_err(failed)?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

fn record(op: &str, g: Geometry, wall_ns: u64, macs: u64, scores: u64, bytes: u64) -> BenchRecord {
    BenchRecord {
        operator: op.to_string(),
        big_n: g.big_n,
        big_m: g.big_m,
        n: g.n,
        m: g.m,
        scales: g.scales,
        heads: g.heads,
        d: D,
        d_a: if g.heads == 0 { 0 } else { D_A },
        d_o: if g.heads == 0 { 0 } else { D_O },
        wall_ns,
        macs,
        score_elements: scores,
        peak_live_bytes: bytes,
    }
}

fn bench_one(op: BenchOp, side: usize, plan: &Plan, out: &mut BenchOutcome) -> CliResult<()> {
    let cap = plan.mem_cap_mib.saturating_mul(1 << 20);
    let mut r = init::rng(plan.seed ^ side as u64);
    let x = |r: &mut SeededRng, d| random(r, &[side, side, d]);
    let skip = |out: &mut BenchOutcome, name: &str, bytes: u64| {
        out.skipped.push(format!(
            "skipped {name} N=M={side}: needs {:.1} MiB, cap {} MiB",
            bytes as f64 / (1u64 << 20) as f64,
            plan.mem_cap_mib
        ));
    };
    match op {
        BenchOp::Conv2d => {
            let (n, m) = (FILTER.min(side), FILTER.min(side));
            let g = Geometry {
                big_n: side,
                big_m: side,
                n,
                m,
                heads: 0,
                scales: 0,
            };
            let p = g.pixels();
            let bytes = (p * D as u64 + p * (n * m * D) as u64 + (n * m * D) as u64 + p) * WORD;
            if bytes > cap {
                skip(out, "conv2d", bytes);
                return Ok(());
            }
            let xs = x(&mut r, D)?;
            let h = random(&mut r, &[n, m, D])?;
            let naive = conv2d_with(&xs, &h, ConvKernel::Naive).map_err(failed)?;
            let fast = conv2d_with(&xs, &h, ConvKernel::PatchMatrix).map_err(failed)?;
            let dev = fast.max_rel_diff(&naive, 1e-300).map_err(failed)?;
            if dev > 1e-10 {
                return Err(failed(format!("conv2d kernels disagree by {dev:e} at N=M={side}")));
            }
            let macs = conv_macs(side, side, n, m, D, 1);
            let t_naive = median_ns(plan.repeats, || conv2d_with(&xs, &h, ConvKernel::Naive).map(drop))?;
            let t_fast = median_ns(plan.repeats, || conv2d_with(&xs, &h, ConvKernel::PatchMatrix).map(drop))?;
            out.records.push(record("conv2d_naive", g, t_naive, macs, 0, bytes));
            out.records.push(record("conv2d_patch", g, t_fast, macs, 0, bytes));
            out.conv_ratios.push((side, t_naive as f64 / t_fast.max(1) as f64));
        }
        BenchOp::Sa2d => {
            let g = Geometry {
                big_n: side,
                big_m: side,
                n: 1,
                m: 1,
                heads: 1,
                scales: 0,
            };
            let bytes = head_bytes(&g, D);
            if bytes > cap {
                skip(out, "sa2d", bytes);
                return Ok(());
            }
            let s = HeadShape {
                d: D,
                d_a: D_A,
                d_o: D_O,
                n: 1,
                m: 1,
            };
            let p = AttentionParams::init(&mut r, s, Some((side, side))).map_err(failed)?;
            let xs = x(&mut r, D)?;
            let t = median_ns(plan.repeats, || sa2d(&xs, &p).map(drop))?;
            let macs = head_macs(side, side, 1, 1, D, D_A, D_O);
            out.records
                .push(record("sa2d", g, t, macs, score_elements(side, side), bytes));
        }
        BenchOp::Sac => {
            let f = FILTER.min(side);
            let g = Geometry {
                big_n: side,
                big_m: side,
                n: f,
                m: f,
                heads: HEADS,
                scales: 1,
            };
            let bytes = head_bytes(&g, D) + (g.pixels() * (HEADS + 2) as u64 * D_O as u64) * WORD;
            if bytes > cap {
                skip(out, "sac", bytes);
                return Ok(());
            }
            let cfg = config(vec![[f, f]]);
            let p: MSACParams<Tensor<f64>> = cfg.init_with(&mut r, (side, side)).map_err(failed)?;
            let xs = x(&mut r, D)?;
            let t = median_ns(plan.repeats, || sac(&xs, &p.scales[0]).map(drop))?;
            out.records
                .push(record("sac", g, t, sac_macs(&g), score_elements(side, side), bytes));
        }
        BenchOp::Msac => {
            let scales: Vec<[usize; 2]> = MSAC_SCALES.iter().map(|&[a, b]| [a.min(side), b.min(side)]).collect();
            let big = scales.iter().map(|s| s[0]).max().unwrap_or(1);
            let g = Geometry {
                big_n: side,
                big_m: side,
                n: big,
                m: big,
                heads: HEADS,
                scales: scales.len(),
            };
            let bytes = head_bytes(&g, D) + (g.pixels() * ((HEADS + 3) * scales.len()) as u64 * D_O as u64) * WORD;
            if bytes > cap {
                skip(out, "msac", bytes);
                return Ok(());
            }
            let cfg = config(scales.clone());
            let p: MSACParams<Tensor<f64>> = cfg.init_with(&mut r, (side, side)).map_err(failed)?;
            let xs = x(&mut r, D)?;
            let t = median_ns(plan.repeats, || msac(&xs, &p).map(drop))?;
            let macs = scales
                .iter()
                .map(|&[n, m]| sac_macs(&Geometry { n, m, ..g }))
                .sum::<u64>()
                + conv_macs(side, side, 1, 1, scales.len() * D_O, D_O);
            out.records
                .push(record("msac", g, t, macs, score_elements(side, side), bytes));
        }
        BenchOp::All => unreachable!("expanded by run"),
    }
    Ok(())
}

fn config(scales: Vec<[usize; 2]>) -> MsacConfig {
    MsacConfig {
        d: D,
        d_a: D_A,
        d_o: D_O,
        heads: HEADS,
        scales,
        parallel_conv: true,
        bias: true,
        seed: 0,
    }
}

pub fn run(plan: &Plan) -> CliResult<BenchOutcome> {
    if plan.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    if plan.sizes.as_ref().is_some_and(|s| s.is_empty() || s.contains(&0)) {
        return Err(usage("--sizes must list positive image sides"));
    }
    let ops = match plan.op {
        BenchOp::All => vec![BenchOp::Conv2d, BenchOp::Sa2d, BenchOp::Sac, BenchOp::Msac],
        op => vec![op],
    };
    let mut out = BenchOutcome::default();
    for op in ops {
        for side in plan.sizes.clone().unwrap_or_else(|| default_sizes(op)) {
            bench_one(op, side, plan, &mut out)?;
        }
    }
    Ok(out)
}

pub fn write_csv(records: &[BenchRecord], sink: impl Write) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r).map_err(failed)?;
    }
    w.flush().map_err(failed)
}

/// Runs the plan and writes CSV to `out` (or stdout); notes go to stderr.
pub fn run_to(plan: &Plan, out: Option<&Path>) -> CliResult<()> {
    let outcome = run(plan)?;
    match out {
        Some(path) => write_csv(&outcome.records, File::create(path).map_err(failed)?)?,
        None => write_csv(&outcome.records, io::stdout().lock())?,
    }
    for note in &outcome.skipped {
        eprintln!("note: {note}");
    }
    for (side, ratio) in &outcome.conv_ratios {
        eprintln!("conv2d N=M={side}: naive/patch-matrix time ratio {ratio:.2}");
    }
    Ok(())
}
