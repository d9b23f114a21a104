//! Randomized equivalence suites with worst-case deviation reports.

use clap::ValueEnum;
use rand::Rng;
use serde::Serialize;

use msac::attention::{sa2d, self_attention_1d};
use msac::conv::matmul_via_conv;
use msac::init::{self, SeededRng};
use msac::sac::{msac, sac};
use msac::{rel_err, AttentionParams, HeadShape, MSACParams, MsacConfig, MultiHeadParams, SACParams, Tensor};

use crate::{usage, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// matmul through a convolution bank vs a dense product, integer inputs
    Lemma1,
    /// 1×1 single-head SAC without the parallel branch vs 2D attention
    SacSa2d,
    /// 2D attention on 1×M inputs with 1×1 filters vs 1D attention
    #[value(name = "sa2d-1d")]
    Sa2d1d,
    /// single-scale MSAC with a basis fusion bank vs SAC
    MsacSac,
    All,
}

impl Suite {
    fn members(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Lemma1, Suite::SacSa2d, Suite::Sa2d1d, Suite::MsacSac],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::SacSa2d => "sac-sa2d",
            Suite::Sa2d1d => "sa2d-1d",
            Suite::MsacSac => "msac-sac",
            Suite::All => "all",
        }
    }

    /// Relative tolerance; matmul on small integers must be exact.
    pub fn default_tol(self) -> f64 {
        match self {
            Suite::Lemma1 => 0.0,
            _ => 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

struct Worst {
    abs: f64,
    rel: f64,
}

impl Worst {
    fn add(&mut self, got: &Tensor<f64>, want: &Tensor<f64>) {
        assert_eq!(got.shape(), want.shape());
        for (&a, &b) in got.data().iter().zip(want.data()) {
            self.abs = self.abs.max((a - b).abs());
            self.rel = self.rel.max(rel_err(a, b, f64::MIN_POSITIVE));
        }
    }
}

fn dense_matmul(w: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (rows, inner, cols) = (w.shape()[0], w.shape()[1], x.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let a = w.data()[i * inner + k];
            for j in 0..cols {
                out[i * cols + j] += a * x.data()[k * cols + j];
            }
        }
    }
    Tensor::new(vec![rows, cols], out).expect("dense product shape")
}

fn uni(r: &mut SeededRng, shape: &[usize]) -> msac::Result<Tensor<f64>> {
    init::uniform(r, shape, -1.0, 1.0)
}

fn trial(suite: Suite, r: &mut SeededRng, worst: &mut Worst) -> msac::Result<()> {
    match suite {
        Suite::Lemma1 => {
            let (dp, d, n) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
            let w = init::integers(r, &[dp, d], -9, 9)?;
            let x = init::integers(r, &[d, n], -9, 9)?;
            worst.add(&matmul_via_conv(&w, &x)?, &dense_matmul(&w, &x));
        }
        Suite::Sa2d1d => {
            let (len, d, d_a, d_o) = (
                r.random_range(1..=8),
                r.random_range(1..=4),
                r.random_range(1..=4),
                r.random_range(1..=4),
            );
            let p = AttentionParams::init(
                r,
                HeadShape {
                    d,
                    d_a,
                    d_o,
                    n: 1,
                    m: 1,
                },
                None,
            )?;
            let x = uni(r, &[1, len, d])?;
            let xt = x.reshape(&[len, d])?.transpose()?;
            let dense = |h: &Tensor<f64>| h.reshape(&[h.shape()[0], d]);
            let y1 = self_attention_1d(&xt, &dense(&p.hq)?, &dense(&p.hk)?, &dense(&p.hv)?)?;
            worst.add(&sa2d(&x, &p)?, &y1.transpose()?.reshape(&[1, len, d_o])?);
        }
        Suite::SacSa2d => {
            let (n, m) = (r.random_range(1..=6), r.random_range(1..=6));
            let s = HeadShape {
                d: r.random_range(1..=4),
                d_a: r.random_range(1..=4),
                d_o: r.random_range(1..=4),
                n: 1,
                m: 1,
            };
            let mut head = AttentionParams::init(r, s, Some((n, m)))?;
            head.bias = head.bias.map(|b| uni(r, b.shape())).transpose()?;
            let p = SACParams {
                mh: MultiHeadParams {
                    heads: vec![head.clone()],
                    hy: init::basis_bank(s.d_o, s.d_o)?,
                },
                parallel: None,
            };
            let x = uni(r, &[n, m, s.d])?;
            worst.add(&sac(&x, &p)?, &sa2d(&x, &head)?);
        }
        Suite::MsacSac => {
            let (n, m) = (r.random_range(1..=5), r.random_range(1..=5));
            let cfg = MsacConfig {
                d: r.random_range(1..=3),
                d_a: r.random_range(1..=3),
                d_o: r.random_range(1..=3),
                heads: r.random_range(1..=3),
                scales: vec![[r.random_range(1..=n.min(3)), r.random_range(1..=m.min(3))]],
                parallel_conv: r.random_bool(0.5),
                bias: true,
                seed: r.random(),
            };
            let mut p: MSACParams<Tensor<f64>> = cfg.init((n, m))?;
            p.hphi = init::basis_bank(cfg.d_o, cfg.d_o)?;
            let x = uni(r, &[n, m, cfg.d])?;
            worst.add(&msac(&x, &p)?, &sac(&x, &p.scales[0])?);
        }
        Suite::All => unreachable!("expanded by Suite::members"),
    }
    Ok(())
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64, tol: Option<f64>) -> msac::Result<SuiteReport> {
    let mut r = init::rng(seed);
    let mut worst = Worst { abs: 0.0, rel: 0.0 };
    for _ in 0..trials {
        trial(suite, &mut r, &mut worst)?;
    }
    let tolerance = tol.unwrap_or(suite.default_tol());
    Ok(SuiteReport {
        suite: suite.name(),
        trials,
        seed,
        max_abs_deviation: worst.abs,
        max_rel_deviation: worst.rel,
        tolerance,
        pass: worst.rel <= tolerance,
    })
}

pub fn run(suite: Suite, trials: usize, seed: u64, tol: Option<f64>) -> CliResult<VerifyReport> {
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if let Some(t) = tol {
        if t.is_nan() || t < 0.0 {
            return Err(usage(format!("--tol must be non-negative, got {t}")));
        }
    }
    let suites = suite
        .members()
        .into_iter()
        .map(|s| run_suite(s, trials, seed, tol))
        .collect::<msac::Result<Vec<_>>>()
        .map_err(crate::failed)?;
    let pass = suites.iter().all(|s| s.pass);
    Ok(VerifyReport { suites, pass })
}
