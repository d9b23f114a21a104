//! Self attentive convolutions (SAC) and their multiscale fusion (MSAC).
//!
//! A SAC head is a 2D self-attention head whose projection filters are n×m
//! instead of 1×1, so each position attends with the n×m patch around it.
//! Scores, bias, normalization and application are unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_sa2d_with, HeadShape, MultiHeadParams};
use crate::backend::{Backend, Eager};
use crate::error::{invalid, shape_err, Result};
use crate::init;
use crate::params::{ParamKey, ParamTree};
use crate::{Scalar, Tensor};

/// Regular convolution run beside the attention heads and its fusion bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConv<V> {
    /// `d_o × n × m × d`
    pub hr: V,
    /// `d_o × 1 × 1 × 2·d_o`
    pub hy_fuse: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SACParams<V> {
    pub mh: MultiHeadParams<V>,
    pub parallel: Option<ParallelConv<V>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MSACParams<V> {
    pub scales: Vec<SACParams<V>>,
    /// `d_o × 1 × 1 × d_o·L`
    pub hphi: V,
}

/// Hyper-parameters of one MSAC block, as stored in configuration JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsacConfig {
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub heads: usize,
    pub scales: Vec<[usize; 2]>,
    pub parallel_conv: bool,
    pub bias: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MsacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_a == 0 || self.d_o == 0 || self.heads == 0 {
            return invalid("MsacConfig", "d, d_a, d_o and heads must be positive");
        }
        if self.scales.is_empty() {
            return invalid("MsacConfig", "at least one scale is required");
        }
        if self.scales.iter().any(|s| s[0] == 0 || s[1] == 0) {
            return invalid("MsacConfig", "filter sizes must be positive");
        }
        Ok(())
    }

    /// Initializes parameters from the configured seed. `extent` is the
    /// largest image (rows, cols) the relative bias must cover.
    pub fn init<T: Scalar>(&self, extent: (usize, usize)) -> Result<MSACParams<Tensor<T>>> {
        self.init_with(&mut init::rng(self.seed), extent)
    }

    pub fn init_with<T: Scalar>(&self, rng: &mut impl Rng, extent: (usize, usize)) -> Result<MSACParams<Tensor<T>>> {
        self.validate()?;
        let bias = self.bias.then_some(extent);
        let scales = self
            .scales
            .iter()
            .map(|&[n, m]| {
                let shape = HeadShape {
                    d: self.d,
                    d_a: self.d_a,
                    d_o: self.d_o,
                    n,
                    m,
                };
                let mh = MultiHeadParams::init(rng, shape, self.heads, bias)?;
                let parallel = if self.parallel_conv {
                    Some(ParallelConv {
                        hr: init::filter_bank(rng, &[self.d_o], n, m, self.d)?,
                        hy_fuse: init::filter_bank(rng, &[self.d_o], 1, 1, 2 * self.d_o)?,
                    })
                } else {
                    None
                };
                Ok(SACParams { mh, parallel })
            })
            .collect::<Result<Vec<_>>>()?;
        let hphi = init::filter_bank(rng, &[self.d_o], 1, 1, self.d_o * scales.len())?;
        Ok(MSACParams { scales, hphi })
    }
}

impl<V> ParamTree<V> for SACParams<V> {
    type Rebind<U> = SACParams<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> SACParams<U> {
        SACParams {
            mh: self.mh.map_keyed(at, f),
            parallel: self.parallel.as_ref().map(|pc| ParallelConv {
                hr: f(&at.role("hr"), &pc.hr),
                hy_fuse: f(&at.role("hy_fuse"), &pc.hy_fuse),
            }),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        self.mh.visit_keyed(at, f);
        if let Some(pc) = &self.parallel {
            f(&at.role("hr"), &pc.hr);
            f(&at.role("hy_fuse"), &pc.hy_fuse);
        }
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        self.mh.visit_keyed_mut(at, f);
        if let Some(pc) = &mut self.parallel {
            f(&at.role("hr"), &mut pc.hr);
            f(&at.role("hy_fuse"), &mut pc.hy_fuse);
        }
    }
}

impl<V> ParamTree<V> for MSACParams<V> {
    type Rebind<U> = MSACParams<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> MSACParams<U> {
        MSACParams {
            scales: self
                .scales
                .iter()
                .enumerate()
                .map(|(l, s)| s.map_keyed(&at.scale(l), f))
                .collect(),
            hphi: f(&at.role("hphi"), &self.hphi),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        for (l, s) in self.scales.iter().enumerate() {
            s.visit_keyed(&at.scale(l), f);
        }
        f(&at.role("hphi"), &self.hphi);
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        for (l, s) in self.scales.iter_mut().enumerate() {
            s.visit_keyed_mut(&at.scale(l), f);
        }
        f(&at.role("hphi"), &mut self.hphi);
    }
}

impl<V> SACParams<V> {
    /// Filter size (n, m) of the first head's query bank.
    pub fn filter_size<T: Scalar, B: Backend<T, Value = V>>(&self, b: &B) -> Option<(usize, usize)> {
        let s = b.shape(&self.mh.heads.first()?.hq);
        Some((s[1], s[2]))
    }
}

/// Multi-head SAC, optionally fused with a parallel regular convolution:
/// `γ = concat(y, x ⋆ H_R) ⋆ H_Y` when the parallel branch is present.
pub fn sac_with<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, p: &SACParams<B::Value>) -> Result<B::Value> {
    let y = multi_head_sa2d_with(b, x, &p.mh)?;
    let Some(pc) = &p.parallel else {
        return Ok(y);
    };
    let d_o = b.shape(&y)[2];
    let fuse = b.shape(&pc.hy_fuse);
    if fuse.len() != 4 || fuse[3] != 2 * d_o {
        return shape_err("sac", format!("fusion bank {fuse:?} must reduce 2·{d_o} channels"));
    }
    let yr = b.conv_bank(x, &pc.hr)?;
    if b.shape(&yr)[2] != d_o {
        return shape_err("sac", "parallel convolution width differs from attention output");
    }
    let both = b.concat(&[y, yr], 2)?;
    b.conv_bank(&both, &pc.hy_fuse)
}

pub fn sac<T: Scalar>(x: &Tensor<T>, p: &SACParams<Tensor<T>>) -> Result<Tensor<T>> {
    sac_with(&mut Eager, x, p)
}

/// Per-scale outputs concatenated along channels (the super-tensor ψ).
pub fn msac_scales_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    p: &MSACParams<B::Value>,
) -> Result<B::Value> {
    if p.scales.is_empty() {
        return shape_err("msac", "no scales");
    }
    let outs = p.scales.iter().map(|s| sac_with(b, x, s)).collect::<Result<Vec<_>>>()?;
    b.concat(&outs, 2)
}

/// `φ = concat_l(sac_l(x)) ⋆ H_φ`.
pub fn msac_with<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, p: &MSACParams<B::Value>) -> Result<B::Value> {
    let psi = msac_scales_with(b, x, p)?;
    let width = b.shape(&psi)[2];
    let hphi = b.shape(&p.hphi);
    if hphi.len() != 4 || hphi[3] != width {
        return shape_err("msac", format!("hphi {hphi:?} must reduce {width} channels"));
    }
    b.conv_bank(&psi, &p.hphi)
}

pub fn msac<T: Scalar>(x: &Tensor<T>, p: &MSACParams<Tensor<T>>) -> Result<Tensor<T>> {
    msac_with(&mut Eager, x, p)
}

/// MSAC over a sentence: `x` is 1×M×d and every scale is 1×m_l.
pub fn msac_1d_with<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, p: &MSACParams<B::Value>) -> Result<B::Value> {
    let s = b.shape(x);
    if s.len() != 3 || s[0] != 1 {
        return shape_err("msac_1d", format!("input must be 1×M×d, got {s:?}"));
    }
    for (l, scale) in p.scales.iter().enumerate() {
        match scale.filter_size(b) {
            Some((1, m)) if m <= s[1] => {}
            Some((n, m)) => return invalid("msac_1d", format!("scale {l} is {n}×{m}; need 1×m with m ≤ {}", s[1])),
            None => return shape_err("msac_1d", format!("scale {l} has no heads")),
        }
    }
    msac_with(b, x, p)
}

pub fn msac_1d<T: Scalar>(x: &Tensor<T>, p: &MSACParams<Tensor<T>>) -> Result<Tensor<T>> {
    msac_1d_with(&mut Eager, x, p)
}
