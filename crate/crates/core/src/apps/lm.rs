//! Character-level toy language model built from sentence-mode MSAC.
//!
//! Attention is bidirectional (no causal mask), so the training objective
//! here is a fitting task, not generative modelling.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backend::{Backend, Eager};
use crate::error::{invalid, Result};
use crate::init;
use crate::params::{ParamKey, ParamTree};
use crate::sac::{msac_1d_with, MSACParams, MsacConfig};
use crate::{Scalar, Tensor};

use super::train::{self, Flow, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub heads: usize,
    /// Sentence scales `[1, m_l]`.
    pub scales: Vec<[usize; 2]>,
    #[serde(default = "one")]
    pub layers: usize,
    pub parallel_conv: bool,
    pub bias: bool,
    /// Longest sequence the relative bias covers.
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Embedding table, a stack of MSAC blocks with 1×m_l scales, and an output
/// projection to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm<V> {
    /// `vocab × d`
    pub embedding: V,
    pub stack: Vec<MSACParams<V>>,
    /// `vocab × d_o`
    pub projection: V,
}

impl LmConfig {
    fn block(&self, layer: usize) -> MsacConfig {
        MsacConfig {
            d: if layer == 0 { self.d } else { self.d_o },
            d_a: self.d_a,
            d_o: self.d_o,
            heads: self.heads,
            scales: self.scales.clone(),
            parallel_conv: self.parallel_conv,
            bias: self.bias,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return invalid("LmConfig", "vocab must be at least 2");
        }
        if self.layers == 0 || self.max_len == 0 {
            return invalid("LmConfig", "layers and max_len must be positive");
        }
        if let Some(s) = self.scales.iter().find(|s| s[0] != 1 || s[1] > self.max_len) {
            return invalid("LmConfig", format!("scale {s:?} is not 1×m with m ≤ max_len"));
        }
        Ok(())
    }
}

impl<T: Scalar> ToyLm<Tensor<T>> {
    pub fn init(cfg: &LmConfig) -> Result<Self> {
        Self::init_with(cfg, &mut init::rng(cfg.seed))
    }

    pub fn init_with(cfg: &LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = init::uniform(rng, &[cfg.vocab, cfg.d], -1.0, 1.0)?;
        let stack = (0..cfg.layers)
            .map(|l| cfg.block(l).init_with(rng, (1, cfg.max_len)))
            .collect::<Result<Vec<_>>>()?;
        let s = 1.0 / (cfg.d_o as f64).sqrt();
        let projection = init::uniform(rng, &[cfg.vocab, cfg.d_o], -s, s)?;
        Ok(Self {
            embedding,
            stack,
            projection,
        })
    }
}

impl<V> ParamTree<V> for ToyLm<V> {
    type Rebind<U> = ToyLm<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> ToyLm<U> {
        ToyLm {
            embedding: f(&at.role("embedding"), &self.embedding),
            stack: self.stack.map_keyed(at, f),
            projection: f(&at.role("projection"), &self.projection),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        f(&at.role("embedding"), &self.embedding);
        self.stack.visit_keyed(at, f);
        f(&at.role("projection"), &self.projection);
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        f(&at.role("embedding"), &mut self.embedding);
        self.stack.visit_keyed_mut(at, f);
        f(&at.role("projection"), &mut self.projection);
    }
}

/// Per-position log-probabilities, `len × vocab`.
pub fn lm_forward_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    tokens: &[usize],
    model: &ToyLm<B::Value>,
) -> Result<B::Value> {
    if tokens.is_empty() {
        return invalid("lm_forward", "empty token sequence");
    }
    let table = b.shape(&model.embedding);
    if let Some(&t) = tokens.iter().find(|&&t| t >= table[0]) {
        return invalid("lm_forward", format!("token id {t} outside vocabulary of {}", table[0]));
    }
    let len = tokens.len();
    let rows = b.gather_rows(&model.embedding, tokens)?;
    let mut h = b.reshape(&rows, &[1, len, table[1]])?;
    for block in &model.stack {
        h = msac_1d_with(b, &h, block)?;
    }
    let proj = b.shape(&model.projection);
    let bank = b.reshape(&model.projection, &[proj[0], 1, 1, proj[1]])?;
    let logits = b.conv_bank(&h, &bank)?;
    let logits = b.reshape(&logits, &[len, proj[0]])?;
    b.log_softmax(&logits, &[1])
}

pub fn lm_forward<T: Scalar>(tokens: &[usize], model: &ToyLm<Tensor<T>>) -> Result<Tensor<T>> {
    lm_forward_with(&mut Eager, tokens, model)
}

/// Mean cross-entropy of `targets[i]` under the distribution at position `i`.
pub fn lm_loss_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    tokens: &[usize],
    targets: &[usize],
    model: &ToyLm<B::Value>,
) -> Result<B::Value> {
    let logp = lm_forward_with(b, tokens, model)?;
    b.nll_mean(&logp, targets)
}

/// Sorted set of distinct characters in a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        Self {
            chars: text.chars().collect::<BTreeSet<_>>().into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars.binary_search(&c).map_err(|_| crate::Error::Invalid {
                    op: "CharVocab::encode",
                    detail: format!("character {c:?} not in vocabulary"),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

/// Next-character pairs of a sequence: inputs `ids[..n-1]`, targets `ids[1..]`.
pub fn next_char_pairs(ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.len() < 2 {
        return invalid("next_char_pairs", "need at least two tokens");
    }
    Ok((ids[..ids.len() - 1].to_vec(), ids[1..].to_vec()))
}

/// Trains `model` to predict each next character of `ids` by plain gradient
/// descent; returns the per-step loss curve.
pub fn train_lm<T: Scalar>(
    model: &mut ToyLm<Tensor<T>>,
    ids: &[usize],
    config: &TrainConfig,
    monitor: impl FnMut(usize, T, &ToyLm<Tensor<T>>) -> Flow,
) -> Result<Vec<T>> {
    let (inputs, targets) = next_char_pairs(ids)?;
    train::train_with_monitor(
        model,
        config,
        |g, m: &ToyLm<Var>| lm_loss_with(g, &inputs, &targets, m),
        monitor,
    )
}
