//! Cross-attentive image similarity.
//!
//! Two N×M images are marked with learnable segment tensors, placed side by
//! side as one N×2M image and passed through an MSAC stack, so patches of
//! one image attend patches of the other. The scoring head (global average
//! pool, affine map, logistic) is a minimal choice needed to emit a number;
//! it is not part of the operator family itself.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backend::{Backend, Eager};
use crate::error::{invalid, shape_err, Error, Result};
use crate::init;
use crate::io::{read_tensor, write_tensor};
use crate::params::{ParamKey, ParamTree};
use crate::sac::{msac_with, MSACParams, MsacConfig};
use crate::{Scalar, Tensor};

use super::train::{self, Flow, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AugmentMode {
    /// `x' = x + x_seg`, `z' = z + z_seg`.
    Additive,
    /// `x' = [x, x_seg]` along channels, likewise for `z`.
    Channel { d_seg: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAugmentation<V> {
    pub mode: AugmentMode,
    pub x_seg: V,
    pub z_seg: V,
}

impl<V> ParamTree<V> for SegmentAugmentation<V> {
    type Rebind<U> = SegmentAugmentation<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> SegmentAugmentation<U> {
        SegmentAugmentation {
            mode: self.mode,
            x_seg: f(&at.role("x_seg"), &self.x_seg),
            z_seg: f(&at.role("z_seg"), &self.z_seg),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        f(&at.role("x_seg"), &self.x_seg);
        f(&at.role("z_seg"), &self.z_seg);
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        f(&at.role("x_seg"), &mut self.x_seg);
        f(&at.role("z_seg"), &mut self.z_seg);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub heads: usize,
    pub scales: Vec<[usize; 2]>,
    #[serde(default = "one")]
    pub layers: usize,
    pub parallel_conv: bool,
    pub bias: bool,
    pub augmentation: AugmentMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityModel<V> {
    pub augmentation: SegmentAugmentation<V>,
    pub stack: Vec<MSACParams<V>>,
    /// `d_o`
    pub score_w: V,
    /// `1`
    pub score_b: V,
}

impl<V> ParamTree<V> for SimilarityModel<V> {
    type Rebind<U> = SimilarityModel<U>;

    fn map_keyed<U>(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V) -> U) -> SimilarityModel<U> {
        SimilarityModel {
            augmentation: self.augmentation.map_keyed(at, f),
            stack: self.stack.map_keyed(at, f),
            score_w: f(&at.role("score_w"), &self.score_w),
            score_b: f(&at.role("score_b"), &self.score_b),
        }
    }

    fn visit_keyed(&self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &V)) {
        self.augmentation.visit_keyed(at, f);
        self.stack.visit_keyed(at, f);
        f(&at.role("score_w"), &self.score_w);
        f(&at.role("score_b"), &self.score_b);
    }

    fn visit_keyed_mut(&mut self, at: &ParamKey, f: &mut dyn FnMut(&ParamKey, &mut V)) {
        self.augmentation.visit_keyed_mut(at, f);
        self.stack.visit_keyed_mut(at, f);
        f(&at.role("score_w"), &mut self.score_w);
        f(&at.role("score_b"), &mut self.score_b);
    }
}

impl SimilarityConfig {
    fn input_channels(&self) -> usize {
        match self.augmentation {
            AugmentMode::Additive => self.d,
            AugmentMode::Channel { d_seg } => self.d + d_seg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.layers == 0 {
            return invalid("SimilarityConfig", "rows, cols and layers must be positive");
        }
        if let AugmentMode::Channel { d_seg: 0 } = self.augmentation {
            return invalid("SimilarityConfig", "channel augmentation needs d_seg ≥ 1");
        }
        Ok(())
    }
}

impl<T: Scalar> SimilarityModel<Tensor<T>> {
    pub fn init(cfg: &SimilarityConfig) -> Result<Self> {
        Self::init_with(cfg, &mut init::rng(cfg.seed))
    }

    /// Segment tensors start at zero (additive) or as the constant markers
    /// 0 / 1 (channel); the score head starts at zero, so an untrained model
    /// scores every pair 0.5.
    pub fn init_with(cfg: &SimilarityConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (r, c) = (cfg.rows, cfg.cols);
        let augmentation = match cfg.augmentation {
            AugmentMode::Additive => SegmentAugmentation {
                mode: cfg.augmentation,
                x_seg: Tensor::zeros(&[r, c, cfg.d])?,
                z_seg: Tensor::zeros(&[r, c, cfg.d])?,
            },
            AugmentMode::Channel { d_seg } => SegmentAugmentation {
                mode: cfg.augmentation,
                x_seg: Tensor::zeros(&[r, c, d_seg])?,
                z_seg: Tensor::ones(&[r, c, d_seg])?,
            },
        };
        let stack = (0..cfg.layers)
            .map(|l| {
                MsacConfig {
                    d: if l == 0 { cfg.input_channels() } else { cfg.d_o },
                    d_a: cfg.d_a,
                    d_o: cfg.d_o,
                    heads: cfg.heads,
                    scales: cfg.scales.clone(),
                    parallel_conv: cfg.parallel_conv,
                    bias: cfg.bias,
                    seed: cfg.seed,
                }
                .init_with(rng, (r, 2 * c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            augmentation,
            stack,
            score_w: Tensor::zeros(&[cfg.d_o])?,
            score_b: Tensor::zeros(&[1])?,
        })
    }
}

/// `t = [x, z]`: `x` fills columns `0..M`, `z` columns `M..2M`.
pub fn concat_images_with<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, z: &B::Value) -> Result<B::Value> {
    let (sx, sz) = (b.shape(x), b.shape(z));
    if sx != sz || sx.len() != 3 {
        return shape_err("concat_images", format!("{sx:?} vs {sz:?}"));
    }
    b.concat(&[x.clone(), z.clone()], 1)
}

pub fn concat_images<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    concat_images_with(&mut Eager, x, z)
}

pub fn apply_segment_augmentation_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    z: &B::Value,
    aug: &SegmentAugmentation<B::Value>,
) -> Result<(B::Value, B::Value)> {
    let (sx, sz) = (b.shape(x), b.shape(z));
    if sx != sz || sx.len() != 3 {
        return shape_err("apply_segment_augmentation", format!("{sx:?} vs {sz:?}"));
    }
    let (xs, zs) = (b.shape(&aug.x_seg), b.shape(&aug.z_seg));
    match aug.mode {
        AugmentMode::Additive => {
            if xs != sx || zs != sx {
                return shape_err(
                    "apply_segment_augmentation",
                    format!("additive segments {xs:?}/{zs:?} must match image {sx:?}"),
                );
            }
            Ok((b.add(x, &aug.x_seg)?, b.add(z, &aug.z_seg)?))
        }
        AugmentMode::Channel { d_seg } => {
            let want = [sx[0], sx[1], d_seg];
            if xs != want || zs != want {
                return shape_err(
                    "apply_segment_augmentation",
                    format!("channel segments {xs:?}/{zs:?} must be {want:?}"),
                );
            }
            Ok((
                b.concat(&[x.clone(), aug.x_seg.clone()], 2)?,
                b.concat(&[z.clone(), aug.z_seg.clone()], 2)?,
            ))
        }
    }
}

pub fn apply_segment_augmentation<T: Scalar>(
    x: &Tensor<T>,
    z: &Tensor<T>,
    aug: &SegmentAugmentation<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    apply_segment_augmentation_with(&mut Eager, x, z, aug)
}

/// The N×2M input the MSAC stack sees.
pub fn model_input<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>, model: &SimilarityModel<Tensor<T>>) -> Result<Tensor<T>> {
    let (xa, za) = apply_segment_augmentation(x, z, &model.augmentation)?;
    concat_images(&xa, &za)
}

/// Pre-logistic similarity score, shape `[1]`.
pub fn similarity_logit_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Value,
    z: &B::Value,
    model: &SimilarityModel<B::Value>,
) -> Result<B::Value> {
    let (xa, za) = apply_segment_augmentation_with(b, x, z, &model.augmentation)?;
    let mut h = concat_images_with(b, &xa, &za)?;
    for block in &model.stack {
        h = msac_with(b, &h, block)?;
    }
    let pooled = b.mean_leading(&h, 2)?;
    let width = b.shape(&pooled)[0];
    if b.shape(&model.score_w) != [width] {
        return shape_err("similarity_score", format!("score head expects {width} features"));
    }
    let col = b.reshape(&pooled, &[width, 1])?;
    let row = b.reshape(&model.score_w, &[1, width])?;
    let dot = b.matmul(&row, &col)?;
    let dot = b.reshape(&dot, &[1])?;
    b.add(&dot, &model.score_b)
}

/// Probability in (0, 1) that `x` and `z` form a "same" pair.
pub fn similarity_score<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>, model: &SimilarityModel<Tensor<T>>) -> Result<T> {
    let logit = similarity_logit_with(&mut Eager, x, z, model)?;
    let p = crate::ops::sigmoid(logit.data()[0]);
    if !p.is_finite() {
        return Err(Error::NonFinite("similarity_score".into()));
    }
    Ok(p)
}

/// Labelled image pairs; label 1 marks a "same" pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDataset<T> {
    pub pairs: Vec<(Tensor<T>, Tensor<T>)>,
    pub labels: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    x: String,
    z: String,
    label: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    pairs: Vec<IndexEntry>,
}

impl<T: Scalar> SimilarityDataset<T> {
    /// Alternating same/different pairs. A same pair is two noisy copies of
    /// one random base image; a different pair uses two independent bases.
    pub fn synthetic(count: usize, rows: usize, cols: usize, d: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = init::rng(seed);
        let mut pairs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let same = i % 2 == 0;
            let base_x: Tensor<T> = init::uniform(&mut rng, &[rows, cols, d], -1.0, 1.0)?;
            let base_z = if same {
                base_x.clone()
            } else {
                init::uniform(&mut rng, &[rows, cols, d], -1.0, 1.0)?
            };
            let x = base_x.add(&init::normal(&mut rng, &[rows, cols, d], noise)?)?;
            let z = base_z.add(&init::normal(&mut rng, &[rows, cols, d], noise)?)?;
            pairs.push((x, z));
            labels.push(if same { T::one() } else { T::zero() });
        }
        Ok(Self { pairs, labels })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `pairNNN_x.mst` / `pairNNN_z.mst` and `index.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = DatasetIndex { pairs: Vec::new() };
        for (i, ((x, z), label)) in self.pairs.iter().zip(&self.labels).enumerate() {
            let (fx, fz) = (format!("pair{i:03}_x.mst"), format!("pair{i:03}_z.mst"));
            write_tensor(dir.join(&fx), x)?;
            write_tensor(dir.join(&fz), z)?;
            index.pairs.push(IndexEntry {
                x: fx,
                z: fz,
                label: label.as_f64(),
            });
        }
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for e in index.pairs {
            pairs.push((read_tensor(dir.join(&e.x))?, read_tensor(dir.join(&e.z))?));
            labels.push(T::of(e.label));
        }
        Ok(Self { pairs, labels })
    }
}

/// Mean binary cross-entropy of the model over a dataset.
pub fn dataset_loss_with<T: Scalar, B: Backend<T>>(
    b: &mut B,
    data: &[(B::Value, B::Value)],
    labels: &[T],
    model: &SimilarityModel<B::Value>,
) -> Result<B::Value> {
    let logits = data
        .iter()
        .map(|(x, z)| similarity_logit_with(b, x, z, model))
        .collect::<Result<Vec<_>>>()?;
    let all = b.concat(&logits, 0)?;
    b.bce_with_logits(&all, labels)
}

/// Fraction of pairs classified correctly at threshold 0.5.
pub fn accuracy<T: Scalar>(data: &SimilarityDataset<T>, model: &SimilarityModel<Tensor<T>>) -> Result<f64> {
    let half = T::of(0.5);
    let mut correct = 0;
    for ((x, z), &label) in data.pairs.iter().zip(&data.labels) {
        let p = similarity_score(x, z, model)?;
        if (p > half) == (label > half) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn train_similarity<T: Scalar>(
    model: &mut SimilarityModel<Tensor<T>>,
    data: &SimilarityDataset<T>,
    config: &TrainConfig,
    monitor: impl FnMut(usize, T, &SimilarityModel<Tensor<T>>) -> Flow,
) -> Result<Vec<T>> {
    if data.is_empty() {
        return invalid("train_similarity", "empty dataset");
    }
    train::train_with_monitor(
        model,
        config,
        |g, m: &SimilarityModel<Var>| {
            let pairs: Vec<(Var, Var)> = data
                .pairs
                .iter()
                .map(|(x, z)| (g.leaf(x.clone()), g.leaf(z.clone())))
                .collect();
            dataset_loss_with(g, &pairs, &data.labels, m)
        },
        monitor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: AugmentMode) -> SimilarityConfig {
        SimilarityConfig {
            rows: 2,
            cols: 2,
            d: 2,
            d_a: 2,
            d_o: 3,
            heads: 1,
            scales: vec![[1, 1], [2, 2]],
            layers: 1,
            parallel_conv: true,
            bias: true,
            augmentation: mode,
            seed: 9,
        }
    }

    #[test]
    fn untrained_score_is_half() {
        let m = SimilarityModel::<Tensor<f64>>::init(&cfg(AugmentMode::Additive)).unwrap();
        let d = SimilarityDataset::<f64>::synthetic(2, 2, 2, 2, 0.1, 1).unwrap();
        assert_eq!(similarity_score(&d.pairs[0].0, &d.pairs[0].1, &m).unwrap(), 0.5);
    }

    #[test]
    fn concat_images_scalars() {
        let a = Tensor::<f64>::from_f64(vec![1, 1, 1], &[3.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1, 1, 1], &[4.0]).unwrap();
        assert_eq!(concat_images(&a, &b).unwrap().data(), &[3.0, 4.0]);
        let c = Tensor::<f64>::zeros(&[1, 2, 1]).unwrap();
        assert!(concat_images(&a, &c).is_err());
    }

    #[test]
    fn zero_additive_segments_are_identity() {
        let m = SimilarityModel::<Tensor<f64>>::init(&cfg(AugmentMode::Additive)).unwrap();
        let d = SimilarityDataset::<f64>::synthetic(1, 2, 2, 2, 0.1, 2).unwrap();
        let (x, z) = &d.pairs[0];
        let (xa, za) = apply_segment_augmentation(x, z, &m.augmentation).unwrap();
        assert_eq!((&xa, &za), (x, z));
    }

    #[test]
    fn channel_marker_separates_halves() {
        let m = SimilarityModel::<Tensor<f64>>::init(&cfg(AugmentMode::Channel { d_seg: 1 })).unwrap();
        let d = SimilarityDataset::<f64>::synthetic(1, 2, 2, 2, 0.1, 3).unwrap();
        let t = model_input(&d.pairs[0].0, &d.pairs[0].1, &m).unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(t.get(&[i, j, 2]), if j < 2 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn segment_shape_errors() {
        let mut m = SimilarityModel::<Tensor<f64>>::init(&cfg(AugmentMode::Additive)).unwrap();
        m.augmentation.x_seg = Tensor::zeros(&[2, 2, 1]).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        assert!(apply_segment_augmentation(&x, &x, &m.augmentation).is_err());
        let mut bad = cfg(AugmentMode::Channel { d_seg: 0 });
        assert!(SimilarityModel::<Tensor<f64>>::init(&bad).is_err());
        bad.augmentation = AugmentMode::Additive;
        bad.rows = 0;
        assert!(SimilarityModel::<Tensor<f64>>::init(&bad).is_err());
    }

    #[test]
    fn augment_mode_json() {
        let m: AugmentMode = serde_json::from_str(r#"{"mode":"channel","d_seg":2}"#).unwrap();
        assert_eq!(m, AugmentMode::Channel { d_seg: 2 });
        let a: AugmentMode = serde_json::from_str(r#"{"mode":"additive"}"#).unwrap();
        assert_eq!(a, AugmentMode::Additive);
    }
}
