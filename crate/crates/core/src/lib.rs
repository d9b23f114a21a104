//! Self attention expressed through convolutions, self attentive
//! convolutions (SAC), multiscale SAC (MSAC), and reverse-mode gradients for
//! all of them.
//!
//! Everything is generic over the element type ([`Scalar`]); the aliases at
//! the bottom of this file fix it to `f64` or `f32`.

pub mod apps;
pub mod attention;
pub mod autodiff;
pub mod backend;
pub mod conv;
mod error;
pub mod init;
pub mod io;
pub mod ops;
pub mod params;
pub mod sac;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{concat, rel_err, split, Tensor};

pub use attention::{AttentionParams, HeadShape, MultiHeadParams};
pub use autodiff::{GradReport, Graph, Var};
pub use backend::{Backend, Eager};
pub use params::{ParamKey, ParamTree};
pub use sac::{MSACParams, MsacConfig, ParallelConv, SACParams};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type AttentionParams64 = AttentionParams<Tensor64>;
pub type MultiHeadParams64 = MultiHeadParams<Tensor64>;
pub type SACParams64 = SACParams<Tensor64>;
pub type MSACParams64 = MSACParams<Tensor64>;
pub type MSACParams32 = MSACParams<Tensor32>;
pub type ToyLm64 = apps::lm::ToyLm<Tensor64>;
pub type SimilarityModel64 = apps::similarity::SimilarityModel<Tensor64>;
