//! Applications assembled from MSAC: a character-level toy language model
//! and a cross-attentive image-pair similarity model.

pub mod lm;
pub mod similarity;
pub mod train;
