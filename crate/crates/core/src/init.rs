//! Seeded parameter initialization and random tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::{Scalar, Tensor};

/// The generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Integer-valued tensor with entries in `lo..=hi`.
pub fn integers<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: i32, hi: i32) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..=hi) as f64))
}

/// Filter bank `leading × n × m × d` drawn from `U[-s, s]`, `s = (n·m·d)^(-1/2)`.
pub fn filter_bank<T: Scalar>(
    rng: &mut impl Rng,
    leading: &[usize],
    n: usize,
    m: usize,
    d: usize,
) -> Result<Tensor<T>> {
    let s = 1.0 / ((n * m * d) as f64).sqrt();
    let mut shape = leading.to_vec();
    shape.extend_from_slice(&[n, m, d]);
    uniform(rng, &shape, -s, s)
}

/// 1×1 bank with `out` filters over `chans` channels where filter `f` reads
/// channel `f`. Requires `out <= chans`.
pub fn basis_bank<T: Scalar>(out: usize, chans: usize) -> Result<Tensor<T>> {
    Tensor::from_fn(&[out, 1, 1, chans], |i| if i[0] == i[3] { T::one() } else { T::zero() })
}

/// 1×1 bank averaging `groups` consecutive blocks of `out` channels.
pub fn averaging_bank<T: Scalar>(out: usize, groups: usize) -> Result<Tensor<T>> {
    let w = T::one() / T::of(groups as f64);
    Tensor::from_fn(&[out, 1, 1, out * groups], |i| {
        if i[3] % out == i[0] {
            w
        } else {
            T::zero()
        }
    })
}
