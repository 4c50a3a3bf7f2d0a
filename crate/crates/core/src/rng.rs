//! Deterministic random streams. Every stochastic operation takes one of these
//! explicitly; nothing draws from thread-local state.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::Result;

pub type Rng = rand_chacha::ChaCha8Rng;

/// A generator for `seed`, on an independent `stream`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits off a child generator seeded from the parent.
pub fn fork(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.random())
}

/// A child seed for `stream` of `seed`, for components that seed themselves.
pub fn derive_seed(seed: u64, stream_id: u64) -> u64 {
    stream(seed, stream_id).random()
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Standard normal draws shaped like `shape`, materialised in `dtype`.
pub fn normal_tensor<S: Into<Shape>>(rng: &mut Rng, shape: S, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let data = normal_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Uniform `[-bound, bound]` draws, used for layer initialisation.
pub fn uniform_tensor<S: Into<Shape>>(rng: &mut Rng, shape: S, bound: f64) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count())
        .map(|_| rng.random_range(-bound..=bound) as f32)
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// A uniformly chosen cyclic permutation of `0..n` (Sattolo). For `n >= 2` no
/// index maps to itself.
pub fn cyclic_shuffle(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}
