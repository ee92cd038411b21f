//! Helpers shared by the integration tests.

#![allow(dead_code)]

use epicode_core::checkpoint::{Tensor, TensorMap};
use epicode_core::decode::{LogitProvider, LogitVector, TokenId};
use epicode_core::rng;
use epicode_core::Result;
use rand::Rng;

/// Logits that are a fixed pseudo-random function of the prefix: N(0, scale^2)
/// per entry from a stream keyed by a hash of the prefix.
#[derive(Debug, Clone)]
pub struct RandomProvider {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f64,
}

fn fnv(tokens: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl LogitProvider for RandomProvider {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let mut r = rng::stream(self.seed, fnv(prefix));
        let mut buf = vec![0.0; self.vocab];
        rng::fill_normal(&mut r, self.scale, &mut buf);
        LogitVector::new(buf.into_iter().map(|x| x as f32).collect())
    }
}

/// A random prompt of 1..=4 tokens below `vocab`.
pub fn random_prompt(seed: u64, vocab: usize) -> Vec<TokenId> {
    let mut r = rng::stream(seed, u64::MAX);
    let n = r.random_range(1..=4);
    (0..n).map(|_| r.random_range(0..vocab as TokenId)).collect()
}

/// A map of 1..=4 tensors of rank 1..=3 with N(0, 1) entries.
pub fn random_map(seed: u64) -> TensorMap {
    let mut r = rng::stream(seed, 0);
    let n = r.random_range(1..=4);
    let mut m = TensorMap::new();
    for i in 0..n {
        let rank = r.random_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=5)).collect();
        let mut buf = vec![0.0; shape.iter().product()];
        rng::fill_normal(&mut r, 1.0, &mut buf);
        let data = buf.into_iter().map(|x| x as f32).collect();
        m.insert(format!("layer{i}.w"), Tensor::new(shape, data).unwrap()).unwrap();
    }
    m
}

/// A map with the structure of `like` and fresh N(0, 1) entries.
pub fn random_like(like: &TensorMap, seed: u64) -> TensorMap {
    let mut r = rng::stream(seed, 1);
    like.iter()
        .map(|(name, t)| {
            let mut buf = vec![0.0; t.numel()];
            rng::fill_normal(&mut r, 1.0, &mut buf);
            let data = buf.into_iter().map(|x| x as f32).collect();
            (name.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect()
}

/// `||a - b|| / ||b||` over all entries, in f64.
pub fn rel_error(a: &TensorMap, b: &TensorMap) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            num += (f64::from(x) - f64::from(y)).powi(2);
            den += f64::from(y).powi(2);
        }
    }
    (num / den).sqrt()
}
