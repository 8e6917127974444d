//! Deterministic text-to-tensor encoding for the toy base model.
//!
//! Every whitespace token maps to a fixed pseudo-random vector derived from
//! a stable hash of its bytes, so the same prompt always produces the same
//! input tensor regardless of process, platform, or insertion order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

/// Stable 64-bit FNV-1a. `DefaultHasher` is not guaranteed stable across
/// releases, and encodings end up in persisted artifacts.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fixed unit-scale vector for one token.
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(token.as_bytes()));
    Tensor::randn(&[dim], 1.0, &mut rng).data().to_vec()
}

/// Encodes a prompt as an `l x dim` tensor: first `seq_len` tokens, padded
/// with zero vectors when the prompt is shorter.
pub fn encode_text(text: &str, seq_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * dim];
    for (i, token) in text.split_whitespace().take(seq_len).enumerate() {
        data[i * dim..(i + 1) * dim].copy_from_slice(&token_vector(token, dim));
    }
    Tensor::from_vec(vec![seq_len, dim], data).expect("finite token vectors")
}

/// Encodes a batch of prompts as a `b x l x dim` tensor.
pub fn encode_batch<S: AsRef<str>>(texts: &[S], seq_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; texts.len() * seq_len * dim];
    for (i, text) in texts.iter().enumerate() {
        let one = encode_text(text.as_ref(), seq_len, dim);
        data[i * seq_len * dim..(i + 1) * seq_len * dim].copy_from_slice(one.data());
    }
    Tensor::from_vec(vec![texts.len(), seq_len, dim], data).expect("finite token vectors")
}
