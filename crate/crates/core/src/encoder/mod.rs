//! Deterministic text encoder and static embedding index.
//!
//! Tokens are hashed into a fixed vocabulary, mean-pooled from a learned
//! table, passed through a 3-layer reduction MLP and L2-normalised, so dot
//! products of embeddings are cosine similarities. Pairs are encoded as the
//! joint sequence `[CLS] query [SEP] item [SEP]`.
//!
//! ```
//! use prectr::encoder::{EncoderConfig, TextEncoder};
//!
//! let enc = TextEncoder::new(EncoderConfig { vocab_size: 64, raw_dim: 8, dim: 4, seed: 7 }).unwrap();
//! let a = enc.encode_text("Mobile Phone").unwrap();
//! let b = enc.encode_text("mobile phone").unwrap();
//! assert_eq!(a, b);
//! let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
//! assert!((norm - 1.0).abs() < 1e-9);
//! ```

mod index;
mod model;
mod train;

pub use index::{build_index, EmbeddingIndex, PAIR_SEPARATOR};
pub use model::{EncoderConfig, TextEncoder};
pub use train::{
    finetune_encoder, predict_relevance_class, pretrain_encoder, relatedness_logits,
    EncoderTrainConfig,
};

use crate::stable_hash;

/// Hashed token, in `[0, vocab_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

/// Lowercased whitespace-separated words.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn tokenize(text: &str, vocab_size: usize) -> Vec<TokenId> {
    words(text)
        .iter()
        .map(|w| TokenId((stable_hash(w) % vocab_size as u64) as u32))
        .collect()
}

#[cfg(test)]
mod tests;
