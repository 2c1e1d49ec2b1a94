//! Text primitives shared by retrieval and the overlap graph: tokenization,
//! word n-grams, Jaccard overlap, and the signed feature-hashing embedder.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Word n-gram order used for every sparse overlap and hashed embedding.
pub const NGRAM: usize = 3;

/// Default embedding dimension.
pub const EMBED_DIM: usize = 256;

/// Lowercased words: maximal runs of alphanumerics and underscores.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word n-grams joined by a single space. Texts shorter than `n` words
/// contribute their whole word sequence as one gram, so any non-empty text
/// has at least one gram.
pub fn word_ngrams(text: &str, n: usize) -> BTreeSet<String> {
    let toks = words(text);
    if toks.is_empty() {
        return BTreeSet::new();
    }
    if toks.len() < n {
        return BTreeSet::from([toks.join(" ")]);
    }
    toks.windows(n).map(|w| w.join(" ")).collect()
}

pub fn trigrams(text: &str) -> BTreeSet<String> {
    word_ngrams(text, NGRAM)
}

/// |a ∩ b| / |a ∪ b|; two empty sets have overlap zero.
pub fn jaccard<T: Scalar>(a: &BTreeSet<String>, b: &BTreeSet<String>) -> T {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    T::ratio(inter, union)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic local embedding: each word 3-gram hashes to a bucket with a
/// sign taken from the top hash bit; the result is L2-normalized. Empty text
/// embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: EMBED_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed<T: Scalar>(&self, text: &str) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        for gram in trigrams(text) {
            let h = fnv1a64(gram.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            if h >> 63 == 1 {
                v[idx] = v[idx] - T::one();
            } else {
                v[idx] = v[idx] + T::one();
            }
        }
        let norm = v.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt();
        if norm > T::zero() {
            for x in &mut v {
                *x = *x / norm;
            }
        }
        v
    }
}

/// Cosine similarity; zero whenever either side is the zero vector.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    if a.len() != b.len() {
        return T::zero();
    }
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (x, y) in a.iter().zip(b) {
        dot = dot + *x * *y;
        na = na + *x * *x;
        nb = nb + *y * *y;
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    c.max(-T::one()).min(T::one())
}

/// Truncates to at most `max` bytes on a char boundary.
pub fn clip(text: &str, max: usize) -> &str {
    if text.len() <= max {
        return text;
    }
    let mut end = max;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

/// Short hex content digest used for dedup keys and ledger scope digests.
pub fn digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    hex::encode(&d[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collapses all whitespace runs to single spaces and trims.
pub fn squash(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
