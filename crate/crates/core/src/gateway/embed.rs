use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::{normalize_in_place, Scalar};

use super::{digest, Embedder};

pub const FALLBACK_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingVector<T: Scalar> {
    pub values: Vec<T>,
    pub dim: usize,
    pub source_text_hash: String,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Unit-normalized vector for `text`. Zero vectors stay zero.
    pub fn normalized(mut values: Vec<T>, text: &str) -> Self {
        normalize_in_place(&mut values);
        EmbeddingVector {
            dim: values.len(),
            values,
            source_text_hash: digest(text),
        }
    }
}

impl<T: Scalar> AsRef<[T]> for EmbeddingVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

/// Deterministic offline embedder: feature-hashed token counts.
///
/// Text is split into maximal runs of ASCII alphanumerics and lower-cased.
/// Each token is folded through a small concept lexicon (so that `permit`
/// and `allow`, or `declines` and `refuses`, land on the same feature),
/// hashed with 64-bit FNV-1a, and counted in bucket `hash % dim`.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagEmbedder {
    pub dim: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder { dim: FALLBACK_DIM }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

pub(crate) fn concept(token: &str) -> &str {
    match token {
        "allow" | "allows" | "allowed" | "allowing" | "permit" | "permits" | "permitted"
        | "grant" | "grants" | "granted" | "approve" | "approved" => "allow",
        "reject" | "rejects" | "rejected" | "deny" | "denies" | "denied" | "refuse"
        | "refuses" | "refused" | "refusal" | "decline" | "declines" | "declined" => "reject",
        "sorry" | "apology" | "apologies" | "apologize" | "apologise" | "apologetic"
        | "apologetically" | "unfortunately" => "sorry",
        "cannot" | "unable" => "cannot",
        "users" => "user",
        "lists" => "list",
        "requests" => "request",
        other => other,
    }
}

impl HashedBagEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokens(text) {
            let c = concept(&tok);
            v[(fnv1a(c.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        normalize_in_place(&mut v);
        v
    }
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
