//! Deterministic feature-hash text embeddings.

use crate::corpus::Item;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbedding {
    pub item_id: String,
    pub vector: Vec<f64>,
}

/// Anything that turns item text into a fixed-width vector.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing over lower-cased words and character 3-grams of
/// each word (padded with `#`), L2-normalized.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dim must be >= 2, got {dim}")));
        }
        Ok(Self { dim, seed })
    }

    fn features(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let w = word.to_lowercase();
            out.push(format!("w:{w}"));
            let padded: Vec<char> = format!("#{w}#").chars().collect();
            for g in padded.windows(3) {
                out.push(format!("c:{}", g.iter().collect::<String>()));
            }
        }
        out
    }
}

/// FNV-1a, seeded by folding the seed into the offset basis.
fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for f in Self::features(text) {
            let h = fnv1a(f.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Embeds every item's title and category path. Items without any text get the
/// zero vector and a logged warning.
pub fn embed_items(items: &[Item], embedder: &dyn TextEmbedder) -> Vec<ItemEmbedding> {
    items
        .iter()
        .map(|it| {
            let vector = embedder.embed(&it.text());
            if vector.iter().all(|&x| x == 0.0) {
                log::warn!("item {} has no text features; using the zero vector", it.item_id);
            }
            ItemEmbedding {
                item_id: it.item_id.clone(),
                vector,
            }
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
