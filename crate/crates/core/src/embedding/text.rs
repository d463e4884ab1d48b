use sha2::{Digest, Sha256};

use super::{EmbeddingStore, norm};
use crate::error::{Error, Result};

/// Embeds free text (KC names and descriptions) for clustering.
pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Remote stores embed text under a content-derived id so repeats are cached.
impl TextEmbedder for EmbeddingStore {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let id = format!("text:{}", hex::encode(Sha256::digest(text.as_bytes())));
        Ok(self.get_or_embed(&id, text)?.vector)
    }
}

/// Offline embedder: hashed word unigrams and character trigrams, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dimension: 256 }
    }
}

impl HashingEmbedder {
    fn bucket(&self, feature: &str) -> (usize, f64) {
        let h = Sha256::digest(feature.as_bytes());
        let raw = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((raw % self.dimension as u64) as usize, sign)
    }
}

impl TextEmbedder for HashingEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let mut v = vec![0.0; self.dimension];
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let (i, s) = self.bucket(&format!("w:{word}"));
            v[i] += 2.0 * s;
            let chars: Vec<char> = format!("^{word}$").chars().collect();
            for tri in chars.windows(3) {
                let (i, s) = self.bucket(&format!("c:{}", tri.iter().collect::<String>()));
                v[i] += s;
            }
        }
        let n = norm(&v);
        if n == 0.0 {
            return Err(Error::Geometry(format!("cannot embed text without words: {text:?}")));
        }
        Ok(v.into_iter().map(|x| x / n).collect())
    }
}
