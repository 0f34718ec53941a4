use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tokenize::{Tokenizer, WhitespacePunct};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding provider returned an invalid response: {0}")]
    Protocol(String),
}

/// Sentence embedding backend used for the similarity score.
///
/// Implementations must be deterministic for a fixed input and return
/// vectors of a constant dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        v.pop()
            .ok_or_else(|| EmbedError::Protocol("no vector returned".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderId {
    #[default]
    HashedBow,
    External,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64<'a>(bytes: impl IntoIterator<Item = &'a u8>) -> u64 {
    bytes
        .into_iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature-hashing bag of words.
///
/// Text is lowercased and split with [`WhitespacePunct`]. Each token is
/// hashed with 64-bit FNV-1a over the seed's eight little-endian bytes
/// followed by the token's UTF-8 bytes; the bucket is `hash % dim` and the
/// sign is negative when the top bit is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 256, seed: 0 }
    }
}

impl HashedBowEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn hash(&self, token: &str) -> u64 {
        fnv1a64(self.seed.to_le_bytes().iter().chain(token.as_bytes()))
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let mut v = vec![0.0; self.dim];
        for tok in WhitespacePunct.tokenize(&lower) {
            let h = self.hash(tok);
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        v
    }
}

impl EmbeddingProvider for HashedBowEmbedder {
    fn name(&self) -> &str {
        "hashed-bow"
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote provider: `POST {"texts": [...]}` answered by `{"vectors": [...]}`.
pub struct HttpEmbedder {
    url: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpEmbedder {
            url: url.into(),
            agent,
        }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        "external"
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let body: EmbedResponse = resp
            .into_json()
            .map_err(|e| EmbedError::Protocol(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        let dim = body.vectors.first().map_or(0, Vec::len);
        if dim == 0 || body.vectors.iter().any(|v| v.len() != dim) {
            return Err(EmbedError::Protocol("vectors are empty or of unequal length".into()));
        }
        if body.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(EmbedError::Protocol("non-finite vector component".into()));
        }
        Ok(body.vectors)
    }
}

/// Uses `primary` and falls back to the built-in embedder when it fails.
pub struct FallbackEmbedder {
    primary: Box<dyn EmbeddingProvider>,
    fallback: HashedBowEmbedder,
    fallbacks: AtomicUsize,
}

impl FallbackEmbedder {
    pub fn new(primary: Box<dyn EmbeddingProvider>, fallback: HashedBowEmbedder) -> Self {
        FallbackEmbedder {
            primary,
            fallback,
            fallbacks: AtomicUsize::new(0),
        }
    }

    /// Number of batches served by the fallback so far.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }
}

impl EmbeddingProvider for FallbackEmbedder {
    fn name(&self) -> &str {
        self.primary.name()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        match self.primary.embed_batch(texts) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                log::warn!("{e}; using the hashed-bow embedder instead");
                self.fallback.embed_batch(texts)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_bow_is_deterministic_and_case_insensitive() {
        let e = HashedBowEmbedder::default();
        let a = e.embed_text("Red Box left");
        assert_eq!(a, e.embed_text("red box LEFT"));
        assert_eq!(a.len(), 256);
        assert!(a.iter().map(|x| x.abs()).sum::<f64>() <= 3.0);
        assert!(e.embed_text("").iter().all(|&x| x == 0.0));
        assert_ne!(a, HashedBowEmbedder::new(256, 1).embed_text("red box left"));
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    struct Broken;

    impl EmbeddingProvider for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn embed_batch(&self, _: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Err(EmbedError::Transport("down".into()))
        }
    }

    #[test]
    fn fallback_counts_failures() {
        let f = FallbackEmbedder::new(Box::new(Broken), HashedBowEmbedder::default());
        let v = f.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(f.fallback_count(), 1);
    }
}
