//! Hierarchical reward with the gated self-distillation term.
//!
//! ```text
//! r_task    = format + iou_binary + l1_binary
//! r_distill = s_sim * s_concise
//! r_train   = r_task + r_distill * [iou > gate_threshold]
//! s_concise = max(0, 1 - len(concise) / len(detailed))
//! ```
//!
//! `s_sim` is the cosine similarity of the two rationales' embeddings.
//! Failures inside a component zero that component and leave a diagnostic;
//! scoring a response never fails.

mod embed;
mod tokenize;

pub use embed::{
    EmbedError, EmbedderId, EmbeddingProvider, FallbackEmbedder, HashedBowEmbedder, HttpEmbedder,
};
pub use tokenize::{count_tokens, PatternTokenizer, Tokenizer, TokenizerId, WhitespacePunct};

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    box_iou, prompt_l1, GeometricAnswer, GeometryError, ImageSize, L1Aggregation, L1Options,
    PointPairing,
};
use crate::parser::{SectionOrder, StructuredResponse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("undefined denominator: detailed rationale has no tokens")]
    UndefinedDenominator,
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Which parts of the distillation term are live. Switching one off
/// reproduces the matching ablation: the gate is treated as always open and
/// a disabled score is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardComponents {
    /// Master switch for the whole distillation term.
    pub distill: bool,
    pub gate: bool,
    pub sim: bool,
    pub concise: bool,
}

impl Default for RewardComponents {
    fn default() -> Self {
        RewardComponents {
            distill: true,
            gate: true,
            sim: true,
            concise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointPairingRule {
    /// Each unmatched point costs the image diagonal per coordinate.
    #[default]
    ImageDiagonal,
    /// Each unmatched point costs `point_penalty_px` per coordinate.
    Fixed,
    /// Mismatched counts zero the L1 component.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L1Config {
    pub aggregation: L1Aggregation,
    pub include_points: bool,
    pub point_pairing: PointPairingRule,
    pub point_penalty_px: f64,
}

impl Default for L1Config {
    fn default() -> Self {
        L1Config {
            aggregation: L1Aggregation::Mean,
            include_points: true,
            point_pairing: PointPairingRule::ImageDiagonal,
            point_penalty_px: 100.0,
        }
    }
}

impl L1Config {
    fn options(&self, image: Option<ImageSize>) -> L1Options {
        let pairing = match (self.point_pairing, image) {
            (PointPairingRule::ImageDiagonal, Some(img)) => PointPairing::Penalize(img.diagonal()),
            (PointPairingRule::ImageDiagonal, None) | (PointPairingRule::Strict, _) => {
                PointPairing::Strict
            }
            (PointPairingRule::Fixed, _) => PointPairing::Penalize(self.point_penalty_px),
        };
        L1Options {
            aggregation: self.aggregation,
            include_points: self.include_points,
            pairing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbedderId,
    pub dim: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub timeout_ms: u64,
    /// Fall back to the hashed bag-of-words embedder when the external
    /// provider fails.
    pub fallback: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbedderId::HashedBow,
            dim: 256,
            seed: 0,
            url: None,
            timeout_ms: 10_000,
            fallback: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn hashed_bow(&self) -> HashedBowEmbedder {
        HashedBowEmbedder::new(self.dim, self.seed)
    }

    /// Builds the configured provider. With `fallback` set, an external
    /// provider is wrapped so that failures are served by the built-in one.
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, RewardError> {
        if self.dim == 0 {
            return Err(RewardError::InvalidConfig("embedding.dim must be positive".into()));
        }
        match self.kind {
            EmbedderId::HashedBow => Ok(Arc::new(self.hashed_bow())),
            EmbedderId::External => {
                let url = self.url.clone().ok_or_else(|| {
                    RewardError::InvalidConfig("external embedder needs embedding.url".into())
                })?;
                let http = HttpEmbedder::new(url, Duration::from_millis(self.timeout_ms));
                if self.fallback {
                    Ok(Arc::new(FallbackEmbedder::new(Box::new(http), self.hashed_bow())))
                } else {
                    Ok(Arc::new(http))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub iou_binary_threshold: f64,
    pub l1_binary_threshold: f64,
    /// The distillation term is added only when IoU is strictly above this.
    pub gate_threshold: f64,
    pub stray_text_voids_format: bool,
    pub tokenizer: TokenizerId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_pattern: Option<String>,
    pub l1: L1Config,
    pub components: RewardComponents,
    pub embedding: EmbeddingConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            iou_binary_threshold: 0.5,
            l1_binary_threshold: 10.0,
            gate_threshold: 0.5,
            stray_text_voids_format: false,
            tokenizer: TokenizerId::WhitespacePunct,
            token_pattern: None,
            l1: L1Config::default(),
            components: RewardComponents::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(RewardError::InvalidConfig(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("iou_binary_threshold", self.iou_binary_threshold)?;
        unit("gate_threshold", self.gate_threshold)?;
        if !(self.l1_binary_threshold.is_finite() && self.l1_binary_threshold >= 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "l1_binary_threshold must be a non-negative number, got {}",
                self.l1_binary_threshold
            )));
        }
        if !(self.l1.point_penalty_px.is_finite() && self.l1.point_penalty_px >= 0.0) {
            return Err(RewardError::InvalidConfig(
                "l1.point_penalty_px must be a non-negative number".into(),
            ));
        }
        if self.tokenizer == TokenizerId::Custom && self.token_pattern.is_none() {
            return Err(RewardError::InvalidConfig(
                "custom tokenizer needs token_pattern".into(),
            ));
        }
        if self.embedding.dim == 0 {
            return Err(RewardError::InvalidConfig("embedding.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn build_tokenizer(&self) -> Result<Arc<dyn Tokenizer>, RewardError> {
        match (self.tokenizer, &self.token_pattern) {
            (TokenizerId::WhitespacePunct, _) => Ok(Arc::new(WhitespacePunct)),
            (TokenizerId::Custom, Some(p)) => Ok(Arc::new(PatternTokenizer::new(p)?)),
            (TokenizerId::Custom, None) => Err(RewardError::InvalidConfig(
                "custom tokenizer needs token_pattern".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReward {
    pub iou_value: f64,
    pub iou_binary: u8,
    pub l1_value: f64,
    pub l1_binary: u8,
}

/// Every reward component for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub iou_value: f64,
    pub iou_binary: u8,
    /// Absent when no answer could be scored.
    pub l1_value: Option<f64>,
    pub l1_binary: u8,
    pub s_sim: f64,
    pub s_concise: f64,
    pub r_distill: f64,
    /// Whether the distillation term was added.
    pub gate: bool,
    pub r_task: f64,
    pub r_train: f64,
    pub len_concise: usize,
    pub len_detailed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// 1 when every required section is present, the answer payload decoded,
/// and (if configured) there is no text outside the tags.
pub fn format_reward(resp: &StructuredResponse, required: &SectionOrder, cfg: &RewardConfig) -> u8 {
    let sections = required.kinds().iter().all(|&k| resp.has(k));
    let payload = resp.answer.is_some();
    let stray = cfg.stray_text_voids_format && resp.has_diagnostic("stray-text");
    (sections && payload && !stray) as u8
}

pub fn accuracy_reward(
    pred: &GeometricAnswer,
    gt: &GeometricAnswer,
    image: Option<ImageSize>,
    cfg: &RewardConfig,
) -> Result<AccuracyReward, RewardError> {
    let iou_value = box_iou(&pred.bbox, &gt.bbox)?;
    let l1_value = prompt_l1(pred, gt, &cfg.l1.options(image))?;
    Ok(AccuracyReward {
        iou_value,
        iou_binary: (iou_value >= cfg.iou_binary_threshold) as u8,
        l1_value,
        l1_binary: (l1_value <= cfg.l1_binary_threshold) as u8,
    })
}

/// Fractional length reduction of the concise rationale, clamped at zero.
pub fn conciseness_score(len_concise: usize, len_detailed: usize) -> Result<f64, RewardError> {
    if len_detailed == 0 {
        return Err(RewardError::UndefinedDenominator);
    }
    Ok((1.0 - len_concise as f64 / len_detailed as f64).max(0.0))
}

/// Cosine similarity of the provider's embeddings of the two texts.
pub fn similarity_score(
    concise: &str,
    detailed: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, RewardError> {
    if concise.trim().is_empty() || detailed.trim().is_empty() {
        return Err(RewardError::DegenerateEmbedding("empty text".into()));
    }
    let vecs = provider.embed_batch(&[concise, detailed])?;
    let [a, b] = vecs.as_slice() else {
        return Err(RewardError::DegenerateEmbedding(format!(
            "expected 2 vectors, got {}",
            vecs.len()
        )));
    };
    if a.len() != b.len() {
        return Err(RewardError::DegenerateEmbedding("vector dimensions differ".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(RewardError::DegenerateEmbedding("zero-norm embedding".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Reward configuration bound to a tokenizer and an embedding provider.
#[derive(Clone)]
pub struct RewardEngine {
    cfg: RewardConfig,
    tokenizer: Arc<dyn Tokenizer>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl RewardEngine {
    pub fn new(cfg: RewardConfig, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, RewardError> {
        cfg.validate()?;
        let tokenizer = cfg.build_tokenizer()?;
        Ok(RewardEngine {
            cfg,
            tokenizer,
            provider,
        })
    }

    /// Engine using the embedder described by `cfg.embedding`.
    pub fn from_config(cfg: RewardConfig) -> Result<Self, RewardError> {
        let provider = cfg.embedding.build()?;
        Self::new(cfg, provider)
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.count(text)
    }

    pub fn format_reward(&self, resp: &StructuredResponse, required: &SectionOrder) -> u8 {
        format_reward(resp, required, &self.cfg)
    }

    pub fn total_reward(
        &self,
        resp: &StructuredResponse,
        gt: &GeometricAnswer,
        image: Option<ImageSize>,
        required: &SectionOrder,
    ) -> RewardBreakdown {
        let cfg = &self.cfg;
        let mut diagnostics: Vec<String> = resp.diagnostics.iter().map(|d| d.to_string()).collect();

        let format = self.format_reward(resp, required);
        let accuracy = resp.answer.as_ref().and_then(|pred| {
            accuracy_reward(pred, gt, image, cfg)
                .map_err(|e| diagnostics.push(format!("accuracy: {e}")))
                .ok()
        });
        let (iou_value, iou_binary, l1_value, l1_binary) = match accuracy {
            Some(a) => (a.iou_value, a.iou_binary, Some(a.l1_value), a.l1_binary),
            None => (0.0, 0, None, 0),
        };
        let r_task = (format + iou_binary + l1_binary) as f64;

        let len_concise = resp.concise.as_deref().map_or(0, |t| self.count_tokens(t));
        let len_detailed = resp.detailed.as_deref().map_or(0, |t| self.count_tokens(t));

        let mut s_sim = 0.0;
        let mut s_concise = 0.0;
        let mut r_distill = 0.0;
        let mut gate = false;
        let comps = cfg.components;
        if comps.distill {
            if let (Some(c), Some(d)) = (resp.concise.as_deref(), resp.detailed.as_deref()) {
                s_concise = if comps.concise {
                    conciseness_score(len_concise, len_detailed).unwrap_or_else(|e| {
                        diagnostics.push(format!("s_concise: {e}"));
                        0.0
                    })
                } else {
                    1.0
                };
                s_sim = if comps.sim {
                    similarity_score(c, d, self.provider.as_ref()).unwrap_or_else(|e| {
                        diagnostics.push(format!("s_sim: {e}"));
                        0.0
                    })
                } else {
                    1.0
                };
                r_distill = s_sim * s_concise;
                gate = !comps.gate || iou_value > cfg.gate_threshold;
            }
        }
        let r_train = if gate { r_task + r_distill } else { r_task };

        RewardBreakdown {
            format,
            iou_value,
            iou_binary,
            l1_value,
            l1_binary,
            s_sim,
            s_concise,
            r_distill,
            gate,
            r_task,
            r_train,
            len_concise,
            len_detailed,
            diagnostics,
        }
    }
}
