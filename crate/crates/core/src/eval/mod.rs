//! Benchmark metrics over prediction records: cIoU, gIoU, rationale token
//! statistics and baseline comparisons.
//!
//! gIoU is the mean of per-record IoU. cIoU is the ratio of summed
//! intersection pixels to summed union pixels over a split.

mod report;

pub use report::{emit_report, write_comparison, ReportMeta};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mask_iou, rasterize_box, BoundingBox, GeometricAnswer, ImageSize, Mask, MaskIou};
use crate::parser::{detect_order, parse, SectionOrder};
use crate::prompt::with_brevity;
use crate::reward::{RewardBreakdown, RewardEngine};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("split {0:?} has no records")]
    EmptySplit(String),
    #[error("candidate has zero mean tokens; reduction factor undefined")]
    UndefinedFactor,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub width: u32,
    pub height: u32,
}

/// One prediction with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub split: String,
    pub image: ImageRef,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brevity_suffix: Option<String>,
    pub generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<Mask>,
    /// Mask from an external segmenter; replaces the rasterized answer box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_mask: Option<Mask>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidRecord(m));
        if self.image.width == 0 || self.image.height == 0 {
            return bad(format!("{}: image dimensions must be positive", self.id));
        }
        if self.gt_box.is_none() && self.gt_mask.is_none() {
            return bad(format!("{}: needs gt_box or gt_mask", self.id));
        }
        if let Some(b) = &self.gt_box {
            b.validate()
                .map_err(|e| EvalError::InvalidRecord(format!("{}: gt_box: {e}", self.id)))?;
        }
        for (name, m) in [("gt_mask", &self.gt_mask), ("pred_mask", &self.pred_mask)] {
            if let Some(m) = m {
                if (m.width(), m.height()) != (self.image.width, self.image.height) {
                    return bad(format!(
                        "{}: {name} is {}x{}, image is {}x{}",
                        self.id,
                        m.width(),
                        m.height(),
                        self.image.width,
                        self.image.height
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> ImageSize {
        ImageSize {
            width: self.image.width,
            height: self.image.height,
        }
    }

    /// The instruction as sent to the model, brevity suffix included.
    pub fn prompt(&self) -> String {
        with_brevity(&self.instruction, self.brevity_suffix.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<SkippedLine>,
}

/// Reads newline-delimited records. Blank lines are ignored; lines that
/// fail to decode or validate are skipped and reported.
pub fn ingest(path: &Path) -> Result<Ingested, EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    ingest_reader(BufReader::new(file)).map_err(io)
}

pub fn ingest_reader(reader: impl BufRead) -> std::io::Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str::<EvalRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match rec {
            Ok(r) => out.records.push(r),
            Err(reason) => {
                log::warn!("line {}: skipped: {reason}", i + 1);
                out.skipped.push(SkippedLine { line: i + 1, reason });
            }
        }
    }
    Ok(out)
}

/// Per-record metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub split: String,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
    /// Rationale tokens only: concise plus detailed, answer excluded.
    pub tokens: usize,
    /// Observed section order; absent when the generation has no answer.
    pub order: Option<SectionOrder>,
    pub breakdown: RewardBreakdown,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Scores one valid record. The predicted answer box is rasterized unless
/// the record carries its own predicted mask.
pub fn score_record(rec: &EvalRecord, engine: &RewardEngine) -> Result<RecordScore, EvalError> {
    rec.validate()?;
    let geo = |e: crate::geometry::GeometryError| EvalError::InvalidRecord(format!("{}: {e}", rec.id));
    let (w, h) = (rec.image.width, rec.image.height);
    let gt_mask = match (&rec.gt_mask, &rec.gt_box) {
        (Some(m), _) => m.clone(),
        (None, Some(b)) => rasterize_box(b, w, h).map_err(geo)?,
        (None, None) => unreachable!("validated"),
    };
    let mut diagnostics = Vec::new();
    let gt_box = rec.gt_box.or_else(|| gt_mask.bounding_box()).unwrap_or_else(|| {
        diagnostics.push("empty ground truth; accuracy scored against a zero box".to_string());
        BoundingBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 }
    });
    let gt = GeometricAnswer::from_box(gt_box);

    let resp = parse(&rec.generation);
    let pred_mask = match (&rec.pred_mask, &resp.answer) {
        (Some(m), _) => Some(m.clone()),
        (None, Some(a)) => Some(rasterize_box(&a.bbox, w, h).map_err(geo)?),
        (None, None) => None,
    };
    let m = match pred_mask {
        Some(p) => mask_iou(&p, &gt_mask).map_err(geo)?,
        None => {
            diagnostics.push("no answer; IoU 0".to_string());
            MaskIou {
                iou: 0.0,
                intersection: 0,
                union: gt_mask.foreground_count(),
            }
        }
    };

    let tokens = resp.concise.as_deref().map_or(0, |t| engine.count_tokens(t))
        + resp.detailed.as_deref().map_or(0, |t| engine.count_tokens(t));
    let breakdown = engine.total_reward(&resp, &gt, Some(rec.image_size()), &SectionOrder::inference());
    Ok(RecordScore {
        id: rec.id.clone(),
        split: rec.split.clone(),
        iou: m.iou,
        intersection: m.intersection,
        union: m.union,
        tokens,
        order: detect_order(&resp),
        breakdown,
        diagnostics,
    })
}

/// Scores records in parallel; the result is ordered by record id, ties
/// kept in input order.
pub fn score_all(records: &[EvalRecord], engine: &RewardEngine) -> Result<Vec<RecordScore>, EvalError> {
    let mut scores = records
        .par_iter()
        .map(|r| score_record(r, engine))
        .collect::<Result<Vec<_>, _>>()?;
    scores.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(scores)
}

/// Left edges of the token histogram bins; the last bin is open-ended.
pub const HIST_EDGES: [u64; 31] = {
    let mut e = [0u64; 31];
    let mut i = 0;
    while i < 31 {
        e[i] = 10 * i as u64;
        i += 1;
    }
    e
};

pub fn hist_bin(tokens: usize) -> usize {
    (tokens / 10).min(HIST_EDGES.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub mean_tokens: f64,
    pub median_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub mean_tokens: f64,
    pub median_tokens: f64,
    pub intersection: u64,
    pub union: u64,
    /// Counts per bin `[10k, 10k + 10)`, the last bin open-ended.
    pub token_histogram: Vec<u64>,
    /// Keyed by order code; `none` for generations without an answer.
    pub per_order: BTreeMap<String, GroupMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn group_metrics(scores: &[&RecordScore]) -> (GroupMetrics, u64, u64) {
    let n = scores.len();
    let mut ious: Vec<f64> = scores.iter().map(|s| s.iou).collect();
    ious.sort_by(f64::total_cmp);
    let giou = ious.iter().sum::<f64>() / n as f64;
    let i: u64 = scores.iter().map(|s| s.intersection).sum();
    let u: u64 = scores.iter().map(|s| s.union).sum();
    let ciou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    let mut toks: Vec<usize> = scores.iter().map(|s| s.tokens).collect();
    toks.sort_unstable();
    let mean_tokens = toks.iter().sum::<usize>() as f64 / n as f64;
    let median_tokens = if n % 2 == 1 {
        toks[n / 2] as f64
    } else {
        (toks[n / 2 - 1] + toks[n / 2]) as f64 / 2.0
    };
    (
        GroupMetrics {
            n,
            giou,
            ciou,
            mean_tokens,
            median_tokens,
        },
        i,
        u,
    )
}

/// Aggregates the scores belonging to `split`. Independent of record order.
pub fn aggregate(scores: &[RecordScore], split: &str) -> Result<SplitMetrics, EvalError> {
    let mine: Vec<&RecordScore> = scores.iter().filter(|s| s.split == split).collect();
    if mine.is_empty() {
        return Err(EvalError::EmptySplit(split.to_string()));
    }
    let (all, i, u) = group_metrics(&mine);
    let mut diagnostics = Vec::new();
    if u == 0 {
        diagnostics.push("degenerate-split: zero total union, cIoU set to 1".to_string());
    }
    let mut hist = vec![0u64; HIST_EDGES.len()];
    for s in &mine {
        hist[hist_bin(s.tokens)] += 1;
    }
    let mut by_order: BTreeMap<String, Vec<&RecordScore>> = BTreeMap::new();
    for s in &mine {
        let key = s.order.as_ref().map_or_else(|| "none".to_string(), |o| o.code());
        by_order.entry(key).or_default().push(s);
    }
    let per_order = by_order
        .into_iter()
        .map(|(k, v)| (k, group_metrics(&v).0))
        .collect();
    Ok(SplitMetrics {
        split: split.to_string(),
        n: all.n,
        giou: all.giou,
        ciou: all.ciou,
        mean_tokens: all.mean_tokens,
        median_tokens: all.median_tokens,
        intersection: i,
        union: u,
        token_histogram: hist,
        per_order,
        diagnostics,
    })
}

/// Distinct split names in first-appearance order.
pub fn splits(scores: &[RecordScore]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in scores {
        if !out.contains(&s.split) {
            out.push(s.split.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub split: String,
    pub baseline_tokens: f64,
    pub candidate_tokens: f64,
    pub baseline_ciou: f64,
    pub candidate_ciou: f64,
    pub baseline_giou: f64,
    pub candidate_giou: f64,
    /// Baseline mean tokens over candidate mean tokens.
    pub token_reduction_factor: f64,
    /// Candidate minus baseline, as fractions.
    pub delta_ciou: f64,
    pub delta_giou: f64,
}

impl ComparisonRow {
    /// Factor to one decimal.
    pub fn factor_text(&self) -> String {
        format!("{:.1}", self.token_reduction_factor)
    }

    /// Signed change in percentage points to one decimal.
    pub fn delta_text(delta: f64) -> String {
        let pts = delta * 100.0;
        // keep "-0.0" out of reports
        let pts = if format!("{pts:.1}") == "-0.0" { 0.0 } else { pts };
        format!("{pts:+.1}")
    }

    /// The table sub-row, e.g. `4.9×↓, +3.9`.
    pub fn summary(&self) -> String {
        format!("{}×↓, {}", self.factor_text(), Self::delta_text(self.delta_ciou))
    }
}

pub fn compare(baseline: &SplitMetrics, candidate: &SplitMetrics) -> Result<ComparisonRow, EvalError> {
    if candidate.mean_tokens == 0.0 {
        return Err(EvalError::UndefinedFactor);
    }
    Ok(ComparisonRow {
        split: candidate.split.clone(),
        baseline_tokens: baseline.mean_tokens,
        candidate_tokens: candidate.mean_tokens,
        baseline_ciou: baseline.ciou,
        candidate_ciou: candidate.ciou,
        baseline_giou: baseline.giou,
        candidate_giou: candidate.giou,
        token_reduction_factor: baseline.mean_tokens / candidate.mean_tokens,
        delta_ciou: candidate.ciou - baseline.ciou,
        delta_giou: candidate.giou - baseline.giou,
    })
}
